#include <cmath>
#include <random>

#include "doctest.h"
#include "presem/grid.hpp"

using namespace presem;

namespace {

Aabb unit_box() { return {{-1.0, -0.5, 0.0}, {1.0, 0.7, 1.3}}; }

// Fills every channel c of every level with a_c . x + b_c.
void fill_linear(MultiResFeatureGrid<double>& g, const Eigen::Matrix<double, Eigen::Dynamic, 3>& a,
                 const Eigen::VectorXd& b) {
  for (int l = 0; l < g.num_levels(); ++l)
    for (int c = 0; c < g.feature_dim(); ++c)
      g.fill_channel(l, c, [&](const Eigen::Vector3d& p) { return a.row(c).dot(p) + b(c); });
}

}  // namespace

TEST_SUITE("grid") {
  TEST_CASE("level dims follow ceil(extent / voxel) + 1") {
    const Aabb box{{0, 0, 0}, {4, 2, 1}};
    const LevelSpec s = make_level_spec(box, 0.03);
    CHECK(s.dims[0] == static_cast<int>(std::ceil(4.0 / 0.03)) + 1);
    CHECK(s.dims[0] >= 134);
    CHECK(s.dims[1] == static_cast<int>(std::ceil(2.0 / 0.03)) + 1);
    CHECK_FALSE(s.collapsed);
    // exact multiples do not gain a node from rounding
    CHECK(make_level_spec(box, 0.5).dims == std::array<int, 3>{9, 5, 3});
    const LevelSpec big = make_level_spec(box, 9.6);
    CHECK(big.collapsed);
    CHECK(big.dims == std::array<int, 3>{2, 2, 2});
  }

  TEST_CASE("constructor validates voxel sizes") {
    CHECK_THROWS_AS(MultiResFeatureGrid<double>(unit_box(), {0.1, 0.1}, 2), std::domain_error);
    CHECK_THROWS_AS(MultiResFeatureGrid<double>(unit_box(), {0.2, 0.1}, 2), std::domain_error);
    CHECK_THROWS_AS(MultiResFeatureGrid<double>(unit_box(), {}, 2), std::domain_error);
    CHECK_THROWS_AS(MultiResFeatureGrid<double>(unit_box(), {0.1}, 0), std::domain_error);
  }

  TEST_CASE("interpolation at nodes returns the node feature") {
    MultiResFeatureGrid<double> g(unit_box(), {0.1, 0.25}, 3);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    for (int l = 0; l < 2; ++l)
      for (Eigen::Index j = 0; j < g.level(l).features.cols(); ++j)
        for (int c = 0; c < 3; ++c) g.level(l).features(c, j) = n01(rng);
    // a point that is a node on both lattices
    const Eigen::Vector3d p = g.node_position(1, 2, 1, 3);
    const auto s = g.interpolate(p);
    CHECK_FALSE(s.clamped);
    const auto& f1 = g.level(1);
    const auto& f0 = g.level(0);
    const int idx1 = 2 + f1.spec.dims[0] * (1 + f1.spec.dims[1] * 3);
    CHECK((s.features.segment(g.concat_offset(1), 3) - f1.features.col(idx1)).norm() < 1e-12);
    CHECK(g.concat_offset(1) == 0);  // coarse first
    const Eigen::Vector3d q = g.node_position(0, 5, 4, 7);
    const int j0 = 5 + f0.spec.dims[0] * (4 + f0.spec.dims[1] * 7);
    CHECK((g.interpolate(q).features.segment(g.concat_offset(0), 3) - f0.features.col(j0)).norm() < 1e-12);
  }

  TEST_CASE("cell center interpolates to the corner mean") {
    MultiResFeatureGrid<double> g(unit_box(), {0.2}, 1);
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-1, 1);
    for (Eigen::Index j = 0; j < g.level(0).features.cols(); ++j) g.level(0).features(0, j) = u(rng);
    const auto& spec = g.level(0).spec;
    const int i = 3, j = 2, k = 4;
    double mean = 0.0;
    for (int c = 0; c < 8; ++c) {
      const int ii = i + (c & 1), jj = j + ((c >> 1) & 1), kk = k + ((c >> 2) & 1);
      mean += g.level(0).features(0, ii + spec.dims[0] * (jj + spec.dims[1] * kk)) / 8.0;
    }
    const Eigen::Vector3d center = g.node_position(0, i, j, k) + Eigen::Vector3d::Constant(0.1);
    CHECK(g.interpolate(center).features(0) == doctest::Approx(mean).epsilon(1e-14));
  }

  TEST_CASE("trilinear interpolation reproduces linear functions") {
    MultiResFeatureGrid<double> g(unit_box(), {0.07, 0.3, 0.9}, 2);
    Eigen::Matrix<double, Eigen::Dynamic, 3> a(2, 3);
    a << 0.3, -1.2, 2.0, 1.5, 0.25, -0.75;
    Eigen::VectorXd b(2);
    b << 0.4, -2.0;
    fill_linear(g, a, b);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> ux(-1, 1), uy(-0.5, 0.7), uz(0, 1.3);
    for (int t = 0; t < 2000; ++t) {
      const Eigen::Vector3d x(ux(rng), uy(rng), uz(rng));
      const auto s = g.interpolate(x);
      for (int l = 0; l < 3; ++l)
        for (int c = 0; c < 2; ++c)
          CHECK(std::abs(s.features(g.concat_offset(l) + c) - (a.row(c).dot(x) + b(c))) < 1e-12);
    }
  }

  TEST_CASE("points outside the bounds are clamped and flagged") {
    MultiResFeatureGrid<double> g(unit_box(), {0.1}, 1);
    g.fill_channel(0, 0, [](const Eigen::Vector3d& p) { return p.x(); });
    const auto s = g.interpolate(Eigen::Vector3d(3.0, 0.0, 0.5));
    CHECK(s.clamped);
    CHECK(s.features(0) == doctest::Approx(1.0));
    CHECK_FALSE(g.interpolate(Eigen::Vector3d(0.5, 0.0, 0.5)).clamped);
  }

  TEST_CASE("scatter_add is the transpose of interpolation") {
    MultiResFeatureGrid<double> g(unit_box(), {0.15, 0.4}, 2);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    for (int l = 0; l < 2; ++l)
      for (Eigen::Index j = 0; j < g.level(l).features.size(); ++j) g.level(l).features.data()[j] = n01(rng);
    const Eigen::Vector3d x(0.123, 0.456, 0.789);
    Eigen::VectorXd v(g.output_dim());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = n01(rng);
    // <v, interp(x; F)> = <scatter(x, v), F>
    MultiResFeatureGrid<double> grad(unit_box(), {0.15, 0.4}, 2);
    g.scatter_add(x, v, grad);
    double lhs = v.dot(g.interpolate(x).features);
    double rhs = 0.0;
    for (int l = 0; l < 2; ++l) rhs += (grad.level(l).features.array() * g.level(l).features.array()).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }

  TEST_CASE("resampling onto a nested lattice preserves values at coarse nodes") {
    const Aabb box{{-1, -1, -1}, {1, 1, 1}};
    MultiResFeatureGrid<double> coarse(box, {0.3, 0.6}, 1);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n01;
    for (int l = 0; l < 2; ++l)
      for (Eigen::Index j = 0; j < coarse.level(l).features.size(); ++j) coarse.level(l).features.data()[j] = n01(rng);
    const auto fine = coarse.resampled({0.03, 0.06});
    for (int l = 0; l < 2; ++l) {
      const auto& d = coarse.level(l).spec.dims;
      for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
          for (int i = 0; i < d[0]; ++i) {
            const Eigen::Vector3d p = coarse.node_position(l, i, j, k);
            if (!box.contains(p)) continue;
            CHECK(std::abs(fine.level_value(l, p)(0) - coarse.level_value(l, p)(0)) < 1e-9);
          }
    }
  }

  TEST_CASE("cast round trip") {
    MultiResFeatureGrid<double> g(unit_box(), {0.25}, 2);
    g.fill_channel(0, 1, [](const Eigen::Vector3d& p) { return p.sum(); });
    const auto back = g.cast<float>().cast<double>();
    CHECK((back.level(0).features - g.level(0).features).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(g.num_parameters() == 2 * g.level(0).spec.num_nodes());
  }
}
