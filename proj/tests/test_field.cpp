#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "presem/field.hpp"

using namespace presem;

namespace {

FieldConfig small_config() {
  FieldConfig cfg;
  cfg.voxel_sizes = {0.25, 0.5};
  cfg.feature_dim = 3;
  cfg.sdf_hidden = {16, 16};
  cfg.rgb_hidden = {16};
  cfg.pr_hidden = {16};
  cfg.semantic_hidden = {8};
  cfg.geo_feat_dim = 4;
  return cfg;
}

const Aabb kBox{{-1, -1, -1}, {1, 1, 1}};

Field<double> random_field(std::uint64_t seed) {
  Field<double> f(small_config(), kBox);
  std::mt19937_64 rng(seed);
  f.initialize(rng, SpherePrior{Eigen::Vector3d::Zero(), 0.5, false});
  return f;
}

}  // namespace

TEST_SUITE("field") {
  TEST_CASE("zero PR MLP gives softplus(0) = ln 2") {
    Field<double> f(small_config(), kBox);
    f.decoders.pr.set_zero();
    const double s = pr_density(f, Eigen::Vector3d(0.2, -0.3, 0.4));
    CHECK(s == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }

  TEST_CASE("PR density is nonnegative and deterministic") {
    auto f = random_field(3);
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 200; ++i) {
      const Eigen::Vector3d x(u(rng), u(rng), u(rng));
      const double s = pr_density(f, x);
      CHECK(s >= 0.0);
      CHECK(std::isfinite(s));
      CHECK(s == pr_density(f, x));
    }
  }

  TEST_CASE("zeroed RGB output layer decodes to mid grey") {
    auto f = random_field(1);
    auto& out = f.decoders.rgb.layers().back();
    out.weight.setZero();
    out.bias.setZero();
    const auto o = decode(f, Eigen::Vector3d(0.1, 0.2, 0.3), Eigen::Vector3d(0, 0, 1));
    CHECK(o.color.isApprox(Eigen::Vector3d::Constant(0.5), 1e-15));
    CHECK((o.semantic_color.array() >= 0.0).all());
    CHECK((o.semantic_color.array() <= 1.0).all());
  }

  TEST_CASE("decode is pure") {
    auto f = random_field(2);
    const auto before = f.grid.level(0).features;
    const Eigen::Vector3d x(0.3, 0.1, -0.2), d = Eigen::Vector3d(1, 2, 3).normalized();
    const auto a = decode(f, x, d);
    const auto b = decode(f, x, d);
    CHECK(a.sdf == b.sdf);
    CHECK(a.color == b.color);
    CHECK(a.semantic_color == b.semantic_color);
    CHECK(f.grid.level(0).features == before);
  }

  TEST_CASE("geometric initialization decodes the sphere prior") {
    auto f = random_field(4);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 100; ++i) {
      const Eigen::Vector3d x(u(rng), u(rng), u(rng));
      // trilinear interpolant of |x| - 0.5 on a 0.25 lattice
      CHECK(std::abs(sdf_at(f, x) - (x.norm() - 0.5)) < 0.05);
    }
    Field<double> room(small_config(), kBox);
    room.initialize(rng, SpherePrior{Eigen::Vector3d::Zero(), 0.8, true});
    CHECK(sdf_at(room, Eigen::Vector3d::Zero()) > 0.7);
  }

  TEST_CASE("non-finite parameters are reported by block") {
    auto f = random_field(5);
    f.decoders.rgb.layers()[0].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
      decode(f, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ());
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("rgb_mlp") != std::string::npos);
    }
  }

  TEST_CASE("a feature perturbation moves sdf by a bounded amount") {
    auto f = random_field(7);
    const Eigen::Vector3d x(0.31, -0.12, 0.07);
    const double s0 = sdf_at(f, x);
    for (const double delta : {1e-3, 1e-4, 1e-5}) {
      auto g = f;
      g.grid.level(1).features(1, 10) += delta;
      g.grid.level(0).features(0, 300) += delta;
      const double s1 = sdf_at(g, x);
      CHECK(std::isfinite(s1));
      CHECK(std::abs(s1 - s0) <= 1e3 * delta);
    }
  }

  TEST_CASE("sdf gradient on analytic fields") {
    Field<double> f(small_config(), kBox);
    f.set_analytic_sdf([](const Eigen::Vector3d& p) { return p.x(); });
    const auto g = sdf_gradient(f, Eigen::Vector3d(0.1, 0.2, 0.3));
    CHECK((g.gradient - Eigen::Vector3d::UnitX()).norm() < 1e-6);
    CHECK_FALSE(g.one_sided);

    f.set_analytic_sdf([](const Eigen::Vector3d&) { return 0.25; });
    CHECK(sdf_gradient(f, Eigen::Vector3d(0.1, 0.2, 0.3)).gradient.norm() < 1e-12);

    const auto g_edge = sdf_gradient(f, Eigen::Vector3d(0.99, 0.0, 0.0), 0.05);
    CHECK(g_edge.one_sided);
  }

  TEST_CASE("sphere gradient has unit norm with second-order error") {
    FieldConfig cfg = small_config();
    cfg.voxel_sizes = {0.02, 0.5};
    Field<double> f(cfg, kBox);
    f.set_analytic_sdf([](const Eigen::Vector3d& p) { return p.norm() - 0.6; });
    std::mt19937_64 rng(12);
    std::normal_distribution<double> n01;
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      Eigen::Vector3d x(n01(rng), n01(rng), n01(rng));
      x = x.normalized() * (0.4 + 0.4 * std::abs(n01(rng)) / 3.0);
      worst = std::max(worst, std::abs(sdf_gradient(f, x).gradient.norm() - 1.0));
    }
    // trilinear sampling of the sphere plus the O(h^2) stencil error, h = 0.01, r >= 0.4
    CHECK(worst < 5e-3);
  }

  TEST_CASE("blocks cover every parameter exactly once") {
    auto f = random_field(9);
    long long total = 0;
    for (const auto& b : f.blocks()) total += b.size;
    CHECK(total == f.grid.num_parameters() + f.decoders.sdf.num_parameters() + f.decoders.rgb.num_parameters() +
                       f.decoders.semantic.num_parameters() + f.decoders.pr.num_parameters() + 1);
    const auto z = f.zeros_like();
    CHECK(z.grid.level(0).features.isZero(0.0));
  }

  TEST_CASE("inv_s stays positive under the log parameterization") {
    Field<double> f(small_config(), kBox);
    for (const double v : {-50.0, -5.0, 0.0, 3.0}) {
      f.decoders.log_inv_s = v;
      CHECK(f.decoders.inv_s() > 0.0);
    }
  }
}
