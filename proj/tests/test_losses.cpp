#include <cmath>
#include <random>

#include "doctest.h"
#include "presem/losses.hpp"

using namespace presem;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x(i++) = d;
  return x;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("color loss examples") {
    Eigen::Matrix3Xd pred(3, 1), target(3, 1);
    pred << 1, 0, 0;
    target << 0, 0, 0;
    CHECK(loss_color<double>(pred, target).value == doctest::Approx(1.0));
    CHECK(loss_color<double>(target, target).value == 0.0);

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    Eigen::Matrix3Xd a(3, 7), b(3, 7);
    for (int i = 0; i < 7; ++i)
      for (int c = 0; c < 3; ++c) {
        a(c, i) = u(rng);
        b(c, i) = u(rng);
      }
    const Eigen::Matrix3Xd ap = a.rowwise().reverse();
    const Eigen::Matrix3Xd bp = b.rowwise().reverse();
    CHECK(loss_color<double>(a, b).value == doctest::Approx(loss_color<double>(ap, bp).value).epsilon(1e-14));
  }

  TEST_CASE("depth loss examples") {
    const auto one = loss_depth<double>(vec({1.05, 2.0}), vec({1.0, 0.0}), {true, false});
    CHECK(one.value == doctest::Approx(0.0025).epsilon(1e-9));
    CHECK(!one.noop);
    const auto none = loss_depth<double>(vec({1.0}), vec({0.0}), {false});
    CHECK(none.value == 0.0);
    CHECK(none.noop);
    // doubling residuals quadruples the loss
    const auto r1 = loss_depth<double>(vec({1.1, 2.2}), vec({1.0, 2.0}), {true, true});
    const auto r2 = loss_depth<double>(vec({1.2, 2.4}), vec({1.0, 2.0}), {true, true});
    CHECK(r2.value == doctest::Approx(4.0 * r1.value).epsilon(1e-12));
    // the pre-rendering example: D = 1.0, predicted 0.9
    CHECK(loss_depth<double>(vec({0.9}), vec({1.0}), {true}).value == doctest::Approx(0.01));
  }

  TEST_CASE("depth mask needs valid depth and weight") {
    const auto m = depth_mask<double>(vec({0.0, 1.0, 1.0}), vec({1.0, 0.4, 0.6}));
    CHECK(m == std::vector<bool>{false, false, true});
  }

  TEST_CASE("sample regions are disjoint") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 3);
    for (int i = 0; i < 10000; ++i) {
      const double z = u(rng), D = u(rng) - 0.5;
      const auto r = classify_sample(z, D, 0.05);
      if (D <= 0.0) CHECK(r == SampleRegion::kNone);
      if (r == SampleRegion::kTruncation) CHECK(std::abs(z - D) < 0.05);
      if (r == SampleRegion::kFreeSpace) CHECK(z < D - 0.05);
    }
  }

  TEST_CASE("sdf loss examples") {
    const double tr = 0.05;
    // on-surface point with zero prediction
    RayOffsets off{0, 1};
    CHECK(loss_sdf<double>(vec({0.0}), vec({1.0}), off, vec({1.0}), tr).value == 0.0);
    // b = 0.5, predicted sdf / tr = 0.2
    const auto r = loss_sdf<double>(vec({0.2 * tr}), vec({1.0 - 0.5 * tr}), off, vec({1.0}), tr);
    CHECK(r.value == doctest::Approx(0.09).epsilon(1e-12));
    // exact truncated field is a perfect prediction
    Eigen::VectorXd z = vec({0.96, 0.98, 1.0, 1.02, 1.04});
    Eigen::VectorXd sdf = (1.0 - z.array()).matrix();
    RayOffsets five{0, 5};
    CHECK(loss_sdf<double>(sdf, z, five, vec({1.0}), tr).value == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("free-space loss examples") {
    const double tr = 0.05;
    RayOffsets off{0, 2};
    CHECK(loss_fs<double>(vec({tr, tr}), vec({0.2, 0.3}), off, vec({1.0}), tr).value == doctest::Approx(0.0));
    CHECK(loss_fs<double>(vec({0.0, 0.0}), vec({0.2, 0.3}), off, vec({1.0}), tr).value == doctest::Approx(1.0));
    const auto none = loss_fs<double>(vec({0.0}), vec({0.99}), RayOffsets{0, 1}, vec({1.0}), tr);
    CHECK(none.value == 0.0);
    CHECK(none.noop);
    // rays without depth have no free space
    CHECK(loss_fs<double>(vec({0.0}), vec({0.1}), RayOffsets{0, 1}, vec({0.0}), tr).noop);
  }

  TEST_CASE("eikonal loss examples") {
    Eigen::Matrix3Xd unit(3, 2), twice(3, 2), zero = Eigen::Matrix3Xd::Zero(3, 2);
    unit << 1, 0, 0, 0, 0, 1;
    twice = 2.0 * unit;
    RayOffsets g{0, 2};
    CHECK(loss_eikonal<double>(unit, g).value == doctest::Approx(0.0));
    CHECK(loss_eikonal<double>(twice, g).value == doctest::Approx(1.0));
    CHECK(loss_eikonal<double>(zero, g).value == doctest::Approx(1.0));
  }

  TEST_CASE("smoothness loss examples") {
    Eigen::Matrix3Xd g(3, 4);
    g.setConstant(0.3);
    CHECK(loss_smooth<double>(g, g).value == 0.0);
    // sphere gradient field, tangential offset: ||delta||^2 / r^2 to leading order
    const double r = 0.5, d = 1e-3;
    Eigen::Matrix3Xd base(3, 1), shifted(3, 1);
    base << 1, 0, 0;
    shifted.col(0) = Eigen::Vector3d(r, d, 0).normalized();
    CHECK(loss_smooth<double>(shifted, base).value == doctest::Approx(d * d / (r * r)).epsilon(1e-5));
    CHECK(loss_smooth<double>(Eigen::Matrix3Xd(3, 0), Eigen::Matrix3Xd(3, 0)).noop);
  }

  TEST_CASE("total loss is linear with nested coefficients") {
    LossWeights w;
    LossVector ones;
    ones.fill(1.0);
    const double inner = w.pr + w.rgb + w.depth + w.sdf + w.fs + w.eik + w.smooth;
    CHECK(total_loss(ones, w, Stage::kCoarse).total == doctest::Approx(4.0 * inner + 1.0 * (w.sem_rgb + w.sem_depth)));
    LossVector zero{};
    CHECK(total_loss(zero, w, Stage::kFine).total == 0.0);
    const LossVector c = loss_coefficients(w, Stage::kFine);
    for (std::size_t t = 0; t < kNumLossTerms; ++t) {
      LossVector probe{};
      probe[t] = 1.0;
      CHECK(total_loss(probe, w, Stage::kFine).total == doctest::Approx(c[t]));
    }
    CHECK(c[term_index(LossTerm::kRgb)] == doctest::Approx(4.0 * 10.0 * 5.0));
    LossWeights nosem = w;
    nosem.sem = 0.0;
    CHECK(loss_coefficients(nosem, Stage::kFine)[term_index(LossTerm::kSemRgb)] == 0.0);
    w.truncation = 0.0;
    CHECK_THROWS_AS(w.validate(), std::domain_error);
  }
}
