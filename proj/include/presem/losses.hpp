#pragma once

// Loss reductions over rendered quantities. Each returns its value together with the
// gradient with respect to its inputs; the trainer chains those into the field.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "presem/geometry.hpp"
#include "presem/renderer.hpp"

namespace presem {

struct LossWeights {
  double sg = 4.0;
  double sem = 1.0;
  double pr = 1.0;
  double rgb = 10.0;
  double depth = 1.0;
  double sdf = 10.0;
  double fs = 1.0;
  double eik = 0.1;
  double smooth = 0.01;
  double sem_rgb = 1.0;
  double sem_depth = 0.1;
  /// Extra factor on the fine-stage rgb and depth terms.
  double model = 5.0;
  double truncation = 0.05;

  void validate() const;
};

enum class LossTerm { kPr, kRgb, kDepth, kSdf, kFs, kEikonal, kSmooth, kSemRgb, kSemDepth };
inline constexpr std::size_t kNumLossTerms = 9;
inline constexpr std::array<const char*, kNumLossTerms> kLossTermNames = {
    "pr", "rgb", "depth", "sdf", "fs", "eik", "smooth", "sem_rgb", "sem_depth"};

using LossVector = std::array<double, kNumLossTerms>;

inline constexpr std::size_t term_index(LossTerm t) { return static_cast<std::size_t>(t); }

/// Coefficient of each component in the total: the product of its nested weights.
LossVector loss_coefficients(const LossWeights& w, Stage stage);

struct LossBreakdown {
  LossVector components{};  // unweighted component values
  double total = 0.0;

  double operator[](LossTerm t) const { return components[term_index(t)]; }
};

LossBreakdown total_loss(const LossVector& components, const LossWeights& w, Stage stage);

/// Value plus gradient with respect to the reduction's primary input.
template <typename Scalar, typename Grad>
struct Reduction {
  Scalar value = Scalar(0);
  Grad grad;
  bool noop = false;  // no element contributed
};

/// Mean over masked columns of ||pred - target||^2. An empty mask selects every column.
template <typename Scalar>
Reduction<Scalar, Mat3X<Scalar>> loss_color(const Mat3X<Scalar>& pred, const Mat3X<Scalar>& target,
                                            const std::vector<bool>& mask = {}) {
  if (pred.cols() != target.cols()) throw std::domain_error("loss_color: size mismatch");
  if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != pred.cols())
    throw std::domain_error("loss_color: mask size mismatch");
  Reduction<Scalar, Mat3X<Scalar>> r;
  r.grad = Mat3X<Scalar>::Zero(3, pred.cols());
  Eigen::Index count = 0;
  for (Eigen::Index i = 0; i < pred.cols(); ++i)
    if (mask.empty() || mask[static_cast<std::size_t>(i)]) ++count;
  if (count == 0) {
    r.noop = true;
    return r;
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(count);
  for (Eigen::Index i = 0; i < pred.cols(); ++i) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
    const Vec3<Scalar> e = pred.col(i) - target.col(i);
    r.value += e.squaredNorm() * inv;
    r.grad.col(i) = Scalar(2) * inv * e;
  }
  return r;
}

/// Mean over masked entries of (pred - target)^2.
template <typename Scalar>
Reduction<Scalar, VecX<Scalar>> loss_depth(const VecX<Scalar>& pred, const VecX<Scalar>& target,
                                           const std::vector<bool>& mask) {
  if (pred.size() != target.size() || static_cast<Eigen::Index>(mask.size()) != pred.size())
    throw std::domain_error("loss_depth: size mismatch");
  Reduction<Scalar, VecX<Scalar>> r;
  r.grad = VecX<Scalar>::Zero(pred.size());
  const auto count = std::count(mask.begin(), mask.end(), true);
  if (count == 0) {
    r.noop = true;
    return r;
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(count);
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const Scalar e = pred(i) - target(i);
    r.value += e * e * inv;
    r.grad(i) = Scalar(2) * inv * e;
  }
  return r;
}

/// Depth validity mask for the depth terms: valid sensor depth and enough accumulated
/// weight for the rendered depth to mean something.
template <typename Scalar>
std::vector<bool> depth_mask(const VecX<Scalar>& sensor_depth, const VecX<Scalar>& weight_sum,
                             Scalar min_weight = Scalar(0.5)) {
  std::vector<bool> m(static_cast<std::size_t>(sensor_depth.size()));
  for (Eigen::Index i = 0; i < sensor_depth.size(); ++i)
    m[static_cast<std::size_t>(i)] = sensor_depth(i) > Scalar(0) && weight_sum(i) >= min_weight;
  return m;
}

enum class SampleRegion { kNone, kTruncation, kFreeSpace };

/// S_tr: |z - D| < tr; S_fs: z < D - tr. Rays without depth (D <= 0) have neither.
template <typename Scalar>
SampleRegion classify_sample(Scalar z, Scalar depth, Scalar tr) {
  if (!(depth > Scalar(0))) return SampleRegion::kNone;
  if (std::abs(z - depth) < tr) return SampleRegion::kTruncation;
  if (z < depth - tr) return SampleRegion::kFreeSpace;
  return SampleRegion::kNone;
}

/// Samples of ray r occupy [offsets[r], offsets[r+1]) in the flat arrays.
using RayOffsets = std::vector<Eigen::Index>;

namespace detail {

// Mean over rays (with at least one selected sample) of the per-ray mean of f.
// f(i) returns (value, d value / d input) for flat sample i.
template <typename Scalar, typename Select, typename PerSample>
Reduction<Scalar, VecX<Scalar>> nested_mean(const RayOffsets& offsets, Eigen::Index n, Select select,
                                            PerSample f) {
  Reduction<Scalar, VecX<Scalar>> r;
  r.grad = VecX<Scalar>::Zero(n);
  std::size_t rays = 0;
  for (std::size_t ray = 0; ray + 1 < offsets.size(); ++ray) {
    bool any = false;
    for (Eigen::Index i = offsets[ray]; i < offsets[ray + 1] && !any; ++i) any = select(ray, i);
    rays += any ? 1 : 0;
  }
  if (rays == 0) {
    r.noop = true;
    return r;
  }
  const Scalar inv_rays = Scalar(1) / static_cast<Scalar>(rays);
  for (std::size_t ray = 0; ray + 1 < offsets.size(); ++ray) {
    Eigen::Index count = 0;
    for (Eigen::Index i = offsets[ray]; i < offsets[ray + 1]; ++i) count += select(ray, i) ? 1 : 0;
    if (count == 0) continue;
    const Scalar wgt = inv_rays / static_cast<Scalar>(count);
    for (Eigen::Index i = offsets[ray]; i < offsets[ray + 1]; ++i) {
      if (!select(ray, i)) continue;
      const auto [v, d] = f(i);
      r.value += wgt * v;
      r.grad(i) = wgt * d;
    }
  }
  return r;
}

}  // namespace detail

/// Truncation-region SDF loss: (sdf / tr - b)^2 with b = clamp((D - z) / tr, -1, 1).
template <typename Scalar>
Reduction<Scalar, VecX<Scalar>> loss_sdf(const VecX<Scalar>& sdf, const VecX<Scalar>& z, const RayOffsets& offsets,
                                         const VecX<Scalar>& ray_depth, Scalar tr) {
  if (!(tr > Scalar(0))) throw std::domain_error("loss_sdf: truncation must be positive");
  const auto select = [&](std::size_t ray, Eigen::Index i) {
    return classify_sample(z(i), ray_depth(static_cast<Eigen::Index>(ray)), tr) == SampleRegion::kTruncation;
  };
  std::vector<Scalar> target(static_cast<std::size_t>(sdf.size()), Scalar(0));
  for (std::size_t ray = 0; ray + 1 < offsets.size(); ++ray)
    for (Eigen::Index i = offsets[ray]; i < offsets[ray + 1]; ++i)
      target[static_cast<std::size_t>(i)] =
          std::clamp((ray_depth(static_cast<Eigen::Index>(ray)) - z(i)) / tr, Scalar(-1), Scalar(1));
  return detail::nested_mean<Scalar>(offsets, sdf.size(), select, [&](Eigen::Index i) {
    const Scalar e = sdf(i) / tr - target[static_cast<std::size_t>(i)];
    return std::pair<Scalar, Scalar>{e * e, Scalar(2) * e / tr};
  });
}

/// Free-space loss: (sdf / tr - 1)^2.
template <typename Scalar>
Reduction<Scalar, VecX<Scalar>> loss_fs(const VecX<Scalar>& sdf, const VecX<Scalar>& z, const RayOffsets& offsets,
                                        const VecX<Scalar>& ray_depth, Scalar tr) {
  if (!(tr > Scalar(0))) throw std::domain_error("loss_fs: truncation must be positive");
  const auto select = [&](std::size_t ray, Eigen::Index i) {
    return classify_sample(z(i), ray_depth(static_cast<Eigen::Index>(ray)), tr) == SampleRegion::kFreeSpace;
  };
  return detail::nested_mean<Scalar>(offsets, sdf.size(), select, [&](Eigen::Index i) {
    const Scalar e = sdf(i) / tr - Scalar(1);
    return std::pair<Scalar, Scalar>{e * e, Scalar(2) * e / tr};
  });
}

/// Eikonal term over grouped points: mean over groups of the mean of (||g|| - 1)^2.
/// The gradient is with respect to each gradient vector.
template <typename Scalar>
Reduction<Scalar, Mat3X<Scalar>> loss_eikonal(const Mat3X<Scalar>& gradients, const RayOffsets& groups) {
  Reduction<Scalar, Mat3X<Scalar>> r;
  r.grad = Mat3X<Scalar>::Zero(3, gradients.cols());
  const auto scalar = detail::nested_mean<Scalar>(
      groups, gradients.cols(), [](std::size_t, Eigen::Index) { return true; },
      [&](Eigen::Index i) {
        const Scalar n = gradients.col(i).norm();
        return std::pair<Scalar, Scalar>{(n - Scalar(1)) * (n - Scalar(1)), Scalar(2) * (n - Scalar(1))};
      });
  r.value = scalar.value;
  r.noop = scalar.noop;
  for (Eigen::Index i = 0; i < gradients.cols(); ++i) {
    const Scalar n = gradients.col(i).norm();
    if (n > Scalar(0)) r.grad.col(i) = scalar.grad(i) * gradients.col(i) / n;
  }
  return r;
}

/// Smoothness term: mean over points of ||g(x + delta) - g(x)||^2. The gradient is
/// with respect to `shifted`; the one for `base` is its negation.
template <typename Scalar>
Reduction<Scalar, Mat3X<Scalar>> loss_smooth(const Mat3X<Scalar>& shifted, const Mat3X<Scalar>& base) {
  if (shifted.cols() != base.cols()) throw std::domain_error("loss_smooth: size mismatch");
  Reduction<Scalar, Mat3X<Scalar>> r;
  r.grad = Mat3X<Scalar>::Zero(3, shifted.cols());
  if (shifted.cols() == 0) {
    r.noop = true;
    return r;
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(shifted.cols());
  const Mat3X<Scalar> diff = shifted - base;
  r.value = diff.squaredNorm() * inv;
  r.grad = Scalar(2) * inv * diff;
  return r;
}

}  // namespace presem
