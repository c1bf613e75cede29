#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "presem/geometry.hpp"

namespace presem {

struct LevelSpec {
  double voxel_size = 0.0;
  std::array<int, 3> dims{2, 2, 2};
  bool collapsed = false;  // voxel at least as large as the extent on some axis

  long long num_nodes() const { return static_cast<long long>(dims[0]) * dims[1] * dims[2]; }
};

/// Lattice for one voxel size over `bounds`: ceil(extent / voxel) + 1 nodes per axis.
LevelSpec make_level_spec(const Aabb& bounds, double voxel_size);

/// Eight lattice corners and trilinear weights of one query point on one level.
template <typename Scalar>
struct TrilinearStencil {
  std::array<int, 8> index{};
  std::array<Scalar, 8> weight{};
};

template <typename Scalar>
TrilinearStencil<Scalar> trilinear_stencil(const LevelSpec& spec, const Eigen::Vector3d& origin,
                                           const Vec3<Scalar>& x) {
  TrilinearStencil<Scalar> s;
  std::array<int, 3> i0{};
  std::array<Scalar, 3> t{};
  for (int a = 0; a < 3; ++a) {
    const int n = spec.dims[static_cast<std::size_t>(a)];
    Scalar u = (x[a] - static_cast<Scalar>(origin[a])) / static_cast<Scalar>(spec.voxel_size);
    u = std::clamp(u, Scalar(0), static_cast<Scalar>(n - 1));
    int i = static_cast<int>(std::floor(u));
    if (i > n - 2) i = n - 2;
    i0[static_cast<std::size_t>(a)] = i;
    t[static_cast<std::size_t>(a)] = u - static_cast<Scalar>(i);
  }
  const int nx = spec.dims[0];
  const int nxy = spec.dims[0] * spec.dims[1];
  const int base = i0[0] + nx * i0[1] + nxy * i0[2];
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    s.index[static_cast<std::size_t>(c)] = base + dx + nx * dy + nxy * dz;
    s.weight[static_cast<std::size_t>(c)] = (dx ? t[0] : Scalar(1) - t[0]) * (dy ? t[1] : Scalar(1) - t[1]) *
                                            (dz ? t[2] : Scalar(1) - t[2]);
  }
  return s;
}

/// Learnable feature vectors on nested voxel lattices sharing one origin (bounds.min).
/// Level 0 is the finest. Interpolated features are concatenated coarse-to-fine.
template <typename Scalar>
class MultiResFeatureGrid {
 public:
  struct Level {
    LevelSpec spec;
    MatX<Scalar> features;  // feature_dim x num_nodes, node = i + nx*(j + ny*k)
  };

  MultiResFeatureGrid() = default;

  MultiResFeatureGrid(const Aabb& bounds, const std::vector<double>& voxel_sizes, int feature_dim)
      : bounds_(bounds), feature_dim_(feature_dim) {
    if (feature_dim < 1) throw std::domain_error("grid: feature_dim must be >= 1");
    if (voxel_sizes.empty()) throw std::domain_error("grid: need at least one level");
    if (!((bounds.max - bounds.min).array() > 0.0).all()) throw std::domain_error("grid: empty bounds");
    for (std::size_t l = 0; l < voxel_sizes.size(); ++l) {
      if (!(voxel_sizes[l] > 0.0)) throw std::domain_error("grid: voxel sizes must be positive");
      if (l > 0 && !(voxel_sizes[l] > voxel_sizes[l - 1]))
        throw std::domain_error("grid: voxel sizes must be strictly increasing");
      Level lv;
      lv.spec = make_level_spec(bounds, voxel_sizes[l]);
      lv.features = MatX<Scalar>::Zero(feature_dim, lv.spec.num_nodes());
      levels_.push_back(std::move(lv));
    }
  }

  const Aabb& bounds() const { return bounds_; }
  int feature_dim() const { return feature_dim_; }
  int num_levels() const { return static_cast<int>(levels_.size()); }
  int output_dim() const { return feature_dim_ * num_levels(); }
  const Level& level(int l) const { return levels_[static_cast<std::size_t>(l)]; }
  Level& level(int l) { return levels_[static_cast<std::size_t>(l)]; }
  std::vector<double> voxel_sizes() const {
    std::vector<double> v;
    for (const auto& lv : levels_) v.push_back(lv.spec.voxel_size);
    return v;
  }
  double finest_voxel() const { return levels_.front().spec.voxel_size; }

  /// Offset of level l inside the concatenated (coarse-to-fine) feature vector.
  int concat_offset(int l) const { return (num_levels() - 1 - l) * feature_dim_; }

  Eigen::Vector3d node_position(int l, int i, int j, int k) const {
    const double v = level(l).spec.voxel_size;
    return bounds_.min + v * Eigen::Vector3d(i, j, k);
  }

  /// Clamps x to the bounds; returns true when clamping changed it.
  bool clamp_to_bounds(Vec3<Scalar>& x) const {
    bool clamped = false;
    for (int a = 0; a < 3; ++a) {
      const Scalar lo = static_cast<Scalar>(bounds_.min[a]);
      const Scalar hi = static_cast<Scalar>(bounds_.max[a]);
      if (x[a] < lo) {
        x[a] = lo;
        clamped = true;
      } else if (x[a] > hi) {
        x[a] = hi;
        clamped = true;
      }
    }
    return clamped;
  }

  /// Writes the concatenated feature vector for x into out (length output_dim()).
  /// Points outside the bounds are clamped to the boundary; the return value flags that.
  template <typename OutDerived>
  bool interpolate_into(Vec3<Scalar> x, Eigen::MatrixBase<OutDerived> const& out_) const {
    auto& out = const_cast<Eigen::MatrixBase<OutDerived>&>(out_);
    const bool clamped = clamp_to_bounds(x);
    for (int l = 0; l < num_levels(); ++l) {
      const auto& lv = level(l);
      const auto st = trilinear_stencil(lv.spec, bounds_.min, x);
      auto seg = out.segment(concat_offset(l), feature_dim_);
      seg.setZero();
      for (int c = 0; c < 8; ++c) seg += st.weight[static_cast<std::size_t>(c)] * lv.features.col(st.index[static_cast<std::size_t>(c)]);
    }
    return clamped;
  }

  struct Sample {
    VecX<Scalar> features;
    bool clamped = false;
  };

  Sample interpolate(const Vec3<Scalar>& x) const {
    Sample s{VecX<Scalar>(output_dim()), false};
    s.clamped = interpolate_into(x, s.features);
    return s;
  }

  /// Adds the transpose of interpolation: grad.level(l).features += w * dfeat[level l].
  template <typename Derived>
  void scatter_add(Vec3<Scalar> x, const Eigen::MatrixBase<Derived>& dfeat, MultiResFeatureGrid& grad) const {
    clamp_to_bounds(x);
    for (int l = 0; l < num_levels(); ++l) {
      const auto st = trilinear_stencil(level(l).spec, bounds_.min, x);
      const auto seg = dfeat.segment(concat_offset(l), feature_dim_);
      auto& g = grad.level(l).features;
      for (int c = 0; c < 8; ++c) g.col(st.index[static_cast<std::size_t>(c)]) += st.weight[static_cast<std::size_t>(c)] * seg;
    }
  }

  /// Trilinear value of level l at x, clamped to the level's own lattice rather than to
  /// the bounds (lattices may extend past bounds.max).
  VecX<Scalar> level_value(int l, const Vec3<Scalar>& x) const {
    const auto& lv = level(l);
    const auto st = trilinear_stencil(lv.spec, bounds_.min, x);
    VecX<Scalar> v = VecX<Scalar>::Zero(feature_dim_);
    for (int c = 0; c < 8; ++c) v += st.weight[static_cast<std::size_t>(c)] * lv.features.col(st.index[static_cast<std::size_t>(c)]);
    return v;
  }

  /// New grid with the given voxel sizes whose nodes carry the trilinear resampling of
  /// this grid, level by level.
  MultiResFeatureGrid resampled(const std::vector<double>& voxel_sizes) const {
    if (static_cast<int>(voxel_sizes.size()) != num_levels())
      throw std::domain_error("grid: resampling needs the same level count");
    MultiResFeatureGrid out(bounds_, voxel_sizes, feature_dim_);
    for (int l = 0; l < num_levels(); ++l) {
      auto& dst = out.level(l);
      const auto& d = dst.spec.dims;
      for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
          for (int i = 0; i < d[0]; ++i) {
            const Vec3<Scalar> p = out.node_position(l, i, j, k).template cast<Scalar>();
            dst.features.col(i + d[0] * (j + d[1] * k)) = level_value(l, p);
          }
    }
    return out;
  }

  /// Sets one channel of one level from a function of node position.
  void fill_channel(int l, int channel, const std::function<double(const Eigen::Vector3d&)>& fn) {
    auto& lv = level(l);
    const auto& d = lv.spec.dims;
    for (int k = 0; k < d[2]; ++k)
      for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[0]; ++i)
          lv.features(channel, i + d[0] * (j + d[1] * k)) = static_cast<Scalar>(fn(node_position(l, i, j, k)));
  }

  void set_zero() {
    for (auto& lv : levels_) lv.features.setZero();
  }

  bool all_finite() const {
    for (const auto& lv : levels_)
      if (!lv.features.allFinite()) return false;
    return true;
  }

  long long num_parameters() const {
    long long n = 0;
    for (const auto& lv : levels_) n += lv.features.size();
    return n;
  }

  template <typename Other>
  MultiResFeatureGrid<Other> cast() const {
    MultiResFeatureGrid<Other> g(bounds_, voxel_sizes(), feature_dim_);
    for (int l = 0; l < num_levels(); ++l) g.level(l).features = level(l).features.template cast<Other>();
    return g;
  }

 private:
  Aabb bounds_;
  int feature_dim_ = 0;
  std::vector<Level> levels_;
};

}  // namespace presem
