#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "presem/errors.hpp"
#include "presem/geometry.hpp"
#include "presem/grid.hpp"
#include "presem/mlp.hpp"

namespace presem {

struct FieldConfig {
  int feature_dim = 4;
  std::vector<double> voxel_sizes{0.03, 0.06, 0.24, 0.96};
  std::vector<int> sdf_hidden{64, 64};
  std::vector<int> rgb_hidden{64, 64};
  std::vector<int> pr_hidden{32, 32};
  std::vector<int> semantic_hidden{32};
  int geo_feat_dim = 8;
  int pr_octaves = 6;
  int view_octaves = 4;
  bool encode_include_raw = true;
  double hidden_beta = 100.0;
  double init_inv_s = 20.0;
  double init_feature_scale = 1e-3;
  /// Finite-difference step of sdf_gradient; 0 selects half the finest voxel.
  double gradient_step = 0.0;
};

/// Analytic sphere used to initialize the SDF decoder. With `inward` set the sign is
/// flipped so that the interior is free space (cameras inside a room).
struct SpherePrior {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 1.0;
  bool inward = false;

  double operator()(const Eigen::Vector3d& x) const {
    const double d = (x - center).norm() - radius;
    return inward ? -d : d;
  }
};

enum class ParamGroup { kField, kPrMlp, kSemantic };

template <typename Scalar>
struct ParamBlock {
  std::string name;
  ParamGroup group;
  Scalar* data;
  Eigen::Index size;
};

template <typename Scalar>
struct DecoderParams {
  Mlp<Scalar> sdf;       // features -> [sdf, geometric feature]
  Mlp<Scalar> rgb;       // [geometric feature, encoded view dir] -> color
  Mlp<Scalar> semantic;  // same input -> pseudo-color
  Mlp<Scalar> pr;        // encoded position -> density
  Scalar log_inv_s = Scalar(0);

  Scalar inv_s() const { return std::exp(log_inv_s); }
};

/// The scene representation: feature grid plus decoders. Also used, zero-filled, as the
/// container for gradients and optimizer moments (identical block layout).
template <typename Scalar>
class Field {
 public:
  FieldConfig config;
  MultiResFeatureGrid<Scalar> grid;
  DecoderParams<Scalar> decoders;

  Field() = default;

  /// Zero-valued field with the configured shapes over `bounds`.
  Field(const FieldConfig& cfg, const Aabb& bounds) : config(cfg), grid(bounds, cfg.voxel_sizes, cfg.feature_dim) {
    const auto beta = static_cast<Scalar>(cfg.hidden_beta);
    const int in_rgb = cfg.geo_feat_dim + encoding_size(cfg.view_octaves, cfg.encode_include_raw);
    decoders.sdf = Mlp<Scalar>(grid.output_dim(), cfg.sdf_hidden, 1 + cfg.geo_feat_dim, Activation::kLinear, beta);
    decoders.rgb = Mlp<Scalar>(in_rgb, cfg.rgb_hidden, 3, Activation::kSigmoid, beta);
    decoders.semantic = Mlp<Scalar>(in_rgb, cfg.semantic_hidden, 3, Activation::kSigmoid, beta);
    decoders.pr = Mlp<Scalar>(encoding_size(cfg.pr_octaves, cfg.encode_include_raw), cfg.pr_hidden, 1,
                              Activation::kSoftplus, beta, Scalar(1));
    decoders.log_inv_s = static_cast<Scalar>(std::log(cfg.init_inv_s));
  }

  Field zeros_like() const {
    Field z = *this;
    z.grid.set_zero();
    z.decoders.sdf.set_zero();
    z.decoders.rgb.set_zero();
    z.decoders.semantic.set_zero();
    z.decoders.pr.set_zero();
    z.decoders.log_inv_s = Scalar(0);
    return z;
  }

  /// Index of the feature carrying the SDF passthrough: channel 0 of the finest level.
  int passthrough_feature() const { return grid.concat_offset(0); }

  double gradient_step() const { return config.gradient_step > 0.0 ? config.gradient_step : 0.5 * grid.finest_voxel(); }

  /// Random features and decoder weights, then the SDF decoder wired so that
  /// sdf(x) = trilinear interpolation of the prior stored in the passthrough channel.
  void initialize(std::mt19937_64& rng, const SpherePrior& prior) {
    std::uniform_real_distribution<double> u(-config.init_feature_scale, config.init_feature_scale);
    for (int l = 0; l < grid.num_levels(); ++l) {
      auto& f = grid.level(l).features;
      for (Eigen::Index j = 0; j < f.cols(); ++j)
        for (Eigen::Index i = 0; i < f.rows(); ++i) f(i, j) = static_cast<Scalar>(u(rng));
    }
    decoders.sdf.init_xavier(rng);
    decoders.rgb.init_xavier(rng);
    decoders.semantic.init_xavier(rng);
    decoders.pr.init_xavier(rng);
    decoders.log_inv_s = static_cast<Scalar>(std::log(config.init_inv_s));
    wire_sdf_passthrough();
    grid.fill_channel(0, 0, [&](const Eigen::Vector3d& p) { return prior(p); });
  }

  /// Makes the field decode exactly the trilinear interpolant of fn sampled on the finest
  /// lattice (all other features zero). Used by analytic-field fixtures.
  void set_analytic_sdf(const std::function<double(const Eigen::Vector3d&)>& fn) {
    grid.set_zero();
    decoders.sdf.set_zero();
    wire_sdf_passthrough();
    grid.fill_channel(0, 0, fn);
  }

  /// Every learnable block, in a fixed order shared by all fields with the same config.
  std::vector<ParamBlock<Scalar>> blocks() {
    std::vector<ParamBlock<Scalar>> out;
    for (int l = 0; l < grid.num_levels(); ++l) {
      auto& f = grid.level(l).features;
      out.push_back({"grid.level" + std::to_string(l), ParamGroup::kField, f.data(), f.size()});
    }
    add_mlp_blocks(out, "sdf_mlp", ParamGroup::kField, decoders.sdf);
    add_mlp_blocks(out, "rgb_mlp", ParamGroup::kField, decoders.rgb);
    out.push_back({"log_inv_s", ParamGroup::kField, &decoders.log_inv_s, 1});
    add_mlp_blocks(out, "pr_mlp", ParamGroup::kPrMlp, decoders.pr);
    add_mlp_blocks(out, "semantic_mlp", ParamGroup::kSemantic, decoders.semantic);
    return out;
  }

  /// Throws NumericalError naming the first non-finite decoder block.
  void check_decoders_finite() const {
    auto check = [](const Mlp<Scalar>& m, const char* name) {
      if (!m.all_finite()) throw NumericalError(std::string("non-finite parameters in ") + name);
    };
    check(decoders.sdf, "sdf_mlp");
    check(decoders.rgb, "rgb_mlp");
    check(decoders.semantic, "semantic_mlp");
    check(decoders.pr, "pr_mlp");
    if (!std::isfinite(static_cast<double>(decoders.log_inv_s))) throw NumericalError("non-finite parameters in log_inv_s");
  }

  void check_finite() const {
    check_decoders_finite();
    for (int l = 0; l < grid.num_levels(); ++l)
      if (!grid.level(l).features.allFinite())
        throw NumericalError("non-finite parameters in grid.level" + std::to_string(l));
  }

  template <typename Other>
  Field<Other> cast() const {
    Field<Other> f;
    f.config = config;
    f.grid = grid.template cast<Other>();
    f.decoders.sdf = decoders.sdf.template cast<Other>();
    f.decoders.rgb = decoders.rgb.template cast<Other>();
    f.decoders.semantic = decoders.semantic.template cast<Other>();
    f.decoders.pr = decoders.pr.template cast<Other>();
    f.decoders.log_inv_s = static_cast<Other>(decoders.log_inv_s);
    return f;
  }

 private:
  static void add_mlp_blocks(std::vector<ParamBlock<Scalar>>& out, const std::string& name, ParamGroup g,
                             Mlp<Scalar>& m) {
    for (int i = 0; i < m.num_layers(); ++i) {
      auto& l = m.layers()[static_cast<std::size_t>(i)];
      out.push_back({name + ".w" + std::to_string(i), g, l.weight.data(), l.weight.size()});
      out.push_back({name + ".b" + std::to_string(i), g, l.bias.data(), l.bias.size()});
    }
  }

  void wire_sdf_passthrough() {
    auto& layers = decoders.sdf.layers();
    if (layers.size() < 2 || layers.front().weight.rows() < 2)
      throw std::domain_error("field: SDF decoder needs a hidden layer of width >= 2");
    const int c = passthrough_feature();
    // softplus(v) - softplus(-v) = v, so a +/- pair of units carries v through each layer
    auto& first = layers.front();
    first.weight.row(0).setZero();
    first.weight.row(1).setZero();
    first.weight(0, c) = Scalar(1);
    first.weight(1, c) = Scalar(-1);
    first.bias(0) = first.bias(1) = Scalar(0);
    for (std::size_t i = 1; i + 1 < layers.size(); ++i) {
      auto& l = layers[i];
      l.weight.row(0).setZero();
      l.weight.row(1).setZero();
      l.weight(0, 0) = Scalar(1);
      l.weight(0, 1) = Scalar(-1);
      l.weight(1, 0) = Scalar(-1);
      l.weight(1, 1) = Scalar(1);
      l.bias(0) = l.bias(1) = Scalar(0);
    }
    auto& out = layers.back();
    out.weight.row(0).setZero();
    out.weight(0, 0) = Scalar(1);
    out.weight(0, 1) = Scalar(-1);
    out.bias(0) = Scalar(0);
  }
};

/// Decoded quantities for a batch of points (one column per point).
template <typename Scalar>
struct FieldOutputs {
  VecX<Scalar> sdf;
  MatX<Scalar> geometric_feature;
  Mat3X<Scalar> color;
  Mat3X<Scalar> semantic_color;
  std::vector<bool> clamped;
};

template <typename Scalar>
struct DecodeCache {
  Mat3X<Scalar> positions;
  typename Mlp<Scalar>::Cache sdf, rgb, semantic;
  bool has_color = false;
  bool has_semantic = false;
};

/// Decodes positions (3xN). view_dirs may be null when neither color nor semantics is
/// requested. Fills `cache` for decode_backward when non-null.
template <typename Scalar>
FieldOutputs<Scalar> decode_batch(const Field<Scalar>& field, const Mat3X<Scalar>& positions,
                                  const Mat3X<Scalar>* view_dirs, bool want_color, bool want_semantic,
                                  DecodeCache<Scalar>* cache = nullptr) {
  field.check_decoders_finite();
  const Eigen::Index n = positions.cols();
  const int g = field.config.geo_feat_dim;
  FieldOutputs<Scalar> out;
  out.clamped.assign(static_cast<std::size_t>(n), false);
  MatX<Scalar> feats(field.grid.output_dim(), n);
  for (Eigen::Index i = 0; i < n; ++i)
    out.clamped[static_cast<std::size_t>(i)] = field.grid.interpolate_into(positions.col(i), feats.col(i));

  typename Mlp<Scalar>::Cache* sdf_cache = cache ? &cache->sdf : nullptr;
  const MatX<Scalar> sdf_out = field.decoders.sdf.forward(feats, sdf_cache);
  out.sdf = sdf_out.row(0).transpose();
  out.geometric_feature = sdf_out.bottomRows(g);

  if (cache) {
    cache->positions = positions;
    cache->has_color = want_color;
    cache->has_semantic = want_semantic;
  }
  if (want_color || want_semantic) {
    if (!view_dirs || view_dirs->cols() != n) throw std::domain_error("decode: view directions required");
    const int enc = encoding_size(field.config.view_octaves, field.config.encode_include_raw);
    MatX<Scalar> head_in(g + enc, n);
    head_in.topRows(g) = out.geometric_feature;
    for (Eigen::Index i = 0; i < n; ++i)
      positional_encode_into(view_dirs->col(i), field.config.view_octaves, field.config.encode_include_raw,
                             head_in.col(i).tail(enc));
    if (want_color) out.color = field.decoders.rgb.forward(head_in, cache ? &cache->rgb : nullptr);
    if (want_semantic) out.semantic_color = field.decoders.semantic.forward(head_in, cache ? &cache->semantic : nullptr);
  }
  return out;
}

/// Reverse pass of decode_batch. Accumulates decoder gradients into `grad` and returns
/// d(loss)/d(interpolated features) (output_dim x N); scatter it with scatter_feature_grads.
template <typename Scalar>
MatX<Scalar> decode_backward(const Field<Scalar>& field, const DecodeCache<Scalar>& cache, const VecX<Scalar>& dsdf,
                             const Mat3X<Scalar>* dcolor, const Mat3X<Scalar>* dsemantic, Field<Scalar>& grad) {
  const Eigen::Index n = cache.positions.cols();
  const int g = field.config.geo_feat_dim;
  MatX<Scalar> dsdf_out = MatX<Scalar>::Zero(1 + g, n);
  dsdf_out.row(0) = dsdf.transpose();
  if (dcolor && cache.has_color) {
    const MatX<Scalar> din = field.decoders.rgb.backward(cache.rgb, *dcolor, grad.decoders.rgb);
    dsdf_out.bottomRows(g) += din.topRows(g);
  }
  if (dsemantic && cache.has_semantic) {
    const MatX<Scalar> din = field.decoders.semantic.backward(cache.semantic, *dsemantic, grad.decoders.semantic);
    dsdf_out.bottomRows(g) += din.topRows(g);
  }
  return field.decoders.sdf.backward(cache.sdf, dsdf_out, grad.decoders.sdf);
}

template <typename Scalar>
void scatter_feature_grads(const Field<Scalar>& field, const Mat3X<Scalar>& positions, const MatX<Scalar>& dfeat,
                           Field<Scalar>& grad) {
  for (Eigen::Index i = 0; i < positions.cols(); ++i) field.grid.scatter_add(positions.col(i), dfeat.col(i), grad.grid);
}

/// SDF values only.
template <typename Scalar>
VecX<Scalar> sdf_batch(const Field<Scalar>& field, const Mat3X<Scalar>& positions) {
  return decode_batch(field, positions, static_cast<const Mat3X<Scalar>*>(nullptr), false, false).sdf;
}

template <typename Scalar>
struct FieldOutput {
  Scalar sdf;
  Vec3<Scalar> color;
  Vec3<Scalar> semantic_color;
  VecX<Scalar> geometric_feature;
  bool clamped = false;
};

template <typename Scalar>
FieldOutput<Scalar> decode(const Field<Scalar>& field, const std::type_identity_t<Vec3<Scalar>>& x,
                           const std::type_identity_t<Vec3<Scalar>>& view_dir) {
  Mat3X<Scalar> p(3, 1), d(3, 1);
  p.col(0) = x;
  d.col(0) = view_dir;
  const auto o = decode_batch(field, p, &d, true, true);
  return {o.sdf(0), o.color.col(0), o.semantic_color.col(0), o.geometric_feature.col(0), o.clamped[0]};
}

template <typename Scalar>
Scalar sdf_at(const Field<Scalar>& field, const std::type_identity_t<Vec3<Scalar>>& x) {
  Mat3X<Scalar> p(3, 1);
  p.col(0) = x;
  return sdf_batch(field, p)(0);
}

template <typename Scalar>
struct PrCache {
  typename Mlp<Scalar>::Cache mlp;
};

/// PR MLP density softplus(MLP(gamma(x))) for a batch of positions.
template <typename Scalar>
VecX<Scalar> pr_density_batch(const Field<Scalar>& field, const Mat3X<Scalar>& positions,
                              PrCache<Scalar>* cache = nullptr) {
  const MatX<Scalar> enc =
      positional_encode_batch<Scalar>(positions, field.config.pr_octaves, field.config.encode_include_raw);
  return field.decoders.pr.forward(enc, cache ? &cache->mlp : nullptr).row(0).transpose();
}

template <typename Scalar>
void pr_backward(const Field<Scalar>& field, const PrCache<Scalar>& cache, const VecX<Scalar>& dsigma,
                 Field<Scalar>& grad) {
  field.decoders.pr.backward(cache.mlp, dsigma.transpose(), grad.decoders.pr);
}

template <typename Scalar>
Scalar pr_density(const Field<Scalar>& field, const std::type_identity_t<Vec3<Scalar>>& x) {
  Mat3X<Scalar> p(3, 1);
  p.col(0) = x;
  return pr_density_batch(field, p)(0);
}

/// Six evaluation points of a finite-difference gradient. Axis a uses
/// (f(points[2a]) - f(points[2a+1])) * inv_step[a]; near the bounds the difference becomes
/// one-sided and `one_sided[a]` is set.
template <typename Scalar>
struct GradientStencil {
  std::array<Vec3<Scalar>, 6> points;
  Vec3<Scalar> inv_step;
  std::array<bool, 3> one_sided{false, false, false};
};

template <typename Scalar>
GradientStencil<Scalar> gradient_stencil(const Vec3<Scalar>& x, Scalar h, const Aabb& bounds) {
  GradientStencil<Scalar> s;
  for (int a = 0; a < 3; ++a) {
    Vec3<Scalar> plus = x, minus = x;
    plus[a] += h;
    minus[a] -= h;
    const bool plus_ok = plus[a] <= static_cast<Scalar>(bounds.max[a]);
    const bool minus_ok = minus[a] >= static_cast<Scalar>(bounds.min[a]);
    Scalar span = Scalar(2) * h;
    if (!plus_ok && minus_ok) {
      plus = x;
      span = h;
      s.one_sided[static_cast<std::size_t>(a)] = true;
    } else if (plus_ok && !minus_ok) {
      minus = x;
      span = h;
      s.one_sided[static_cast<std::size_t>(a)] = true;
    }
    s.points[static_cast<std::size_t>(2 * a)] = plus;
    s.points[static_cast<std::size_t>(2 * a + 1)] = minus;
    s.inv_step[a] = Scalar(1) / span;
  }
  return s;
}

template <typename Scalar>
struct SdfGradient {
  Vec3<Scalar> gradient;
  bool one_sided = false;
};

/// Finite-difference gradient of the decoded SDF; step <= 0 uses the field default.
template <typename Scalar>
SdfGradient<Scalar> sdf_gradient(const Field<Scalar>& field, const std::type_identity_t<Vec3<Scalar>>& x,
                                 std::type_identity_t<Scalar> step = Scalar(0)) {
  const Scalar h = step > Scalar(0) ? step : static_cast<Scalar>(field.gradient_step());
  const auto st = gradient_stencil(x, h, field.grid.bounds());
  Mat3X<Scalar> pts(3, 6);
  for (int i = 0; i < 6; ++i) pts.col(i) = st.points[static_cast<std::size_t>(i)];
  const VecX<Scalar> f = sdf_batch(field, pts);
  SdfGradient<Scalar> g;
  for (int a = 0; a < 3; ++a) g.gradient[a] = (f(2 * a) - f(2 * a + 1)) * st.inv_step[a];
  g.one_sided = st.one_sided[0] || st.one_sided[1] || st.one_sided[2];
  return g;
}

}  // namespace presem
