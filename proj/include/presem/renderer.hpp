#pragma once

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "presem/field.hpp"
#include "presem/sampler.hpp"
#include "presem/weights.hpp"

namespace presem {

enum class Stage { kCoarse, kFine };
enum class WeightMode { kNeusStandard, kFineReweighted };

inline const char* stage_name(Stage s) { return s == Stage::kCoarse ? "coarse" : "fine"; }

struct RenderOptions {
  double beta = 1.0;
  bool sdf_positive_outside = true;
  /// Use neus_standard weights in the fine stage as well.
  bool force_neus_standard = false;
  /// SG-MLP pre-rendering sampler; off selects the plain stratified + resampling path.
  bool prerender = true;
  /// Multiply the logistic density by inv_s so that opacity saturates inside the surface.
  bool scale_density = true;
};

inline WeightMode weight_mode_for(Stage stage, const RenderOptions& opt) {
  return stage == Stage::kFine && !opt.force_neus_standard ? WeightMode::kFineReweighted : WeightMode::kNeusStandard;
}

/// Density used for compositing and for re-scoring refined sample layers.
template <typename Scalar>
inline Scalar render_density(Scalar sdf, Scalar inv_s, const RenderOptions& opt) {
  const Scalar d = sdf_to_density(sdf, inv_s, opt.sdf_positive_outside);
  return opt.scale_density ? inv_s * d : d;
}

template <typename Scalar>
struct RayRender {
  Vec3<Scalar> color = Vec3<Scalar>::Zero();
  Vec3<Scalar> semantic_color = Vec3<Scalar>::Zero();
  Scalar depth = Scalar(0);
  VecX<Scalar> weights;
  Scalar weight_sum = Scalar(0);
  Stage stage = Stage::kCoarse;
  std::vector<double> sample_depths;
};

/// color = sum w c, semantic = sum w s, depth = sum w z.
template <typename Scalar>
RayRender<Scalar> composite(const VecX<Scalar>& w, const Mat3X<Scalar>& colors, const Mat3X<Scalar>& semantic,
                            const VecX<Scalar>& z) {
  if (colors.cols() != w.size() || semantic.cols() != w.size() || z.size() != w.size())
    throw std::domain_error("composite: length mismatch");
  RayRender<Scalar> r;
  r.weights = w;
  r.color = colors * w;
  r.semantic_color = semantic * w;
  r.depth = z.dot(w);
  r.weight_sum = w.sum();
  return r;
}

/// Ray weights from decoded SDF values at depths z.
template <typename Scalar>
VecX<Scalar> ray_weights(const VecX<Scalar>& sdf, const VecX<Scalar>& z, Scalar inv_s, Stage stage,
                         const RenderOptions& opt, Scalar far) {
  VecX<Scalar> sigma(sdf.size());
  for (Eigen::Index k = 0; k < sdf.size(); ++k) sigma(k) = render_density(sdf(k), inv_s, opt);
  const VecX<Scalar> dz = sample_spacing(z, far - (z.size() ? z(0) : Scalar(0)));
  const VecX<Scalar> wc = coarse_weights(sigma, dz);
  if (weight_mode_for(stage, opt) == WeightMode::kNeusStandard) return wc;
  return fine_weights(wc, sigma, dz, static_cast<Scalar>(opt.beta));
}

/// PR MLP densities as a sampler source.
template <typename Scalar>
DensitySource pr_density_source(const Field<Scalar>& field) {
  return [&field](const Eigen::Matrix3Xd& p) -> Eigen::VectorXd {
    return pr_density_batch(field, Mat3X<Scalar>(p.cast<Scalar>())).template cast<double>();
  };
}

/// Render densities of the decoded SDF as a sampler source.
template <typename Scalar>
DensitySource sdf_density_source(const Field<Scalar>& field, const RenderOptions& opt) {
  return [&field, opt](const Eigen::Matrix3Xd& p) -> Eigen::VectorXd {
    const VecX<Scalar> sdf = sdf_batch(field, Mat3X<Scalar>(p.cast<Scalar>()));
    const Scalar inv_s = field.decoders.inv_s();
    Eigen::VectorXd d(sdf.size());
    for (Eigen::Index i = 0; i < sdf.size(); ++i) d(i) = static_cast<double>(render_density(sdf(i), inv_s, opt));
    return d;
  };
}

template <typename Scalar>
SamplingTrace sample_ray(const Field<Scalar>& field, const Ray& ray, const SamplerConfig& cfg,
                         const RenderOptions& opt, std::mt19937_64& rng) {
  const DensitySource refine = sdf_density_source(field, opt);
  if (opt.prerender) return hierarchical_sample_trace(ray, pr_density_source(field), refine, cfg, rng);
  return plain_sample_trace(ray, refine, cfg, rng);
}

/// Sample, decode, weight and composite one ray. `ray` should already be clipped to the
/// field bounds.
template <typename Scalar>
RayRender<Scalar> render_ray(const Field<Scalar>& field, const Ray& ray, Stage stage, const SamplerConfig& cfg,
                             const RenderOptions& opt, std::mt19937_64& rng) {
  ray.validate();
  SamplerConfig c = cfg;
  c.score_final = false;
  const SamplingTrace trace = sample_ray(field, ray, c, opt, rng);
  const SampleLayer& fin = trace.layers.back();
  const Mat3X<Scalar> pos = fin.positions.cast<Scalar>();
  const Mat3X<Scalar> dirs = ray.direction.cast<Scalar>().replicate(1, pos.cols());
  const FieldOutputs<Scalar> out = decode_batch(field, pos, &dirs, true, true);
  VecX<Scalar> z(pos.cols());
  for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = static_cast<Scalar>(fin.depths[static_cast<std::size_t>(k)]);
  const VecX<Scalar> w =
      ray_weights(out.sdf, z, field.decoders.inv_s(), stage, opt, static_cast<Scalar>(ray.far));
  RayRender<Scalar> r = composite(w, out.color, out.semantic_color, z);
  r.stage = stage;
  r.sample_depths = fin.depths;
  return r;
}

}  // namespace presem
