#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "presem/geometry.hpp"

namespace presem {

struct SamplerConfig {
  int n_initial = 64;
  int n_per_layer = 32;
  int n_layers = 2;
  double lambda = 0.5;
  std::uint64_t seed = 0;
  bool jitter = true;
  /// Re-score the final merged layer. The trainer decodes those samples anyway and
  /// switches this off.
  bool score_final = true;

  void validate() const;
  int total_samples() const { return n_initial + n_layers * n_per_layer; }
};

struct SampleLayer {
  int layer_index = 0;
  std::vector<double> depths;     // strictly increasing
  std::vector<double> densities;  // same length as depths once scored
  Eigen::Matrix3Xd positions;

  std::size_t size() const { return depths.size(); }
};

/// Density of a batch of world positions (3xN) -> N nonnegative values.
using DensitySource = std::function<Eigen::VectorXd(const Eigen::Matrix3Xd&)>;

Eigen::Matrix3Xd ray_positions(const Ray& ray, const std::vector<double>& depths);

/// Stratified depths on [near, far] scored by `source` (the PR MLP in the full pipeline).
SampleLayer presample(const Ray& ray, const DensitySource& source, const SamplerConfig& cfg, std::mt19937_64& rng);

/// lambda * mean + (1 - lambda) * max.
double dynamic_threshold(const std::vector<double>& densities, double lambda);

struct FilterResult {
  std::vector<int> kept;    // indices into the layer
  std::vector<double> pdf;  // over kept, sums to 1
  bool fallback = false;    // nothing exceeded tau; kept the argmax alone
};

/// Keeps samples with density strictly above tau and normalizes their densities.
FilterResult filter_and_pdf(const SampleLayer& layer, double tau);

/// Stratum of sample j: from the midpoint with its predecessor to the midpoint with its
/// successor, closed by [near, far] at the ends.
std::pair<double, double> sample_stratum(const std::vector<double>& depths, int j, double near, double far);

/// Draws m depths (anchor by pdf, then uniform in the anchor's stratum) and returns them
/// merged with the layer's depths, sorted and strictly increasing.
std::vector<double> importance_resample(const SampleLayer& layer, const FilterResult& filter, int m, double near,
                                        double far, std::mt19937_64& rng);

/// Per-layer results of the progressive sampler; front() is the presample layer and
/// back() the final one.
struct SamplingTrace {
  std::vector<SampleLayer> layers;
  int fallbacks = 0;
};

/// Presample scored by `initial`, then n_layers rounds of threshold, filter and resample.
/// The first round uses the presample densities; later rounds re-score the merged depths
/// with `refine`.
SamplingTrace hierarchical_sample_trace(const Ray& ray, const DensitySource& initial, const DensitySource& refine,
                                        const SamplerConfig& cfg, std::mt19937_64& rng);

SampleLayer hierarchical_sample(const Ray& ray, const DensitySource& initial, const DensitySource& refine,
                                const SamplerConfig& cfg, std::mt19937_64& rng);

/// Sampler used when the pre-rendering stage is disabled: stratified samples scored by
/// `refine`, then one inverse-transform round over their volume-rendering weights with
/// the same total sample count as the progressive sampler.
SamplingTrace plain_sample_trace(const Ray& ray, const DensitySource& refine, const SamplerConfig& cfg,
                                 std::mt19937_64& rng);

}  // namespace presem
