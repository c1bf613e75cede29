#include "presem/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "presem/weights.hpp"

namespace presem {

void SamplerConfig::validate() const {
  if (n_initial < 1 || n_per_layer < 1) throw std::domain_error("sampler: sample counts must be >= 1");
  if (n_layers < 0) throw std::domain_error("sampler: n_layers must be >= 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::domain_error("sampler: lambda must lie in [0, 1]");
}

Eigen::Matrix3Xd ray_positions(const Ray& ray, const std::vector<double>& depths) {
  Eigen::Matrix3Xd p(3, static_cast<Eigen::Index>(depths.size()));
  for (std::size_t i = 0; i < depths.size(); ++i) p.col(static_cast<Eigen::Index>(i)) = ray.at(depths[i]);
  return p;
}

namespace {

void score(SampleLayer& layer, const Ray& ray, const DensitySource& source) {
  layer.positions = ray_positions(ray, layer.depths);
  const Eigen::VectorXd d = source(layer.positions);
  if (d.size() != layer.positions.cols()) throw std::domain_error("sampler: density source returned wrong count");
  layer.densities.assign(d.data(), d.data() + d.size());
  for (double& v : layer.densities) v = std::max(v, 0.0);
}

// Sorts and separates ties so the sequence is strictly increasing.
void sort_strict(std::vector<double>& z) {
  std::sort(z.begin(), z.end());
  for (std::size_t i = 1; i < z.size(); ++i)
    if (!(z[i] > z[i - 1])) z[i] = std::nextafter(z[i - 1], std::numeric_limits<double>::infinity());
}

}  // namespace

SampleLayer presample(const Ray& ray, const DensitySource& source, const SamplerConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  SampleLayer layer;
  layer.layer_index = 0;
  layer.depths = stratified_samples(ray, cfg.n_initial, rng, cfg.jitter);
  score(layer, ray, source);
  return layer;
}

double dynamic_threshold(const std::vector<double>& densities, double lambda) {
  if (densities.empty()) throw std::domain_error("dynamic_threshold: empty density list");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::domain_error("dynamic_threshold: lambda must lie in [0, 1]");
  const double mean = std::accumulate(densities.begin(), densities.end(), 0.0) / static_cast<double>(densities.size());
  const double mx = *std::max_element(densities.begin(), densities.end());
  // a convex combination evaluated in floating point can land just outside [mean, max]
  return std::clamp(lambda * mean + (1.0 - lambda) * mx, std::min(mean, mx), mx);
}

FilterResult filter_and_pdf(const SampleLayer& layer, double tau) {
  if (layer.densities.empty() || layer.densities.size() != layer.depths.size())
    throw std::domain_error("filter_and_pdf: layer is not scored");
  FilterResult r;
  for (std::size_t j = 0; j < layer.densities.size(); ++j)
    if (layer.densities[j] > tau) r.kept.push_back(static_cast<int>(j));
  if (r.kept.empty()) {
    const auto it = std::max_element(layer.densities.begin(), layer.densities.end());
    r.kept.push_back(static_cast<int>(it - layer.densities.begin()));
    r.pdf.push_back(1.0);
    r.fallback = true;
    return r;
  }
  double total = 0.0;
  for (int j : r.kept) total += layer.densities[static_cast<std::size_t>(j)];
  r.pdf.reserve(r.kept.size());
  for (int j : r.kept)
    r.pdf.push_back(total > 0.0 ? layer.densities[static_cast<std::size_t>(j)] / total
                                : 1.0 / static_cast<double>(r.kept.size()));
  return r;
}

std::pair<double, double> sample_stratum(const std::vector<double>& depths, int j, double near, double far) {
  const auto n = static_cast<int>(depths.size());
  const auto at = [&](int i) { return depths[static_cast<std::size_t>(i)]; };
  const double lo = j > 0 ? 0.5 * (at(j - 1) + at(j)) : near;
  const double hi = j + 1 < n ? 0.5 * (at(j) + at(j + 1)) : far;
  return {std::max(lo, near), std::min(hi, far)};
}

std::vector<double> importance_resample(const SampleLayer& layer, const FilterResult& filter, int m, double near,
                                        double far, std::mt19937_64& rng) {
  if (m < 1) throw std::domain_error("importance_resample: m must be >= 1");
  if (filter.kept.empty() || filter.kept.size() != filter.pdf.size())
    throw std::domain_error("importance_resample: invalid pdf");
  std::vector<double> cdf(filter.pdf.size());
  std::partial_sum(filter.pdf.begin(), filter.pdf.end(), cdf.begin());
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<double> out = layer.depths;
  out.reserve(layer.depths.size() + static_cast<std::size_t>(m));
  for (int s = 0; s < m; ++s) {
    const double u = u01(rng) * cdf.back();
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    const int anchor = filter.kept[static_cast<std::size_t>(it - cdf.begin())];
    const auto [lo, hi] = sample_stratum(layer.depths, anchor, near, far);
    out.push_back(std::clamp(lo + (hi - lo) * u01(rng), near, far));
  }
  sort_strict(out);
  return out;
}

SamplingTrace hierarchical_sample_trace(const Ray& ray, const DensitySource& initial, const DensitySource& refine,
                                        const SamplerConfig& cfg, std::mt19937_64& rng) {
  SamplingTrace trace;
  trace.layers.push_back(presample(ray, initial, cfg, rng));
  for (int k = 1; k <= cfg.n_layers; ++k) {
    SampleLayer& cur = trace.layers.back();
    if (cur.densities.empty()) score(cur, ray, refine);
    const double tau = dynamic_threshold(cur.densities, cfg.lambda);
    const FilterResult f = filter_and_pdf(cur, tau);
    trace.fallbacks += f.fallback ? 1 : 0;
    SampleLayer next;
    next.layer_index = k;
    next.depths = importance_resample(cur, f, cfg.n_per_layer, ray.near, ray.far, rng);
    trace.layers.push_back(std::move(next));
  }
  SampleLayer& last = trace.layers.back();
  if (last.densities.empty()) {
    if (cfg.score_final)
      score(last, ray, refine);
    else
      last.positions = ray_positions(ray, last.depths);
  }
  return trace;
}

SampleLayer hierarchical_sample(const Ray& ray, const DensitySource& initial, const DensitySource& refine,
                                const SamplerConfig& cfg, std::mt19937_64& rng) {
  return std::move(hierarchical_sample_trace(ray, initial, refine, cfg, rng).layers.back());
}

SamplingTrace plain_sample_trace(const Ray& ray, const DensitySource& refine, const SamplerConfig& cfg,
                                 std::mt19937_64& rng) {
  SamplingTrace trace;
  trace.layers.push_back(presample(ray, refine, cfg, rng));
  const int m = cfg.n_layers * cfg.n_per_layer;
  if (m > 0) {
    const SampleLayer& cur = trace.layers.front();
    const Eigen::Map<const Eigen::VectorXd> sigma(cur.densities.data(), static_cast<Eigen::Index>(cur.size()));
    const Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(cur.depths.data(), static_cast<Eigen::Index>(cur.size()));
    const Eigen::VectorXd w = coarse_weights<double>(sigma, sample_spacing<double>(z, ray.far - ray.near));
    FilterResult f;
    double total = 0.0;
    for (Eigen::Index j = 0; j < w.size(); ++j) total += w(j) + 1e-5;
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      f.kept.push_back(static_cast<int>(j));
      f.pdf.push_back((w(j) + 1e-5) / total);
    }
    SampleLayer next;
    next.layer_index = 1;
    next.depths = importance_resample(cur, f, m, ray.near, ray.far, rng);
    trace.layers.push_back(std::move(next));
  }
  SampleLayer& last = trace.layers.back();
  if (last.densities.empty()) {
    if (cfg.score_final)
      score(last, ray, refine);
    else
      last.positions = ray_positions(ray, last.depths);
  }
  return trace;
}

}  // namespace presem
