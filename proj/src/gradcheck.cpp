#include <algorithm>
#include <cmath>

#include "presem/trainer.hpp"

namespace presem {

namespace {

struct Fixture {
  Field<double> field;
  BatchPlan plan;
};

Fixture make_fixture(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const Aabb box{Eigen::Vector3d::Zero(), Eigen::Vector3d::Ones()};
  // slightly above 1/(n-1) so that the lattice has exactly n nodes per axis
  const double v = (1.0 + 1e-9) / (opt.grid_nodes - 1);
  FieldConfig fc;
  fc.feature_dim = 4;
  fc.voxel_sizes = {v, 2.5 * v};
  fc.sdf_hidden = {opt.width, opt.width};
  fc.rgb_hidden = {opt.width};
  fc.pr_hidden = {opt.width};
  fc.semantic_hidden = {opt.width};
  fc.geo_feat_dim = 4;
  fc.pr_octaves = 2;
  fc.view_octaves = 2;
  fc.init_inv_s = 8.0;
  fc.init_feature_scale = 0.3;
  Fixture fx{Field<double>(fc, box), {}};
  fx.field.initialize(rng, SpherePrior{Eigen::Vector3d::Constant(0.5), 0.3, false});
  // break the passthrough wiring so that every decoder weight matters
  for (auto& l : fx.field.decoders.sdf.layers())
    for (Eigen::Index j = 0; j < l.weight.cols(); ++j)
      for (Eigen::Index i = 0; i < l.weight.rows(); ++i) l.weight(i, j) += 0.2 * (u01(rng) - 0.5);

  BatchPlan& plan = fx.plan;
  plan.stage = Stage::kFine;
  for (int r = 0; r < opt.rays; ++r) {
    PlannedRay pr;
    Ray ray;
    ray.origin = Eigen::Vector3d(0.1 + 0.8 * u01(rng), 0.1 + 0.8 * u01(rng), 0.1 + 0.8 * u01(rng));
    Eigen::Vector3d d(u01(rng) - 0.5, u01(rng) - 0.5, u01(rng) - 0.5);
    ray.direction = d.normalized();
    ray.far = 10.0;
    pr.ray = *clip_to_box(ray, box, 0.02);
    const double near = pr.ray.near, far = pr.ray.far;
    for (int k = 0; k < 24; ++k) pr.samples.push_back(near + (far - near) * u01(rng));
    std::sort(pr.samples.begin(), pr.samples.end());
    for (int k = 0; k < 10; ++k) pr.pr_samples.push_back(near + (far - near) * u01(rng));
    std::sort(pr.pr_samples.begin(), pr.pr_samples.end());
    pr.depth = near + (far - near) * (0.4 + 0.4 * u01(rng));
    for (int c = 0; c < 3; ++c) {
      pr.color[c] = static_cast<float>(u01(rng));
      pr.semantic[c] = static_cast<float>(u01(rng));
    }
    pr.has_semantic = r != 0;
    const double tr = 0.05;
    for (std::size_t k = 0; k < pr.samples.size() && pr.eikonal.size() < 4; ++k)
      if (classify_sample(pr.samples[k], pr.depth, tr) == SampleRegion::kFreeSpace) pr.eikonal.push_back(static_cast<int>(k));
    plan.rays.push_back(std::move(pr));
  }
  const int ns = 6;
  plan.smooth_points.resize(3, ns);
  plan.smooth_offsets.resize(3, ns);
  for (int i = 0; i < ns; ++i) {
    plan.smooth_points.col(i) = Eigen::Vector3d(0.2 + 0.6 * u01(rng), 0.2 + 0.6 * u01(rng), 0.2 + 0.6 * u01(rng));
    Eigen::Vector3d d(u01(rng) - 0.5, u01(rng) - 0.5, u01(rng) - 0.5);
    plan.smooth_offsets.col(i) = v * d.normalized();
  }
  return fx;
}

struct ParamRef {
  std::size_t block;
  Eigen::Index index;
};

GradcheckEntry check_term(Fixture& fx, const std::string& name, LossTerm term, Stage stage, double tol,
                          const GradcheckOptions& opt) {
  EvaluationOptions eo;
  eo.coefficients.fill(0.0);
  eo.coefficients[term_index(term)] = 1.0;
  eo.min_depth_weight = 0.0;
  eo.truncation = 0.05;
  fx.plan.stage = stage;
  Evaluation<double> ev = evaluate_plan(fx.field, fx.plan, eo, 1);

  auto pblocks = fx.field.blocks();
  auto gblocks = ev.gradient.blocks();
  std::vector<ParamRef> nonzero;
  double gmax = 0.0;
  for (std::size_t b = 0; b < gblocks.size(); ++b)
    for (Eigen::Index i = 0; i < gblocks[b].size; ++i) {
      const double g = gblocks[b].data[i];
      if (g != 0.0) nonzero.push_back({b, i});
      gmax = std::max(gmax, std::abs(g));
    }
  std::mt19937_64 rng(split_seed(opt.seed, term_index(term), static_cast<std::uint64_t>(stage)));
  std::shuffle(nonzero.begin(), nonzero.end(), rng);
  if (static_cast<int>(nonzero.size()) > opt.params) nonzero.resize(static_cast<std::size_t>(opt.params));

  GradcheckEntry e;
  e.term = name;
  e.tolerance = tol;
  EvaluationOptions fwd = eo;
  fwd.want_gradient = false;
  for (const auto& p : nonzero) {
    double& w = pblocks[p.block].data[p.index];
    const double w0 = w;
    const double h = 1e-5 * std::max(1.0, std::abs(w0));
    w = w0 + h;
    const double fp = evaluate_plan(fx.field, fx.plan, fwd, 1).total;
    w = w0 - h;
    const double fm = evaluate_plan(fx.field, fx.plan, fwd, 1).total;
    w = w0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = gblocks[p.block].data[p.index];
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6 * gmax});
    e.max_rel_error = std::max(e.max_rel_error, std::abs(analytic - numeric) / scale);
    ++e.checked;
  }
  e.passed = e.checked > 0 && e.max_rel_error <= tol;
  return e;
}

}  // namespace

GradcheckReport gradient_check(const GradcheckOptions& opt) {
  if (opt.grid_nodes < 3 || opt.width < 2 || opt.rays < 1 || opt.params < 1)
    throw std::domain_error("gradient_check: options out of range");
  Fixture fx = make_fixture(opt);
  GradcheckReport report;
  const auto add = [&](const std::string& name, LossTerm t, Stage s, double tol) {
    report.entries.push_back(check_term(fx, name, t, s, tol, opt));
    report.passed = report.passed && report.entries.back().passed;
  };
  for (std::size_t t = 0; t < kNumLossTerms; ++t) {
    const auto term = static_cast<LossTerm>(t);
    const bool double_difference = term == LossTerm::kEikonal || term == LossTerm::kSmooth;
    add(kLossTermNames[t], term, Stage::kFine, double_difference ? 1e-3 : 1e-4);
  }
  add("rgb_coarse", LossTerm::kRgb, Stage::kCoarse, 1e-4);
  add("depth_coarse", LossTerm::kDepth, Stage::kCoarse, 1e-4);
  return report;
}

}  // namespace presem
