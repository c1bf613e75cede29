#include "presem/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace presem {

// ---------------------------------------------------------------------------------------
// Adam

template <typename Scalar>
void adam_update(Scalar* param, const Scalar* grad, Scalar* m, Scalar* v, Eigen::Index n, double lr, long long t,
                 const AdamHyper& h) {
  if (t < 1) throw std::domain_error("adam: step count must be >= 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<Scalar>(mi);
    v[i] = static_cast<Scalar>(vi);
    const double step = lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps);
    param[i] = static_cast<Scalar>(static_cast<double>(param[i]) - step);
  }
}

template <typename Scalar>
void adam_step(Field<Scalar>& params, Field<Scalar>& grads, AdamState<Scalar>& state, const std::array<double, 3>& lr,
               const AdamHyper& h) {
  auto p = params.blocks();
  auto g = grads.blocks();
  auto m = state.m.blocks();
  auto v = state.v.blocks();
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size())
    throw std::domain_error("adam: block layout mismatch");
  for (std::size_t b = 0; b < p.size(); ++b) {
    if (g[b].size != p[b].size || m[b].size != p[b].size || v[b].size != p[b].size)
      throw std::domain_error("adam: shape mismatch in block " + p[b].name);
    for (Eigen::Index i = 0; i < g[b].size; ++i)
      if (!std::isfinite(static_cast<double>(g[b].data[i])))
        throw NumericalError("non-finite gradient in " + p[b].name);
  }
  ++state.t;
  for (std::size_t b = 0; b < p.size(); ++b)
    adam_update(p[b].data, g[b].data, m[b].data, v[b].data, p[b].size, lr[static_cast<std::size_t>(p[b].group)],
                state.t, h);
}

// ---------------------------------------------------------------------------------------
// Batch planning

namespace {

constexpr std::uint64_t kRayStream = 0x7261790000000000ULL;
constexpr std::uint64_t kSmoothStream = 0x736d6f6f74680000ULL;

// Unit-direction depth D = z_axis / cos(angle to the optical axis).
double ray_depth(const Pose& pose, const Eigen::Vector3d& dir, double axis_depth) {
  const double cz = (pose.rotation.transpose() * dir).z();
  return cz > 0.0 ? axis_depth / cz : 0.0;
}

}  // namespace

template <typename Scalar>
BatchPlan make_plan(const Field<Scalar>& field, const Dataset& ds, const TrainConfig& cfg, int iteration, Stage stage,
                    int threads) {
  if (ds.frames.empty()) throw std::domain_error("make_plan: empty dataset");
  BatchPlan plan;
  plan.stage = stage;
  plan.rays.resize(static_cast<std::size_t>(cfg.rays_per_batch));
  const Aabb& bounds = field.grid.bounds();
  const double tr = cfg.weights.truncation;
  RenderOptions ropt = cfg.render;
  ropt.prerender = !cfg.no_sg_mlp;
  SamplerConfig scfg = cfg.sampler;
  scfg.score_final = false;
  const auto& intr = ds.intrinsics;
  const int npix = intr.width * intr.height;
  std::vector<int> fallbacks(plan.rays.size(), 0);

  parallel_for(cfg.rays_per_batch, threads, [&](int i) {
    std::mt19937_64 rng(split_seed(cfg.seed, kRayStream + static_cast<std::uint64_t>(iteration),
                                   static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<int> pick_frame(0, static_cast<int>(ds.frames.size()) - 1);
    std::uniform_int_distribution<int> pick_pixel(0, npix - 1);
    PlannedRay& pr = plan.rays[static_cast<std::size_t>(i)];
    for (int attempt = 0;; ++attempt) {
      const Frame& f = ds.frames[static_cast<std::size_t>(pick_frame(rng))];
      const int p = pick_pixel(rng);
      const Ray raw = pixel_to_ray(intr, f.pose, p % intr.width, p / intr.width, 0.0, 1e6);
      const auto clipped = clip_to_box(raw, bounds, cfg.near_min);
      if (!clipped || !(clipped->far > clipped->near)) {
        if (attempt > 64) throw std::domain_error("make_plan: camera rays miss the scene bounds");
        continue;
      }
      pr.ray = *clipped;
      pr.color = f.color.col(p);
      pr.has_semantic = f.semantic.has_value();
      pr.semantic = pr.has_semantic ? Eigen::Vector3f(f.semantic->col(p)) : Eigen::Vector3f::Zero();
      pr.depth = f.depth(p) > 0.0f ? ray_depth(f.pose, raw.direction, f.depth(p)) : 0.0;
      break;
    }
    const SamplingTrace trace = sample_ray(field, pr.ray, scfg, ropt, rng);
    fallbacks[static_cast<std::size_t>(i)] = trace.fallbacks;
    pr.samples = trace.layers.back().depths;

    const double D = pr.depth;
    if (D > 0.0) {
      if (!cfg.no_sg_mlp) {
        for (double z : trace.layers.front().depths)
          if (z < D - tr) pr.pr_samples.push_back(z);
        const double lo = std::max(D - tr, pr.ray.near), hi = std::min(D + tr, pr.ray.far);
        if (hi > lo) {
          std::uniform_real_distribution<double> u(lo, hi);
          for (int k = 0; k < cfg.pr_truncation_samples; ++k) pr.pr_samples.push_back(u(rng));
        }
        std::sort(pr.pr_samples.begin(), pr.pr_samples.end());
        pr.pr_samples.erase(std::unique(pr.pr_samples.begin(), pr.pr_samples.end()), pr.pr_samples.end());
      }
      std::vector<int> fs;
      for (std::size_t k = 0; k < pr.samples.size(); ++k)
        if (classify_sample(pr.samples[k], D, tr) == SampleRegion::kFreeSpace) fs.push_back(static_cast<int>(k));
      const std::size_t take = std::min(fs.size(), static_cast<std::size_t>(cfg.eikonal_per_ray));
      for (std::size_t k = 0; k < take; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, fs.size() - 1);
        std::swap(fs[k], fs[pick(rng)]);
      }
      pr.eikonal.assign(fs.begin(), fs.begin() + static_cast<std::ptrdiff_t>(take));
      std::sort(pr.eikonal.begin(), pr.eikonal.end());
    }
  });
  plan.sampler_fallbacks = std::accumulate(fallbacks.begin(), fallbacks.end(), 0);

  // near-surface points for the smoothness term, by rejection over the bounds
  const int want = cfg.smooth_points;
  if (want > 0) {
    std::mt19937_64 rng(split_seed(cfg.seed, kSmoothStream, static_cast<std::uint64_t>(iteration)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double delta = field.grid.finest_voxel();
    std::vector<Eigen::Vector3d> kept;
    const int candidates = std::max(4 * want, 1024);
    for (int round = 0; round < 8 && static_cast<int>(kept.size()) < want; ++round) {
      Eigen::Matrix3Xd pts(3, candidates);
      for (int c = 0; c < candidates; ++c)
        for (int a = 0; a < 3; ++a) pts(a, c) = bounds.min[a] + u01(rng) * (bounds.max[a] - bounds.min[a]);
      const VecX<Scalar> sdf = sdf_batch(field, Mat3X<Scalar>(pts.cast<Scalar>()));
      for (int c = 0; c < candidates && static_cast<int>(kept.size()) < want; ++c)
        if (std::abs(static_cast<double>(sdf(c))) < tr) kept.push_back(pts.col(c));
    }
    plan.smooth_points.resize(3, static_cast<Eigen::Index>(kept.size()));
    plan.smooth_offsets.resize(3, static_cast<Eigen::Index>(kept.size()));
    for (std::size_t k = 0; k < kept.size(); ++k) {
      Eigen::Vector3d d(gauss(rng), gauss(rng), gauss(rng));
      if (d.norm() < 1e-12) d = Eigen::Vector3d::UnitX();
      Eigen::Vector3d shifted = kept[k] + delta * d.normalized();
      shifted = shifted.cwiseMax(bounds.min).cwiseMin(bounds.max);
      plan.smooth_points.col(static_cast<Eigen::Index>(k)) = kept[k];
      plan.smooth_offsets.col(static_cast<Eigen::Index>(k)) = shifted - kept[k];
    }
    plan.smooth_noop = kept.empty();
  } else {
    plan.smooth_noop = true;
  }
  return plan;
}

// ---------------------------------------------------------------------------------------
// Evaluation

namespace {

template <typename Scalar>
Field<Scalar> decoder_gradient(const Field<Scalar>& field) {
  Field<Scalar> g;
  g.config = field.config;
  g.decoders = field.decoders;
  g.decoders.sdf.set_zero();
  g.decoders.rgb.set_zero();
  g.decoders.semantic.set_zero();
  g.decoders.pr.set_zero();
  g.decoders.log_inv_s = Scalar(0);
  return g;
}

// Finite-difference SDF gradients of a point set, with their reverse pass.
template <typename Scalar>
struct GradientBatch {
  Mat3X<Scalar> stencil;  // 3 x 6P
  Mat3X<Scalar> inv_step;
  Mat3X<Scalar> gradients;
  DecodeCache<Scalar> cache;

  void forward(const Field<Scalar>& field, const Mat3X<Scalar>& points, Scalar h, bool keep_cache) {
    const Eigen::Index n = points.cols();
    stencil.resize(3, 6 * n);
    inv_step.resize(3, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto st = gradient_stencil<Scalar>(points.col(i), h, field.grid.bounds());
      for (int k = 0; k < 6; ++k) stencil.col(6 * i + k) = st.points[static_cast<std::size_t>(k)];
      inv_step.col(i) = st.inv_step;
    }
    const VecX<Scalar> f = decode_batch(field, stencil, static_cast<const Mat3X<Scalar>*>(nullptr), false, false,
                                        keep_cache ? &cache : nullptr)
                               .sdf;
    gradients.resize(3, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) gradients(a, i) = (f(6 * i + 2 * a) - f(6 * i + 2 * a + 1)) * inv_step(a, i);
  }

  MatX<Scalar> backward(const Field<Scalar>& field, const Mat3X<Scalar>& dg, Field<Scalar>& grad) const {
    const Eigen::Index n = dg.cols();
    VecX<Scalar> dsdf(6 * n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) {
        dsdf(6 * i + 2 * a) = dg(a, i) * inv_step(a, i);
        dsdf(6 * i + 2 * a + 1) = -dg(a, i) * inv_step(a, i);
      }
    return decode_backward<Scalar>(field, cache, dsdf, nullptr, nullptr, grad);
  }
};

template <typename Scalar>
struct RayChunk {
  int first = 0, last = 0;  // global ray range

  // rendering samples, flat over the chunk's rays
  RayOffsets offsets;
  VecX<Scalar> z, dz, sigma, coarse, w;
  Mat3X<Scalar> positions;
  FieldOutputs<Scalar> out;
  DecodeCache<Scalar> cache;
  Mat3X<Scalar> color, semantic;
  VecX<Scalar> depth, weight_sum;

  // pre-rendering depth samples
  RayOffsets pr_offsets;
  VecX<Scalar> pr_z, pr_dz, pr_sigma;
  Mat3X<Scalar> pr_positions;
  PrCache<Scalar> pr_cache;
  VecX<Scalar> pr_depth;

  // Eikonal points
  RayOffsets eik_offsets;
  GradientBatch<Scalar> eik;

  // upstream gradients, filled by the serial loss pass
  Mat3X<Scalar> d_color, d_semantic;
  VecX<Scalar> d_depth, d_pr_depth, d_sdf_direct;
  Mat3X<Scalar> d_eik;

  Field<Scalar> grad;
  MatX<Scalar> dfeat_render, dfeat_eik;
};

template <typename Scalar>
struct SmoothChunk {
  Eigen::Index first = 0, last = 0;
  Mat3X<Scalar> points;  // base columns then shifted columns
  GradientBatch<Scalar> g;
  Mat3X<Scalar> d_grad;
  Field<Scalar> grad;
  MatX<Scalar> dfeat;
};

template <typename Scalar>
struct DensityPartials {
  Scalar sigma, dsdf, dinv_s;
};

template <typename Scalar>
DensityPartials<Scalar> density_partials(Scalar sdf, Scalar inv_s, const RenderOptions& opt) {
  const Scalar sgn = opt.sdf_positive_outside ? Scalar(-1) : Scalar(1);
  const Scalar phi = sigmoid(sgn * sdf * inv_s);
  const Scalar dphi = phi * (Scalar(1) - phi);
  if (opt.scale_density)
    return {inv_s * phi, inv_s * dphi * sgn * inv_s, phi + inv_s * dphi * sgn * sdf};
  return {phi, dphi * sgn * inv_s, dphi * sgn * sdf};
}

template <typename Scalar>
VecX<Scalar> to_vec(const std::vector<double>& v) {
  VecX<Scalar> out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = static_cast<Scalar>(v[i]);
  return out;
}

template <typename Scalar>
void forward_rays(const Field<Scalar>& field, const BatchPlan& plan, const EvaluationOptions& opt, Scalar h,
                  RayChunk<Scalar>& c) {
  const Scalar inv_s = field.decoders.inv_s();
  const WeightMode mode = weight_mode_for(plan.stage, opt.render);
  const int nr = c.last - c.first;
  c.offsets.assign(1, 0);
  c.pr_offsets.assign(1, 0);
  c.eik_offsets.assign(1, 0);
  for (int r = c.first; r < c.last; ++r) {
    const PlannedRay& pr = plan.rays[static_cast<std::size_t>(r)];
    c.offsets.push_back(c.offsets.back() + static_cast<Eigen::Index>(pr.samples.size()));
    c.pr_offsets.push_back(c.pr_offsets.back() + static_cast<Eigen::Index>(pr.pr_samples.size()));
    c.eik_offsets.push_back(c.eik_offsets.back() + static_cast<Eigen::Index>(pr.eikonal.size()));
  }
  const Eigen::Index n = c.offsets.back();
  c.z.resize(n);
  c.positions.resize(3, n);
  Mat3X<Scalar> dirs(3, n);
  const Eigen::Index ne = c.eik_offsets.back();
  Mat3X<Scalar> eik_points(3, ne);
  for (int i = 0; i < nr; ++i) {
    const PlannedRay& pr = plan.rays[static_cast<std::size_t>(c.first + i)];
    const Eigen::Index o = c.offsets[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < pr.samples.size(); ++k) {
      const Eigen::Index j = o + static_cast<Eigen::Index>(k);
      c.z(j) = static_cast<Scalar>(pr.samples[k]);
      c.positions.col(j) = pr.ray.at(pr.samples[k]).template cast<Scalar>();
      dirs.col(j) = pr.ray.direction.template cast<Scalar>();
    }
    const Eigen::Index eo = c.eik_offsets[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < pr.eikonal.size(); ++k)
      eik_points.col(eo + static_cast<Eigen::Index>(k)) =
          c.positions.col(o + pr.eikonal[k]);
  }
  c.out = decode_batch(field, c.positions, &dirs, true, opt.semantic, opt.want_gradient ? &c.cache : nullptr);

  c.dz.resize(n);
  c.sigma.resize(n);
  c.coarse.resize(n);
  c.w.resize(n);
  c.color = Mat3X<Scalar>::Zero(3, nr);
  c.semantic = Mat3X<Scalar>::Zero(3, nr);
  c.depth = VecX<Scalar>::Zero(nr);
  c.weight_sum = VecX<Scalar>::Zero(nr);
  for (int i = 0; i < nr; ++i) {
    const PlannedRay& pr = plan.rays[static_cast<std::size_t>(c.first + i)];
    const Eigen::Index o = c.offsets[static_cast<std::size_t>(i)];
    const Eigen::Index m = c.offsets[static_cast<std::size_t>(i) + 1] - o;
    if (m == 0) continue;
    VecX<Scalar> sig(m);
    for (Eigen::Index k = 0; k < m; ++k) sig(k) = density_partials(c.out.sdf(o + k), inv_s, opt.render).sigma;
    const VecX<Scalar> zz = c.z.segment(o, m);
    const VecX<Scalar> dz = sample_spacing<Scalar>(zz, static_cast<Scalar>(pr.ray.far - pr.ray.near));
    const VecX<Scalar> wc = coarse_weights(sig, dz);
    const VecX<Scalar> w =
        mode == WeightMode::kNeusStandard ? wc : fine_weights(wc, sig, dz, static_cast<Scalar>(opt.render.beta));
    c.sigma.segment(o, m) = sig;
    c.dz.segment(o, m) = dz;
    c.coarse.segment(o, m) = wc;
    c.w.segment(o, m) = w;
    c.color.col(i) = c.out.color.middleCols(o, m) * w;
    if (opt.semantic) c.semantic.col(i) = c.out.semantic_color.middleCols(o, m) * w;
    c.depth(i) = zz.dot(w);
    c.weight_sum(i) = w.sum();
  }

  // pre-rendering depth from PR densities
  const Eigen::Index np = c.pr_offsets.back();
  c.pr_z.resize(np);
  c.pr_positions.resize(3, np);
  for (int i = 0; i < nr; ++i) {
    const PlannedRay& pr = plan.rays[static_cast<std::size_t>(c.first + i)];
    const Eigen::Index o = c.pr_offsets[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < pr.pr_samples.size(); ++k) {
      c.pr_z(o + static_cast<Eigen::Index>(k)) = static_cast<Scalar>(pr.pr_samples[k]);
      c.pr_positions.col(o + static_cast<Eigen::Index>(k)) = pr.ray.at(pr.pr_samples[k]).template cast<Scalar>();
    }
  }
  c.pr_sigma = np > 0 ? pr_density_batch(field, c.pr_positions, opt.want_gradient ? &c.pr_cache : nullptr)
                      : VecX<Scalar>();
  c.pr_dz.resize(np);
  c.pr_depth = VecX<Scalar>::Zero(nr);
  for (int i = 0; i < nr; ++i) {
    const PlannedRay& pr = plan.rays[static_cast<std::size_t>(c.first + i)];
    const Eigen::Index o = c.pr_offsets[static_cast<std::size_t>(i)];
    const Eigen::Index m = c.pr_offsets[static_cast<std::size_t>(i) + 1] - o;
    if (m == 0) continue;
    const VecX<Scalar> zz = c.pr_z.segment(o, m);
    const VecX<Scalar> dz = sample_spacing<Scalar>(zz, static_cast<Scalar>(pr.ray.far - pr.ray.near));
    c.pr_dz.segment(o, m) = dz;
    c.pr_depth(i) = zz.dot(coarse_weights<Scalar>(c.pr_sigma.segment(o, m), dz));
  }

  c.eik.forward(field, eik_points, h, opt.want_gradient);
}

template <typename Scalar>
void backward_rays(const Field<Scalar>& field, const BatchPlan& plan, const EvaluationOptions& opt, RayChunk<Scalar>& c) {
  const Scalar inv_s = field.decoders.inv_s();
  const WeightMode mode = weight_mode_for(plan.stage, opt.render);
  const int nr = c.last - c.first;
  c.grad = decoder_gradient(field);
  const Eigen::Index n = c.offsets.back();
  VecX<Scalar> dsdf = c.d_sdf_direct;
  Mat3X<Scalar> dcolor = Mat3X<Scalar>::Zero(3, n);
  Mat3X<Scalar> dsem = Mat3X<Scalar>::Zero(3, n);
  Scalar dinv_s = Scalar(0);
  for (int i = 0; i < nr; ++i) {
    const Eigen::Index o = c.offsets[static_cast<std::size_t>(i)];
    const Eigen::Index m = c.offsets[static_cast<std::size_t>(i) + 1] - o;
    if (m == 0) continue;
    const Vec3<Scalar> gc = c.d_color.col(i);
    const Vec3<Scalar> gs = c.d_semantic.col(i);
    const Scalar gd = c.d_depth(i);
    if (gc.isZero() && gs.isZero() && gd == Scalar(0)) continue;
    VecX<Scalar> dw(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      dw(k) = gc.dot(c.out.color.col(o + k)) + gd * c.z(o + k);
      if (opt.semantic) dw(k) += gs.dot(c.out.semantic_color.col(o + k));
      dcolor.col(o + k) = c.w(o + k) * gc;
      if (opt.semantic) dsem.col(o + k) = c.w(o + k) * gs;
    }
    const VecX<Scalar> sig = c.sigma.segment(o, m);
    const VecX<Scalar> dz = c.dz.segment(o, m);
    VecX<Scalar> dsigma;
    if (mode == WeightMode::kNeusStandard) {
      dsigma = coarse_weights_vjp(sig, dz, dw);
    } else {
      const auto f = fine_weights_vjp<Scalar>(c.coarse.segment(o, m), sig, dz, static_cast<Scalar>(opt.render.beta), dw);
      dsigma = f.dsigma + coarse_weights_vjp(sig, dz, f.dcoarse);
    }
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto dp = density_partials(c.out.sdf(o + k), inv_s, opt.render);
      dsdf(o + k) += dsigma(k) * dp.dsdf;
      dinv_s += dsigma(k) * dp.dinv_s;
    }
  }
  c.grad.decoders.log_inv_s += dinv_s * inv_s;
  c.dfeat_render = n > 0 ? decode_backward<Scalar>(field, c.cache, dsdf, &dcolor, opt.semantic ? &dsem : nullptr, c.grad)
                         : MatX<Scalar>();

  const Eigen::Index np = c.pr_offsets.back();
  if (np > 0) {
    VecX<Scalar> dpr = VecX<Scalar>::Zero(np);
    for (int i = 0; i < nr; ++i) {
      const Eigen::Index o = c.pr_offsets[static_cast<std::size_t>(i)];
      const Eigen::Index m = c.pr_offsets[static_cast<std::size_t>(i) + 1] - o;
      if (m == 0 || c.d_pr_depth(i) == Scalar(0)) continue;
      const VecX<Scalar> dw = c.d_pr_depth(i) * c.pr_z.segment(o, m);
      dpr.segment(o, m) = coarse_weights_vjp<Scalar>(c.pr_sigma.segment(o, m), c.pr_dz.segment(o, m), dw);
    }
    pr_backward(field, c.pr_cache, dpr, c.grad);
  }

  c.dfeat_eik = c.d_eik.cols() > 0 ? c.eik.backward(field, c.d_eik, c.grad) : MatX<Scalar>();
}

template <typename Scalar>
void add_decoders(Field<Scalar>& dst, const Field<Scalar>& src) {
  auto add = [](Mlp<Scalar>& a, const Mlp<Scalar>& b) {
    for (std::size_t l = 0; l < a.layers().size(); ++l) {
      a.layers()[l].weight += b.layers()[l].weight;
      a.layers()[l].bias += b.layers()[l].bias;
    }
  };
  add(dst.decoders.sdf, src.decoders.sdf);
  add(dst.decoders.rgb, src.decoders.rgb);
  add(dst.decoders.semantic, src.decoders.semantic);
  add(dst.decoders.pr, src.decoders.pr);
  dst.decoders.log_inv_s += src.decoders.log_inv_s;
}

}  // namespace

template <typename Scalar>
Evaluation<Scalar> evaluate_plan(const Field<Scalar>& field, const BatchPlan& plan, const EvaluationOptions& opt,
                                 int threads) {
  field.check_finite();
  const int R = static_cast<int>(plan.rays.size());
  const Scalar h = static_cast<Scalar>(opt.gradient_step > 0.0 ? opt.gradient_step : field.gradient_step());
  const Scalar tr = static_cast<Scalar>(opt.truncation);
  const auto coef = [&](LossTerm t) { return static_cast<Scalar>(opt.coefficients[term_index(t)]); };

  std::vector<RayChunk<Scalar>> chunks(kEvaluationChunks);
  for (int k = 0; k < kEvaluationChunks; ++k) {
    chunks[static_cast<std::size_t>(k)].first = static_cast<int>(static_cast<long long>(R) * k / kEvaluationChunks);
    chunks[static_cast<std::size_t>(k)].last = static_cast<int>(static_cast<long long>(R) * (k + 1) / kEvaluationChunks);
  }
  const Eigen::Index S = plan.smooth_noop ? 0 : plan.smooth_points.cols();
  std::vector<SmoothChunk<Scalar>> schunks(kEvaluationChunks);
  for (int k = 0; k < kEvaluationChunks; ++k) {
    auto& s = schunks[static_cast<std::size_t>(k)];
    s.first = S * k / kEvaluationChunks;
    s.last = S * (k + 1) / kEvaluationChunks;
  }

  parallel_for(2 * kEvaluationChunks, threads, [&](int k) {
    if (k < kEvaluationChunks) {
      forward_rays(field, plan, opt, h, chunks[static_cast<std::size_t>(k)]);
      return;
    }
    auto& s = schunks[static_cast<std::size_t>(k - kEvaluationChunks)];
    const Eigen::Index m = s.last - s.first;
    s.points.resize(3, 2 * m);
    s.points.leftCols(m) = plan.smooth_points.middleCols(s.first, m).template cast<Scalar>();
    s.points.rightCols(m) =
        (plan.smooth_points.middleCols(s.first, m) + plan.smooth_offsets.middleCols(s.first, m)).template cast<Scalar>();
    s.g.forward(field, s.points, h, opt.want_gradient);
  });

  // serial loss pass over the whole batch
  Mat3X<Scalar> color(3, R), target(3, R), semantic(3, R), sem_target(3, R);
  VecX<Scalar> depth(R), wsum(R), sensor(R), pr_depth(R);
  std::vector<bool> has_sem(static_cast<std::size_t>(R)), pr_mask(static_cast<std::size_t>(R));
  RayOffsets offsets{0}, eik_groups{0};
  for (const auto& c : chunks) {
    for (int i = 0; i < c.last - c.first; ++i) {
      const int r = c.first + i;
      const PlannedRay& pr = plan.rays[static_cast<std::size_t>(r)];
      color.col(r) = c.color.col(i);
      semantic.col(r) = c.semantic.col(i);
      target.col(r) = pr.color.template cast<Scalar>();
      sem_target.col(r) = pr.semantic.template cast<Scalar>();
      depth(r) = c.depth(i);
      wsum(r) = c.weight_sum(i);
      sensor(r) = static_cast<Scalar>(pr.depth);
      pr_depth(r) = c.pr_depth(i);
      has_sem[static_cast<std::size_t>(r)] = pr.has_semantic;
      pr_mask[static_cast<std::size_t>(r)] = pr.depth > 0.0 && !pr.pr_samples.empty();
      offsets.push_back(offsets.back() + static_cast<Eigen::Index>(pr.samples.size()));
      eik_groups.push_back(eik_groups.back() + static_cast<Eigen::Index>(pr.eikonal.size()));
    }
  }
  VecX<Scalar> all_sdf(offsets.back()), all_z(offsets.back());
  Mat3X<Scalar> all_grads(3, eik_groups.back());
  {
    Eigen::Index o = 0, e = 0;
    for (const auto& c : chunks) {
      all_sdf.segment(o, c.out.sdf.size()) = c.out.sdf;
      all_z.segment(o, c.z.size()) = c.z;
      all_grads.middleCols(e, c.eik.gradients.cols()) = c.eik.gradients;
      o += c.out.sdf.size();
      e += c.eik.gradients.cols();
    }
  }
  Mat3X<Scalar> smooth_base(3, S), smooth_shift(3, S);
  for (const auto& s : schunks) {
    const Eigen::Index m = s.last - s.first;
    smooth_base.middleCols(s.first, m) = s.g.gradients.leftCols(m);
    smooth_shift.middleCols(s.first, m) = s.g.gradients.rightCols(m);
  }

  const std::vector<bool> dmask = depth_mask<Scalar>(sensor, wsum, static_cast<Scalar>(opt.min_depth_weight));
  std::vector<bool> sem_dmask(dmask.size());
  for (std::size_t i = 0; i < dmask.size(); ++i) sem_dmask[i] = dmask[i] && has_sem[i];

  Evaluation<Scalar> ev;
  auto record = [&](LossTerm t, Scalar value, bool noop) {
    ev.components[term_index(t)] = static_cast<double>(value);
    ev.noop[term_index(t)] = noop;
  };
  const auto l_rgb = loss_color<Scalar>(color, target);
  const auto l_depth = loss_depth<Scalar>(depth, sensor, dmask);
  const auto l_pr = loss_depth<Scalar>(pr_depth, sensor, pr_mask);
  const auto l_sdf = loss_sdf<Scalar>(all_sdf, all_z, offsets, sensor, tr);
  const auto l_fs = loss_fs<Scalar>(all_sdf, all_z, offsets, sensor, tr);
  const auto l_eik = loss_eikonal<Scalar>(all_grads, eik_groups);
  const auto l_smooth = loss_smooth<Scalar>(smooth_shift, smooth_base);
  record(LossTerm::kRgb, l_rgb.value, l_rgb.noop);
  record(LossTerm::kDepth, l_depth.value, l_depth.noop);
  record(LossTerm::kPr, l_pr.value, l_pr.noop);
  record(LossTerm::kSdf, l_sdf.value, l_sdf.noop);
  record(LossTerm::kFs, l_fs.value, l_fs.noop);
  record(LossTerm::kEikonal, l_eik.value, l_eik.noop);
  record(LossTerm::kSmooth, l_smooth.value, l_smooth.noop || plan.smooth_noop);
  Reduction<Scalar, Mat3X<Scalar>> l_sem_rgb;
  Reduction<Scalar, VecX<Scalar>> l_sem_d;
  if (opt.semantic) {
    l_sem_rgb = loss_color<Scalar>(semantic, sem_target, has_sem);
    l_sem_d = loss_depth<Scalar>(depth, sensor, sem_dmask);
  } else {
    l_sem_rgb.grad = Mat3X<Scalar>::Zero(3, R);
    l_sem_rgb.noop = true;
    l_sem_d.grad = VecX<Scalar>::Zero(R);
    l_sem_d.noop = true;
  }
  record(LossTerm::kSemRgb, l_sem_rgb.value, l_sem_rgb.noop);
  record(LossTerm::kSemDepth, l_sem_d.value, l_sem_d.noop);
  for (std::size_t t = 0; t < kNumLossTerms; ++t) ev.total += opt.coefficients[t] * ev.components[t];
  ev.mean_weight_sum = R > 0 ? static_cast<double>(wsum.mean()) : 0.0;
  if (!opt.want_gradient) return ev;
  if (!std::isfinite(ev.total)) throw NumericalError("non-finite loss");

  // distribute upstream gradients
  {
    Eigen::Index o = 0, e = 0;
    for (auto& c : chunks) {
      const int nr = c.last - c.first;
      c.d_color = coef(LossTerm::kRgb) * l_rgb.grad.middleCols(c.first, nr);
      c.d_semantic = coef(LossTerm::kSemRgb) * l_sem_rgb.grad.middleCols(c.first, nr);
      c.d_depth = coef(LossTerm::kDepth) * l_depth.grad.segment(c.first, nr) +
                  coef(LossTerm::kSemDepth) * l_sem_d.grad.segment(c.first, nr);
      c.d_pr_depth = coef(LossTerm::kPr) * l_pr.grad.segment(c.first, nr);
      const Eigen::Index n = c.out.sdf.size();
      c.d_sdf_direct = coef(LossTerm::kSdf) * l_sdf.grad.segment(o, n) + coef(LossTerm::kFs) * l_fs.grad.segment(o, n);
      c.d_eik = coef(LossTerm::kEikonal) * l_eik.grad.middleCols(e, c.eik.gradients.cols());
      o += n;
      e += c.eik.gradients.cols();
    }
    for (auto& s : schunks) {
      const Eigen::Index m = s.last - s.first;
      s.d_grad.resize(3, 2 * m);
      const Mat3X<Scalar> g = coef(LossTerm::kSmooth) * l_smooth.grad.middleCols(s.first, m);
      s.d_grad.leftCols(m) = -g;
      s.d_grad.rightCols(m) = g;
    }
  }

  parallel_for(2 * kEvaluationChunks, threads, [&](int k) {
    if (k < kEvaluationChunks) {
      backward_rays(field, plan, opt, chunks[static_cast<std::size_t>(k)]);
      return;
    }
    auto& s = schunks[static_cast<std::size_t>(k - kEvaluationChunks)];
    s.grad = decoder_gradient(field);
    if (s.points.cols() > 0) s.dfeat = s.g.backward(field, s.d_grad, s.grad);
  });

  // deterministic merge in chunk order
  ev.gradient = field.zeros_like();
  for (const auto& c : chunks) add_decoders(ev.gradient, c.grad);
  for (const auto& s : schunks) add_decoders(ev.gradient, s.grad);
  for (const auto& c : chunks) {
    if (c.dfeat_render.cols() > 0) scatter_feature_grads(field, c.positions, c.dfeat_render, ev.gradient);
    if (c.dfeat_eik.cols() > 0) scatter_feature_grads(field, c.eik.stencil, c.dfeat_eik, ev.gradient);
  }
  for (const auto& s : schunks)
    if (s.dfeat.cols() > 0) scatter_feature_grads(field, s.g.stencil, s.dfeat, ev.gradient);
  return ev;
}

#define PRESEM_INSTANTIATE(S)                                                                                   \
  template void adam_update<S>(S*, const S*, S*, S*, Eigen::Index, double, long long, const AdamHyper&);        \
  template void adam_step<S>(Field<S>&, Field<S>&, AdamState<S>&, const std::array<double, 3>&, const AdamHyper&); \
  template BatchPlan make_plan<S>(const Field<S>&, const Dataset&, const TrainConfig&, int, Stage, int);         \
  template Evaluation<S> evaluate_plan<S>(const Field<S>&, const BatchPlan&, const EvaluationOptions&, int);

PRESEM_INSTANTIATE(float)
PRESEM_INSTANTIATE(double)
#undef PRESEM_INSTANTIATE

}  // namespace presem
