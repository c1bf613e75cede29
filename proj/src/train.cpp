#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "presem/trainer.hpp"

namespace presem {

namespace {

constexpr std::uint64_t kInitStream = 0x696e697400000000ULL;
constexpr std::uint64_t kRenderStream = 0x72656e6465720000ULL;
constexpr const char* kCheckpointMagic = "presem-ckpt-v1";

bool any_semantic(const Dataset& ds) {
  for (const auto& f : ds.frames)
    if (f.semantic) return true;
  return false;
}

}  // namespace

EvaluationOptions evaluation_options(const TrainConfig& cfg, Stage stage, bool dataset_has_semantic) {
  EvaluationOptions eo;
  eo.coefficients = loss_coefficients(cfg.weights, stage);
  if (cfg.no_sg_mlp) eo.coefficients[term_index(LossTerm::kPr)] = 0.0;
  eo.render = cfg.render;
  eo.render.prerender = !cfg.no_sg_mlp;
  eo.render.beta = cfg.beta;
  eo.truncation = cfg.weights.truncation;
  eo.min_depth_weight = cfg.min_depth_weight;
  eo.gradient_step = cfg.field.gradient_step;
  eo.semantic = !cfg.no_semantic && dataset_has_semantic;
  return eo;
}

Field<double> initial_field(const TrainConfig& cfg, const Aabb& bounds) {
  FieldConfig fc = cfg.field;
  fc.voxel_sizes = cfg.coarse_voxel_sizes();
  Field<double> f(fc, bounds);
  SpherePrior prior;
  prior.center = bounds.center();
  prior.radius = cfg.prior_radius_fraction * 0.5 * bounds.extent().minCoeff();
  prior.inward = cfg.prior_inward;
  std::mt19937_64 rng(split_seed(cfg.seed, kInitStream));
  f.initialize(rng, prior);
  return f;
}

namespace {

template <typename Scalar>
TrainResult train_impl(const Dataset& ds, const TrainConfig& cfg, const ProgressFn& progress,
                       const std::string& failure_checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  const int threads = cfg.deterministic ? 1 : resolve_threads(cfg.threads);
  const bool semantic = any_semantic(ds);
  TrainConfig run_cfg = cfg;
  run_cfg.render.prerender = !cfg.no_sg_mlp;

  Field<Scalar> field = initial_field(cfg, ds.bounds).template cast<Scalar>();
  AdamState<Scalar> adam{field.zeros_like(), field.zeros_like(), 0};
  const std::array<double, 3> lr{cfg.lr_field, cfg.lr_pr, cfg.lr_semantic};

  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.total_iters));
  auto snapshot = [&](int iteration, Stage stage) {
    Checkpoint c;
    c.config = cfg;
    c.field = field.template cast<double>();
    c.iteration = iteration;
    c.stage = stage;
    c.intrinsics = ds.intrinsics;
    c.views = make_culling_views(ds);
    return c;
  };

  for (int it = 0; it < cfg.total_iters; ++it) {
    const Stage stage = stage_for(it, cfg.total_iters);
    if (it == cfg.total_iters / 2) {
      // carry the coarse features over to the fine lattices; moments start fresh
      field.grid = field.grid.resampled(cfg.fine_voxel_sizes);
      field.config.voxel_sizes = cfg.fine_voxel_sizes;
      adam = AdamState<Scalar>{field.zeros_like(), field.zeros_like(), 0};
    }
    const EvaluationOptions eo = evaluation_options(cfg, stage, semantic);
    try {
      const BatchPlan plan = make_plan(field, ds, run_cfg, it, stage, threads);
      Evaluation<Scalar> ev = evaluate_plan(field, plan, eo, threads);
      adam_step(field, ev.gradient, adam, lr);
      LossRecord rec{it, stage, ev.components, ev.total};
      result.history.push_back(rec);
      if (progress) progress(rec);
    } catch (const NumericalError& e) {
      if (!failure_checkpoint.empty()) save_checkpoint(snapshot(it, stage), failure_checkpoint);
      throw NumericalError("iteration " + std::to_string(it) + ": " + e.what());
    }
    field.check_finite();
  }
  result.checkpoint = snapshot(cfg.total_iters, Stage::kFine);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace

TrainResult train(const Dataset& ds, const TrainConfig& cfg, const ProgressFn& progress,
                  const std::string& failure_checkpoint) {
  cfg.validate();
  if (ds.frames.empty()) throw std::domain_error("train: dataset has no frames");
  bool any_depth = false;
  for (const auto& f : ds.frames) any_depth = any_depth || (f.depth.array() > 0.0f).any();
  if (!any_depth) throw std::domain_error("train: dataset has no valid depth");
  if (cfg.precision == Precision::kFloat32) return train_impl<float>(ds, cfg, progress, failure_checkpoint);
  return train_impl<double>(ds, cfg, progress, failure_checkpoint);
}

// ---------------------------------------------------------------------------------------
// History

void write_history_csv(const std::vector<LossRecord>& history, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "iteration,stage";
  for (const char* n : kLossTermNames) f << ',' << n;
  f << ",total\n";
  char buf[64];
  for (const auto& r : history) {
    f << r.iteration << ',' << stage_name(r.stage);
    for (double v : r.components) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      f << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.9g\n", r.total);
    f << buf;
  }
}

std::string history_json_line(const LossRecord& r) {
  nlohmann::json j;
  j["iteration"] = r.iteration;
  j["stage"] = stage_name(r.stage);
  for (std::size_t t = 0; t < kNumLossTerms; ++t) j["losses"][kLossTermNames[t]] = r.components[t];
  j["total"] = r.total;
  return j.dump();
}

// ---------------------------------------------------------------------------------------
// Culling views

std::vector<CullingView> make_culling_views(const Dataset& ds, long long max_pixels) {
  const auto& in = ds.intrinsics;
  const long long total = static_cast<long long>(in.width) * in.height * static_cast<long long>(ds.frames.size());
  int stride = 1;
  while (total / (static_cast<long long>(stride) * stride) > max_pixels) ++stride;
  std::vector<CullingView> views;
  for (const auto& f : ds.frames) {
    CullingView v;
    v.pose = f.pose;
    v.width = (in.width + stride - 1) / stride;
    v.height = (in.height + stride - 1) / stride;
    v.intrinsics = in;
    v.intrinsics.fx = in.fx / stride;
    v.intrinsics.fy = in.fy / stride;
    v.intrinsics.cx = in.cx / stride;
    v.intrinsics.cy = in.cy / stride;
    v.intrinsics.width = v.width;
    v.intrinsics.height = v.height;
    v.depth.resize(static_cast<std::size_t>(v.width) * v.height);
    for (int y = 0; y < v.height; ++y)
      for (int x = 0; x < v.width; ++x)
        v.depth[static_cast<std::size_t>(y * v.width + x)] = f.depth((y * stride) * in.width + x * stride);
    views.push_back(std::move(v));
  }
  return views;
}

// ---------------------------------------------------------------------------------------
// Checkpoints

namespace {

nlohmann::json intrinsics_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height},
          {"depth_scale", c.depth_scale}};
}

CameraIntrinsics intrinsics_from(const nlohmann::json& j) {
  CameraIntrinsics c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.width = j.at("width");
  c.height = j.at("height");
  c.depth_scale = j.at("depth_scale");
  return c;
}

nlohmann::json vec3_json(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  Field<double> field = ckpt.field;
  nlohmann::json h;
  h["config"] = format_train_config(ckpt.config);
  h["iteration"] = ckpt.iteration;
  h["stage"] = stage_name(ckpt.stage);
  h["bounds"] = {{"min", vec3_json(field.grid.bounds().min)}, {"max", vec3_json(field.grid.bounds().max)}};
  h["voxel_sizes"] = field.grid.voxel_sizes();
  h["intrinsics"] = intrinsics_json(ckpt.intrinsics);
  auto blocks = field.blocks();
  for (const auto& b : blocks) h["blocks"].push_back({{"name", b.name}, {"size", b.size}});
  h["views"] = nlohmann::json::array();
  for (const auto& v : ckpt.views) {
    std::vector<double> m(16);
    Eigen::Map<Eigen::Matrix4d>(m.data()) = v.pose.matrix();
    h["views"].push_back({{"pose", m}, {"intrinsics", intrinsics_json(v.intrinsics)}, {"width", v.width},
                          {"height", v.height}});
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint " + path);
  f << kCheckpointMagic << '\n' << h.dump() << '\n';
  for (const auto& b : blocks)
    f.write(reinterpret_cast<const char*>(b.data), static_cast<std::streamsize>(b.size * sizeof(double)));
  for (const auto& v : ckpt.views)
    f.write(reinterpret_cast<const char*>(v.depth.data()), static_cast<std::streamsize>(v.depth.size() * sizeof(float)));
  if (!f) throw DataError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint " + path);
  std::string magic, header;
  std::getline(f, magic);
  if (magic != kCheckpointMagic) throw DataError(path + ": not a checkpoint (bad magic)");
  std::getline(f, header);
  Checkpoint c;
  try {
    const auto h = nlohmann::json::parse(header);
    c.config = parse_train_config(h.at("config").get<std::string>());
    c.iteration = h.at("iteration");
    c.stage = h.at("stage").get<std::string>() == "coarse" ? Stage::kCoarse : Stage::kFine;
    Aabb box;
    for (int a = 0; a < 3; ++a) {
      box.min[a] = h.at("bounds").at("min").at(static_cast<std::size_t>(a));
      box.max[a] = h.at("bounds").at("max").at(static_cast<std::size_t>(a));
    }
    FieldConfig fc = c.config.field;
    fc.voxel_sizes = h.at("voxel_sizes").get<std::vector<double>>();
    c.field = Field<double>(fc, box);
    c.intrinsics = intrinsics_from(h.at("intrinsics"));
    auto blocks = c.field.blocks();
    const auto& hb = h.at("blocks");
    if (hb.size() != blocks.size()) throw DataError(path + ": block count mismatch");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      if (hb[i].at("name").get<std::string>() != blocks[i].name || hb[i].at("size").get<Eigen::Index>() != blocks[i].size)
        throw DataError(path + ": block " + blocks[i].name + " does not match the stored layout");
      f.read(reinterpret_cast<char*>(blocks[i].data), static_cast<std::streamsize>(blocks[i].size * sizeof(double)));
    }
    for (const auto& hv : h.at("views")) {
      CullingView v;
      const auto m = hv.at("pose").get<std::vector<double>>();
      v.pose = Pose::from_matrix(Eigen::Map<const Eigen::Matrix4d>(m.data()));
      v.intrinsics = intrinsics_from(hv.at("intrinsics"));
      v.width = hv.at("width");
      v.height = hv.at("height");
      v.depth.resize(static_cast<std::size_t>(v.width) * v.height);
      f.read(reinterpret_cast<char*>(v.depth.data()), static_cast<std::streamsize>(v.depth.size() * sizeof(float)));
      c.views.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": malformed checkpoint header (" + e.what() + ")");
  }
  if (!f) throw DataError(path + ": truncated checkpoint");
  return c;
}

// ---------------------------------------------------------------------------------------
// Rendering

RenderedFrame render_frame(const Checkpoint& ckpt, const CameraIntrinsics& intr, const Pose& pose, int threads) {
  intr.validate();
  const Field<double>& field = ckpt.field;
  SamplerConfig scfg = ckpt.config.sampler;
  scfg.jitter = false;
  RenderOptions ropt = ckpt.config.render;
  ropt.prerender = !ckpt.config.no_sg_mlp;
  ropt.beta = ckpt.config.beta;
  RenderedFrame out;
  out.width = intr.width;
  out.height = intr.height;
  const std::size_t n = static_cast<std::size_t>(intr.width) * intr.height;
  out.color = Image8{intr.width, intr.height, 3, std::vector<std::uint8_t>(3 * n, 0)};
  out.semantic = out.color;
  out.depth.assign(n, 0.0f);
  auto to8 = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  parallel_for(intr.height, threads, [&](int y) {
    for (int x = 0; x < intr.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * intr.width + x;
      const Ray raw = pixel_to_ray(intr, pose, x, y, 0.0, 1e6);
      const auto ray = clip_to_box(raw, field.grid.bounds(), ckpt.config.near_min);
      if (!ray || !(ray->far > ray->near)) continue;
      std::mt19937_64 rng(split_seed(ckpt.config.seed, kRenderStream, p));
      const auto r = render_ray(field, *ray, Stage::kFine, scfg, ropt, rng);
      for (int ch = 0; ch < 3; ++ch) {
        out.color.data[3 * p + static_cast<std::size_t>(ch)] = to8(r.color[ch]);
        out.semantic.data[3 * p + static_cast<std::size_t>(ch)] = to8(r.semantic_color[ch]);
      }
      if (r.weight_sum > 0.5) {
        const double cz = (pose.rotation.transpose() * raw.direction).z();
        out.depth[p] = static_cast<float>(r.depth / r.weight_sum * cz);
      }
    }
  });
  return out;
}

}  // namespace presem
