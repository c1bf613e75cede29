#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "presem/trainer.hpp"

namespace presem {

void TrainConfig::validate() const {
  if (total_iters < 2 || total_iters % 2 != 0) throw std::domain_error("total_iters must be even and >= 2");
  if (rays_per_batch < 1) throw std::domain_error("rays_per_batch must be >= 1");
  if (!(lr_field > 0.0 && lr_pr > 0.0 && lr_semantic > 0.0)) throw std::domain_error("learning rates must be positive");
  if (!(coarse_factor >= 1.0)) throw std::domain_error("coarse_factor must be >= 1");
  if (fine_voxel_sizes.empty()) throw std::domain_error("fine_voxel_sizes must not be empty");
  for (std::size_t i = 0; i < fine_voxel_sizes.size(); ++i) {
    if (!(fine_voxel_sizes[i] > 0.0)) throw std::domain_error("voxel sizes must be positive");
    if (i > 0 && !(fine_voxel_sizes[i] > fine_voxel_sizes[i - 1]))
      throw std::domain_error("voxel sizes must be strictly increasing");
  }
  if (!(beta >= 0.0)) throw std::domain_error("beta must be >= 0");
  sampler.validate();
  weights.validate();
  if (pr_truncation_samples < 1 || eikonal_per_ray < 0 || smooth_points < 0)
    throw std::domain_error("sample counts out of range");
  if (!(prior_radius_fraction > 0.0)) throw std::domain_error("prior_radius_fraction must be positive");
}

std::vector<double> TrainConfig::coarse_voxel_sizes() const {
  std::vector<double> v = fine_voxel_sizes;
  for (double& x : v) x *= coarse_factor;
  return v;
}

Stage stage_for(int iteration, int total) {
  if (total < 1 || iteration < 0 || iteration >= total)
    throw std::domain_error("stage_for: iteration " + std::to_string(iteration) + " outside [0, " +
                            std::to_string(total) + ")");
  return iteration < total / 2 ? Stage::kCoarse : Stage::kFine;
}

GridPlan grids_for_stage(const Aabb& bounds, const TrainConfig& cfg, Stage stage) {
  GridPlan p;
  p.voxel_sizes = stage == Stage::kFine ? cfg.fine_voxel_sizes : cfg.coarse_voxel_sizes();
  for (double v : p.voxel_sizes) {
    p.levels.push_back(make_level_spec(bounds, v));
    p.collapsed = p.collapsed || p.levels.back().collapsed;
  }
  return p;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>)
      s += fmt(xs[i]);
    else
      s += std::to_string(xs[i]);
  }
  return s;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

double parse_double(const std::string& v) {
  std::size_t pos = 0;
  const double d = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters in '" + v + "'");
  return d;
}

long long parse_int(const std::string& v) {
  std::size_t pos = 0;
  const long long i = std::stoll(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return i;
}

template <typename T>
std::vector<T> parse_list(const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    if constexpr (std::is_floating_point_v<T>)
      out.push_back(parse_double(item));
    else
      out.push_back(static_cast<T>(parse_int(item)));
  }
  return out;
}

struct Key {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define PRESEM_DOUBLE(name, field)                                                          \
  {                                                                                         \
    name, {                                                                                 \
      [](TrainConfig& c, const std::string& v) { c.field = parse_double(v); },             \
          [](const TrainConfig& c) { return fmt(c.field); }                                 \
    }                                                                                       \
  }
#define PRESEM_INT(name, field)                                                             \
  {                                                                                         \
    name, {                                                                                 \
      [](TrainConfig& c, const std::string& v) { c.field = static_cast<int>(parse_int(v)); }, \
          [](const TrainConfig& c) { return std::to_string(c.field); }                      \
    }                                                                                       \
  }
#define PRESEM_BOOL(name, field)                                                            \
  {                                                                                         \
    name, {                                                                                 \
      [](TrainConfig& c, const std::string& v) { c.field = parse_bool(v); },               \
          [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); }      \
    }                                                                                       \
  }
#define PRESEM_LIST(name, field, T)                                                         \
  {                                                                                         \
    name, {                                                                                 \
      [](TrainConfig& c, const std::string& v) { c.field = parse_list<T>(v); },            \
          [](const TrainConfig& c) { return join(c.field); }                                \
    }                                                                                       \
  }

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> k = {
      PRESEM_INT("total_iters", total_iters),
      PRESEM_INT("rays_per_batch", rays_per_batch),
      PRESEM_DOUBLE("lr_field", lr_field),
      PRESEM_DOUBLE("lr_pr", lr_pr),
      PRESEM_DOUBLE("lr_semantic", lr_semantic),
      PRESEM_LIST("fine_voxel_sizes", fine_voxel_sizes, double),
      PRESEM_DOUBLE("coarse_factor", coarse_factor),
      PRESEM_DOUBLE("beta", beta),
      {"seed",
       {[](TrainConfig& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(parse_int(v)); },
        [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      PRESEM_BOOL("no_semantic", no_semantic),
      PRESEM_BOOL("no_sg_mlp", no_sg_mlp),
      {"precision",
       {[](TrainConfig& c, const std::string& v) {
          if (v == "float64" || v == "double")
            c.precision = Precision::kFloat64;
          else if (v == "float32" || v == "float")
            c.precision = Precision::kFloat32;
          else
            throw std::invalid_argument("precision must be float64 or float32");
        },
        [](const TrainConfig& c) {
          return std::string(c.precision == Precision::kFloat64 ? "float64" : "float32");
        }}},
      PRESEM_INT("sampler.n_initial", sampler.n_initial),
      PRESEM_INT("sampler.n_per_layer", sampler.n_per_layer),
      PRESEM_INT("sampler.n_layers", sampler.n_layers),
      PRESEM_DOUBLE("sampler.lambda", sampler.lambda),
      PRESEM_BOOL("sampler.jitter", sampler.jitter),
      PRESEM_DOUBLE("loss.lambda_sg", weights.sg),
      PRESEM_DOUBLE("loss.lambda_sem", weights.sem),
      PRESEM_DOUBLE("loss.lambda_pr", weights.pr),
      PRESEM_DOUBLE("loss.lambda_rgb", weights.rgb),
      PRESEM_DOUBLE("loss.lambda_d", weights.depth),
      PRESEM_DOUBLE("loss.lambda_sdf", weights.sdf),
      PRESEM_DOUBLE("loss.lambda_fs", weights.fs),
      PRESEM_DOUBLE("loss.lambda_eik", weights.eik),
      PRESEM_DOUBLE("loss.lambda_smooth", weights.smooth),
      PRESEM_DOUBLE("loss.lambda_sem_rgb", weights.sem_rgb),
      PRESEM_DOUBLE("loss.lambda_sem_d", weights.sem_depth),
      PRESEM_DOUBLE("loss.lambda_model", weights.model),
      PRESEM_DOUBLE("loss.truncation", weights.truncation),
      PRESEM_INT("field.feature_dim", field.feature_dim),
      PRESEM_LIST("field.sdf_hidden", field.sdf_hidden, int),
      PRESEM_LIST("field.rgb_hidden", field.rgb_hidden, int),
      PRESEM_LIST("field.pr_hidden", field.pr_hidden, int),
      PRESEM_LIST("field.semantic_hidden", field.semantic_hidden, int),
      PRESEM_INT("field.geo_feat_dim", field.geo_feat_dim),
      PRESEM_INT("field.pr_octaves", field.pr_octaves),
      PRESEM_INT("field.view_octaves", field.view_octaves),
      PRESEM_BOOL("field.encode_include_raw", field.encode_include_raw),
      PRESEM_DOUBLE("field.hidden_beta", field.hidden_beta),
      PRESEM_DOUBLE("field.init_inv_s", field.init_inv_s),
      PRESEM_DOUBLE("field.init_feature_scale", field.init_feature_scale),
      PRESEM_DOUBLE("field.gradient_step", field.gradient_step),
      PRESEM_BOOL("render.sdf_positive_outside", render.sdf_positive_outside),
      PRESEM_BOOL("render.force_neus_standard", render.force_neus_standard),
      PRESEM_BOOL("render.scale_density", render.scale_density),
      PRESEM_INT("pr_truncation_samples", pr_truncation_samples),
      PRESEM_INT("eikonal_per_ray", eikonal_per_ray),
      PRESEM_INT("smooth_points", smooth_points),
      PRESEM_DOUBLE("min_depth_weight", min_depth_weight),
      PRESEM_DOUBLE("near_min", near_min),
      PRESEM_DOUBLE("prior_radius_fraction", prior_radius_fraction),
      PRESEM_BOOL("prior_inward", prior_inward),
      PRESEM_INT("threads", threads),
      PRESEM_BOOL("deterministic", deterministic),
      PRESEM_INT("log_every", log_every),
  };
  return k;
}

#undef PRESEM_DOUBLE
#undef PRESEM_INT
#undef PRESEM_BOOL
#undef PRESEM_LIST

}  // namespace

TrainConfig parse_train_config(const std::string& text, TrainConfig cfg) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("config line " + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto i = s.find_first_not_of(" \t\r");
      const auto j = s.find_last_not_of(" \t\r");
      return i == std::string::npos ? std::string() : s.substr(i, j - i + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    // a bare lr sets all three groups
    if (key == "lr") {
      cfg.lr_field = cfg.lr_pr = cfg.lr_semantic = parse_double(value);
      continue;
    }
    const auto it = keys().find(key);
    if (it == keys().end()) throw DataError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->second.set(cfg, value);
    } catch (const std::exception& e) {
      throw DataError("config line " + std::to_string(lineno) + " (" + key + "): " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_train_config(const std::string& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_train_config(ss.str(), std::move(base));
}

std::string format_train_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [name, key] : keys()) out += name + " = " + key.get(cfg) + "\n";
  return out;
}

}  // namespace presem
