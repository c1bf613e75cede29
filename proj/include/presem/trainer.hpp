#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "presem/dataio.hpp"
#include "presem/field.hpp"
#include "presem/losses.hpp"
#include "presem/mesh.hpp"
#include "presem/parallel.hpp"
#include "presem/renderer.hpp"
#include "presem/sampler.hpp"

namespace presem {

enum class Precision { kFloat64, kFloat32 };

struct TrainConfig {
  int total_iters = 2000;
  int rays_per_batch = 1024;
  double lr_field = 1e-3;
  double lr_pr = 1e-3;
  double lr_semantic = 1e-3;
  std::vector<double> fine_voxel_sizes{0.03, 0.06, 0.24, 0.96};
  double coarse_factor = 10.0;
  double beta = 1.0;
  SamplerConfig sampler;
  LossWeights weights;
  FieldConfig field;
  RenderOptions render;
  std::uint64_t seed = 0;
  bool no_semantic = false;
  bool no_sg_mlp = false;
  Precision precision = Precision::kFloat64;

  /// Extra uniform samples in [D - tr, D + tr] for the pre-rendering depth term.
  int pr_truncation_samples = 8;
  /// Free-space samples per ray used by the Eikonal term.
  int eikonal_per_ray = 4;
  /// Near-surface points per batch for the smoothness term.
  int smooth_points = 256;
  /// Minimum accumulated weight for a ray to enter the depth terms.
  double min_depth_weight = 0.5;
  double near_min = 0.05;
  /// Sphere prior: radius as a fraction of the smallest half extent; inward for rooms.
  double prior_radius_fraction = 0.9;
  bool prior_inward = true;
  int threads = 0;  // 0 = hardware concurrency
  bool deterministic = false;
  int log_every = 50;

  void validate() const;
  std::vector<double> coarse_voxel_sizes() const;
};

/// Parses flat `key = value` text (comments start with '#'). Unknown keys throw.
TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
TrainConfig load_train_config(const std::string& path, TrainConfig base = {});
std::string format_train_config(const TrainConfig& cfg);

Stage stage_for(int iteration, int total);

struct GridPlan {
  std::vector<double> voxel_sizes;
  std::vector<LevelSpec> levels;
  bool collapsed = false;  // some level spans the whole scene on an axis
};

GridPlan grids_for_stage(const Aabb& bounds, const TrainConfig& cfg, Stage stage);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a contiguous block (t >= 1).
template <typename Scalar>
void adam_update(Scalar* param, const Scalar* grad, Scalar* m, Scalar* v, Eigen::Index n, double lr, long long t,
                 const AdamHyper& h = {});

template <typename Scalar>
struct AdamState {
  Field<Scalar> m;
  Field<Scalar> v;
  long long t = 0;
};

/// Adam over every parameter block; lr per ParamGroup (field, pr, semantic). Throws
/// NumericalError naming the first block with a non-finite gradient.
template <typename Scalar>
void adam_step(Field<Scalar>& params, Field<Scalar>& grads, AdamState<Scalar>& state,
               const std::array<double, 3>& lr, const AdamHyper& h = {});

// ---------------------------------------------------------------------------------------
// Batches

/// One training ray with its targets and frozen samples.
struct PlannedRay {
  Ray ray;
  Eigen::Vector3f color;
  Eigen::Vector3f semantic;
  bool has_semantic = false;
  double depth = 0.0;               // sensor distance along the ray, 0 = invalid
  std::vector<double> samples;      // render samples
  std::vector<double> pr_samples;   // pre-rendering depth term samples
  std::vector<int> eikonal;         // indices into samples
};

/// Everything random about one iteration. Evaluating a fixed plan is a deterministic,
/// differentiable function of the parameters.
struct BatchPlan {
  std::vector<PlannedRay> rays;
  Eigen::Matrix3Xd smooth_points;
  Eigen::Matrix3Xd smooth_offsets;
  Stage stage = Stage::kCoarse;
  int sampler_fallbacks = 0;
  bool smooth_noop = false;
};

struct EvaluationOptions {
  LossVector coefficients{};
  RenderOptions render;
  double truncation = 0.05;
  double min_depth_weight = 0.5;
  double gradient_step = 0.0;  // 0: half the finest voxel
  bool semantic = true;
  bool want_gradient = true;
};

template <typename Scalar>
struct Evaluation {
  LossVector components{};
  std::array<bool, kNumLossTerms> noop{};
  double total = 0.0;
  Field<Scalar> gradient;  // same layout as the field when requested
  double mean_weight_sum = 0.0;
};

/// Fixed chunking keeps the reduction order independent of the thread count.
inline constexpr int kEvaluationChunks = 8;

template <typename Scalar>
Evaluation<Scalar> evaluate_plan(const Field<Scalar>& field, const BatchPlan& plan, const EvaluationOptions& opt,
                                 int threads);

/// Options used by train() for one stage.
EvaluationOptions evaluation_options(const TrainConfig& cfg, Stage stage, bool dataset_has_semantic);

/// Sphere-initialized field on the coarse lattices.
Field<double> initial_field(const TrainConfig& cfg, const Aabb& bounds);

template <typename Scalar>
BatchPlan make_plan(const Field<Scalar>& field, const Dataset& ds, const TrainConfig& cfg, int iteration,
                    Stage stage, int threads);

// ---------------------------------------------------------------------------------------
// Training

struct LossRecord {
  int iteration = 0;
  Stage stage = Stage::kCoarse;
  LossVector components{};
  double total = 0.0;
};

/// Stored checkpoint (parameters always at 64-bit).
struct Checkpoint {
  TrainConfig config;
  Field<double> field;
  int iteration = 0;
  Stage stage = Stage::kFine;
  CameraIntrinsics intrinsics;
  std::vector<CullingView> views;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> history;
  double seconds = 0.0;
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Full PFPSMS schedule. Throws std::domain_error on an empty dataset and NumericalError
/// on a non-finite loss (parameters are left at the last finite state, and written to
/// `failure_checkpoint` when non-empty).
TrainResult train(const Dataset& ds, const TrainConfig& cfg, const ProgressFn& progress = {},
                  const std::string& failure_checkpoint = "");

void write_history_csv(const std::vector<LossRecord>& history, const std::string& path);
std::string history_json_line(const LossRecord& r);

/// Culling views from the dataset, depth maps subsampled so the total pixel count stays
/// below `max_pixels`.
std::vector<CullingView> make_culling_views(const Dataset& ds, long long max_pixels = 4'000'000);

// ---------------------------------------------------------------------------------------
// Gradient check

struct GradcheckEntry {
  std::string term;
  double max_rel_error = 0.0;
  double tolerance = 1e-4;
  int checked = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool passed = true;
};

struct GradcheckOptions {
  int grid_nodes = 8;    // per axis at the finest level
  int width = 16;        // MLP hidden width
  int rays = 6;
  int params = 64;
  std::uint64_t seed = 1;
};

GradcheckReport gradient_check(const GradcheckOptions& opt = {});

/// Renders a full frame: color, semantic and depth (meters along the optical axis, 0 where
/// the accumulated weight stays below one half).
struct RenderedFrame {
  Image8 color;
  Image8 semantic;
  std::vector<float> depth;
  int width = 0;
  int height = 0;
};

RenderedFrame render_frame(const Checkpoint& ckpt, const CameraIntrinsics& intr, const Pose& pose, int threads);

}  // namespace presem
