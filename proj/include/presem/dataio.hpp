#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "presem/errors.hpp"
#include "presem/geometry.hpp"
#include "presem/mesh.hpp"

namespace presem {

/// Row-major interleaved 8-bit image.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> data;
};

/// Single-channel 16-bit image.
struct Image16 {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> data;
};

Image8 read_png8(const std::string& path);
Image16 read_png16(const std::string& path);
void write_png(const std::string& path, const Image8& img);
void write_png(const std::string& path, const Image16& img);

/// One RGB-D observation. Pixel p = y * width + x.
struct Frame {
  Pose pose;
  Eigen::Matrix3Xf color;                 // [0, 1]
  std::vector<std::uint16_t> depth_raw;   // sensor units, 0 = invalid
  Eigen::VectorXf depth;                  // meters along the optical axis, 0 = invalid
  std::optional<Eigen::Matrix3Xf> semantic;
};

struct Dataset {
  CameraIntrinsics intrinsics;
  std::vector<Frame> frames;
  Aabb bounds;
  std::string gt_mesh_path;  // empty when absent

  bool all_semantic() const;
};

/// Reads intrinsics.txt, poses.txt, rgb/, depth/ and optional semantic/ and gt_mesh.ply.
/// Throws DataError naming the offending file.
Dataset load_dataset(const std::string& dir);

/// Box around all back-projected valid depth points and camera centers.
Aabb compute_scene_bounds(const CameraIntrinsics& intr, const std::vector<Frame>& frames, double margin = 0.1);

/// Fixed 40-entry class palette (mirrored in data/palette.txt). Class ids outside
/// [0, 40) map to entry 0.
const std::array<std::array<std::uint8_t, 3>, 40>& semantic_palette();
std::array<std::uint8_t, 3> class_color(int semantic_class);

// ---------------------------------------------------------------------------------------
// Synthetic scenes

enum class PrimitiveKind { kBox, kSphere, kPlane };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kBox;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_extent = Eigen::Vector3d::Constant(0.1);  // box
  double radius = 0.1;                                            // sphere
  Eigen::Vector3d normal = Eigen::Vector3d::UnitY();              // plane, points to free space
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();        // box orientation
  Eigen::Vector3d albedo = Eigen::Vector3d::Constant(0.7);
  int semantic_class = 0;
};

enum class TrajectoryKind {
  kOrbit,  // cameras on a circle looking inward at look_at
  kRing,   // cameras on a circle looking outward
};

struct TrajectorySpec {
  TrajectoryKind kind = TrajectoryKind::kOrbit;
  int frames = 20;
  double radius = 0.6;
  double height = 0.0;           // camera height above look_at
  double pitch_amplitude = 0.15;  // radians, varies as sin(2 * angle)
  Eigen::Vector3d look_at = Eigen::Vector3d::Zero();
};

struct NoiseSpec {
  double noise_level = 0.0;      // multiplicative Gaussian sigma / z
  int holes_per_frame = 0;
  double hole_radius = 4.0;      // pixels, semi-major axis upper bound
  double grazing_threshold = 0.2;
  bool grazing_dropout = true;
};

struct SceneSpec {
  std::string name = "scene";
  Eigen::Vector3d room_extent = Eigen::Vector3d::Constant(2.0);  // 0 disables the room
  std::array<int, 3> room_classes{1, 2, 22};                     // wall, floor, ceiling
  Eigen::Vector3d room_albedo_wall{0.75, 0.7, 0.6};
  Eigen::Vector3d room_albedo_floor{0.45, 0.35, 0.3};
  Eigen::Vector3d room_albedo_ceiling{0.9, 0.9, 0.88};
  std::vector<Primitive> primitives;
  TrajectorySpec trajectory;
  NoiseSpec noise;
  CameraIntrinsics intrinsics;
  int gt_resolution = 160;

  void validate() const;
};

SceneSpec parse_scene_spec(const std::string& json_text);
SceneSpec load_scene_spec(const std::string& path);

/// Analytic scene: distance to the nearest surface (positive in free space) and the id of
/// the closest element (primitives by index; room faces -1..-6 for -x, +x, -y, +y, -z, +z).
class SceneSdf {
 public:
  explicit SceneSdf(SceneSpec spec);
  double operator()(const Eigen::Vector3d& p) const { return eval(p).first; }
  std::pair<double, int> eval(const Eigen::Vector3d& p) const;
  Eigen::Vector3d normal(const Eigen::Vector3d& p) const;
  Eigen::Vector3d albedo(int element) const;
  int semantic_class(int element) const;
  /// Room box, or the union of sphere and box extents when there is no room.
  Aabb bounds() const;
  const SceneSpec& spec() const { return spec_; }

 private:
  SceneSpec spec_;
};

/// Camera poses of the trajectory, centred on the room.
std::vector<Pose> trajectory_poses(const TrajectorySpec& t);

/// First hit along the ray by sphere tracing; nullopt on a miss.
std::optional<double> trace(const SceneSdf& sdf, const Ray& ray, int max_steps = 512);

/// Sensor reading for true axis depth z: multiplicative Gaussian noise then quantisation
/// to 1 / depth_scale. Returns 0 when the noisy value is not positive.
std::uint16_t sensor_depth(double z, double noise_level, double depth_scale, std::mt19937_64& rng);

struct SyntheticSummary {
  Dataset dataset;
  TriangleMesh gt_mesh;
};

/// Renders the scene and writes the dataset layout plus gt_mesh.ply into out_dir. Output
/// is byte-identical for a fixed seed regardless of the thread count.
SyntheticSummary generate_synthetic(const SceneSpec& spec, const std::string& out_dir, std::uint64_t seed,
                                    int threads = 0);

void write_dataset(const Dataset& ds, const std::string& dir);

}  // namespace presem
