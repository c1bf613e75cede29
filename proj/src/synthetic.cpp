#include <Eigen/Geometry>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "presem/dataio.hpp"
#include "presem/parallel.hpp"

namespace presem {

namespace {

using nlohmann::json;

constexpr std::uint64_t kNoiseStream = 0x6e6f697365000000ULL;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw DataError("scene spec: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw DataError("scene spec: unknown key '" + it.key() + "' in " + where);
  }
}

Eigen::Vector3d vec3(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw DataError("scene spec: " + what + " must be a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

Primitive parse_primitive(const json& j, std::size_t index) {
  const std::string where = "primitives[" + std::to_string(index) + "]";
  check_keys(j, {"type", "center", "half_extent", "radius", "normal", "rotation_deg", "albedo", "class"}, where);
  Primitive p;
  const std::string type = j.at("type").get<std::string>();
  if (type == "box")
    p.kind = PrimitiveKind::kBox;
  else if (type == "sphere")
    p.kind = PrimitiveKind::kSphere;
  else if (type == "plane")
    p.kind = PrimitiveKind::kPlane;
  else
    throw DataError("scene spec: " + where + " has unknown type '" + type + "'");
  if (j.contains("center")) p.center = vec3(j["center"], where + ".center");
  if (j.contains("half_extent")) p.half_extent = vec3(j["half_extent"], where + ".half_extent");
  if (j.contains("radius")) p.radius = j["radius"].get<double>();
  if (j.contains("normal")) p.normal = vec3(j["normal"], where + ".normal").normalized();
  if (j.contains("rotation_deg")) {
    const Eigen::Vector3d r = vec3(j["rotation_deg"], where + ".rotation_deg") * (kPi / 180.0);
    p.rotation = (Eigen::AngleAxisd(r.z(), Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(r.y(), Eigen::Vector3d::UnitY()) *
                  Eigen::AngleAxisd(r.x(), Eigen::Vector3d::UnitX()))
                     .toRotationMatrix();
  }
  if (j.contains("albedo")) p.albedo = vec3(j["albedo"], where + ".albedo");
  if (j.contains("class")) p.semantic_class = j["class"].get<int>();
  return p;
}

}  // namespace

void SceneSpec::validate() const {
  const auto fail = [](const std::string& m) { throw std::domain_error("scene spec: " + m); };
  if (primitives.empty() && !(room_extent.array() > 0.0).all()) fail("needs at least one primitive or a room");
  if ((room_extent.array() < 0.0).any()) fail("room extent must be non-negative");
  if (trajectory.frames < 1) fail("frame count must be >= 1");
  if (!(trajectory.radius >= 0.0)) fail("trajectory radius must be non-negative");
  if (trajectory.radius == 0.0 && trajectory.height == 0.0) fail("cameras would sit on look_at");
  if (!(noise.noise_level >= 0.0)) fail("noise level must be non-negative");
  if (noise.holes_per_frame < 0) fail("holes_per_frame must be non-negative");
  if (!(noise.hole_radius >= 1.0)) fail("hole_radius must be >= 1 pixel");
  if (gt_resolution < 8) fail("gt_resolution must be >= 8");
  intrinsics.validate();
  for (const auto& p : primitives) {
    if (p.kind == PrimitiveKind::kSphere && !(p.radius > 0.0)) fail("sphere radius must be positive");
    if (p.kind == PrimitiveKind::kBox && !(p.half_extent.array() > 0.0).all()) fail("box half extents must be positive");
    if ((p.albedo.array() < 0.0).any() || (p.albedo.array() > 1.0).any()) fail("albedo must lie in [0, 1]");
  }
}

SceneSpec parse_scene_spec(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("scene spec: ") + e.what());
  }
  SceneSpec s;
  try {
    check_keys(j, {"name", "room", "primitives", "trajectory", "noise", "camera", "gt_resolution"}, "scene");
    if (j.contains("name")) s.name = j["name"].get<std::string>();
    if (j.contains("room")) {
      const json& r = j["room"];
      if (r.is_null()) {
        s.room_extent.setZero();
      } else {
        check_keys(r, {"extent", "classes", "albedo_wall", "albedo_floor", "albedo_ceiling"}, "room");
        if (r.contains("extent")) s.room_extent = vec3(r["extent"], "room.extent");
        if (r.contains("classes")) {
          const Eigen::Vector3d c = vec3(r["classes"], "room.classes");
          for (int k = 0; k < 3; ++k) s.room_classes[static_cast<std::size_t>(k)] = static_cast<int>(c(k));
        }
        if (r.contains("albedo_wall")) s.room_albedo_wall = vec3(r["albedo_wall"], "room.albedo_wall");
        if (r.contains("albedo_floor")) s.room_albedo_floor = vec3(r["albedo_floor"], "room.albedo_floor");
        if (r.contains("albedo_ceiling")) s.room_albedo_ceiling = vec3(r["albedo_ceiling"], "room.albedo_ceiling");
      }
    }
    if (j.contains("primitives"))
      for (std::size_t i = 0; i < j["primitives"].size(); ++i) s.primitives.push_back(parse_primitive(j["primitives"][i], i));
    if (j.contains("trajectory")) {
      const json& t = j["trajectory"];
      check_keys(t, {"kind", "frames", "radius", "height", "pitch_amplitude", "look_at"}, "trajectory");
      if (t.contains("kind")) {
        const std::string k = t["kind"].get<std::string>();
        if (k == "orbit")
          s.trajectory.kind = TrajectoryKind::kOrbit;
        else if (k == "ring")
          s.trajectory.kind = TrajectoryKind::kRing;
        else
          throw DataError("scene spec: trajectory kind must be 'orbit' or 'ring'");
      }
      if (t.contains("frames")) s.trajectory.frames = t["frames"].get<int>();
      if (t.contains("radius")) s.trajectory.radius = t["radius"].get<double>();
      if (t.contains("height")) s.trajectory.height = t["height"].get<double>();
      if (t.contains("pitch_amplitude")) s.trajectory.pitch_amplitude = t["pitch_amplitude"].get<double>();
      if (t.contains("look_at")) s.trajectory.look_at = vec3(t["look_at"], "trajectory.look_at");
    }
    if (j.contains("noise")) {
      const json& n = j["noise"];
      check_keys(n, {"level", "holes_per_frame", "hole_radius", "grazing_threshold", "grazing_dropout"}, "noise");
      if (n.contains("level")) s.noise.noise_level = n["level"].get<double>();
      if (n.contains("holes_per_frame")) s.noise.holes_per_frame = n["holes_per_frame"].get<int>();
      if (n.contains("hole_radius")) s.noise.hole_radius = n["hole_radius"].get<double>();
      if (n.contains("grazing_threshold")) s.noise.grazing_threshold = n["grazing_threshold"].get<double>();
      if (n.contains("grazing_dropout")) s.noise.grazing_dropout = n["grazing_dropout"].get<bool>();
    }
    if (j.contains("camera")) {
      const json& c = j["camera"];
      check_keys(c, {"fx", "fy", "cx", "cy", "width", "height", "depth_scale"}, "camera");
      CameraIntrinsics& in = s.intrinsics;
      in.fx = c.at("fx").get<double>();
      in.fy = c.at("fy").get<double>();
      in.cx = c.at("cx").get<double>();
      in.cy = c.at("cy").get<double>();
      in.width = c.at("width").get<int>();
      in.height = c.at("height").get<int>();
      if (c.contains("depth_scale")) in.depth_scale = c["depth_scale"].get<double>();
    } else {
      s.intrinsics = CameraIntrinsics{160.0, 160.0, 80.0, 60.0, 160, 120, 1000.0};
    }
    if (j.contains("gt_resolution")) s.gt_resolution = j["gt_resolution"].get<int>();
  } catch (const json::exception& e) {
    throw DataError(std::string("scene spec: ") + e.what());
  }
  try {
    s.validate();
  } catch (const std::domain_error& e) {
    throw DataError(e.what());
  }
  return s;
}

SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read scene spec " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_scene_spec(ss.str());
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------------------
// analytic scene

SceneSdf::SceneSdf(SceneSpec spec) : spec_(std::move(spec)) {}

std::pair<double, int> SceneSdf::eval(const Eigen::Vector3d& p) const {
  double best = std::numeric_limits<double>::infinity();
  int id = 0;
  if ((spec_.room_extent.array() > 0.0).all()) {
    const Eigen::Vector3d h = 0.5 * spec_.room_extent;
    for (int d = 0; d < 3; ++d) {
      const double lo = p(d) + h(d), hi = h(d) - p(d);
      if (lo < best) best = lo, id = -(2 * d + 1);
      if (hi < best) best = hi, id = -(2 * d + 2);
    }
  }
  for (std::size_t i = 0; i < spec_.primitives.size(); ++i) {
    const Primitive& q = spec_.primitives[i];
    double d = 0.0;
    switch (q.kind) {
      case PrimitiveKind::kSphere:
        d = (p - q.center).norm() - q.radius;
        break;
      case PrimitiveKind::kPlane:
        d = q.normal.dot(p - q.center);
        break;
      case PrimitiveKind::kBox: {
        const Eigen::Vector3d e = (q.rotation.transpose() * (p - q.center)).cwiseAbs() - q.half_extent;
        d = e.cwiseMax(0.0).norm() + std::min(e.maxCoeff(), 0.0);
        break;
      }
    }
    if (d < best) best = d, id = static_cast<int>(i);
  }
  return {best, id};
}

Eigen::Vector3d SceneSdf::normal(const Eigen::Vector3d& p) const {
  // the gradient of the closest element, so edges keep flat faces
  const int id = eval(p).second;
  if (id < 0) {
    const int axis = (-id - 1) / 2;
    Eigen::Vector3d n = Eigen::Vector3d::Zero();
    n(axis) = (-id - 1) % 2 == 0 ? 1.0 : -1.0;
    return n;
  }
  const Primitive& q = spec_.primitives[static_cast<std::size_t>(id)];
  switch (q.kind) {
    case PrimitiveKind::kSphere:
      return (p - q.center).normalized();
    case PrimitiveKind::kPlane:
      return q.normal;
    case PrimitiveKind::kBox: {
      const Eigen::Vector3d local = q.rotation.transpose() * (p - q.center);
      const Eigen::Vector3d e = local.cwiseAbs() - q.half_extent;
      int axis;
      e.maxCoeff(&axis);
      Eigen::Vector3d n = Eigen::Vector3d::Zero();
      n(axis) = local(axis) >= 0.0 ? 1.0 : -1.0;
      return q.rotation * n;
    }
  }
  return Eigen::Vector3d::UnitZ();
}

Eigen::Vector3d SceneSdf::albedo(int element) const {
  if (element >= 0) return spec_.primitives.at(static_cast<std::size_t>(element)).albedo;
  if (element == -3) return spec_.room_albedo_floor;
  if (element == -4) return spec_.room_albedo_ceiling;
  return spec_.room_albedo_wall;
}

int SceneSdf::semantic_class(int element) const {
  if (element >= 0) return spec_.primitives.at(static_cast<std::size_t>(element)).semantic_class;
  if (element == -3) return spec_.room_classes[1];
  if (element == -4) return spec_.room_classes[2];
  return spec_.room_classes[0];
}

Aabb SceneSdf::bounds() const {
  if ((spec_.room_extent.array() > 0.0).all()) return {-0.5 * spec_.room_extent, 0.5 * spec_.room_extent};
  Aabb b{Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity()),
         Eigen::Vector3d::Constant(-std::numeric_limits<double>::infinity())};
  for (const auto& q : spec_.primitives) {
    Eigen::Vector3d r;
    if (q.kind == PrimitiveKind::kSphere)
      r.setConstant(q.radius);
    else if (q.kind == PrimitiveKind::kBox)
      r = q.rotation.cwiseAbs() * q.half_extent;
    else
      continue;
    b.min = b.min.cwiseMin(q.center - r);
    b.max = b.max.cwiseMax(q.center + r);
  }
  if (!(b.max.array() >= b.min.array()).all()) throw std::domain_error("scene has no bounded geometry");
  return b;
}

std::vector<Pose> trajectory_poses(const TrajectorySpec& t) {
  std::vector<Pose> poses;
  for (int i = 0; i < t.frames; ++i) {
    const double a = 2.0 * kPi * i / t.frames;
    const Eigen::Vector3d h(std::cos(a), 0.0, std::sin(a));
    const Eigen::Vector3d eye = t.look_at + t.radius * h + Eigen::Vector3d(0.0, t.height, 0.0);
    // orbit cameras face look_at; ring cameras face away from it at the same tilt
    const Eigen::Vector3d to_center = (t.look_at - eye).normalized();
    const Eigen::Vector3d forward =
        t.kind == TrajectoryKind::kOrbit ? to_center : Eigen::Vector3d(-to_center.x(), to_center.y(), -to_center.z());
    const double pitch = t.pitch_amplitude * std::sin(2.0 * a);
    const Eigen::Vector3d side = forward.cross(Eigen::Vector3d::UnitY()).normalized();
    const Eigen::Vector3d dir = Eigen::AngleAxisd(pitch, side) * forward;
    poses.push_back(look_at(eye, eye + dir));
  }
  return poses;
}

std::optional<double> trace(const SceneSdf& sdf, const Ray& ray, int max_steps) {
  double t = ray.near;
  double d = 0.0;
  for (int step = 0; step < max_steps && t <= ray.far; ++step) {
    d = sdf(ray.at(t));
    if (d < 1e-7 + 1e-7 * t) return t;
    t += d;
  }
  if (t <= ray.far && d < 1e-4) return t;
  return std::nullopt;
}

std::uint16_t sensor_depth(double z, double noise_level, double depth_scale, std::mt19937_64& rng) {
  double noisy = z;
  if (noise_level > 0.0) noisy = z * (1.0 + noise_level * std::normal_distribution<double>(0.0, 1.0)(rng));
  if (!(noisy > 0.0)) return 0;
  const long raw = std::lround(noisy * depth_scale);
  return raw <= 0 || raw > 65535 ? 0 : static_cast<std::uint16_t>(raw);
}

// ---------------------------------------------------------------------------------------

namespace {

Frame render_synthetic_frame(const SceneSdf& sdf, const SceneSpec& spec, const Pose& pose, std::mt19937_64& rng) {
  const CameraIntrinsics& in = spec.intrinsics;
  const Eigen::Index n = static_cast<Eigen::Index>(in.width) * in.height;
  const double far = 4.0 * sdf.bounds().extent().norm() + 10.0;
  Frame fr;
  fr.pose = pose;
  fr.color.setZero(3, n);
  fr.semantic = Eigen::Matrix3Xf::Zero(3, n);
  fr.depth_raw.assign(static_cast<std::size_t>(n), 0);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      const Eigen::Index p = x + static_cast<Eigen::Index>(in.width) * y;
      const Ray ray = pixel_to_ray(in, pose, x, y, 0.0, far);
      const auto hit = trace(sdf, ray);
      if (!hit) {
        const auto c0 = class_color(0);
        for (int k = 0; k < 3; ++k) (*fr.semantic)(k, p) = c0[static_cast<std::size_t>(k)] / 255.0f;
        continue;
      }
      const Eigen::Vector3d q = ray.at(*hit);
      const int element = sdf.eval(q).second;
      const Eigen::Vector3d nrm = sdf.normal(q);
      const double facing = nrm.dot(-ray.direction);
      const Eigen::Vector3d rgb = (sdf.albedo(element) * (0.2 + 0.8 * std::max(facing, 0.0))).cwiseMin(1.0);
      // quantise like the 8-bit files so in-memory and reloaded frames agree
      for (int k = 0; k < 3; ++k) fr.color(k, p) = static_cast<float>(std::lround(rgb(k) * 255.0)) / 255.0f;
      const auto sc = class_color(sdf.semantic_class(element));
      for (int k = 0; k < 3; ++k) (*fr.semantic)(k, p) = sc[static_cast<std::size_t>(k)] / 255.0f;
      const double z = *hit * pose.rotation.col(2).dot(ray.direction);
      const bool grazing = spec.noise.grazing_dropout && facing < spec.noise.grazing_threshold;
      const std::uint16_t raw = sensor_depth(z, spec.noise.noise_level, in.depth_scale, rng);
      if (!grazing) fr.depth_raw[static_cast<std::size_t>(p)] = raw;
    }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int h = 0; h < spec.noise.holes_per_frame; ++h) {
    const double cx = u(rng) * in.width, cy = u(rng) * in.height;
    const double a = 1.0 + u(rng) * (spec.noise.hole_radius - 1.0);
    const double b = 1.0 + u(rng) * (spec.noise.hole_radius - 1.0);
    const double th = u(rng) * kPi, c = std::cos(th), s = std::sin(th);
    const int r = static_cast<int>(std::ceil(std::max(a, b)));
    for (int y = std::max(0, static_cast<int>(cy) - r); y <= std::min(in.height - 1, static_cast<int>(cy) + r); ++y)
      for (int x = std::max(0, static_cast<int>(cx) - r); x <= std::min(in.width - 1, static_cast<int>(cx) + r); ++x) {
        const double dx = x - cx, dy = y - cy;
        const double e1 = (c * dx + s * dy) / a, e2 = (-s * dx + c * dy) / b;
        if (e1 * e1 + e2 * e2 <= 1.0) fr.depth_raw[static_cast<std::size_t>(x + in.width * y)] = 0;
      }
  }
  fr.depth.resize(n);
  for (Eigen::Index p = 0; p < n; ++p)
    fr.depth(p) = static_cast<float>(fr.depth_raw[static_cast<std::size_t>(p)] / in.depth_scale);
  return fr;
}

}  // namespace

SyntheticSummary generate_synthetic(const SceneSpec& spec, const std::string& out_dir, std::uint64_t seed,
                                    int threads) {
  spec.validate();
  const SceneSdf sdf(spec);
  const std::vector<Pose> poses = trajectory_poses(spec.trajectory);
  SyntheticSummary out;
  Dataset& ds = out.dataset;
  ds.intrinsics = spec.intrinsics;
  ds.frames.resize(poses.size());
  parallel_for(static_cast<int>(poses.size()), threads, [&](int i) {
    std::mt19937_64 rng(split_seed(seed, kNoiseStream, static_cast<std::uint64_t>(i)));
    ds.frames[static_cast<std::size_t>(i)] = render_synthetic_frame(sdf, spec, poses[static_cast<std::size_t>(i)], rng);
  });
  ds.bounds = compute_scene_bounds(ds.intrinsics, ds.frames);

  // lattice reaches past the room walls so they appear as sign changes; the odd margin
  // keeps lattice nodes off axis-aligned faces
  const Aabb box = sdf.bounds().expanded(0.0573);
  const BatchField field = [&](const Eigen::Matrix3Xd& pts) -> Eigen::VectorXd {
    Eigen::VectorXd v(pts.cols());
    constexpr Eigen::Index kBlock = 4096;
    const int blocks = static_cast<int>((pts.cols() + kBlock - 1) / kBlock);
    parallel_for(blocks, threads, [&](int b) {
      const Eigen::Index end = std::min(pts.cols(), (b + 1) * kBlock);
      for (Eigen::Index i = b * kBlock; i < end; ++i) v(i) = sdf(pts.col(i));
    });
    return v;
  };
  MeshingOptions mo;
  mo.resolution = spec.gt_resolution;
  out.gt_mesh = extract_mesh(field, box, mo).mesh;

  write_dataset(ds, out_dir);
  const std::string mesh_path = (std::filesystem::path(out_dir) / "gt_mesh.ply").string();
  write_mesh(out.gt_mesh, mesh_path);
  ds.gt_mesh_path = mesh_path;
  return out;
}

}  // namespace presem
