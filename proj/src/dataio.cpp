#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "presem/dataio.hpp"

namespace presem {

namespace fs = std::filesystem;

const std::array<std::array<std::uint8_t, 3>, 40>& semantic_palette() {
  static const std::array<std::array<std::uint8_t, 3>, 40> palette{{
      {0, 0, 0}, {97, 139, 242}, {146, 242, 12}, {191, 29, 171},
      {77, 191, 172}, {191, 108, 10}, {51, 21, 140}, {60, 140, 56},
      {140, 7, 52}, {36, 165, 242}, {230, 242, 97}, {194, 12, 242},
      {29, 191, 110}, {191, 100, 77}, {10, 25, 191}, {66, 140, 21},
      {140, 56, 112}, {7, 135, 140}, {242, 190, 36}, {163, 97, 242},
      {12, 242, 50}, {191, 29, 49}, {77, 125, 191}, {139, 191, 10},
      {140, 21, 140}, {56, 140, 115}, {140, 62, 7}, {61, 36, 242},
      {122, 242, 97}, {242, 12, 118}, {29, 151, 191}, {191, 186, 77},
      {130, 10, 191}, {21, 140, 65}, {140, 63, 56}, {7, 35, 140},
      {140, 242, 36}, {242, 97, 213}, {12, 242, 222}, {191, 129, 29},
  }};
  return palette;
}

std::array<std::uint8_t, 3> class_color(int semantic_class) {
  const auto& p = semantic_palette();
  return semantic_class >= 0 && semantic_class < 40 ? p[static_cast<std::size_t>(semantic_class)] : p[0];
}

bool Dataset::all_semantic() const {
  if (frames.empty()) return false;
  for (const auto& f : frames)
    if (!f.semantic) return false;
  return true;
}

namespace {

std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d.png", i);
  return buf;
}

std::size_t count_png(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") ++n;
  return n;
}

Eigen::Matrix3Xf to_color(const Image8& img) {
  Eigen::Matrix3Xf c(3, static_cast<Eigen::Index>(img.width) * img.height);
  for (Eigen::Index p = 0; p < c.cols(); ++p)
    for (int k = 0; k < 3; ++k) c(k, p) = img.data[static_cast<std::size_t>(3 * p + k)] / 255.0f;
  return c;
}

Image8 from_color(const Eigen::Matrix3Xf& c, int width, int height) {
  Image8 img;
  img.width = width;
  img.height = height;
  img.data.resize(static_cast<std::size_t>(c.size()));
  for (Eigen::Index p = 0; p < c.cols(); ++p)
    for (int k = 0; k < 3; ++k)
      img.data[static_cast<std::size_t>(3 * p + k)] =
          static_cast<std::uint8_t>(std::lround(std::clamp(c(k, p), 0.0f, 1.0f) * 255.0f));
  return img;
}

void check_size(const std::string& path, int w, int h, const CameraIntrinsics& intr) {
  if (w != intr.width || h != intr.height)
    throw DataError(path + ": image is " + std::to_string(w) + "x" + std::to_string(h) + " but intrinsics say " +
                    std::to_string(intr.width) + "x" + std::to_string(intr.height));
}

CameraIntrinsics read_intrinsics(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  CameraIntrinsics c;
  if (!(f >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height >> c.depth_scale))
    throw DataError(path.string() + ": expected 'fx fy cx cy width height depth_scale'");
  try {
    c.validate();
  } catch (const std::domain_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return c;
}

std::vector<Pose> read_poses(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  std::vector<Pose> poses;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    Eigen::Matrix4d m;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        if (!(ss >> m(r, c)))
          throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 16 numbers");
    double extra;
    if (ss >> extra) throw DataError(path.string() + ":" + std::to_string(lineno) + ": more than 16 numbers");
    const Pose p = Pose::from_matrix(m);
    try {
      p.validate(1e-4);
    } catch (const std::domain_error& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    poses.push_back(p);
  }
  return poses;
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw DataError("dataset directory not found: " + dir);
  Dataset ds;
  ds.intrinsics = read_intrinsics(root / "intrinsics.txt");
  const std::vector<Pose> poses = read_poses(root / "poses.txt");
  if (poses.empty()) throw DataError((root / "poses.txt").string() + ": no poses");
  const int n = static_cast<int>(poses.size());
  for (const char* sub : {"rgb", "depth"}) {
    if (!fs::is_directory(root / sub)) throw DataError("missing directory " + (root / sub).string());
    const std::size_t count = count_png(root / sub);
    if (count != poses.size())
      throw DataError((root / sub).string() + ": " + std::to_string(count) + " images for " + std::to_string(n) +
                      " poses in poses.txt");
  }
  const bool semantic = fs::is_directory(root / "semantic");
  if (semantic && count_png(root / "semantic") != poses.size())
    throw DataError((root / "semantic").string() + ": image count does not match poses.txt");

  const CameraIntrinsics& intr = ds.intrinsics;
  ds.frames.resize(poses.size());
  for (int i = 0; i < n; ++i) {
    Frame& fr = ds.frames[static_cast<std::size_t>(i)];
    fr.pose = poses[static_cast<std::size_t>(i)];
    const std::string rgb_path = (root / "rgb" / frame_name(i)).string();
    const Image8 rgb = read_png8(rgb_path);
    check_size(rgb_path, rgb.width, rgb.height, intr);
    fr.color = to_color(rgb);
    const std::string depth_path = (root / "depth" / frame_name(i)).string();
    Image16 depth = read_png16(depth_path);
    check_size(depth_path, depth.width, depth.height, intr);
    fr.depth_raw = std::move(depth.data);
    fr.depth.resize(static_cast<Eigen::Index>(fr.depth_raw.size()));
    for (std::size_t p = 0; p < fr.depth_raw.size(); ++p)
      fr.depth(static_cast<Eigen::Index>(p)) = static_cast<float>(fr.depth_raw[p] / intr.depth_scale);
    if (semantic) {
      const std::string sem_path = (root / "semantic" / frame_name(i)).string();
      const Image8 sem = read_png8(sem_path);
      check_size(sem_path, sem.width, sem.height, intr);
      fr.semantic = to_color(sem);
    }
  }
  if (fs::is_regular_file(root / "gt_mesh.ply")) ds.gt_mesh_path = (root / "gt_mesh.ply").string();
  ds.bounds = compute_scene_bounds(intr, ds.frames);
  return ds;
}

Aabb compute_scene_bounds(const CameraIntrinsics& intr, const std::vector<Frame>& frames, double margin) {
  if (frames.empty()) throw std::domain_error("compute_scene_bounds: no frames");
  Eigen::Vector3d lo = frames.front().pose.translation, hi = lo;
  for (const auto& f : frames) {
    lo = lo.cwiseMin(f.pose.translation);
    hi = hi.cwiseMax(f.pose.translation);
    for (Eigen::Index p = 0; p < f.depth.size(); ++p) {
      const double z = f.depth(p);
      if (!(z > 0.0)) continue;
      const double x = static_cast<double>(p % intr.width), y = static_cast<double>(p / intr.width);
      const Eigen::Vector3d cam((x - intr.cx) / intr.fx * z, (y - intr.cy) / intr.fy * z, z);
      const Eigen::Vector3d w = f.pose.to_world(cam);
      lo = lo.cwiseMin(w);
      hi = hi.cwiseMax(w);
    }
  }
  return Aabb{lo, hi}.expanded(margin);
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  const fs::path root(dir);
  std::error_code ec;
  for (const char* sub : {"rgb", "depth"}) fs::create_directories(root / sub, ec);
  if (ec) throw DataError("cannot create " + dir + ": " + ec.message());
  const CameraIntrinsics& c = ds.intrinsics;
  {
    std::ofstream f(root / "intrinsics.txt");
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %d %d %.17g\n", c.fx, c.fy, c.cx, c.cy, c.width,
                  c.height, c.depth_scale);
    f << buf;
    if (!f) throw DataError("failed writing " + (root / "intrinsics.txt").string());
  }
  {
    std::ofstream f(root / "poses.txt");
    for (const auto& fr : ds.frames) {
      const Eigen::Matrix4d m = fr.pose.matrix();
      for (int r = 0; r < 4; ++r)
        for (int k = 0; k < 4; ++k) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.17g", m(r, k));
          f << buf << (r == 3 && k == 3 ? "\n" : " ");
        }
    }
    if (!f) throw DataError("failed writing " + (root / "poses.txt").string());
  }
  const bool semantic = ds.all_semantic();
  if (semantic) fs::create_directories(root / "semantic");
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const Frame& fr = ds.frames[i];
    const std::string name = frame_name(static_cast<int>(i));
    write_png((root / "rgb" / name).string(), from_color(fr.color, c.width, c.height));
    Image16 d;
    d.width = c.width;
    d.height = c.height;
    if (fr.depth_raw.size() == static_cast<std::size_t>(c.width) * c.height) {
      d.data = fr.depth_raw;
    } else {
      d.data.resize(static_cast<std::size_t>(fr.depth.size()));
      for (Eigen::Index p = 0; p < fr.depth.size(); ++p)
        d.data[static_cast<std::size_t>(p)] = static_cast<std::uint16_t>(
            std::clamp(std::lround(fr.depth(p) * c.depth_scale), 0L, 65535L));
    }
    write_png((root / "depth" / name).string(), d);
    if (semantic) write_png((root / "semantic" / name).string(), from_color(*fr.semantic, c.width, c.height));
  }
}

}  // namespace presem
