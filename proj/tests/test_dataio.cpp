#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "presem/dataio.hpp"

using namespace presem;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("presem_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

SceneSpec sphere_scene() {
  SceneSpec s;
  s.room_extent.setZero();
  Primitive p;
  p.kind = PrimitiveKind::kSphere;
  p.center = Eigen::Vector3d(0.1, -0.05, 0.0);
  p.radius = 0.4;
  p.semantic_class = 5;
  s.primitives.push_back(p);
  s.trajectory.frames = 3;
  s.trajectory.radius = 1.5;
  s.trajectory.pitch_amplitude = 0.1;
  s.intrinsics = CameraIntrinsics{40, 40, 20, 15, 40, 30, 1000};
  s.gt_resolution = 24;
  return s;
}

Dataset tiny_dataset() {
  Dataset ds;
  ds.intrinsics = CameraIntrinsics{4, 4, 2, 1.5, 4, 3, 1000};
  for (int i = 0; i < 2; ++i) {
    Frame f;
    f.pose = look_at(Eigen::Vector3d(0.1 * i, 0.2, -1.0), Eigen::Vector3d::Zero());
    f.color = Eigen::Matrix3Xf::Constant(3, 12, 0.2f * (i + 1));
    f.depth_raw.assign(12, 1500);
    f.depth_raw[5] = 0;
    f.depth = Eigen::VectorXf::Constant(12, 1.5f);
    f.depth(5) = 0.0f;
    ds.frames.push_back(f);
  }
  return ds;
}

}  // namespace

TEST_SUITE("dataio") {
  TEST_CASE("png round trips") {
    const fs::path dir = scratch("png");
    Image8 rgb;
    rgb.width = 5;
    rgb.height = 3;
    for (int i = 0; i < 45; ++i) rgb.data.push_back(static_cast<std::uint8_t>(i * 5));
    write_png((dir / "a.png").string(), rgb);
    const Image8 back = read_png8((dir / "a.png").string());
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.data == rgb.data);

    Image16 d;
    d.width = 3;
    d.height = 2;
    d.data = {0, 1, 1500, 256, 65535, 4097};
    write_png((dir / "d.png").string(), d);
    CHECK(read_png16((dir / "d.png").string()).data == d.data);

    CHECK_THROWS_AS(read_png16((dir / "a.png").string()), DataError);
    std::ofstream((dir / "junk.png").string()) << "not an image";
    CHECK_THROWS_AS(read_png8((dir / "junk.png").string()), DataError);
    CHECK_THROWS_AS(read_png8((dir / "missing.png").string()), DataError);
  }

  TEST_CASE("load converts depth units and counts frames") {
    const fs::path dir = scratch("load");
    const Dataset ds = tiny_dataset();
    write_dataset(ds, dir.string());
    const Dataset back = load_dataset(dir.string());
    REQUIRE(back.frames.size() == 2);
    CHECK(back.frames[0].depth(0) == doctest::Approx(1.5));
    CHECK(back.frames[0].depth(5) == 0.0f);
    CHECK(back.frames[1].color(1, 3) == doctest::Approx(0.4).epsilon(1.0 / 255));
    CHECK(back.frames[1].pose.matrix() == ds.frames[1].pose.matrix());
    CHECK(back.intrinsics.fx == 4.0);
    CHECK(back.intrinsics.depth_scale == 1000.0);
    CHECK(!back.frames[0].semantic);
    CHECK(!back.all_semantic());
    CHECK(back.gt_mesh_path.empty());
    for (const auto& f : back.frames) CHECK(back.bounds.contains(f.pose.translation));
  }

  TEST_CASE("load errors name the file") {
    const fs::path dir = scratch("errors");
    write_dataset(tiny_dataset(), dir.string());
    {
      std::ofstream f(dir / "poses.txt", std::ios::app);
      f << "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n";
    }
    try {
      load_dataset(dir.string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("rgb") != std::string::npos);
    }
    std::ofstream(dir / "poses.txt") << "1 0 0\n";
    try {
      load_dataset(dir.string());
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("poses.txt:1") != std::string::npos);
    }
    write_dataset(tiny_dataset(), dir.string());
    fs::remove(dir / "depth" / "00001.png");
    fs::copy_file(dir / "rgb" / "00000.png", dir / "depth" / "00007.png");
    CHECK_THROWS_AS(load_dataset(dir.string()), DataError);
    CHECK_THROWS_AS(load_dataset((dir / "nope").string()), DataError);
  }

  TEST_CASE("noiseless depth matches the analytic sphere") {
    const SceneSpec spec = sphere_scene();
    const fs::path dir = scratch("sphere");
    const SyntheticSummary s = generate_synthetic(spec, dir.string(), 1);
    const Primitive& sp = spec.primitives[0];
    const CameraIntrinsics& in = spec.intrinsics;
    int valid = 0;
    for (const Frame& f : s.dataset.frames) {
      const double dc = (f.pose.translation - sp.center).norm();
      for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x) {
          const float z = f.depth(x + in.width * y);
          if (z == 0.0f) continue;
          ++valid;
          const Ray r = pixel_to_ray(in, f.pose, x, y);
          // exact ray-sphere intersection
          const Eigen::Vector3d oc = r.origin - sp.center;
          const double b = oc.dot(r.direction), c = oc.squaredNorm() - sp.radius * sp.radius;
          const double t = -b - std::sqrt(b * b - c);
          const double cosang = f.pose.rotation.col(2).dot(r.direction);
          CHECK(std::abs(z - t * cosang) <= 0.5e-3 + 1e-6);
          CHECK(t >= dc - sp.radius - 1e-3);
          CHECK(t <= dc + sp.radius + 1e-3);
        }
    }
    CHECK(valid > 100);
    CHECK(is_watertight(s.gt_mesh));
    CHECK(fs::exists(dir / "gt_mesh.ply"));
  }

  TEST_CASE("generation is seeded and reloads exactly") {
    SceneSpec spec = sphere_scene();
    spec.noise.noise_level = 0.02;
    spec.noise.holes_per_frame = 2;
    const fs::path a = scratch("gen_a"), b = scratch("gen_b");
    generate_synthetic(spec, a.string(), 7, 1);
    const SyntheticSummary sb = generate_synthetic(spec, b.string(), 7, 3);
    int files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      ++files;
      CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
    }
    CHECK(files == 1 + 1 + 1 + 3 * 3);
    const Dataset ds = load_dataset(a.string());
    REQUIRE(ds.frames.size() == 3);
    CHECK(ds.all_semantic());
    CHECK(ds.gt_mesh_path == (a / "gt_mesh.ply").string());
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(ds.frames[i].pose.matrix() == sb.dataset.frames[i].pose.matrix());
      CHECK(ds.frames[i].depth_raw == sb.dataset.frames[i].depth_raw);
    }
    CHECK(ds.intrinsics.width == spec.intrinsics.width);
    CHECK(ds.intrinsics.fx == spec.intrinsics.fx);
    const fs::path c = scratch("gen_c");
    generate_synthetic(spec, c.string(), 8, 1);
    CHECK(slurp(a / "depth" / "00000.png") != slurp(c / "depth" / "00000.png"));
  }

  TEST_CASE("multiplicative noise keeps the mean") {
    std::mt19937_64 rng(11);
    const double z = 1.5;
    double sum = 0.0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) sum += sensor_depth(z, 0.05, 1000.0, rng) / 1000.0 / z;
    CHECK(std::abs(sum / n - 1.0) < 0.01);
    CHECK(sensor_depth(1.2344, 0.0, 1000.0, rng) == 1234);
    CHECK(sensor_depth(70.0, 0.0, 1000.0, rng) == 0);
  }

  TEST_CASE("holes and grazing dropout remove depth") {
    SceneSpec spec = sphere_scene();
    spec.noise.grazing_dropout = false;
    const auto full = generate_synthetic(spec, scratch("holes_a").string(), 2);
    spec.noise.grazing_dropout = true;
    spec.noise.holes_per_frame = 6;
    const auto holes = generate_synthetic(spec, scratch("holes_b").string(), 2);
    const auto count = [](const Frame& f) { return (f.depth.array() > 0.0f).count(); };
    CHECK(count(holes.dataset.frames[0]) < count(full.dataset.frames[0]));
    for (std::size_t p = 0; p < full.dataset.frames[0].depth_raw.size(); ++p)
      if (holes.dataset.frames[0].depth_raw[p] != 0) CHECK(holes.dataset.frames[0].depth_raw[p] == full.dataset.frames[0].depth_raw[p]);
  }

  TEST_CASE("semantic colors are a function of class") {
    const auto& pal = semantic_palette();
    for (std::size_t i = 0; i < pal.size(); ++i)
      for (std::size_t j = i + 1; j < pal.size(); ++j) CHECK(pal[i] != pal[j]);
    CHECK(class_color(99) == pal[0]);
    std::ifstream f(std::string(PRESEM_SOURCE_DIR) + "/data/palette.txt");
    REQUIRE(f);
    std::string line;
    std::getline(f, line);
    for (int c = 0; c < 40; ++c) {
      int id, r, g, b;
      f >> id >> r >> g >> b;
      CHECK(id == c);
      CHECK(pal[static_cast<std::size_t>(c)] == std::array<std::uint8_t, 3>{static_cast<std::uint8_t>(r),
                                                                           static_cast<std::uint8_t>(g),
                                                                           static_cast<std::uint8_t>(b)});
    }
  }

  TEST_CASE("scene spec parsing") {
    const SceneSpec s = load_scene_spec(std::string(PRESEM_SOURCE_DIR) + "/configs/box_room.json");
    CHECK(s.room_extent == Eigen::Vector3d::Constant(2.0));
    CHECK(s.trajectory.frames == 20);
    CHECK(s.noise.noise_level == 0.01);
    CHECK(s.primitives.size() == 3);
    CHECK_THROWS_AS(parse_scene_spec(R"({"primitives": [], "room": null})"), DataError);
    CHECK_THROWS_AS(parse_scene_spec(R"({"colour": 1})"), DataError);
    CHECK_THROWS_AS(parse_scene_spec(R"({"primitives": [{"type": "cone"}]})"), DataError);
    CHECK_THROWS_AS(parse_scene_spec("{"), DataError);
  }

  TEST_CASE("analytic scene sdf") {
    SceneSpec s;
    Primitive box;
    box.kind = PrimitiveKind::kBox;
    box.half_extent = Eigen::Vector3d(0.2, 0.1, 0.3);
    s.primitives.push_back(box);
    const SceneSdf sdf(s);
    CHECK(sdf(Eigen::Vector3d(0.5, 0, 0)) == doctest::Approx(0.3));
    CHECK(sdf(Eigen::Vector3d(0, 0.4, 0.5)) == doctest::Approx(std::hypot(0.3, 0.2)));  // nearest to a box edge
    CHECK(sdf(Eigen::Vector3d(0, 0, 0)) == doctest::Approx(-0.1));
    // inside the room, near the floor
    const auto floor = sdf.eval(Eigen::Vector3d(0.7, -0.95, 0.7));
    CHECK(floor.first == doctest::Approx(0.05));
    CHECK(floor.second == -3);
    CHECK(sdf.normal(Eigen::Vector3d(0.7, -0.95, 0.7)) == Eigen::Vector3d::UnitY());
    CHECK(sdf.normal(Eigen::Vector3d(0.25, 0.0, 0.0)) == Eigen::Vector3d::UnitX());
    CHECK(sdf.semantic_class(-3) == s.room_classes[1]);
  }
}
