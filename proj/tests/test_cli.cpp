#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "presem/cli.hpp"
#include "presem/mesh.hpp"

using namespace presem;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "presem");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("presem_cli_" + name);
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

const char* kSphereScene = R"({
  "room": null,
  "primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 0.35, "class": 4}],
  "trajectory": {"frames": 4, "radius": 1.2, "height": 0.2, "look_at": [0, 0, 0]},
  "camera": {"fx": 30, "fy": 30, "cx": 16, "cy": 12, "width": 32, "height": 24},
  "gt_resolution": 24
})";

const char* kTinyConfig = R"(
total_iters = 4
rays_per_batch = 32
sampler.n_initial = 8
sampler.n_per_layer = 4
fine_voxel_sizes = 0.04, 0.08
field.sdf_hidden = 8
field.rgb_hidden = 8
field.pr_hidden = 8
field.semantic_hidden = 8
smooth_points = 16
prior_inward = false
)";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("help documents every flag") {
    const std::vector<std::pair<std::string, std::vector<std::string>>> flags{
        {"make-synthetic", {"--spec", "--out", "--seed"}},
        {"train", {"--data", "--config", "--out", "--no-semantic", "--no-sg-mlp", "--deterministic", "--threads"}},
        {"render", {"--ckpt", "--frame", "--out"}},
        {"extract-mesh", {"--ckpt", "--out", "--resolution", "--no-cull"}},
        {"evaluate", {"--pred", "--gt", "--out", "--tau", "--voxel"}},
        {"gradcheck", {}},
    };
    for (const auto& [cmd, list] : flags) {
      const Result r = cli({cmd, "--help"});
      INFO(cmd);
      CHECK(r.code == kExitOk);
      for (const auto& f : list) CHECK(r.out.find(f) != std::string::npos);
    }
    CHECK(cli({"--help"}).code == kExitOk);
  }

  TEST_CASE("usage errors exit 1") {
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"evaluate", "--pred", "a", "--gt", "b", "--out", "c", "--bogus"}).code == kExitUsage);
    CHECK(cli({"fly"}).code == kExitUsage);
    const Result r = cli({"extract-mesh", "--ckpt", "x"});
    CHECK(r.code == kExitUsage);
    CHECK(r.err.find("--out") != std::string::npos);
  }

  TEST_CASE("training on an empty directory is a data error") {
    const fs::path dir = scratch("empty");
    const Result r = cli({"train", "--data", dir.string(), "--out", (dir / "x.ckpt").string()});
    CHECK(r.code == kExitData);
    CHECK(r.err.find(dir.string()) != std::string::npos);
  }

  TEST_CASE("evaluate identical meshes") {
    const fs::path dir = scratch("eval");
    const BatchField f = [](const Eigen::Matrix3Xd& p) -> Eigen::VectorXd {
      return (p.colwise().norm().array() - 0.5).matrix().transpose();
    };
    MeshingOptions o;
    o.resolution = 24;
    write_mesh(extract_mesh(f, Aabb{Eigen::Vector3d::Constant(-1), Eigen::Vector3d::Constant(1)}, o).mesh,
               (dir / "s.ply").string());
    const Result r = cli({"evaluate", "--pred", (dir / "s.ply").string(), "--gt", (dir / "s.ply").string(), "--out",
                          (dir / "m.json").string(), "--samples", "5000"});
    CHECK(r.code == kExitOk);
    const std::string j = slurp(dir / "m.json");
    CHECK(j.find("\"f_score\": 1.0") != std::string::npos);
    CHECK(r.out.find("C-L1") != std::string::npos);
    CHECK(cli({"evaluate", "--pred", (dir / "none.ply").string(), "--gt", (dir / "s.ply").string(), "--out",
               (dir / "m.json").string()})
              .code == kExitData);
  }

  TEST_CASE("gradcheck exits 0") {
    const Result r = cli({"gradcheck"});
    CHECK(r.code == kExitOk);
    CHECK(r.out.find("gradcheck passed") != std::string::npos);
  }

  TEST_CASE("pipeline smoke run is repeatable") {
    const fs::path dir = scratch("pipe");
    std::ofstream(dir / "scene.json") << kSphereScene;
    std::ofstream(dir / "tiny.cfg") << kTinyConfig;
    const std::string data = (dir / "data").string();
    REQUIRE(cli({"make-synthetic", "--spec", (dir / "scene.json").string(), "--out", data, "--seed", "3"}).code == 0);
    const std::vector<std::string> train{"train", "--data", data, "--config", (dir / "tiny.cfg").string(), "--quiet",
                                         "--deterministic", "--out"};
    auto a = train, b = train;
    a.push_back((dir / "a.ckpt").string());
    b.push_back((dir / "b.ckpt").string());
    REQUIRE(cli(a).code == kExitOk);
    REQUIRE(cli(b).code == kExitOk);
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    CHECK(fs::exists(dir / "a.ckpt.history.csv"));

    const Result rd = cli({"render", "--ckpt", (dir / "a.ckpt").string(), "--frame", "1", "--out", (dir / "v").string()});
    CHECK(rd.code == kExitOk);
    for (const char* s : {"v_color.png", "v_depth.png", "v_semantic.png"}) CHECK(fs::exists(dir / s));
    CHECK(cli({"render", "--ckpt", (dir / "a.ckpt").string(), "--frame", "9", "--out", (dir / "v").string()}).code ==
          kExitData);

    const Result em = cli({"extract-mesh", "--ckpt", (dir / "a.ckpt").string(), "--out", (dir / "m.ply").string(),
                           "--resolution", "24", "--no-cull"});
    CHECK(em.code == kExitOk);
    CHECK(read_mesh((dir / "m.ply").string()).num_faces() > 0);
  }
}
