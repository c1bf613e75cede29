#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "presem/errors.hpp"
#include "presem/mesh.hpp"

using namespace presem;

namespace {

BatchField sphere(double r, const Eigen::Vector3d& c = Eigen::Vector3d::Zero()) {
  return [r, c](const Eigen::Matrix3Xd& p) -> Eigen::VectorXd {
    return ((p.colwise() - c).colwise().norm().array() - r).matrix().transpose();
  };
}

const Aabb kBox{Eigen::Vector3d::Constant(-0.75), Eigen::Vector3d::Constant(0.75)};

struct RadiusStats {
  double max_err = 0.0, rms = 0.0;
};

RadiusStats radius_stats(const TriangleMesh& m, double r) {
  RadiusStats s;
  for (Eigen::Index v = 0; v < m.num_vertices(); ++v) {
    const double e = std::abs(m.vertices.col(v).cast<double>().norm() - r);
    s.max_err = std::max(s.max_err, e);
    s.rms += e * e;
  }
  s.rms = std::sqrt(s.rms / static_cast<double>(m.num_vertices()));
  return s;
}

std::string tmp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST_SUITE("mesher") {
  TEST_CASE("sphere oracle") {
    const Aabb cube{Eigen::Vector3d::Constant(-1.0), Eigen::Vector3d::Constant(1.0)};
    MeshingOptions o;
    o.resolution = 64;
    const auto r64 = extract_mesh(sphere(0.5), cube, o);
    REQUIRE(!r64.empty);
    CHECK(is_watertight(r64.mesh));
    CHECK_NOTHROW(validate_mesh(r64.mesh));
    CHECK(r64.pitch[0] == doctest::Approx(2.0 / 63.0));
    const auto s64 = radius_stats(r64.mesh, 0.5);
    CHECK(s64.max_err <= 0.055);
    double min_area = 1.0;
    for (Eigen::Index t = 0; t < r64.mesh.num_faces(); ++t) min_area = std::min(min_area, face_area(r64.mesh, t));
    CHECK(min_area > 1e-12);
    o.resolution = 128;
    const auto r128 = extract_mesh(sphere(0.5), cube, o);
    CHECK(is_watertight(r128.mesh));
    const auto s128 = radius_stats(r128.mesh, 0.5);
    INFO("rms 64 " << s64.rms << " rms 128 " << s128.rms);
    CHECK(s64.rms / s128.rms >= 1.8);
  }

  TEST_CASE("faces and normals point toward increasing values") {
    MeshingOptions o;
    o.resolution = 24;
    const auto r = extract_mesh(sphere(0.4), kBox, o);
    int outward = 0;
    for (Eigen::Index t = 0; t < r.mesh.num_faces(); ++t) {
      const Eigen::Vector3d a = r.mesh.vertices.col(r.mesh.faces(0, t)).cast<double>();
      const Eigen::Vector3d b = r.mesh.vertices.col(r.mesh.faces(1, t)).cast<double>();
      const Eigen::Vector3d c = r.mesh.vertices.col(r.mesh.faces(2, t)).cast<double>();
      const Eigen::Vector3d n = (b - a).cross(c - a);
      if (n.norm() < 1e-14) continue;
      outward += n.dot(a + b + c) > 0.0 ? 1 : -1;
    }
    CHECK(outward == static_cast<int>(r.mesh.num_faces()));
    for (Eigen::Index v = 0; v < r.mesh.num_vertices(); ++v)
      CHECK(r.mesh.normals.col(v).cast<double>().dot(r.mesh.vertices.col(v).cast<double>().normalized()) > 0.99);
  }

  TEST_CASE("plane gives parallel face normals") {
    const Eigen::Vector3d n = Eigen::Vector3d(0.3, -0.2, 1.0).normalized();
    const BatchField plane = [n](const Eigen::Matrix3Xd& p) -> Eigen::VectorXd {
      return (n.transpose() * p).transpose().array() - 0.1;
    };
    MeshingOptions o;
    o.resolution = 20;
    const auto r = extract_mesh(plane, kBox, o);
    REQUIRE(r.mesh.num_faces() > 0);
    double worst = 0.0;
    for (Eigen::Index t = 0; t < r.mesh.num_faces(); ++t) {
      const Eigen::Vector3d a = r.mesh.vertices.col(r.mesh.faces(0, t)).cast<double>();
      const Eigen::Vector3d b = r.mesh.vertices.col(r.mesh.faces(1, t)).cast<double>();
      const Eigen::Vector3d c = r.mesh.vertices.col(r.mesh.faces(2, t)).cast<double>();
      const Eigen::Vector3d fn = (b - a).cross(c - a);
      if (fn.norm() < 1e-9) continue;
      worst = std::max(worst, (fn.normalized() - n).norm());
    }
    CHECK(worst < 1e-3);
  }

  TEST_CASE("saddle-heavy field stays closed") {
    // blobs touching diagonally exercise the ambiguous faces; the enclosing ball keeps
    // the surface away from the lattice boundary
    const BatchField f = [](const Eigen::Matrix3Xd& p) -> Eigen::VectorXd {
      Eigen::VectorXd v(p.cols());
      for (Eigen::Index i = 0; i < p.cols(); ++i) {
        const double s = std::sin(9.0 * p(0, i)) * std::sin(9.0 * p(1, i)) * std::sin(9.0 * p(2, i)) + 0.05;
        v(i) = std::min(s, 0.6 - p.col(i).norm());
      }
      return v;
    };
    for (int res : {17, 40, 41}) {
      MeshingOptions o;
      o.resolution = res;
      const auto r = extract_mesh(f, kBox, o);
      REQUIRE(!r.empty);
      CHECK(is_watertight(r.mesh));
      CHECK_NOTHROW(validate_mesh(r.mesh));
    }
  }

  TEST_CASE("no sign change gives an empty result") {
    MeshingOptions o;
    o.resolution = 8;
    const auto r = extract_mesh(sphere(5.0), kBox, o);
    CHECK(r.empty);
    CHECK(r.mesh.empty());
    CHECK_THROWS_AS(extract_mesh(sphere(0.5), kBox, MeshingOptions{1}), std::domain_error);
  }

  TEST_CASE("vertex order is canonical") {
    MeshingOptions o;
    o.resolution = 20;
    const auto a = extract_mesh(sphere(0.45), kBox, o);
    const auto b = extract_mesh(sphere(0.45), kBox, o);
    CHECK(a.mesh.vertices == b.mesh.vertices);
    CHECK(a.mesh.faces == b.mesh.faces);
  }

  TEST_CASE("ply round trip and errors") {
    MeshingOptions o;
    o.resolution = 16;
    const auto r = extract_mesh(sphere(0.5), kBox, o);
    const auto path = tmp("presem_mesh.ply");
    write_mesh(r.mesh, path);
    const TriangleMesh back = read_mesh(path);
    CHECK(back.vertices == r.mesh.vertices);
    CHECK(back.faces == r.mesh.faces);
    CHECK(back.normals.isApprox(r.mesh.normals, 1e-6f));

    const auto ascii = tmp("presem_ascii.ply");
    {
      std::ofstream f(ascii);
      f << "ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\n"
           "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
           "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
    }
    const TriangleMesh quad = read_mesh(ascii);
    CHECK(quad.num_vertices() == 4);
    CHECK(quad.num_faces() == 2);
    CHECK(face_area(quad, 0) + face_area(quad, 1) == doctest::Approx(1.0));

    const auto bad = tmp("presem_bad.ply");
    {
      std::ofstream f(bad);
      f << "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
           "element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 1 7\n";
    }
    CHECK_THROWS_AS(read_mesh(bad), DataError);
    CHECK_THROWS_AS(read_mesh(tmp("presem_missing.ply")), DataError);
  }

  TEST_CASE("culling keeps only observed geometry") {
    TriangleMesh m;
    m.vertices.resize(3, 6);
    // a triangle in front of the camera at z = 1 and one behind it
    m.vertices << 0, 0.1, 0, 0, 0.1, 0,  //
        0, 0, 0.1, 0, 0, 0.1,            //
        1, 1, 1, -1, -1, -1;
    m.faces.resize(3, 2);
    m.faces << 0, 3, 1, 4, 2, 5;
    CullingView v;
    v.intrinsics = CameraIntrinsics{50, 50, 16, 16, 32, 32, 1000};
    v.width = v.height = 32;
    v.depth.assign(32 * 32, 1.0f);
    const TriangleMesh kept = cull_mesh(m, {v});
    CHECK(kept.num_faces() == 1);
    CHECK(kept.num_vertices() == 3);
    CHECK(kept.vertices.row(2).minCoeff() == 1.0f);
    // geometry far behind the observed surface is dropped
    v.depth.assign(32 * 32, 0.5f);
    CHECK(cull_mesh(m, {v}).num_faces() == 0);
  }

  TEST_CASE("compact keeps relative order") {
    TriangleMesh m;
    m.vertices = Eigen::Matrix3Xf::Random(3, 5);
    m.faces.resize(3, 2);
    m.faces << 0, 2, 1, 3, 4, 4;
    const TriangleMesh c = compact_mesh(m, {false, true});
    CHECK(c.num_vertices() == 3);
    CHECK(c.vertices.col(0) == m.vertices.col(2));
    CHECK(c.faces.col(0) == Eigen::Vector3i(0, 1, 2));
  }
}
