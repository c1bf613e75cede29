#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "presem/geometry.hpp"

namespace presem {

struct TriangleMesh {
  Eigen::Matrix3Xf vertices;
  Eigen::Matrix3Xi faces;
  Eigen::Matrix3Xf normals;  // per vertex; may be empty

  Eigen::Index num_vertices() const { return vertices.cols(); }
  Eigen::Index num_faces() const { return faces.cols(); }
  bool empty() const { return faces.cols() == 0; }
};

/// Checks index ranges, finiteness and normal length; throws std::domain_error.
void validate_mesh(const TriangleMesh& mesh, double normal_tol = 1e-6);

double face_area(const TriangleMesh& mesh, Eigen::Index f);

/// Number of faces sharing each undirected edge is exactly two.
bool is_watertight(const TriangleMesh& mesh);

/// Binary little-endian PLY with float xyz/nxnynz and int32 face lists.
void write_mesh(const TriangleMesh& mesh, const std::string& path);

/// Reads binary little-endian or ASCII PLY. Throws DataError with the offending line or
/// byte offset.
TriangleMesh read_mesh(const std::string& path);

/// Scalar field evaluated on a batch of points (3xN -> N).
using BatchField = std::function<Eigen::VectorXd(const Eigen::Matrix3Xd&)>;

struct MeshingOptions {
  int resolution = 64;  // lattice nodes per axis
  double iso = 0.0;
  double normal_step = 0.0;  // 0 selects half the lattice pitch
};

struct MeshingResult {
  TriangleMesh mesh;
  bool empty = false;  // no sign change anywhere
  double pitch[3] = {0, 0, 0};
};

/// Marching cubes over a resolution^3 lattice spanning `box`. Vertices lie on lattice
/// edges (one per sign-changing edge, ordered by edge index); normals come from central
/// differences of `field`.
MeshingResult extract_mesh(const BatchField& field, const Aabb& box, const MeshingOptions& opt);

/// Keeps vertices seen by at least one frame: in front of the camera, inside the image,
/// and not behind the observed surface by more than `margin`. Faces that lose a vertex
/// are dropped and unreferenced vertices removed.
struct CullingView {
  CameraIntrinsics intrinsics;
  Pose pose;
  std::vector<float> depth;  // meters along the optical axis, width*height, 0 = invalid
  int width = 0;
  int height = 0;
};

TriangleMesh cull_mesh(const TriangleMesh& mesh, const std::vector<CullingView>& views, double margin = 0.1);

/// Removes vertices not referenced by any face, keeping the relative order.
TriangleMesh compact_mesh(const TriangleMesh& mesh, const std::vector<bool>& keep_face);

}  // namespace presem
