#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "presem/mesh.hpp"

namespace presem {

/// Points sampled on a mesh surface with the normal of the face each came from.
struct SampledCloud {
  Eigen::Matrix3Xd points;
  Eigen::Matrix3Xd normals;
  int source = 0;

  Eigen::Index size() const { return points.cols(); }
};

/// n points, area-proportional over faces and uniform within each face. Throws
/// std::domain_error for a mesh without positive-area faces.
SampledCloud sample_surface(const TriangleMesh& mesh, int n, std::mt19937_64& rng, int source = 0);

/// Exact nearest-neighbour queries over a fixed point set.
class KdTree {
 public:
  explicit KdTree(Eigen::Matrix3Xd points);

  struct Hit {
    Eigen::Index index = -1;
    double distance = 0.0;
  };
  Hit nearest(const Eigen::Vector3d& q) const;
  Eigen::Index size() const { return points_.cols(); }

 private:
  struct Node {
    int begin, end;  // range in order_
    int axis = -1;   // -1 for leaves
    double split = 0.0;
    int left = -1, right = -1;
  };
  int build(int begin, int end);
  void search(int node, const Eigen::Vector3d& q, Hit& best, double& best_sq) const;

  Eigen::Matrix3Xd points_;
  std::vector<Eigen::Index> order_;
  std::vector<Node> nodes_;
};

KdTree::Hit brute_force_nearest(const Eigen::Matrix3Xd& points, const Eigen::Vector3d& q);

/// Nearest neighbour of every query point in `tree` (parallel over queries).
std::vector<KdTree::Hit> nearest_all(const KdTree& tree, const Eigen::Matrix3Xd& queries, int threads = 0);

struct ChamferResult {
  double acc = 0.0, comp = 0.0, c_l1 = 0.0;
};

ChamferResult chamfer(const SampledCloud& pred, const SampledCloud& gt, int threads = 0);
double normal_consistency(const SampledCloud& pred, const SampledCloud& gt, int threads = 0);

struct FScore {
  double precision = 0.0, recall = 0.0, f = 0.0;
};

FScore f_score(const SampledCloud& pred, const SampledCloud& gt, double tau, int threads = 0);

struct IouResult {
  double iou = 0.0;
  bool both_empty = false;
  std::int64_t pred_cells = 0, gt_cells = 0, intersection = 0;
};

/// Surface-occupancy IoU on a grid of `voxel` cells anchored at the minimum corner of the
/// union bounding box. Each triangle is rasterised by barycentric sampling at a quarter
/// of the voxel size.
IouResult iou(const TriangleMesh& pred, const TriangleMesh& gt, double voxel);

/// Cell indices (x, y, z) occupied by the mesh surface on the grid anchored at `origin`.
std::vector<Eigen::Vector3i> occupied_cells(const TriangleMesh& mesh, const Eigen::Vector3d& origin, double voxel);

struct MetricsConfig {
  int samples = 200000;
  double tau = 0.05;
  double voxel = 0.05;
  std::uint64_t seed = 0;
  int threads = 0;
};

struct MetricsReport {
  double c_l1 = 0.0, nc = 0.0, f_score = 0.0, iou = 0.0, acc = 0.0, comp = 0.0;
  double precision = 0.0, recall = 0.0;
  double tau = 0.0, voxel = 0.0;
  int pred_samples = 0, gt_samples = 0;
  bool iou_both_empty = false;
  std::uint64_t seed = 0;
};

/// All six metrics. Both meshes are sampled from the same seeded stream, so identical
/// meshes produce identical clouds.
MetricsReport evaluate(const TriangleMesh& pred, const TriangleMesh& gt, const MetricsConfig& cfg = {});

std::string metrics_json(const MetricsReport& r);
/// Fixed-width table: C-L1, NC, F-score, IoU, Acc, Comp.
std::string metrics_table(const MetricsReport& r);

}  // namespace presem
