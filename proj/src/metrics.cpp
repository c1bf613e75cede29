#include "presem/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "presem/geometry.hpp"
#include "presem/parallel.hpp"

namespace presem {

namespace {

constexpr std::uint64_t kSampleStream = 0x6d657472;  // "metr"
constexpr int kLeafSize = 8;

Eigen::Vector3d vertex(const TriangleMesh& m, Eigen::Index f, int k) {
  return m.vertices.col(m.faces(k, f)).cast<double>();
}

}  // namespace

SampledCloud sample_surface(const TriangleMesh& mesh, int n, std::mt19937_64& rng, int source) {
  if (n < 1) throw std::domain_error("sample_surface: n must be >= 1");
  std::vector<double> cumulative(static_cast<std::size_t>(mesh.num_faces()));
  double total = 0.0;
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
    total += face_area(mesh, f);
    cumulative[static_cast<std::size_t>(f)] = total;
  }
  if (!(total > 0.0)) throw std::domain_error("sample_surface: mesh has no surface area");

  SampledCloud c;
  c.source = source;
  c.points.resize(3, n);
  c.normals.resize(3, n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double pick = u(rng) * total;
    // upper_bound never lands on a zero-area face except when rounding puts pick at total
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) it = std::lower_bound(cumulative.begin(), cumulative.end(), total);
    const Eigen::Index f = it - cumulative.begin();
    const Eigen::Vector3d a = vertex(mesh, f, 0), b = vertex(mesh, f, 1), cc = vertex(mesh, f, 2);
    const double r1 = std::sqrt(u(rng)), r2 = u(rng);
    c.points.col(i) = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * cc;
    c.normals.col(i) = (b - a).cross(cc - a).normalized();
  }
  return c;
}

// ---------------------------------------------------------------------------------------
// KD-tree

KdTree::KdTree(Eigen::Matrix3Xd points) : points_(std::move(points)) {
  if (points_.cols() == 0) throw std::domain_error("KdTree: no points");
  order_.resize(static_cast<std::size_t>(points_.cols()));
  std::iota(order_.begin(), order_.end(), Eigen::Index{0});
  nodes_.reserve(static_cast<std::size_t>(2 * points_.cols() / kLeafSize + 2));
  build(0, static_cast<int>(points_.cols()));
}

int KdTree::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= kLeafSize) return id;
  // split the widest axis at the median
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (int i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_.col(order_[static_cast<std::size_t>(i)]));
    hi = hi.cwiseMax(points_.col(order_[static_cast<std::size_t>(i)]));
  }
  int axis;
  (hi - lo).maxCoeff(&axis);
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Eigen::Index a, Eigen::Index b) { return points_(axis, a) < points_(axis, b); });
  const double split = points_(axis, order_[static_cast<std::size_t>(mid)]);
  const int left = build(begin, mid);
  const int right = build(mid, end);
  Node& node = nodes_[static_cast<std::size_t>(id)];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return id;
}

void KdTree::search(int id, const Eigen::Vector3d& q, Hit& best, double& best_sq) const {
  const Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.axis < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      const Eigen::Index p = order_[static_cast<std::size_t>(i)];
      const double d = (points_.col(p) - q).squaredNorm();
      if (d < best_sq || (d == best_sq && p < best.index)) {
        best_sq = d;
        best.index = p;
      }
    }
    return;
  }
  // left holds coordinates <= split, right holds >= split
  const double diff = q(node.axis) - node.split;
  const int near = diff < 0.0 ? node.left : node.right;
  const int far = diff < 0.0 ? node.right : node.left;
  search(near, q, best, best_sq);
  if (diff * diff <= best_sq) search(far, q, best, best_sq);
}

KdTree::Hit KdTree::nearest(const Eigen::Vector3d& q) const {
  Hit best;
  double best_sq = std::numeric_limits<double>::infinity();
  search(0, q, best, best_sq);
  best.distance = std::sqrt(best_sq);
  return best;
}

KdTree::Hit brute_force_nearest(const Eigen::Matrix3Xd& points, const Eigen::Vector3d& q) {
  KdTree::Hit best;
  double best_sq = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    const double d = (points.col(i) - q).squaredNorm();
    if (d < best_sq) {
      best_sq = d;
      best.index = i;
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

std::vector<KdTree::Hit> nearest_all(const KdTree& tree, const Eigen::Matrix3Xd& queries, int threads) {
  std::vector<KdTree::Hit> hits(static_cast<std::size_t>(queries.cols()));
  constexpr int kBlock = 4096;
  const int blocks = static_cast<int>((queries.cols() + kBlock - 1) / kBlock);
  parallel_for(blocks, threads, [&](int b) {
    const Eigen::Index end = std::min<Eigen::Index>(queries.cols(), static_cast<Eigen::Index>(b + 1) * kBlock);
    for (Eigen::Index i = static_cast<Eigen::Index>(b) * kBlock; i < end; ++i)
      hits[static_cast<std::size_t>(i)] = tree.nearest(queries.col(i));
  });
  return hits;
}

// ---------------------------------------------------------------------------------------
// point metrics

namespace {

struct Pairing {
  std::vector<KdTree::Hit> pred_to_gt, gt_to_pred;
};

Pairing pair_clouds(const SampledCloud& pred, const SampledCloud& gt, int threads) {
  if (pred.size() == 0 || gt.size() == 0) throw std::domain_error("metrics: empty point cloud");
  Pairing p;
  p.pred_to_gt = nearest_all(KdTree(gt.points), pred.points, threads);
  p.gt_to_pred = nearest_all(KdTree(pred.points), gt.points, threads);
  return p;
}

double mean_distance(const std::vector<KdTree::Hit>& hits) {
  double s = 0.0;
  for (const auto& h : hits) s += h.distance;
  return s / static_cast<double>(hits.size());
}

ChamferResult chamfer_from(const Pairing& p) {
  ChamferResult r;
  r.acc = mean_distance(p.pred_to_gt);
  r.comp = mean_distance(p.gt_to_pred);
  r.c_l1 = 0.5 * (r.acc + r.comp);
  return r;
}

double consistency_from(const Pairing& p, const SampledCloud& pred, const SampledCloud& gt) {
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < p.pred_to_gt.size(); ++i)
    a += std::abs(pred.normals.col(static_cast<Eigen::Index>(i)).dot(gt.normals.col(p.pred_to_gt[i].index)));
  for (std::size_t i = 0; i < p.gt_to_pred.size(); ++i)
    b += std::abs(gt.normals.col(static_cast<Eigen::Index>(i)).dot(pred.normals.col(p.gt_to_pred[i].index)));
  return 0.5 * (a / static_cast<double>(p.pred_to_gt.size()) + b / static_cast<double>(p.gt_to_pred.size()));
}

double fraction_within(const std::vector<KdTree::Hit>& hits, double tau) {
  std::size_t n = 0;
  for (const auto& h : hits) n += h.distance < tau ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(hits.size());
}

FScore fscore_from(const Pairing& p, double tau) {
  if (!(tau > 0.0)) throw std::domain_error("f_score: tau must be positive");
  FScore f;
  f.precision = fraction_within(p.pred_to_gt, tau);
  f.recall = fraction_within(p.gt_to_pred, tau);
  f.f = f.precision + f.recall > 0.0 ? 2.0 * f.precision * f.recall / (f.precision + f.recall) : 0.0;
  return f;
}

}  // namespace

ChamferResult chamfer(const SampledCloud& pred, const SampledCloud& gt, int threads) {
  return chamfer_from(pair_clouds(pred, gt, threads));
}

double normal_consistency(const SampledCloud& pred, const SampledCloud& gt, int threads) {
  return consistency_from(pair_clouds(pred, gt, threads), pred, gt);
}

FScore f_score(const SampledCloud& pred, const SampledCloud& gt, double tau, int threads) {
  if (!(tau > 0.0)) throw std::domain_error("f_score: tau must be positive");
  return fscore_from(pair_clouds(pred, gt, threads), tau);
}

// ---------------------------------------------------------------------------------------
// IoU

std::vector<Eigen::Vector3i> occupied_cells(const TriangleMesh& mesh, const Eigen::Vector3d& origin, double voxel) {
  if (!(voxel > 0.0)) throw std::domain_error("iou: voxel must be positive");
  std::vector<Eigen::Vector3i> cells;
  const double step = 0.25 * voxel;
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
    const Eigen::Vector3d a = vertex(mesh, f, 0), b = vertex(mesh, f, 1), c = vertex(mesh, f, 2);
    const double longest = std::max({(b - a).norm(), (c - a).norm(), (c - b).norm()});
    const int m = std::max(1, static_cast<int>(std::ceil(longest / step)));
    for (int i = 0; i <= m; ++i)
      for (int j = 0; i + j <= m; ++j) {
        const Eigen::Vector3d p = a + (static_cast<double>(i) / m) * (b - a) + (static_cast<double>(j) / m) * (c - a);
        cells.push_back(((p - origin) / voxel).array().floor().cast<int>().matrix());
      }
  }
  std::sort(cells.begin(), cells.end(), [](const Eigen::Vector3i& x, const Eigen::Vector3i& y) {
    return std::lexicographical_compare(x.data(), x.data() + 3, y.data(), y.data() + 3);
  });
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  return cells;
}

IouResult iou(const TriangleMesh& pred, const TriangleMesh& gt, double voxel) {
  if (!(voxel > 0.0)) throw std::domain_error("iou: voxel must be positive");
  IouResult r;
  if (pred.empty() && gt.empty()) {
    r.iou = 1.0;
    r.both_empty = true;
    return r;
  }
  Eigen::Vector3d origin = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  for (const TriangleMesh* m : {&pred, &gt})
    for (Eigen::Index f = 0; f < m->num_faces(); ++f)
      for (int k = 0; k < 3; ++k) origin = origin.cwiseMin(vertex(*m, f, k));
  const auto a = occupied_cells(pred, origin, voxel);
  const auto b = occupied_cells(gt, origin, voxel);
  std::vector<Eigen::Vector3i> both;
  const auto less = [](const Eigen::Vector3i& x, const Eigen::Vector3i& y) {
    return std::lexicographical_compare(x.data(), x.data() + 3, y.data(), y.data() + 3);
  };
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both), less);
  r.pred_cells = static_cast<std::int64_t>(a.size());
  r.gt_cells = static_cast<std::int64_t>(b.size());
  r.intersection = static_cast<std::int64_t>(both.size());
  const std::int64_t uni = r.pred_cells + r.gt_cells - r.intersection;
  r.iou = uni > 0 ? static_cast<double>(r.intersection) / static_cast<double>(uni) : 1.0;
  r.both_empty = uni == 0;
  return r;
}

// ---------------------------------------------------------------------------------------

MetricsReport evaluate(const TriangleMesh& pred, const TriangleMesh& gt, const MetricsConfig& cfg) {
  if (pred.empty() || gt.empty()) throw std::domain_error("evaluate: meshes must be non-empty");
  if (cfg.samples < 1) throw std::domain_error("evaluate: samples must be >= 1");
  std::mt19937_64 rng_pred(split_seed(cfg.seed, kSampleStream));
  std::mt19937_64 rng_gt(split_seed(cfg.seed, kSampleStream));
  const SampledCloud p = sample_surface(pred, cfg.samples, rng_pred, 0);
  const SampledCloud g = sample_surface(gt, cfg.samples, rng_gt, 1);
  const Pairing pairs = pair_clouds(p, g, cfg.threads);
  const ChamferResult ch = chamfer_from(pairs);
  const FScore fs = fscore_from(pairs, cfg.tau);
  const IouResult io = iou(pred, gt, cfg.voxel);

  MetricsReport r;
  r.acc = ch.acc;
  r.comp = ch.comp;
  r.c_l1 = ch.c_l1;
  r.nc = consistency_from(pairs, p, g);
  r.precision = fs.precision;
  r.recall = fs.recall;
  r.f_score = fs.f;
  r.iou = io.iou;
  r.iou_both_empty = io.both_empty;
  r.tau = cfg.tau;
  r.voxel = cfg.voxel;
  r.pred_samples = static_cast<int>(p.size());
  r.gt_samples = static_cast<int>(g.size());
  r.seed = cfg.seed;
  return r;
}

std::string metrics_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["c_l1"] = r.c_l1;
  j["nc"] = r.nc;
  j["f_score"] = r.f_score;
  j["iou"] = r.iou;
  j["acc"] = r.acc;
  j["comp"] = r.comp;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["thresholds"] = {{"tau_d", r.tau}, {"voxel", r.voxel}};
  j["counts"] = {{"pred_samples", r.pred_samples}, {"gt_samples", r.gt_samples}};
  j["iou_both_empty"] = r.iou_both_empty;
  j["seed"] = r.seed;
  return j.dump(2);
}

std::string metrics_table(const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%10s %10s %10s %10s %10s %10s\n%10.4f %10.4f %10.4f %10.4f %10.4f %10.4f\n", "C-L1",
                "NC", "F-score", "IoU", "Acc", "Comp", r.c_l1, r.nc, r.f_score, r.iou, r.acc, r.comp);
  return buf;
}

}  // namespace presem
