#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

#include "presem/mesh.hpp"

namespace presem {

void validate_mesh(const TriangleMesh& mesh, double normal_tol) {
  const Eigen::Index nv = mesh.num_vertices();
  if (!mesh.vertices.allFinite()) throw std::domain_error("mesh: non-finite vertex");
  if (mesh.num_faces() > 0 && (mesh.faces.minCoeff() < 0 || mesh.faces.maxCoeff() >= nv))
    throw std::domain_error("mesh: face index out of range");
  if (mesh.normals.cols() != 0) {
    if (mesh.normals.cols() != nv) throw std::domain_error("mesh: normal count differs from vertex count");
    for (Eigen::Index i = 0; i < nv; ++i)
      if (!(std::abs(mesh.normals.col(i).cast<double>().norm() - 1.0) <= normal_tol))
        throw std::domain_error("mesh: normal " + std::to_string(i) + " is not unit length");
  }
}

double face_area(const TriangleMesh& mesh, Eigen::Index f) {
  const Eigen::Vector3d a = mesh.vertices.col(mesh.faces(0, f)).cast<double>();
  const Eigen::Vector3d b = mesh.vertices.col(mesh.faces(1, f)).cast<double>();
  const Eigen::Vector3d c = mesh.vertices.col(mesh.faces(2, f)).cast<double>();
  return 0.5 * (b - a).cross(c - a).norm();
}

bool is_watertight(const TriangleMesh& mesh) {
  if (mesh.empty()) return false;
  std::map<std::pair<int, int>, int> count;
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f)
    for (int k = 0; k < 3; ++k) {
      int a = mesh.faces(k, f), b = mesh.faces((k + 1) % 3, f);
      if (a > b) std::swap(a, b);
      ++count[{a, b}];
    }
  return std::all_of(count.begin(), count.end(), [](const auto& kv) { return kv.second == 2; });
}

TriangleMesh compact_mesh(const TriangleMesh& mesh, const std::vector<bool>& keep_face) {
  if (static_cast<Eigen::Index>(keep_face.size()) != mesh.num_faces())
    throw std::domain_error("compact_mesh: mask size mismatch");
  std::vector<int> remap(static_cast<std::size_t>(mesh.num_vertices()), -1);
  Eigen::Index nf = 0;
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f)
    if (keep_face[static_cast<std::size_t>(f)]) {
      ++nf;
      for (int k = 0; k < 3; ++k) remap[static_cast<std::size_t>(mesh.faces(k, f))] = 0;
    }
  int nv = 0;
  for (auto& r : remap)
    if (r == 0) r = nv++;
  TriangleMesh out;
  out.vertices.resize(3, nv);
  if (mesh.normals.cols() != 0) out.normals.resize(3, nv);
  for (std::size_t i = 0; i < remap.size(); ++i) {
    if (remap[i] < 0) continue;
    out.vertices.col(remap[i]) = mesh.vertices.col(static_cast<Eigen::Index>(i));
    if (mesh.normals.cols() != 0) out.normals.col(remap[i]) = mesh.normals.col(static_cast<Eigen::Index>(i));
  }
  out.faces.resize(3, nf);
  Eigen::Index j = 0;
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f)
    if (keep_face[static_cast<std::size_t>(f)]) {
      for (int k = 0; k < 3; ++k) out.faces(k, j) = remap[static_cast<std::size_t>(mesh.faces(k, f))];
      ++j;
    }
  return out;
}

TriangleMesh cull_mesh(const TriangleMesh& mesh, const std::vector<CullingView>& views, double margin) {
  std::vector<bool> seen(static_cast<std::size_t>(mesh.num_vertices()), false);
  for (Eigen::Index i = 0; i < mesh.num_vertices(); ++i) {
    const Eigen::Vector3d p = mesh.vertices.col(i).cast<double>();
    for (const auto& v : views) {
      const Eigen::Vector3d q = project(v.intrinsics, v.pose, p);
      if (!(q.z() > 0.0)) continue;
      const long px = std::lround(q.x()), py = std::lround(q.y());
      if (px < 0 || py < 0 || px >= v.width || py >= v.height) continue;
      const float d = v.depth[static_cast<std::size_t>(py * v.width + px)];
      if (d > 0.0f && q.z() <= d + margin) {
        seen[static_cast<std::size_t>(i)] = true;
        break;
      }
    }
  }
  std::vector<bool> keep(static_cast<std::size_t>(mesh.num_faces()));
  for (Eigen::Index f = 0; f < mesh.num_faces(); ++f)
    keep[static_cast<std::size_t>(f)] = seen[static_cast<std::size_t>(mesh.faces(0, f))] &&
                                        seen[static_cast<std::size_t>(mesh.faces(1, f))] &&
                                        seen[static_cast<std::size_t>(mesh.faces(2, f))];
  return compact_mesh(mesh, keep);
}

// ---------------------------------------------------------------------------------------
// Marching cubes
//
// Polygons are built per cube from the contour segments on its six faces. Each face is
// contoured from its own four corner values (the asymptotic decider settles the
// two-crossing-pair case), so adjacent cubes agree on the shared segments and the
// result is closed wherever the surface stays inside the lattice.

namespace {

// corner c has offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
constexpr std::array<std::array<int, 2>, 12> kCubeEdges{{
    {0, 1}, {2, 3}, {4, 5}, {6, 7},  // x
    {0, 2}, {1, 3}, {4, 6}, {5, 7},  // y
    {0, 4}, {1, 5}, {2, 6}, {3, 7},  // z
}};

// Faces with corners counter-clockwise seen from outside the cube.
constexpr std::array<std::array<int, 4>, 6> kCubeFaces{{
    {0, 4, 6, 2},  // -x
    {1, 3, 7, 5},  // +x
    {0, 1, 5, 4},  // -y
    {2, 6, 7, 3},  // +y
    {0, 2, 3, 1},  // -z
    {4, 5, 7, 6},  // +z
}};

int cube_edge(int a, int b) {
  for (int e = 0; e < 12; ++e) {
    const auto& ce = kCubeEdges[static_cast<std::size_t>(e)];
    if ((ce[0] == a && ce[1] == b) || (ce[0] == b && ce[1] == a)) return e;
  }
  return -1;
}

struct Lattice {
  int n;
  Eigen::Vector3d origin, pitch;
  std::vector<double> values;

  long long node(int i, int j, int k) const { return i + static_cast<long long>(n) * (j + static_cast<long long>(n) * k); }
  Eigen::Vector3d position(int i, int j, int k) const {
    return origin + Eigen::Vector3d(i * pitch.x(), j * pitch.y(), k * pitch.z());
  }
};

}  // namespace

MeshingResult extract_mesh(const BatchField& field, const Aabb& box, const MeshingOptions& opt) {
  if (opt.resolution < 8) throw std::domain_error("extract_mesh: resolution must be >= 8");
  if (!((box.max - box.min).array() > 0.0).all()) throw std::domain_error("extract_mesh: empty box");
  const int n = opt.resolution;
  Lattice lat{n, box.min, (box.max - box.min) / (n - 1), {}};
  lat.values.resize(static_cast<std::size_t>(n) * n * n);
  {
    Eigen::Matrix3Xd slice(3, static_cast<Eigen::Index>(n) * n);
    for (int k = 0; k < n; ++k) {
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) slice.col(i + n * j) = lat.position(i, j, k);
      const Eigen::VectorXd v = field(slice);
      if (v.size() != slice.cols()) throw std::domain_error("extract_mesh: field returned the wrong count");
      for (Eigen::Index c = 0; c < v.size(); ++c) {
        if (!std::isfinite(v(c))) throw std::domain_error("extract_mesh: field returned a non-finite value");
        lat.values[static_cast<std::size_t>(k) * n * n + static_cast<std::size_t>(c)] = v(c);
      }
    }
  }
  const auto positive = [&](long long node) { return lat.values[static_cast<std::size_t>(node)] > opt.iso; };

  // one vertex per sign-changing lattice edge, numbered in edge-index order
  std::unordered_map<long long, int> vertex_of_edge;
  std::vector<Eigen::Vector3d> verts;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const long long a = lat.node(i, j, k);
        for (int axis = 0; axis < 3; ++axis) {
          int ii = i, jj = j, kk = k;
          (axis == 0 ? ii : axis == 1 ? jj : kk) += 1;
          if (ii >= n || jj >= n || kk >= n) continue;
          const long long b = lat.node(ii, jj, kk);
          if (positive(a) == positive(b)) continue;
          const double fa = lat.values[static_cast<std::size_t>(a)], fb = lat.values[static_cast<std::size_t>(b)];
          // keep vertices off the lattice nodes so that no two coincide
          const double t = std::clamp((opt.iso - fa) / (fb - fa), 1e-6, 1.0 - 1e-6);
          vertex_of_edge.emplace(3 * a + axis, static_cast<int>(verts.size()));
          verts.push_back((1.0 - t) * lat.position(i, j, k) + t * lat.position(ii, jj, kk));
        }
      }

  MeshingResult res;
  res.pitch[0] = lat.pitch.x();
  res.pitch[1] = lat.pitch.y();
  res.pitch[2] = lat.pitch.z();
  if (verts.empty()) {
    res.empty = true;
    return res;
  }

  std::vector<std::array<int, 3>> tris;
  for (int k = 0; k + 1 < n; ++k)
    for (int j = 0; j + 1 < n; ++j)
      for (int i = 0; i + 1 < n; ++i) {
        std::array<long long, 8> node{};
        std::array<double, 8> val{};
        int npos = 0;
        for (int c = 0; c < 8; ++c) {
          node[static_cast<std::size_t>(c)] = lat.node(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
          val[static_cast<std::size_t>(c)] = lat.values[static_cast<std::size_t>(node[static_cast<std::size_t>(c)])];
          npos += val[static_cast<std::size_t>(c)] > opt.iso ? 1 : 0;
        }
        if (npos == 0 || npos == 8) continue;
        const auto edge_vertex = [&](int e) {
          const auto& ce = kCubeEdges[static_cast<std::size_t>(e)];
          const long long a = node[static_cast<std::size_t>(ce[0])];
          const int axis = e / 4;
          return vertex_of_edge.at(3 * a + axis);
        };
        // next[u] = v for every oriented segment u -> v (cube edge ids)
        std::array<int, 12> next;
        next.fill(-1);
        for (const auto& face : kCubeFaces) {
          std::array<int, 4> up{}, down{};
          int nup = 0, ndown = 0;
          std::array<int, 4> kind{};  // per face edge: +1 up, -1 down, 0 none
          for (int s = 0; s < 4; ++s) {
            const int a = face[static_cast<std::size_t>(s)], b = face[static_cast<std::size_t>((s + 1) % 4)];
            const bool pa = val[static_cast<std::size_t>(a)] > opt.iso, pb = val[static_cast<std::size_t>(b)] > opt.iso;
            kind[static_cast<std::size_t>(s)] = pa == pb ? 0 : (pb ? 1 : -1);
            if (kind[static_cast<std::size_t>(s)] == 1) up[static_cast<std::size_t>(nup++)] = s;
            if (kind[static_cast<std::size_t>(s)] == -1) down[static_cast<std::size_t>(ndown++)] = s;
          }
          if (nup == 0) continue;
          bool connect_positive = false;
          if (nup == 2) {
            const double v0 = val[static_cast<std::size_t>(face[0])], v1 = val[static_cast<std::size_t>(face[1])];
            const double v2 = val[static_cast<std::size_t>(face[2])], v3 = val[static_cast<std::size_t>(face[3])];
            const double den = v0 + v2 - v1 - v3;
            const double saddle = den != 0.0 ? (v0 * v2 - v1 * v3) / den : 0.25 * (v0 + v1 + v2 + v3);
            connect_positive = saddle > opt.iso;
          }
          for (int d = 0; d < ndown; ++d) {
            const int sd = down[static_cast<std::size_t>(d)];
            // separated positives: close each positive arc back to the up crossing before it;
            // connected positives: continue to the up crossing after it
            int su = sd;
            for (int step = 1; step <= 4; ++step) {
              const int cand = connect_positive ? (sd + step) % 4 : (sd - step + 4) % 4;
              if (kind[static_cast<std::size_t>(cand)] == 1) {
                su = cand;
                break;
              }
            }
            const int from = cube_edge(face[static_cast<std::size_t>(sd)], face[static_cast<std::size_t>((sd + 1) % 4)]);
            const int to = cube_edge(face[static_cast<std::size_t>(su)], face[static_cast<std::size_t>((su + 1) % 4)]);
            next[static_cast<std::size_t>(from)] = to;
          }
        }
        std::array<bool, 12> used{};
        for (int start = 0; start < 12; ++start) {
          if (next[static_cast<std::size_t>(start)] < 0 || used[static_cast<std::size_t>(start)]) continue;
          std::vector<int> loop;
          for (int e = start; !used[static_cast<std::size_t>(e)]; e = next[static_cast<std::size_t>(e)]) {
            used[static_cast<std::size_t>(e)] = true;
            loop.push_back(edge_vertex(e));
            if (next[static_cast<std::size_t>(e)] < 0) throw std::logic_error("extract_mesh: open contour loop");
          }
          for (std::size_t t = 1; t + 1 < loop.size(); ++t) tris.push_back({loop[0], loop[t], loop[t + 1]});
        }
      }

  TriangleMesh& m = res.mesh;
  m.vertices.resize(3, static_cast<Eigen::Index>(verts.size()));
  for (std::size_t v = 0; v < verts.size(); ++v) m.vertices.col(static_cast<Eigen::Index>(v)) = verts[v].cast<float>();
  m.faces.resize(3, static_cast<Eigen::Index>(tris.size()));
  for (std::size_t f = 0; f < tris.size(); ++f)
    for (int c = 0; c < 3; ++c) m.faces(c, static_cast<Eigen::Index>(f)) = tris[f][static_cast<std::size_t>(c)];

  // normals from central differences of the field
  const double h = opt.normal_step > 0.0 ? opt.normal_step : 0.5 * lat.pitch.minCoeff();
  const Eigen::Index nv = m.num_vertices();
  Eigen::Matrix3Xd probe(3, 6 * nv);
  for (Eigen::Index v = 0; v < nv; ++v)
    for (int a = 0; a < 3; ++a) {
      probe.col(6 * v + 2 * a) = verts[static_cast<std::size_t>(v)] + h * Eigen::Vector3d::Unit(a);
      probe.col(6 * v + 2 * a + 1) = verts[static_cast<std::size_t>(v)] - h * Eigen::Vector3d::Unit(a);
    }
  const Eigen::VectorXd f = field(probe);
  // fall back to area-weighted face normals where the field gradient vanishes
  Eigen::Matrix3Xd face_sum = Eigen::Matrix3Xd::Zero(3, nv);
  for (Eigen::Index t = 0; t < m.num_faces(); ++t) {
    const Eigen::Vector3d a = verts[static_cast<std::size_t>(m.faces(0, t))];
    const Eigen::Vector3d b = verts[static_cast<std::size_t>(m.faces(1, t))];
    const Eigen::Vector3d c = verts[static_cast<std::size_t>(m.faces(2, t))];
    const Eigen::Vector3d nrm = (b - a).cross(c - a);
    for (int k = 0; k < 3; ++k) face_sum.col(m.faces(k, t)) += nrm;
  }
  m.normals.resize(3, nv);
  for (Eigen::Index v = 0; v < nv; ++v) {
    Eigen::Vector3d g;
    for (int a = 0; a < 3; ++a) g[a] = f(6 * v + 2 * a) - f(6 * v + 2 * a + 1);
    if (!(g.norm() > 1e-12)) g = face_sum.col(v);
    if (!(g.norm() > 1e-12)) g = Eigen::Vector3d::UnitZ();
    m.normals.col(v) = g.normalized().cast<float>();
  }
  return res;
}

}  // namespace presem
