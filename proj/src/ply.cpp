#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "presem/errors.hpp"
#include "presem/mesh.hpp"

namespace presem {

void write_mesh(const TriangleMesh& mesh, const std::string& path) {
  validate_mesh(mesh, 1e-3);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  const bool normals = mesh.normals.cols() == mesh.vertices.cols() && mesh.num_vertices() > 0;
  f << "ply\nformat binary_little_endian 1.0\n";
  f << "element vertex " << mesh.num_vertices() << "\n";
  f << "property float x\nproperty float y\nproperty float z\n";
  if (normals) f << "property float nx\nproperty float ny\nproperty float nz\n";
  f << "element face " << mesh.num_faces() << "\n";
  f << "property list uchar int vertex_indices\nend_header\n";
  for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v) {
    f.write(reinterpret_cast<const char*>(mesh.vertices.col(v).data()), 3 * sizeof(float));
    if (normals) f.write(reinterpret_cast<const char*>(mesh.normals.col(v).data()), 3 * sizeof(float));
  }
  for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
    const std::uint8_t three = 3;
    f.write(reinterpret_cast<const char*>(&three), 1);
    f.write(reinterpret_cast<const char*>(mesh.faces.col(t).data()), 3 * sizeof(int));
  }
  if (!f) throw DataError("failed writing " + path);
}

namespace {

enum class PlyType { kInt8, kUint8, kInt16, kUint16, kInt32, kUint32, kFloat32, kFloat64 };

PlyType parse_type(const std::string& s, const std::string& path, int line) {
  if (s == "char" || s == "int8") return PlyType::kInt8;
  if (s == "uchar" || s == "uint8") return PlyType::kUint8;
  if (s == "short" || s == "int16") return PlyType::kInt16;
  if (s == "ushort" || s == "uint16") return PlyType::kUint16;
  if (s == "int" || s == "int32") return PlyType::kInt32;
  if (s == "uint" || s == "uint32") return PlyType::kUint32;
  if (s == "float" || s == "float32") return PlyType::kFloat32;
  if (s == "double" || s == "float64") return PlyType::kFloat64;
  throw DataError(path + ":" + std::to_string(line) + ": unknown PLY type '" + s + "'");
}

std::size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::kInt8:
    case PlyType::kUint8:
      return 1;
    case PlyType::kInt16:
    case PlyType::kUint16:
      return 2;
    case PlyType::kInt32:
    case PlyType::kUint32:
    case PlyType::kFloat32:
      return 4;
    case PlyType::kFloat64:
      return 8;
  }
  return 0;
}

double decode(PlyType t, const char* p) {
  switch (t) {
    case PlyType::kInt8: return static_cast<double>(*reinterpret_cast<const std::int8_t*>(p));
    case PlyType::kUint8: return static_cast<double>(*reinterpret_cast<const std::uint8_t*>(p));
    case PlyType::kInt16: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
    case PlyType::kUint16: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
    case PlyType::kInt32: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
    case PlyType::kUint32: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
    case PlyType::kFloat32: { float v; std::memcpy(&v, p, 4); return v; }
    case PlyType::kFloat64: { double v; std::memcpy(&v, p, 8); return v; }
  }
  return 0.0;
}

struct Property {
  std::string name;
  PlyType type = PlyType::kFloat32;
  bool is_list = false;
  PlyType count_type = PlyType::kUint8;
};

struct Element {
  std::string name;
  long long count = 0;
  std::vector<Property> props;
};

}  // namespace

TriangleMesh read_mesh(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path);
  std::string line;
  int lineno = 0;
  auto next_line = [&]() {
    if (!std::getline(f, line)) throw DataError(path + ": unexpected end of PLY header");
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };
  next_line();
  if (line != "ply") throw DataError(path + ":1: missing 'ply' magic");
  bool binary = false;
  std::vector<Element> elements;
  for (;;) {
    next_line();
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "end_header") break;
    if (word == "comment" || word == "obj_info" || word.empty()) continue;
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt == "binary_little_endian")
        binary = true;
      else if (fmt == "ascii")
        binary = false;
      else
        throw DataError(path + ":" + std::to_string(lineno) + ": unsupported PLY format '" + fmt + "'");
    } else if (word == "element") {
      Element e;
      ss >> e.name >> e.count;
      if (!ss || e.count < 0) throw DataError(path + ":" + std::to_string(lineno) + ": malformed element line");
      elements.push_back(e);
    } else if (word == "property") {
      if (elements.empty()) throw DataError(path + ":" + std::to_string(lineno) + ": property before element");
      Property p;
      std::string t;
      ss >> t;
      if (t == "list") {
        std::string ct, it;
        ss >> ct >> it >> p.name;
        p.is_list = true;
        p.count_type = parse_type(ct, path, lineno);
        p.type = parse_type(it, path, lineno);
      } else {
        p.type = parse_type(t, path, lineno);
        ss >> p.name;
      }
      if (p.name.empty()) throw DataError(path + ":" + std::to_string(lineno) + ": property without a name");
      elements.back().props.push_back(p);
    } else {
      throw DataError(path + ":" + std::to_string(lineno) + ": unexpected header keyword '" + word + "'");
    }
  }

  TriangleMesh mesh;
  std::vector<std::array<int, 3>> faces;
  bool has_normals = false;
  for (const auto& e : elements) {
    const bool is_vertex = e.name == "vertex";
    const bool is_face = e.name == "face";
    int ix[6] = {-1, -1, -1, -1, -1, -1};
    const char* names[6] = {"x", "y", "z", "nx", "ny", "nz"};
    for (std::size_t p = 0; p < e.props.size(); ++p)
      for (int k = 0; k < 6; ++k)
        if (e.props[p].name == names[k]) ix[k] = static_cast<int>(p);
    if (is_vertex) {
      if (ix[0] < 0 || ix[1] < 0 || ix[2] < 0) throw DataError(path + ": vertex element lacks x/y/z");
      has_normals = ix[3] >= 0 && ix[4] >= 0 && ix[5] >= 0;
      mesh.vertices.resize(3, e.count);
      if (has_normals) mesh.normals.resize(3, e.count);
    }
    std::vector<double> scalars(e.props.size());
    std::vector<double> list;
    for (long long r = 0; r < e.count; ++r) {
      list.clear();
      if (binary) {
        for (std::size_t p = 0; p < e.props.size(); ++p) {
          const auto& pr = e.props[p];
          char buf[8];
          if (pr.is_list) {
            if (!f.read(buf, static_cast<std::streamsize>(type_size(pr.count_type))))
              throw DataError(path + ": truncated at byte " + std::to_string(static_cast<long long>(f.tellg())));
            const long long n = static_cast<long long>(decode(pr.count_type, buf));
            for (long long k = 0; k < n; ++k) {
              if (!f.read(buf, static_cast<std::streamsize>(type_size(pr.type))))
                throw DataError(path + ": truncated list in element " + e.name);
              if (is_face && pr.name.find("vertex_ind") == 0) list.push_back(decode(pr.type, buf));
            }
          } else {
            const auto pos = f.tellg();
            if (!f.read(buf, static_cast<std::streamsize>(type_size(pr.type))))
              throw DataError(path + ": truncated at byte " + std::to_string(static_cast<long long>(pos)));
            scalars[p] = decode(pr.type, buf);
          }
        }
      } else {
        next_line();
        std::istringstream ss(line);
        for (std::size_t p = 0; p < e.props.size(); ++p) {
          const auto& pr = e.props[p];
          if (pr.is_list) {
            long long n = 0;
            if (!(ss >> n)) throw DataError(path + ":" + std::to_string(lineno) + ": bad list count");
            for (long long k = 0; k < n; ++k) {
              double v;
              if (!(ss >> v)) throw DataError(path + ":" + std::to_string(lineno) + ": short list");
              if (is_face && pr.name.find("vertex_ind") == 0) list.push_back(v);
            }
          } else if (!(ss >> scalars[p])) {
            throw DataError(path + ":" + std::to_string(lineno) + ": expected a number");
          }
        }
      }
      if (is_vertex) {
        for (int k = 0; k < 3; ++k) mesh.vertices(k, r) = static_cast<float>(scalars[static_cast<std::size_t>(ix[k])]);
        if (has_normals)
          for (int k = 0; k < 3; ++k) mesh.normals(k, r) = static_cast<float>(scalars[static_cast<std::size_t>(ix[3 + k])]);
      } else if (is_face) {
        if (list.size() < 3) throw DataError(path + ": face " + std::to_string(r) + " has fewer than 3 vertices");
        for (std::size_t k = 1; k + 1 < list.size(); ++k)
          faces.push_back({static_cast<int>(list[0]), static_cast<int>(list[k]), static_cast<int>(list[k + 1])});
      }
    }
  }
  mesh.faces.resize(3, static_cast<Eigen::Index>(faces.size()));
  for (std::size_t t = 0; t < faces.size(); ++t)
    for (int k = 0; k < 3; ++k) mesh.faces(k, static_cast<Eigen::Index>(t)) = faces[t][static_cast<std::size_t>(k)];
  if (mesh.num_faces() > 0 && (mesh.faces.minCoeff() < 0 || mesh.faces.maxCoeff() >= mesh.num_vertices()))
    throw DataError(path + ": face index out of range");
  if (has_normals) {
    for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v) {
      const float n = mesh.normals.col(v).norm();
      if (n > 0.0f) mesh.normals.col(v) /= n;
    }
  }
  return mesh;
}

}  // namespace presem
