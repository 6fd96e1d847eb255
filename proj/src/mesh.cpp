#include "hashsdf/mesh.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "hashsdf/binary_io.hpp"
#include "hashsdf/error.hpp"
#include "mc_tables.hpp"

namespace hashsdf {

namespace {

// Corner offsets matching the table layout in mc_tables.cpp.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 0, 1}, {0, 0, 1},
                               {0, 1, 0}, {1, 1, 0}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeCorners[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                     {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
// Crossings closer than this (in edge fractions) to a lattice point snap onto it.
constexpr double kSnap = 1e-9;

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) { return 0.5 * (b - a).cross(c - a).norm(); }

// Builds the welded vertex list while cells are visited in a fixed order.
class VertexWelder {
 public:
  VertexWelder(int n, const Aabb& bounds) : n_(n), lo_(bounds.lo), step_((bounds.hi - bounds.lo) / n) {}

  std::uint64_t linear(int i, int j, int k) const {
    const auto s = static_cast<std::uint64_t>(n_ + 1);
    return (static_cast<std::uint64_t>(k) * s + static_cast<std::uint64_t>(j)) * s + static_cast<std::uint64_t>(i);
  }
  Vec3 lattice_point(int i, int j, int k) const {
    return lo_ + Vec3(i * step_.x(), j * step_.y(), k * step_.z());
  }

  // Vertex on the lattice edge from (i, j, k) along `axis`, given the values
  // at both ends (fa at the lower end).
  std::uint32_t edge_vertex(int i, int j, int k, int axis, double fa, double fb) {
    const double t = fa / (fa - fb);
    int p[3] = {i, j, k};
    if (t <= kSnap || t >= 1.0 - kSnap) {
      if (t >= 1.0 - kSnap) ++p[axis];
      return insert((linear(p[0], p[1], p[2]) << 2) | 3u, lattice_point(p[0], p[1], p[2]), Bracket{});
    }
    const Vec3 a = lattice_point(i, j, k);
    int q[3] = {i, j, k};
    ++q[axis];
    const Vec3 b = lattice_point(q[0], q[1], q[2]);
    Vec3 x = a;
    x[axis] = a[axis] + t * (b[axis] - a[axis]);
    return insert((linear(i, j, k) << 2) | static_cast<std::uint64_t>(axis), x, Bracket{a, b, fa, fb, true});
  }

  struct Bracket {
    Vec3 a = Vec3::Zero(), b = Vec3::Zero();
    double fa = 0.0, fb = 0.0;
    bool valid = false;
  };

  std::vector<Vec3> vertices;
  std::vector<Bracket> brackets;

 private:
  std::uint32_t insert(std::uint64_t key, const Vec3& x, const Bracket& bracket) {
    const auto [it, added] = index_.try_emplace(key, static_cast<std::uint32_t>(vertices.size()));
    if (added) {
      vertices.push_back(x);
      brackets.push_back(bracket);
    }
    return it->second;
  }

  int n_;
  Vec3 lo_, step_;
  std::unordered_map<std::uint64_t, std::uint32_t> index_;
};

// One regula-falsi step inside the bracketing edge segment.
void refine_vertices(const SdfBatchFn& sdf, VertexWelder& welder) {
  std::vector<Vec3> points;
  std::vector<std::size_t> ids;
  for (std::size_t v = 0; v < welder.vertices.size(); ++v)
    if (welder.brackets[v].valid) {
      points.push_back(welder.vertices[v]);
      ids.push_back(v);
    }
  std::vector<double> values(points.size());
  sdf(points, values);
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const auto& br = welder.brackets[ids[n]];
    const double fx = values[n];
    if (fx == 0.0 || !std::isfinite(fx)) continue;
    // Keep the half whose ends still differ in sign.
    const bool lower = (fx < 0.0) != (br.fa < 0.0);
    const Vec3 p = lower ? br.a : points[n];
    const Vec3 q = lower ? points[n] : br.b;
    const double fp = lower ? br.fa : fx;
    const double fq = lower ? fx : br.fb;
    if (fp == fq) continue;
    welder.vertices[ids[n]] = p + (fp / (fp - fq)) * (q - p);
  }
}

}  // namespace

double TriangleMesh::area() const {
  double total = 0.0;
  for (const auto& t : triangles) total += triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
  return total;
}

void TriangleMesh::validate() const {
  require(vertices.empty() == triangles.empty(), "mesh must have vertices iff it has triangles");
  require(normals.empty() || normals.size() == vertices.size(), "mesh normals must match vertices");
  for (const auto& t : triangles) {
    for (auto idx : t) require(idx < vertices.size(), "mesh triangle index out of range");
    require(triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]) > kDegenerateArea,
            "mesh contains a degenerate triangle");
  }
}

void MarchingCubesConfig::validate() const {
  require(resolution >= 8, "marching cubes resolution must be at least 8");
  require(slab_cells >= 1, "marching cubes slab_cells must be positive");
  require((bounds.hi - bounds.lo).minCoeff() > 0.0, "marching cubes bounds must have positive extent");
}

TriangleMesh marching_cubes(const SdfBatchFn& sdf, const MarchingCubesConfig& config) {
  config.validate();
  const int n = config.resolution;
  const int s = n + 1;  // samples per axis
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  VertexWelder welder(n, config.bounds);

  // values holds lattice planes [k0, k0 + slab]; plane 0 is carried over.
  const int slab = std::min(config.slab_cells, n);
  std::vector<double> values(plane * static_cast<std::size_t>(slab + 1));
  std::vector<Vec3> points;
  auto evaluate_planes = [&](int k_first, int count, std::size_t dest_plane) {
    points.clear();
    for (int k = k_first; k < k_first + count; ++k)
      for (int j = 0; j < s; ++j)
        for (int i = 0; i < s; ++i) points.push_back(welder.lattice_point(i, j, k));
    sdf(points, std::span<double>(values.data() + dest_plane * plane, points.size()));
  };

  std::vector<std::array<std::uint32_t, 3>> triangles;
  evaluate_planes(0, 1, 0);
  for (int k0 = 0; k0 < n; k0 += slab) {
    const int layers = std::min(slab, n - k0);
    if (k0 > 0) std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(plane) * slab, plane, values.begin());
    evaluate_planes(k0 + 1, layers, 1);
    for (int dk = 0; dk < layers; ++dk)
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
          double f[8];
          int cube = 0;
          for (int c = 0; c < 8; ++c) {
            const std::size_t idx = static_cast<std::size_t>(dk + kCorner[c][2]) * plane +
                                    static_cast<std::size_t>(j + kCorner[c][1]) * s +
                                    static_cast<std::size_t>(i + kCorner[c][0]);
            f[c] = values[idx];
            if (!std::isfinite(f[c])) fail(ErrorCode::NonFinite, "marching cubes: non-finite SDF sample");
            if (f[c] < 0.0) cube |= 1 << c;
          }
          const int edges = detail::kEdgeTable[cube];
          if (edges == 0) continue;
          std::uint32_t vid[12] = {};
          for (int e = 0; e < 12; ++e) {
            if (!(edges & (1 << e))) continue;
            int c0 = kEdgeCorners[e][0], c1 = kEdgeCorners[e][1];
            // Canonical direction: from the corner with the smaller offset.
            if (kCorner[c0][0] + kCorner[c0][1] + kCorner[c0][2] > kCorner[c1][0] + kCorner[c1][1] + kCorner[c1][2])
              std::swap(c0, c1);
            int axis = 0;
            while (kCorner[c0][axis] == kCorner[c1][axis]) ++axis;
            vid[e] = welder.edge_vertex(i + kCorner[c0][0], j + kCorner[c0][1], k0 + dk + kCorner[c0][2], axis,
                                        f[c0], f[c1]);
          }
          for (int t = 0; detail::kTriTable[cube][t] != -1; t += 3) {
            // With this corner layout the table order already faces outward.
            const std::array<std::uint32_t, 3> tri{vid[detail::kTriTable[cube][t]],
                                                   vid[detail::kTriTable[cube][t + 1]],
                                                   vid[detail::kTriTable[cube][t + 2]]};
            if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) continue;
            triangles.push_back(tri);
          }
        }
  }

  if (config.refine) refine_vertices(sdf, welder);

  // Drop slivers, then compact the vertex list in first-use order.
  TriangleMesh mesh;
  std::vector<std::uint32_t> remap(welder.vertices.size(), UINT32_MAX);
  for (const auto& t : triangles) {
    if (triangle_area(welder.vertices[t[0]], welder.vertices[t[1]], welder.vertices[t[2]]) <= kDegenerateArea)
      continue;
    std::array<std::uint32_t, 3> out{};
    for (int c = 0; c < 3; ++c) {
      auto& r = remap[t[c]];
      if (r == UINT32_MAX) {
        r = static_cast<std::uint32_t>(mesh.vertices.size());
        mesh.vertices.push_back(welder.vertices[t[c]]);
      }
      out[c] = r;
    }
    mesh.triangles.push_back(out);
  }
  return mesh;
}

TriangleMesh marching_cubes(const RenderField& field, const MarchingCubesConfig& config) {
  return marching_cubes([&field](std::span<const Vec3> p, std::span<double> out) { field.sdf(p, out); }, config);
}

std::vector<Vec3> vertex_normals(const TriangleMesh& mesh) {
  std::vector<Vec3> normals(mesh.vertices.size(), Vec3::Zero());
  for (const auto& t : mesh.triangles) {
    // Cross product length is twice the area, so this is area-weighted.
    const Vec3 n = (mesh.vertices[t[1]] - mesh.vertices[t[0]]).cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
    for (auto idx : t) normals[idx] += n;
  }
  for (auto& n : normals) {
    const double len = n.norm();
    if (len > 0.0) n /= len;
  }
  return normals;
}

EdgeReport edge_report(const TriangleMesh& mesh) {
  struct Use {
    int count = 0;
    int forward = 0;  // traversals from the smaller to the larger index
  };
  std::unordered_map<std::uint64_t, Use> uses;
  for (const auto& t : mesh.triangles)
    for (int c = 0; c < 3; ++c) {
      const std::uint32_t a = t[c], b = t[(c + 1) % 3];
      const std::uint64_t key = (static_cast<std::uint64_t>(std::min(a, b)) << 32) | std::max(a, b);
      auto& u = uses[key];
      ++u.count;
      if (a < b) ++u.forward;
    }
  EdgeReport report;
  report.edges = uses.size();
  for (const auto& [key, u] : uses) {
    if (u.count == 1) ++report.boundary;
    if (u.count >= 3) ++report.nonmanifold;
    if (u.count == 2 && u.forward != 1) ++report.misoriented;
  }
  return report;
}

MeshFormat mesh_format_for(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".obj") return MeshFormat::Obj;
  if (ext == ".ply") return MeshFormat::Ply;
  fail(ErrorCode::InvalidInput, "unknown mesh extension '" + ext + "' (expected .obj or .ply)");
}

MeshFormat parse_mesh_format(const std::string& name) {
  if (name == "obj") return MeshFormat::Obj;
  if (name == "ply") return MeshFormat::Ply;
  fail(ErrorCode::Config, "unknown mesh format '" + name + "' (expected obj or ply)");
}

// ------------------------------------------------------------------- OBJ

namespace {

void write_obj(const TriangleMesh& mesh, std::ostream& out) {
  char line[128];
  out << "# hashsdf mesh: " << mesh.vertices.size() << " vertices, " << mesh.triangles.size() << " triangles\n";
  for (const auto& v : mesh.vertices) {
    std::snprintf(line, sizeof line, "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    out << line;
  }
  for (const auto& n : mesh.normals) {
    std::snprintf(line, sizeof line, "vn %.17g %.17g %.17g\n", n.x(), n.y(), n.z());
    out << line;
  }
  const bool with_normals = !mesh.normals.empty();
  for (const auto& t : mesh.triangles) {
    out << 'f';
    for (auto idx : t) {
      out << ' ' << idx + 1;
      if (with_normals) out << "//" << idx + 1;
    }
    out << '\n';
  }
}

double parse_double(std::string_view token, std::size_t line_no) {
  double value = 0.0;
  const auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || end != token.data() + token.size())
    fail(ErrorCode::Io, "OBJ line " + std::to_string(line_no) + ": bad number '" + std::string(token) + "'");
  return value;
}

TriangleMesh read_obj(std::istream& in) {
  TriangleMesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string tag;
    if (!(fields >> tag) || tag[0] == '#') continue;
    if (tag == "v" || tag == "vn") {
      std::string x, y, z;
      if (!(fields >> x >> y >> z)) fail(ErrorCode::Io, "OBJ line " + std::to_string(line_no) + ": expected 3 values");
      const Vec3 p(parse_double(x, line_no), parse_double(y, line_no), parse_double(z, line_no));
      (tag == "v" ? mesh.vertices : mesh.normals).push_back(p);
    } else if (tag == "f") {
      std::vector<std::uint32_t> ids;
      std::string token;
      while (fields >> token) {
        const auto slash = token.find('/');
        long idx = 0;
        const std::string head = token.substr(0, slash);
        const auto [end, ec] = std::from_chars(head.data(), head.data() + head.size(), idx);
        if (ec != std::errc() || end != head.data() + head.size() || idx < 1)
          fail(ErrorCode::Io, "OBJ line " + std::to_string(line_no) + ": bad face index '" + token + "'");
        ids.push_back(static_cast<std::uint32_t>(idx - 1));
      }
      if (ids.size() != 3) fail(ErrorCode::Io, "OBJ line " + std::to_string(line_no) + ": only triangles are supported");
      mesh.triangles.push_back({ids[0], ids[1], ids[2]});
    }
  }
  return mesh;
}

// ------------------------------------------------------------------- PLY

void write_ply(const TriangleMesh& mesh, std::ostream& out) {
  const bool with_normals = !mesh.normals.empty();
  out << "ply\nformat binary_little_endian 1.0\ncomment hashsdf mesh\n"
      << "element vertex " << mesh.vertices.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\n";
  if (with_normals) out << "property double nx\nproperty double ny\nproperty double nz\n";
  out << "element face " << mesh.triangles.size() << "\n"
      << "property list uchar uint vertex_indices\nend_header\n";
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
    for (int c = 0; c < 3; ++c) io::write_pod(out, mesh.vertices[v][c]);
    if (with_normals)
      for (int c = 0; c < 3; ++c) io::write_pod(out, mesh.normals[v][c]);
  }
  for (const auto& t : mesh.triangles) {
    io::write_pod<std::uint8_t>(out, 3);
    io::write_array<std::uint32_t>(out, t);
  }
}

TriangleMesh read_ply(std::istream& in) {
  std::string line;
  auto next_line = [&]() {
    if (!std::getline(in, line)) fail(ErrorCode::Io, "PLY: truncated header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };
  if (next_line() != "ply") fail(ErrorCode::Io, "PLY: missing magic");
  std::size_t n_vertices = 0, n_faces = 0;
  std::vector<std::string> vertex_props;  // type of each vertex property, in order
  std::vector<std::string> vertex_names;
  std::string index_type;
  std::string element;
  bool binary_le = false;
  while (next_line() != "end_header") {
    std::istringstream f(line);
    std::string word;
    f >> word;
    if (word == "format") {
      std::string fmt;
      f >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (word == "element") {
      std::size_t count = 0;
      f >> element >> count;
      if (element == "vertex") n_vertices = count;
      else if (element == "face") n_faces = count;
      else if (count > 0) fail(ErrorCode::Io, "PLY: unsupported element '" + element + "'");
    } else if (word == "property") {
      std::string type;
      f >> type;
      if (element == "vertex") {
        std::string name;
        f >> name;
        if (type != "double" && type != "float") fail(ErrorCode::Io, "PLY: unsupported vertex property type " + type);
        vertex_props.push_back(type);
        vertex_names.push_back(name);
      } else if (element == "face") {
        std::string count_type, name;
        f >> count_type >> index_type >> name;
        if (type != "list" || count_type != "uchar" || (index_type != "uint" && index_type != "int"))
          fail(ErrorCode::Io, "PLY: unsupported face property");
      }
    }
  }
  if (!binary_le) fail(ErrorCode::Io, "PLY: only binary_little_endian is supported");
  auto column = [&](const std::string& name) {
    const auto it = std::find(vertex_names.begin(), vertex_names.end(), name);
    return it == vertex_names.end() ? -1 : static_cast<int>(it - vertex_names.begin());
  };
  const int cx = column("x"), cy = column("y"), cz = column("z");
  const int nx = column("nx"), ny = column("ny"), nz = column("nz");
  if (cx < 0 || cy < 0 || cz < 0) fail(ErrorCode::Io, "PLY: vertex element lacks x/y/z");
  const bool with_normals = nx >= 0 && ny >= 0 && nz >= 0;

  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices);
  if (with_normals) mesh.normals.resize(n_vertices);
  std::vector<double> row(vertex_props.size());
  for (std::size_t v = 0; v < n_vertices; ++v) {
    for (std::size_t p = 0; p < vertex_props.size(); ++p)
      row[p] = vertex_props[p] == "double" ? io::read_pod<double>(in) : io::read_pod<float>(in);
    mesh.vertices[v] = Vec3(row[cx], row[cy], row[cz]);
    if (with_normals) mesh.normals[v] = Vec3(row[nx], row[ny], row[nz]);
  }
  mesh.triangles.resize(n_faces);
  for (auto& t : mesh.triangles) {
    if (io::read_pod<std::uint8_t>(in) != 3) fail(ErrorCode::Io, "PLY: only triangles are supported");
    io::read_array<std::uint32_t>(in, t);
  }
  return mesh;
}

}  // namespace

void export_mesh(const TriangleMesh& mesh, const std::filesystem::path& path, MeshFormat format) {
  mesh.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  if (format == MeshFormat::Obj) write_obj(mesh, out);
  else write_ply(mesh, out);
  out.flush();
  if (!out) fail(ErrorCode::Io, "failed writing '" + path.string() + "'");
}

TriangleMesh import_mesh(const std::filesystem::path& path, MeshFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  TriangleMesh mesh = format == MeshFormat::Obj ? read_obj(in) : read_ply(in);
  try {
    mesh.validate();
  } catch (const Error& e) {
    fail(ErrorCode::Io, "'" + path.string() + "': " + e.what());
  }
  return mesh;
}

}  // namespace hashsdf
