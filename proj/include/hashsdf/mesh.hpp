#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "hashsdf/geometry.hpp"
#include "hashsdf/renderer.hpp"

namespace hashsdf {

/// Indexed triangle mesh in scene units. Triangles wind counter-clockwise
/// seen from outside (positive SDF side).
struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;
  std::vector<Vec3> normals;  // empty or one per vertex

  bool empty() const { return triangles.empty(); }
  double area() const;
  /// Throws InvalidInput on out-of-range indices, degenerate triangles,
  /// mismatched normals, or vertices without triangles (and vice versa).
  void validate() const;
};

/// Triangles whose area is at or below this are dropped.
inline constexpr double kDegenerateArea = 1e-12;

struct MarchingCubesConfig {
  int resolution = 128;  // cells per axis; the lattice has resolution + 1 samples per axis
  Aabb bounds{Vec3::Constant(-1.0), Vec3::Constant(1.0)};
  int slab_cells = 16;   // z-layers of cells evaluated per SDF batch
  bool refine = false;   // one bisection step along each crossing edge
  void validate() const;
};

/// Zero level set of `sdf` over a regular lattice with the classic 256-case
/// tables. Negative values are inside. Vertices sitting on a lattice point are
/// shared by every edge that touches it, so closed surfaces come out
/// watertight. Deterministic for a deterministic `sdf`.
TriangleMesh marching_cubes(const SdfBatchFn& sdf, const MarchingCubesConfig& config);
TriangleMesh marching_cubes(const RenderField& field, const MarchingCubesConfig& config);

/// Area-weighted average of incident face normals, normalized.
std::vector<Vec3> vertex_normals(const TriangleMesh& mesh);

struct EdgeReport {
  std::size_t edges = 0;
  std::size_t boundary = 0;     // used by one triangle
  std::size_t nonmanifold = 0;  // used by three or more
  std::size_t misoriented = 0;  // interior edges traversed in the same direction twice
  bool watertight() const { return edges > 0 && boundary == 0 && nonmanifold == 0 && misoriented == 0; }
};
EdgeReport edge_report(const TriangleMesh& mesh);

enum class MeshFormat { Obj, Ply };
/// From the file extension (.obj or .ply); throws InvalidInput otherwise.
MeshFormat mesh_format_for(const std::filesystem::path& path);
MeshFormat parse_mesh_format(const std::string& name);

/// OBJ text (`v`, optional `vn`, 1-based `f`) or binary little-endian PLY
/// with double coordinates. Both round-trip bit-exactly through import_mesh.
void export_mesh(const TriangleMesh& mesh, const std::filesystem::path& path, MeshFormat format);
TriangleMesh import_mesh(const std::filesystem::path& path, MeshFormat format);

}  // namespace hashsdf
