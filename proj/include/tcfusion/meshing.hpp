#pragma once

// Surface extraction from the TSDF volume. Each TSDF cell is polygonised
// with the classic 256-case table; vertices are merged only when their
// source voxel edge references the same ordered pair of voxel copies, so
// duplicated regions produce disjoint sheets and a cut stays a cut in the
// mesh. Vertex order is canonical (sorted by voxel edge key), which makes
// extraction deterministic and byte-stable across runs.

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tcfusion/grid_core.hpp"
#include "tcfusion/mc_tables.hpp"
#include "tcfusion/tsdf_volume.hpp"
#include "tcfusion/warp_field.hpp"

namespace tcf {

// Warping a mesh whose cell tags no longer exist in the graph (the cells
// were re-anchored by a topology update after extraction).
struct StaleReferenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CanonicalMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;
  // Source voxel edge per vertex, strictly increasing over the vertex list.
  std::vector<EdgeKey> vertex_key;
  // Graph cell copy used to warp the vertex (cell that first emitted it).
  std::vector<CellRef> vertex_cell;
};

namespace detail {

// Triangles for one cell, as triples of classic edge ids. Values are in
// corner_step order; negative is inside. Table rows are flipped here so the
// winding is counterclockwise seen from the positive side.
inline std::vector<std::array<int, 3>> cell_triangles(
    const std::array<double, 8>& d) {
  int ci = 0;
  for (int b = 0; b < 8; ++b)
    if (d[kMcCornerOrder[b]] < 0) ci |= 1 << b;
  std::vector<std::array<int, 3>> tris;
  const std::int8_t* row = kMcTriangles[ci];
  for (int t = 0; row[t] != -1; t += 3)
    tris.push_back({int(row[t]), int(row[t + 2]), int(row[t + 1])});
  return tris;
}

}  // namespace detail

// Extracts the zero level set. Only cells whose 8 voxels all carry weight
// take part, so unobserved space stays open. An empty surface gives an
// empty mesh.
inline CanonicalMesh marching_cubes(const TsdfVolume& vol) {
  const GridDims& vd = vol.grid.dims();

  struct Pending {
    Eigen::Vector3d pos = Eigen::Vector3d::Zero();
    CellRef cell;
  };
  std::map<EdgeKey, Pending> verts;
  std::vector<std::array<EdgeKey, 3>> tris;

  for (const auto& [cref, rec] : vol.cells) {
    const auto base = vd.coord_of(cref.anchor.index1d);
    std::array<CopyRef, 8> refs;
    std::array<Eigen::Vector3d, 8> pos;
    std::array<double, 8> d;
    bool observed = true;
    for (int c = 0; c < 8; ++c) {
      const auto s = corner_step(c);
      const std::int64_t idx =
          vd.linear_index(base[0] + s[0], base[1] + s[1], base[2] + s[2]);
      refs[c] = CopyRef{idx, rec.corner_offsets[c]};
      pos[c] = vd.position(idx);
      const Voxel& vox = vol.grid.at(refs[c]);
      d[c] = vox.tsdf;
      if (vox.weight <= 0.0) {
        observed = false;
        break;
      }
    }
    if (!observed) continue;

    for (const auto& tri : detail::cell_triangles(d)) {
      std::array<EdgeKey, 3> keys;
      for (int i = 0; i < 3; ++i) {
        int a = kMcCornerOrder[kMcEdges[tri[i]][0]];
        int b = kMcCornerOrder[kMcEdges[tri[i]][1]];
        if (refs[b] < refs[a]) std::swap(a, b);
        const EdgeKey key = make_edge(refs[a], refs[b]);
        auto [it, fresh] = verts.try_emplace(key);
        if (fresh) {
          it->second.pos =
              pos[a] + (d[a] / (d[a] - d[b])) * (pos[b] - pos[a]);
          it->second.cell = rec.edg_cell;
        }
        keys[i] = key;
      }
      tris.push_back(keys);
    }
  }

  std::map<EdgeKey, int> slot;
  std::vector<Eigen::Vector3d> positions;
  std::vector<CellRef> cells;
  std::vector<EdgeKey> keys;
  for (const auto& [key, p] : verts) {
    slot.emplace(key, int(positions.size()));
    positions.push_back(p.pos);
    cells.push_back(p.cell);
    keys.push_back(key);
  }

  std::vector<std::array<int, 3>> faces;
  std::vector<bool> used(positions.size(), false);
  for (const auto& t : tris) {
    const std::array<int, 3> f = {slot.at(t[0]), slot.at(t[1]), slot.at(t[2])};
    const Eigen::Vector3d e1 = positions[f[1]] - positions[f[0]];
    const Eigen::Vector3d e2 = positions[f[2]] - positions[f[0]];
    if (0.5 * e1.cross(e2).norm() <= 1e-12) continue;
    faces.push_back(f);
    used[f[0]] = used[f[1]] = used[f[2]] = true;
  }

  CanonicalMesh mesh;
  std::vector<int> remap(positions.size(), -1);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (!used[i]) continue;
    remap[i] = int(mesh.vertices.size());
    mesh.vertices.push_back(positions[i]);
    mesh.vertex_key.push_back(keys[i]);
    mesh.vertex_cell.push_back(cells[i]);
  }
  for (auto& f : faces)
    mesh.triangles.push_back({remap[f[0]], remap[f[1]], remap[f[2]]});
  return mesh;
}

// Maps the canonical mesh into the live frame through the warp field. Every
// vertex must still resolve to a graph cell; extraction results become stale
// once a topology update re-anchors cells.
inline CanonicalMesh warp_mesh(const CanonicalMesh& mesh,
                               const DeformGraph& graph,
                               const GlobalPose& pose) {
  CanonicalMesh out = mesh;
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    if (!graph.cells.count(mesh.vertex_cell[i]))
      throw StaleReferenceError(
          "warp_mesh: vertex references a removed graph cell; re-extract "
          "after topology updates");
    out.vertices[i] = warp_point(graph, mesh.vertex_cell[i], pose,
                                 mesh.vertices[i]);
  }
  return out;
}

// Connected components over the triangle adjacency. Labels are compact,
// assigned in order of first appearance along the vertex list.
inline std::pair<int, std::vector<int>> mesh_connected_components(
    const CanonicalMesh& mesh) {
  DisjointSet ds(int(mesh.vertices.size()));
  for (const auto& t : mesh.triangles) {
    ds.unite(t[0], t[1]);
    ds.unite(t[0], t[2]);
  }
  std::vector<int> labels(mesh.vertices.size(), -1);
  std::map<int, int> compact;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int root = ds.find(int(i));
    auto [it, fresh] = compact.try_emplace(root, int(compact.size()));
    labels[i] = it->second;
  }
  return {int(compact.size()), labels};
}

// Area-weighted vertex normals; zero where a vertex has no incident area.
inline std::vector<Eigen::Vector3d> mesh_normals(const CanonicalMesh& mesh) {
  std::vector<Eigen::Vector3d> n(mesh.vertices.size(), Eigen::Vector3d::Zero());
  for (const auto& t : mesh.triangles) {
    const Eigen::Vector3d c =
        (mesh.vertices[t[1]] - mesh.vertices[t[0]])
            .cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
    n[t[0]] += c;
    n[t[1]] += c;
    n[t[2]] += c;
  }
  for (auto& v : n) {
    const double len = v.norm();
    if (len > 0.0) v /= len;
  }
  return n;
}

// Wavefront OBJ: v/vn lines with %.9g, faces 1-based with normal indices.
inline void write_obj(const CanonicalMesh& mesh, std::ostream& os) {
  const auto normals = mesh_normals(mesh);
  char line[160];
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& v = mesh.vertices[i];
    std::snprintf(line, sizeof line, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    os << line;
  }
  for (const auto& v : normals) {
    std::snprintf(line, sizeof line, "vn %.9g %.9g %.9g\n", v.x(), v.y(),
                  v.z());
    os << line;
  }
  for (const auto& t : mesh.triangles) {
    std::snprintf(line, sizeof line, "f %d//%d %d//%d %d//%d\n", t[0] + 1,
                  t[0] + 1, t[1] + 1, t[1] + 1, t[2] + 1, t[2] + 1);
    os << line;
  }
}

// Binary little-endian PLY. Per vertex: x y z nx ny nz as doubles plus the
// connected component label as int; per face: uchar count (always 3) and
// three int indices.
inline void write_ply(const CanonicalMesh& mesh, std::ostream& os) {
  const auto normals = mesh_normals(mesh);
  const auto [count, labels] = mesh_connected_components(mesh);
  (void)count;

  os << "ply\nformat binary_little_endian 1.0\n"
     << "element vertex " << mesh.vertices.size() << "\n"
     << "property double x\nproperty double y\nproperty double z\n"
     << "property double nx\nproperty double ny\nproperty double nz\n"
     << "property int component\n"
     << "element face " << mesh.triangles.size() << "\n"
     << "property list uchar int vertex_indices\nend_header\n";

  auto put_f64 = [&os](double v) {
    char b[8];
    std::memcpy(b, &v, 8);
    os.write(b, 8);
  };
  auto put_i32 = [&os](std::int32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    os.write(b, 4);
  };
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    for (int a = 0; a < 3; ++a) put_f64(mesh.vertices[i][a]);
    for (int a = 0; a < 3; ++a) put_f64(normals[i][a]);
    put_i32(labels[i]);
  }
  for (const auto& t : mesh.triangles) {
    const char three = 3;
    os.write(&three, 1);
    for (int a = 0; a < 3; ++a) put_i32(t[a]);
  }
}

}  // namespace tcf
