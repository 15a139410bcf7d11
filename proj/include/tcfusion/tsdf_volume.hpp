#pragma once

// Non-manifold TSDF volume driven by the deformation graph. The voxel lattice
// refines the node lattice by an odd factor 2k+1, so every deformation cell
// embeds (2k+1)^3 TSDF cells and (2k+2)^3 voxels and every node owns the
// (k+1)^3 nearest voxels of each incident cell. Voxels live in the same
// bucket storage as graph nodes; when a graph cell is split into components,
// the embedded voxels and TSDF cells are duplicated per component with the
// same collapse/merge rules, so the volume stays consistent with the graph
// copy for copy.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "tcfusion/camera.hpp"
#include "tcfusion/grid_core.hpp"
#include "tcfusion/warp_field.hpp"

namespace tcf {

inline constexpr double kFuseWeight = 1.0;   // weight of one depth observation
inline constexpr double kWeightMax = 64.0;   // accumulation cap
inline constexpr double kBootstrapWeight = 1.0;  // rule-assigned virtual voxels

struct Voxel {
  double tsdf = 1.0;    // normalized by the truncation distance, in [-1, 1]
  double weight = 0.0;  // 0 = never observed and not rule-assigned
  CopyRef node_assoc;   // controlling node copy (nearest node of the duplicate)
  CellRef edg_cell;     // graph cell copy used to warp this voxel
  bool is_real = true;
  int parent_id = 0;  // merge-pass parent; own offset between passes
  CopyRef self_ref;
  // Corner offsets of the TSDF cell anchored at this copy; -1 when none.
  // Fast-path mirror of the central cell table for the salt-0 case.
  std::array<std::int8_t, 8> cell_voxel_offsets = {-1, -1, -1, -1, -1, -1, -1, -1};
};

struct VoxelCellRecord {
  std::array<std::uint8_t, 8> corner_offsets = {};
  CellRef edg_cell;  // graph cell copy this TSDF cell is embedded in
};

struct TsdfVolume {
  BucketGrid<Voxel> grid;
  std::map<CellRef, VoxelCellRecord> cells;
  double truncation = 0.0;
  int k = 1;

  TsdfVolume() = default;

  // Voxel lattice derived from the node lattice: factor 2k+1 per axis, same
  // origin. Truncation defaults to 2.5 voxel spacings.
  TsdfVolume(const GridDims& node_dims, int k_) : k(k_) {
    if (k < 1 || k > 3)
      throw std::invalid_argument("TsdfVolume: k must be 1, 2 or 3");
    const int m = 2 * k + 1;
    grid = BucketGrid<Voxel>(GridDims((node_dims.nx - 1) * m + 1,
                                      (node_dims.ny - 1) * m + 1,
                                      (node_dims.nz - 1) * m + 1,
                                      node_dims.spacing / m, node_dims.origin));
    truncation = 2.5 * grid.dims().spacing;
  }

  double voxel_spacing() const { return grid.dims().spacing; }
};

inline int floor_div(int a, int b) {
  const int q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}

// Node lattice coordinate owning a voxel: the nearest node along each axis
// (unique because the refinement factor is odd). Voxel c*(2k+1) maps to node
// c, and node c owns voxels c*(2k+1) - k .. c*(2k+1) + k per axis.
inline std::array<int, 3> voxel_ownership(const std::array<int, 3>& voxel, int k) {
  const int m = 2 * k + 1;
  return {floor_div(voxel[0] + k, m), floor_div(voxel[1] + k, m),
          floor_div(voxel[2] + k, m)};
}

namespace detail {

inline void sync_voxel_mirror(TsdfVolume& vol, const CopyRef& anchor) {
  if (!vol.grid.contains(anchor)) return;
  auto& vox = vol.grid.at(anchor);
  auto it = vol.cells.find(CellRef{anchor, 0});
  if (it == vol.cells.end()) {
    vox.cell_voxel_offsets.fill(-1);
  } else {
    for (int c = 0; c < 8; ++c)
      vox.cell_voxel_offsets[c] = std::int8_t(it->second.corner_offsets[c]);
  }
}

inline CellRef insert_voxel_cell(TsdfVolume& vol, const CopyRef& anchor,
                                 const std::array<std::uint8_t, 8>& offsets,
                                 const CellRef& edg_cell) {
  CellRef ref{anchor, 0};
  while (vol.cells.count(ref)) {
    if (ref.salt == 255)
      throw CapacityError("insert_voxel_cell: salt space exhausted");
    ++ref.salt;
  }
  vol.cells.emplace(ref, VoxelCellRecord{offsets, edg_cell});
  sync_voxel_mirror(vol, anchor);
  return ref;
}

// Corner index (bit pattern) of the node owning a voxel, relative to the
// anchor of the embedding graph cell.
inline int owner_corner(const std::array<int, 3>& voxel,
                        const std::array<int, 3>& cell_anchor, int k) {
  const auto owner = voxel_ownership(voxel, k);
  int bits = 0;
  for (int a = 0; a < 3; ++a) {
    const int b = owner[a] - cell_anchor[a];
    if (b != 0 && b != 1)
      throw StructuralError("owner_corner: voxel not embedded in the cell");
    bits |= b << a;
  }
  return bits;
}

}  // namespace detail

// Creates the embedded voxels and TSDF cells of the given graph cells. Voxel
// lattice points shared with already materialized cells reuse their first
// occupied copy; everything else starts unobserved (weight 0). Cells already
// materialized for the same graph cell are skipped.
inline void materialize_cells(TsdfVolume& vol, const DeformGraph& graph,
                              const std::vector<CellRef>& cells) {
  const GridDims& nd = graph.nodes.dims();
  const GridDims& vd = vol.grid.dims();
  const int m = 2 * vol.k + 1;
  const int B = m + 1;  // voxels per axis and cell

  for (const CellRef& cref : cells) {
    const auto corners = cell_corners(graph, cref);
    const auto a = nd.coord_of(cref.anchor.index1d);
    const std::array<int, 3> base = {a[0] * m, a[1] * m, a[2] * m};

    std::vector<CopyRef> refs(std::size_t(B) * B * B);
    for (int z = 0; z < B; ++z)
      for (int y = 0; y < B; ++y)
        for (int x = 0; x < B; ++x) {
          const std::array<int, 3> vc = {base[0] + x, base[1] + y, base[2] + z};
          const std::int64_t idx = vd.linear_index(vc[0], vc[1], vc[2]);
          int off = -1;
          if (const Bucket<Voxel>* b = vol.grid.find_bucket(idx)) {
            for (int o = 0; o < kMaxCopies; ++o)
              if (b->occupied(std::uint8_t(o))) {
                off = o;
                break;
              }
          }
          if (off < 0) {
            Voxel nv;
            nv.node_assoc = corners[detail::owner_corner(vc, a, vol.k)];
            nv.edg_cell = cref;
            const CopyRef ref = vol.grid.insert(idx, nv);
            vol.grid.at(ref).self_ref = ref;
            vol.grid.at(ref).parent_id = ref.offset;
            off = ref.offset;
          }
          refs[std::size_t(x) + B * (y + std::size_t(B) * z)] =
              CopyRef{idx, std::uint8_t(off)};
        }

    for (int z = 0; z < m; ++z)
      for (int y = 0; y < m; ++y)
        for (int x = 0; x < m; ++x) {
          const CopyRef anchor = refs[std::size_t(x) + B * (y + std::size_t(B) * z)];
          // Skip cells already materialized for this graph cell.
          bool present = false;
          for (CellRef probe{anchor, 0};; ++probe.salt) {
            auto it = vol.cells.find(probe);
            if (it == vol.cells.end()) break;
            if (it->second.edg_cell == cref) {
              present = true;
              break;
            }
            if (probe.salt == 255) break;
          }
          if (present) continue;
          std::array<std::uint8_t, 8> offsets{};
          for (int c = 0; c < 8; ++c) {
            const auto s = corner_step(c);
            offsets[c] = refs[std::size_t(x + s[0]) +
                              B * ((y + s[1]) + std::size_t(B) * (z + s[2]))]
                             .offset;
          }
          detail::insert_voxel_cell(vol, anchor, offsets, cref);
        }
  }
}

// Voxel lattice edges of one duplicated graph cell whose endpoint owners fall
// in different components; these are the TSDF-level cutting edges.
inline std::vector<std::pair<std::array<int, 3>, std::array<int, 3>>> voxel_cut_edges(
    const CellDuplication& dup, int k) {
  const int m = 2 * k + 1;
  const int B = m + 1;
  const std::array<int, 3> base = {dup.anchor_coord[0] * m, dup.anchor_coord[1] * m,
                                   dup.anchor_coord[2] * m};
  auto label_of = [&](const std::array<int, 3>& vc) {
    return dup.labels[std::size_t(detail::owner_corner(vc, dup.anchor_coord, k))];
  };
  std::vector<std::pair<std::array<int, 3>, std::array<int, 3>>> out;
  for (int z = 0; z < B; ++z)
    for (int y = 0; y < B; ++y)
      for (int x = 0; x < B; ++x) {
        const std::array<int, 3> v = {base[0] + x, base[1] + y, base[2] + z};
        for (int axis = 0; axis < 3; ++axis) {
          std::array<int, 3> u = v;
          ++u[axis];
          if (u[axis] - base[axis] >= B) continue;
          if (label_of(v) != label_of(u)) out.push_back({v, u});
        }
      }
  return out;
}

// One graph-cell duplicate's worth of voxels after a connectivity pass.
struct VoxelBlock {
  CellRef edg_cell;             // final graph cell copy of this duplicate
  int label = 0;                // component label (smallest corner index)
  std::array<int, 3> base = {};  // voxel coordinate of the block's low corner
  std::vector<CopyRef> voxels;  // (2k+2)^3 final refs, x fastest
  std::vector<std::uint8_t> real;  // 1 = carries observed data in this duplicate
};

struct VolumeUpdateRecord {
  std::vector<VoxelBlock> blocks;
  std::map<CopyRef, CopyRef> birth;  // new voxel copy -> source original copy
  bool assigned = false;             // assign_virtual_tsdf applied
};

// Mirrors a completed graph duplication pass onto the volume: every embedded
// voxel of a duplicated graph cell is copied once per component (real where
// its owning node belongs to the component, virtual otherwise), TSDF cells
// are rebuilt per duplicate, and copies merge with the same rules as nodes
// (real collapses into the original, virtual siblings of one source merge).
inline VolumeUpdateRecord propagate_connectivity(TsdfVolume& vol,
                                                 const DuplicationRecord& rec) {
  if (!rec.restored)
    throw std::logic_error("propagate_connectivity: graph record not restored");
  const GridDims& vd = vol.grid.dims();
  const int m = 2 * vol.k + 1;
  const int B = m + 1;
  const std::size_t nb = std::size_t(B) * B * B;

  // Snapshot the TSDF cells of each duplicated graph cell.
  std::map<CellRef, std::vector<std::pair<CellRef, VoxelCellRecord>>> by_edg;
  for (const CellDuplication& dup : rec.cells) by_edg[dup.original_cell];
  for (const auto& [cref, vrec] : vol.cells) {
    auto it = by_edg.find(vrec.edg_cell);
    if (it != by_edg.end()) it->second.push_back({cref, vrec});
  }

  struct StagedVoxel {
    std::int64_t index1d = -1;
    int prov_id = -1;
    int parent_prov = -1;
    std::uint8_t source_offset = 0;
    Voxel vox;
  };
  std::map<std::int64_t, std::vector<StagedVoxel>> staged;
  std::map<std::int64_t, int> next_prov;
  std::map<std::pair<std::int64_t, int>, int> first_virtual;
  VolumeUpdateRecord out;

  for (const CellDuplication& dup : rec.cells) {
    const auto& own_cells = by_edg.at(dup.original_cell);
    if (own_cells.size() != std::size_t(m) * m * m)
      throw StructuralError("propagate_connectivity: cell not fully materialized");
    const std::array<int, 3> base = {dup.anchor_coord[0] * m, dup.anchor_coord[1] * m,
                                     dup.anchor_coord[2] * m};

    // Reconstruct the (2k+2)^3 original voxel refs from the cells' corners.
    std::vector<CopyRef> orig(nb);
    for (const auto& [cref, vrec] : own_cells) {
      const auto ac = vd.coord_of(cref.anchor.index1d);
      for (int c = 0; c < 8; ++c) {
        const auto s = corner_step(c);
        const std::array<int, 3> vc = {ac[0] + s[0], ac[1] + s[1], ac[2] + s[2]};
        const std::size_t li = std::size_t(vc[0] - base[0]) +
                               B * ((vc[1] - base[1]) + std::size_t(B) * (vc[2] - base[2]));
        const CopyRef ref{vd.linear_index(vc[0], vc[1], vc[2]),
                          vrec.corner_offsets[c]};
        if (orig[li].valid() && orig[li] != ref)
          throw StructuralError("propagate_connectivity: inconsistent voxel refs");
        orig[li] = ref;
      }
    }
    for (const CopyRef& r : orig)
      if (!r.valid())
        throw StructuralError("propagate_connectivity: cell not fully materialized");

    // Per-voxel component label via the owning node's corner.
    std::vector<int> vlabel(nb);
    std::vector<int> vcorner(nb);
    for (int z = 0; z < B; ++z)
      for (int y = 0; y < B; ++y)
        for (int x = 0; x < B; ++x) {
          const std::size_t li = std::size_t(x) + B * (y + std::size_t(B) * z);
          const std::array<int, 3> vc = {base[0] + x, base[1] + y, base[2] + z};
          vcorner[li] = detail::owner_corner(vc, dup.anchor_coord, vol.k);
          vlabel[li] = dup.labels[std::size_t(vcorner[li])];
        }

    for (const CellDuplicate& d : dup.duplicates) {
      VoxelBlock blk;
      blk.edg_cell = d.cell;
      blk.label = d.label;
      blk.base = base;
      blk.voxels.resize(nb);
      blk.real.resize(nb);
      for (std::size_t li = 0; li < nb; ++li) {
        const CopyRef o = orig[li];
        const Voxel& src = vol.grid.at(o);
        int& bucket_next = next_prov[o.index1d];
        if (bucket_next == 0) bucket_next = kMaxCopies;

        StagedVoxel sc;
        sc.index1d = o.index1d;
        sc.prov_id = bucket_next++;
        sc.source_offset = o.offset;
        sc.vox = src;
        sc.vox.node_assoc = d.corners[std::size_t(vcorner[li])];
        sc.vox.edg_cell = d.cell;
        sc.vox.cell_voxel_offsets.fill(-1);

        const bool real = vlabel[li] == d.label;
        blk.real[li] = real ? 1 : 0;
        if (real) {
          sc.vox.is_real = true;
          sc.parent_prov = o.offset;  // collapses back into the original
        } else {
          sc.vox.is_real = false;
          auto fv = first_virtual.find({o.index1d, int(o.offset)});
          if (fv == first_virtual.end()) {
            first_virtual[{o.index1d, int(o.offset)}] = sc.prov_id;
            sc.parent_prov = sc.prov_id;
          } else {
            sc.parent_prov = fv->second;
          }
        }
        blk.voxels[li] = CopyRef{o.index1d, std::uint8_t(sc.prov_id)};
        staged[o.index1d].push_back(std::move(sc));
      }
      out.blocks.push_back(std::move(blk));
    }

    for (const auto& [cref, vrec] : own_cells) {
      (void)vrec;
      vol.cells.erase(cref);
      detail::sync_voxel_mirror(vol, cref.anchor);
    }
  }

  // Merge and materialize, same scheme as the graph pass.
  std::map<std::int64_t, std::map<int, std::uint8_t>> final_offset;
  for (auto& [index1d, list] : staged) {
    int max_id = kMaxCopies - 1;
    for (const auto& sc : list) max_id = std::max(max_id, sc.prov_id);
    std::vector<int> parents(std::size_t(max_id) + 1);
    for (int i = 0; i <= max_id; ++i) parents[std::size_t(i)] = i;
    for (const auto& sc : list) parents[std::size_t(sc.prov_id)] = sc.parent_prov;
    const std::vector<int> roots = resolve_parents(parents);

    auto& fo = final_offset[index1d];
    for (int off = 0; off < kMaxCopies; ++off) fo[off] = std::uint8_t(off);
    for (const auto& sc : list) {
      const int root = roots[std::size_t(sc.prov_id)];
      if (root < kMaxCopies) {
        fo[sc.prov_id] = std::uint8_t(root);
        // The duplicate owning this voxel re-points the surviving original.
        Voxel& ov = vol.grid.at(CopyRef{index1d, std::uint8_t(root)});
        ov.node_assoc = sc.vox.node_assoc;
        ov.edg_cell = sc.vox.edg_cell;
        continue;
      }
      if (root != sc.prov_id) continue;
      const CopyRef ref = vol.grid.insert(index1d, sc.vox);
      vol.grid.at(ref).self_ref = ref;
      vol.grid.at(ref).parent_id = ref.offset;
      fo[sc.prov_id] = ref.offset;
      out.birth[ref] = CopyRef{index1d, sc.source_offset};
    }
    for (const auto& sc : list) {
      const int root = roots[std::size_t(sc.prov_id)];
      if (root >= kMaxCopies && root != sc.prov_id) fo[sc.prov_id] = fo.at(root);
    }
  }

  for (VoxelBlock& blk : out.blocks) {
    for (CopyRef& r : blk.voxels)
      r = CopyRef{r.index1d, final_offset.at(r.index1d).at(int(r.offset))};
    for (int z = 0; z < m; ++z)
      for (int y = 0; y < m; ++y)
        for (int x = 0; x < m; ++x) {
          std::array<std::uint8_t, 8> offsets{};
          for (int c = 0; c < 8; ++c) {
            const auto s = corner_step(c);
            offsets[c] = blk.voxels[std::size_t(x + s[0]) +
                                    B * ((y + s[1]) + std::size_t(B) * (z + s[2]))]
                             .offset;
          }
          const CopyRef anchor = blk.voxels[std::size_t(x) + B * (y + std::size_t(B) * z)];
          detail::insert_voxel_cell(vol, anchor, offsets, blk.edg_cell);
        }
  }
  return out;
}

// TSDF values for the virtual copies of a connectivity pass. A virtual voxel
// lattice-adjacent (within its duplicate) to a real voxel with negative tsdf
// takes the negated value +|d|, smallest |d| winning when several qualify;
// every other virtual voxel is set to +1. Both get a small bootstrap weight
// so later observations quickly override them. Real voxels are not touched.
inline void assign_virtual_tsdf(TsdfVolume& vol, VolumeUpdateRecord& rec) {
  const int B = 2 * vol.k + 2;
  std::map<CopyRef, double> negated;
  std::set<CopyRef> virtuals;
  for (const VoxelBlock& blk : rec.blocks) {
    for (int z = 0; z < B; ++z)
      for (int y = 0; y < B; ++y)
        for (int x = 0; x < B; ++x) {
          const std::size_t li = std::size_t(x) + B * (y + std::size_t(B) * z);
          if (blk.real[li]) continue;
          virtuals.insert(blk.voxels[li]);
          const std::array<int, 3> c = {x, y, z};
          for (int axis = 0; axis < 3; ++axis)
            for (int dir = -1; dir <= 1; dir += 2) {
              std::array<int, 3> u = c;
              u[axis] += dir;
              if (u[axis] < 0 || u[axis] >= B) continue;
              const std::size_t lu =
                  std::size_t(u[0]) + B * (u[1] + std::size_t(B) * u[2]);
              if (!blk.real[lu]) continue;
              const double d = vol.grid.at(blk.voxels[lu]).tsdf;
              if (d < 0) {
                auto it = negated.find(blk.voxels[li]);
                if (it == negated.end() || -d < it->second)
                  negated[blk.voxels[li]] = -d;
              }
            }
        }
  }
  for (const CopyRef& ref : virtuals) {
    Voxel& vx = vol.grid.at(ref);
    auto it = negated.find(ref);
    vx.tsdf = it != negated.end() ? it->second : 1.0;
    vx.weight = kBootstrapWeight;
  }
  rec.assigned = true;
}

// Fuses one depth frame into every active voxel. Each voxel is warped into
// the live frame with its own cell's node copies, projected to the nearest
// pixel, and updated with the clamped projective distance
// psi = clamp((D(u) - z)/truncation, -1, 1) iff psi > -1, by the running
// weighted average with per-observation weight 1 capped at 64. Returns the
// number of voxels updated.
inline std::size_t fuse_depth(TsdfVolume& vol, const DepthFrame& frame,
                              const DeformGraph& graph, const GlobalPose& pose) {
  const GridDims& vd = vol.grid.dims();
  std::vector<CopyRef> refs;
  for (const auto& [idx, bucket] : vol.grid.buckets())
    for (int off = 0; off < kMaxCopies; ++off)
      if (bucket.occupied(std::uint8_t(off)))
        refs.push_back(CopyRef{idx, std::uint8_t(off)});

  std::size_t fused = 0;
  for (const CopyRef& ref : refs) {
    Voxel& vx = vol.grid.at(ref);
    const Eigen::Vector3d live =
        warp_point(graph, vx.edg_cell, pose, vd.position(ref.index1d));
    if (live.z() <= 0) continue;
    const Eigen::Vector2d px = project(frame.K, live);
    const int u = int(std::lround(px.x()));
    const int v = int(std::lround(px.y()));
    if (!frame.in_bounds(u, v)) continue;
    const double depth = frame.at(u, v);
    if (depth <= 0) continue;
    const double psi = (depth - live.z()) / vol.truncation;
    if (!(psi > -1.0)) continue;
    const double clamped = std::min(1.0, psi);
    vx.tsdf = (vx.weight * vx.tsdf + kFuseWeight * clamped) / (vx.weight + kFuseWeight);
    vx.weight = std::min(vx.weight + kFuseWeight, kWeightMax);
    ++fused;
  }
  return fused;
}

// Activates the graph cells whose canonical box intersects the truncation
// band of depth the current field does not explain. A pixel within one node
// spacing of some warped node is geometry the field already supports (moving
// surfaces stay bound to their canonical cells instead of re-activating the
// space they sweep through); the rest is new, mapped back with the global
// pose only since new regions carry no local deformation yet. Expands the
// graph there and materializes the embedded voxels. Returns the new cell
// coordinates.
inline std::vector<std::array<int, 3>> activate_newly_observed(TsdfVolume& vol,
                                                               const DepthFrame& frame,
                                                               DeformGraph& graph,
                                                               const GlobalPose& pose) {
  const GridDims& nd = graph.nodes.dims();

  // Hash of warped node positions, binned at one node spacing.
  const double h = nd.spacing;
  std::map<std::array<int, 3>, std::vector<Eigen::Vector3d>> bins;
  for (const auto& [i1d, bucket] : graph.nodes.buckets())
    for (int off = 0; off < kMaxCopies; ++off) {
      if (!bucket.occupied(std::uint8_t(off))) continue;
      const Eigen::Vector3d w =
          warped_node_position(bucket.at(std::uint8_t(off)), pose);
      bins[{int(std::floor(w.x() / h)), int(std::floor(w.y() / h)),
            int(std::floor(w.z() / h))}]
          .push_back(w);
    }
  auto explained = [&](const Eigen::Vector3d& p) {
    const std::array<int, 3> c = {int(std::floor(p.x() / h)),
                                  int(std::floor(p.y() / h)),
                                  int(std::floor(p.z() / h))};
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto it = bins.find({c[0] + dx, c[1] + dy, c[2] + dz});
          if (it == bins.end()) continue;
          for (const Eigen::Vector3d& w : it->second)
            if ((w - p).squaredNorm() <= h * h) return true;
        }
    return false;
  };

  std::set<std::array<int, 3>> marked;
  for (int v = 0; v < frame.height; ++v)
    for (int u = 0; u < frame.width; ++u) {
      const double depth = frame.at(u, v);
      if (depth <= 0) continue;
      const Eigen::Vector3d live = backproject(frame.K, u, v, depth);
      if (!bins.empty() && explained(live)) continue;
      const Eigen::Vector3d x = pose.apply_inverse(live);
      std::array<int, 2> lo_hi[3];
      bool inside = true;
      for (int a = 0; a < 3; ++a) {
        const double lo = (x[a] - vol.truncation - nd.origin[a]) / nd.spacing;
        const double hi = (x[a] + vol.truncation - nd.origin[a]) / nd.spacing;
        lo_hi[a][0] = std::max(0, int(std::floor(lo)));
        lo_hi[a][1] = std::min(nd.extent(a) - 2, int(std::floor(hi)));
        if (lo_hi[a][0] > lo_hi[a][1]) inside = false;
      }
      if (!inside) continue;
      for (int cz = lo_hi[2][0]; cz <= lo_hi[2][1]; ++cz)
        for (int cy = lo_hi[1][0]; cy <= lo_hi[1][1]; ++cy)
          for (int cx = lo_hi[0][0]; cx <= lo_hi[0][1]; ++cx)
            marked.insert({cx, cy, cz});
    }

  std::vector<std::array<int, 3>> fresh;
  for (const auto& c : marked) {
    const std::int64_t anchor = nd.linear_index(c[0], c[1], c[2]);
    const auto lb = graph.cells.lower_bound(CellRef{CopyRef{anchor, 0}, 0});
    if (lb != graph.cells.end() && lb->first.anchor.index1d == anchor) continue;
    fresh.push_back(c);
  }
  if (fresh.empty()) return fresh;

  expand_graph(graph, fresh);
  std::vector<CellRef> created;
  for (const auto& c : fresh) {
    const std::int64_t anchor = nd.linear_index(c[0], c[1], c[2]);
    const auto lb = graph.cells.lower_bound(CellRef{CopyRef{anchor, 0}, 0});
    if (lb == graph.cells.end() || lb->first.anchor.index1d != anchor)
      throw StructuralError("activate_newly_observed: cell expansion failed");
    created.push_back(lb->first);
  }
  materialize_cells(vol, graph, created);
  return fresh;
}

// Binary snapshot for debugging, little-endian throughout:
//   "TCFVOL1\n", int32 k, float64 truncation,
//   int32 nx ny nz, float64 spacing, float64 origin[3],
//   int64 voxel_count, int64 cell_count,
//   voxels (bucket order, offset ascending):
//     int32 x y z, uint8 offset, uint8 is_real,
//     float64 tsdf, float64 weight, int64 node_assoc_copy_index
//   cells (map order):
//     int64 anchor_copy_index, uint8 salt, uint8 corner_offsets[8],
//     int64 edg_anchor_copy_index, uint8 edg_salt
inline void dump_volume(const TsdfVolume& vol, std::ostream& os) {
  auto put = [&os](const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), std::streamsize(n));
  };
  auto put_i32 = [&](std::int32_t v) { put(&v, 4); };
  auto put_i64 = [&](std::int64_t v) { put(&v, 8); };
  auto put_f64 = [&](double v) { put(&v, 8); };
  auto put_u8 = [&](std::uint8_t v) { put(&v, 1); };

  os.write("TCFVOL1\n", 8);
  put_i32(vol.k);
  put_f64(vol.truncation);
  const GridDims& vd = vol.grid.dims();
  put_i32(vd.nx);
  put_i32(vd.ny);
  put_i32(vd.nz);
  put_f64(vd.spacing);
  for (int a = 0; a < 3; ++a) put_f64(vd.origin[a]);

  std::int64_t count = 0;
  for (const auto& [idx, bucket] : vol.grid.buckets()) {
    (void)idx;
    count += bucket.count();
  }
  put_i64(count);
  put_i64(std::int64_t(vol.cells.size()));

  for (const auto& [idx, bucket] : vol.grid.buckets()) {
    const auto c = vd.coord_of(idx);
    for (int off = 0; off < kMaxCopies; ++off) {
      if (!bucket.occupied(std::uint8_t(off))) continue;
      const Voxel& vx = bucket.at(std::uint8_t(off));
      put_i32(c[0]);
      put_i32(c[1]);
      put_i32(c[2]);
      put_u8(std::uint8_t(off));
      put_u8(vx.is_real ? 1 : 0);
      put_f64(vx.tsdf);
      put_f64(vx.weight);
      put_i64(vx.node_assoc.copy_index());
    }
  }
  for (const auto& [cref, vrec] : vol.cells) {
    put_i64(cref.anchor.copy_index());
    put_u8(cref.salt);
    for (int c = 0; c < 8; ++c) put_u8(vrec.corner_offsets[c]);
    put_i64(vrec.edg_cell.anchor.copy_index());
    put_u8(vrec.edg_cell.salt);
  }
}

}  // namespace tcf
