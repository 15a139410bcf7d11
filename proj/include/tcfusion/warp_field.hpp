#pragma once

// Embedded deformation graph over a regular lattice. Every lattice cell is a
// cube of 8 node copies; warping blends the per-node displacements of the
// containing cell with trilinear weights and applies one global pose on top.
//
// Topology updates run as a pass of two operations:
//   duplicate_cells     stages per-component copies of every candidate cell
//   restore_connectivity merges staged copies per lattice point (union-find
//                        on parent ids) and materializes the survivors
// Real copies parent to the original copy and therefore collapse back into
// it; virtual copies parent to the first virtual sibling staged for the same
// original, so they merge with each other but never with a real copy.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "tcfusion/grid_core.hpp"

namespace tcf {

struct GlobalPose {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }
  Eigen::Vector3d apply_inverse(const Eigen::Vector3d& p) const {
    return R.transpose() * (p - t);
  }
};

struct EdgNode {
  Eigen::Vector3d g = Eigen::Vector3d::Zero();  // canonical position
  Eigen::Vector3d t = Eigen::Vector3d::Zero();  // displacement, canonical -> live
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();  // local frame for the regularizer
  bool is_real = true;
  bool active = true;
  std::uint8_t parent_offset = 0;  // merge-pass parent; own offset between passes
  std::uint8_t virtual_source = 0;  // offset this placeholder was staged from
  CopyRef self;
  // Corner offsets of the cell anchored at this copy (its lattice point is the
  // cell's smallest corner); -1 when no cell is anchored here. Fast-path
  // mirror of the central cell table for the single-anchor case.
  std::array<std::int8_t, 8> cell_offsets = {-1, -1, -1, -1, -1, -1, -1, -1};
};

// Cells are keyed by their anchor copy. The salt disambiguates the rare case
// of coincident duplicate cells that ended up sharing an anchor copy.
struct CellRef {
  CopyRef anchor;
  std::uint8_t salt = 0;

  friend bool operator==(const CellRef& a, const CellRef& b) {
    return a.anchor == b.anchor && a.salt == b.salt;
  }
  friend bool operator!=(const CellRef& a, const CellRef& b) { return !(a == b); }
  friend bool operator<(const CellRef& a, const CellRef& b) {
    if (!(a.anchor == b.anchor)) return a.anchor < b.anchor;
    return a.salt < b.salt;
  }
};

struct CellRecord {
  std::array<std::uint8_t, 8> corner_offsets = {};
};

struct DeformGraph {
  BucketGrid<EdgNode> nodes;
  std::map<CellRef, CellRecord> cells;

  DeformGraph() = default;
  explicit DeformGraph(const GridDims& dims) : nodes(dims) {}

  double spacing() const { return nodes.dims().spacing; }
};

// Corner k of a cell sits at anchor + (k & 1, k >> 1 & 1, k >> 2 & 1).
inline std::array<int, 3> corner_step(int k) {
  return {k & 1, (k >> 1) & 1, (k >> 2) & 1};
}

// The 12 cube edges as corner index pairs (no face or body diagonals).
inline constexpr std::array<std::pair<int, int>, 12> kCellEdges = {{
    {0, 1}, {0, 2}, {0, 4}, {1, 3}, {1, 5}, {2, 3},
    {2, 6}, {3, 7}, {4, 5}, {4, 6}, {5, 7}, {6, 7},
}};

using EdgeKey = std::pair<CopyRef, CopyRef>;

inline EdgeKey make_edge(const CopyRef& a, const CopyRef& b) {
  return b < a ? EdgeKey{b, a} : EdgeKey{a, b};
}

inline std::int64_t corner_index1d(const GridDims& dims, const std::array<int, 3>& anchor,
                                   int k) {
  const auto s = corner_step(k);
  return dims.linear_index(anchor[0] + s[0], anchor[1] + s[1], anchor[2] + s[2]);
}

inline std::array<CopyRef, 8> cell_corners(const DeformGraph& graph, const CellRef& cell) {
  auto it = graph.cells.find(cell);
  if (it == graph.cells.end())
    throw std::out_of_range("cell_corners: unknown cell");
  const auto anchor = graph.nodes.dims().coord_of(cell.anchor.index1d);
  std::array<CopyRef, 8> out;
  for (int k = 0; k < 8; ++k)
    out[k] = CopyRef{corner_index1d(graph.nodes.dims(), anchor, k),
                     it->second.corner_offsets[k]};
  return out;
}

inline Eigen::Vector3d cell_base_position(const DeformGraph& graph, const CellRef& cell) {
  return graph.nodes.dims().position(cell.anchor.index1d);
}

// Weights for the 8 cell corners in corner_step order. The point must lie in
// the cell's box up to 1e-9 * spacing; weights are clamped afterwards so they
// stay in [0,1] and sum to 1.
inline std::array<double, 8> trilinear_weights(const Eigen::Vector3d& p,
                                               const Eigen::Vector3d& base,
                                               double spacing) {
  const double utol = 1e-9;  // 1e-9 * spacing in position units
  Eigen::Vector3d u = (p - base) / spacing;
  for (int a = 0; a < 3; ++a) {
    if (u[a] < -utol || u[a] > 1.0 + utol)
      throw std::domain_error("trilinear_weights: point outside cell");
    u[a] = std::min(1.0, std::max(0.0, u[a]));
  }
  std::array<double, 8> w;
  for (int k = 0; k < 8; ++k) {
    const auto s = corner_step(k);
    w[k] = (s[0] ? u[0] : 1.0 - u[0]) * (s[1] ? u[1] : 1.0 - u[1]) *
           (s[2] ? u[2] : 1.0 - u[2]);
  }
  return w;
}

// T(x) = R * (x + sum_k w_k t_k) + t. Per-node rotations do not enter the
// warp itself, only the regularizer.
inline Eigen::Vector3d warp_point(const DeformGraph& graph, const CellRef& cell,
                                  const GlobalPose& pose, const Eigen::Vector3d& x) {
  const auto corners = cell_corners(graph, cell);
  const auto w = trilinear_weights(x, cell_base_position(graph, cell), graph.spacing());
  Eigen::Vector3d disp = Eigen::Vector3d::Zero();
  for (int k = 0; k < 8; ++k)
    disp += w[k] * graph.nodes.at(corners[k]).t;
  return pose.apply(x + disp);
}

inline Eigen::Vector3d warped_node_position(const EdgNode& n, const GlobalPose& pose) {
  return pose.apply(n.g + n.t);
}

// Deduplicated cube edges of all active cells, ordered by endpoint refs.
inline std::vector<EdgeKey> graph_edges(const DeformGraph& graph) {
  std::set<EdgeKey> edges;
  for (const auto& [ref, rec] : graph.cells) {
    (void)rec;
    const auto corners = cell_corners(graph, ref);
    for (const auto& [a, b] : kCellEdges)
      edges.insert(make_edge(corners[a], corners[b]));
  }
  return {edges.begin(), edges.end()};
}

// The edges between real nodes. Only these carry deformation constraints:
// placeholder copies created by cell duplication hold no observations, so
// an edge touching one can neither regularize the field nor give evidence
// of a separation.
inline std::vector<EdgeKey> real_edges(const DeformGraph& graph) {
  std::set<EdgeKey> edges;
  for (const auto& [ref, rec] : graph.cells) {
    (void)rec;
    const auto corners = cell_corners(graph, ref);
    for (const auto& [a, b] : kCellEdges) {
      if (!graph.nodes.at(corners[a]).is_real) continue;
      if (!graph.nodes.at(corners[b]).is_real) continue;
      edges.insert(make_edge(corners[a], corners[b]));
    }
  }
  return {edges.begin(), edges.end()};
}

// Re-derives every placeholder copy's state from the real corners of the
// cells it serves: the displacement is their arithmetic mean and the
// rotation copies the nearest real corner (lattice distance, ties broken by
// cell map order then corner index). Placeholders are interpolation support,
// not variables, so this runs after each solver step that moves real nodes.
inline void extrapolate_virtual_state(DeformGraph& graph) {
  struct Accum {
    std::set<CopyRef> sources;
    int best_d2 = 1 << 30;
    CopyRef best_ref;
  };
  std::map<CopyRef, Accum> accum;

  for (const auto& [ref, rec] : graph.cells) {
    (void)rec;
    const auto corners = cell_corners(graph, ref);
    for (int k = 0; k < 8; ++k) {
      if (graph.nodes.at(corners[k]).is_real) continue;
      Accum& a = accum[corners[k]];
      const auto sk = corner_step(k);
      for (int j = 0; j < 8; ++j) {
        if (!graph.nodes.at(corners[j]).is_real) continue;
        a.sources.insert(corners[j]);
        const auto sj = corner_step(j);
        const int d2 = (sk[0] - sj[0]) * (sk[0] - sj[0]) +
                       (sk[1] - sj[1]) * (sk[1] - sj[1]) +
                       (sk[2] - sj[2]) * (sk[2] - sj[2]);
        if (d2 < a.best_d2) {
          a.best_d2 = d2;
          a.best_ref = corners[j];
        }
      }
    }
  }

  for (const auto& [ref, a] : accum) {
    if (a.sources.empty()) continue;  // orphaned placeholder keeps its last state
    Eigen::Vector3d t_sum = Eigen::Vector3d::Zero();
    for (const CopyRef& s : a.sources) t_sum += graph.nodes.at(s).t;
    EdgNode& n = graph.nodes.at(ref);
    n.t = t_sum / double(a.sources.size());
    n.R = graph.nodes.at(a.best_ref).R;
  }
}

inline int affiliation_count(const DeformGraph& graph, const CopyRef& node) {
  int n = 0;
  for (const auto& [ref, rec] : graph.cells) {
    (void)rec;
    const auto corners = cell_corners(graph, ref);
    for (const auto& c : corners)
      if (c == node) {
        ++n;
        break;
      }
  }
  return n;
}

// Connected components of the cell's cube graph after removing the cutting
// edges. Every cutting edge must be one of this cell's 12 edges. Component
// labels are the smallest corner index of the component.
inline std::array<int, 8> separate_cell(const DeformGraph& graph, const CellRef& cell,
                                        const std::vector<EdgeKey>& cutting) {
  const auto corners = cell_corners(graph, cell);
  std::set<std::pair<int, int>> cut;  // corner index pairs
  for (const auto& e : cutting) {
    bool found = false;
    for (const auto& [a, b] : kCellEdges) {
      if (make_edge(corners[a], corners[b]) == e) {
        cut.insert({a, b});
        found = true;
        break;
      }
    }
    if (!found)
      throw std::invalid_argument("separate_cell: edge does not belong to the cell");
  }

  std::array<int, 8> label;
  label.fill(-1);
  for (int seed = 0; seed < 8; ++seed) {
    if (label[seed] >= 0) continue;
    std::vector<int> stack{seed};
    label[seed] = seed;
    while (!stack.empty()) {
      const int c = stack.back();
      stack.pop_back();
      for (const auto& [a, b] : kCellEdges) {
        if (a != c && b != c) continue;
        if (cut.count({a, b})) continue;
        const int other = (a == c) ? b : a;
        if (label[other] < 0) {
          label[other] = seed;
          stack.push_back(other);
        }
      }
    }
  }
  return label;
}

struct CellDuplicate {
  int label = 0;                   // component label (smallest corner index)
  std::array<bool, 8> real = {};   // whether each corner is real in this duplicate
  CellRef cell;                    // valid after restore_connectivity
  std::array<CopyRef, 8> corners;  // staged ids during the pass, final refs after
};

struct CellDuplication {
  CellRef original_cell;
  std::array<int, 3> anchor_coord = {};
  std::array<CopyRef, 8> original_corners;
  std::array<int, 8> labels = {};
  std::vector<CellDuplicate> duplicates;
};

struct DuplicationRecord {
  struct StagedCopy {
    std::int64_t index1d = -1;
    int prov_id = -1;     // >= kMaxCopies; existing copies keep their offsets
    int parent_prov = -1;
    std::uint8_t source_offset = 0;  // offset of the original copy this derives from
    EdgNode node;
  };

  std::vector<CellDuplication> cells;
  std::map<std::int64_t, std::vector<StagedCopy>> staged;  // per lattice point
  std::map<CopyRef, CopyRef> birth;  // new surviving copy -> source original copy
  bool restored = false;
};

namespace detail {

inline void sync_anchor_mirror(DeformGraph& graph, const CopyRef& anchor) {
  if (!graph.nodes.contains(anchor)) return;
  auto& node = graph.nodes.at(anchor);
  auto it = graph.cells.find(CellRef{anchor, 0});
  if (it == graph.cells.end()) {
    node.cell_offsets.fill(-1);
  } else {
    for (int k = 0; k < 8; ++k)
      node.cell_offsets[k] = std::int8_t(it->second.corner_offsets[k]);
  }
}

inline CellRef insert_cell(DeformGraph& graph, const CopyRef& anchor,
                           const std::array<std::uint8_t, 8>& offsets) {
  CellRef ref{anchor, 0};
  while (graph.cells.count(ref)) {
    if (ref.salt == 255)
      throw CapacityError("insert_cell: salt space exhausted");
    ++ref.salt;
  }
  graph.cells.emplace(ref, CellRecord{offsets});
  sync_anchor_mirror(graph, anchor);
  return ref;
}

}  // namespace detail

// Activates cells at the given anchor lattice coordinates. Missing corner
// nodes are created with identity rotation and zero displacement; corners
// that already hold copies reuse the first occupied offset. Returns the refs
// of the nodes that were created.
inline std::vector<CopyRef> expand_graph(DeformGraph& graph,
                                         const std::vector<std::array<int, 3>>& cell_coords) {
  const GridDims& dims = graph.nodes.dims();
  std::vector<std::array<int, 3>> sorted = cell_coords;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  std::vector<CopyRef> created;
  for (const auto& c : sorted) {
    if (c[0] < 0 || c[0] >= dims.nx - 1 || c[1] < 0 || c[1] >= dims.ny - 1 ||
        c[2] < 0 || c[2] >= dims.nz - 1)
      throw std::out_of_range("expand_graph: cell anchor outside grid");

    const std::int64_t anchor_idx = dims.linear_index(c[0], c[1], c[2]);
    // Skip coordinates that already anchor a cell (any copy, any salt).
    const auto lb = graph.cells.lower_bound(CellRef{CopyRef{anchor_idx, 0}, 0});
    if (lb != graph.cells.end() && lb->first.anchor.index1d == anchor_idx) continue;

    std::array<std::uint8_t, 8> offsets{};
    std::array<CopyRef, 8> refs;
    for (int k = 0; k < 8; ++k) {
      const std::int64_t idx = corner_index1d(dims, c, k);
      const Bucket<EdgNode>* b = graph.nodes.find_bucket(idx);
      int off = -1;
      if (b) {
        for (int o = 0; o < kMaxCopies; ++o)
          if (b->occupied(std::uint8_t(o))) {
            off = o;
            break;
          }
      }
      if (off < 0) {
        EdgNode n;
        n.g = dims.position(idx);
        const CopyRef ref = graph.nodes.insert(idx, n);
        graph.nodes.at(ref).self = ref;
        graph.nodes.at(ref).parent_offset = ref.offset;
        created.push_back(ref);
        off = ref.offset;
      }
      offsets[k] = std::uint8_t(off);
      refs[k] = CopyRef{idx, std::uint8_t(off)};
    }
    detail::insert_cell(graph, refs[0], offsets);
  }
  return created;
}

// Stages per-component duplicates of every candidate cell and removes the
// originals from the active cell set. Node buckets are not touched yet;
// restore_connectivity completes the pass. Virtual corners get the mean
// displacement of the duplicate's real corners and the rotation of the
// nearest real corner.
inline DuplicationRecord duplicate_cells(DeformGraph& graph,
                                         const std::vector<CellRef>& candidates,
                                         const std::vector<EdgeKey>& cutting_edges) {
  std::set<CellRef> cand(candidates.begin(), candidates.end());
  DuplicationRecord rec;
  std::map<std::int64_t, int> next_prov;                        // per bucket
  std::map<std::pair<std::int64_t, int>, int> first_virtual;    // (bucket, source offset)

  for (const CellRef& cref : cand) {
    auto cit = graph.cells.find(cref);
    if (cit == graph.cells.end())
      throw std::invalid_argument("duplicate_cells: candidate is not an active cell");

    CellDuplication dup;
    dup.original_cell = cref;
    dup.anchor_coord = graph.nodes.dims().coord_of(cref.anchor.index1d);
    dup.original_corners = cell_corners(graph, cref);

    // Only this cell's own cutting edges participate in its partition.
    std::vector<EdgeKey> local;
    {
      std::set<EdgeKey> own;
      for (const auto& [a, b] : kCellEdges)
        own.insert(make_edge(dup.original_corners[a], dup.original_corners[b]));
      for (const auto& e : cutting_edges)
        if (own.count(e)) local.push_back(e);
    }
    dup.labels = separate_cell(graph, cref, local);

    std::vector<int> comps;
    for (int k = 0; k < 8; ++k)
      if (dup.labels[k] == k) comps.push_back(k);

    for (int comp : comps) {
      CellDuplicate d;
      d.label = comp;

      // Mean displacement of the component's corners, for the virtual ones.
      Eigen::Vector3d mean_t = Eigen::Vector3d::Zero();
      int n_real = 0;
      for (int k = 0; k < 8; ++k) {
        if (dup.labels[k] != comp) continue;
        mean_t += graph.nodes.at(dup.original_corners[k]).t;
        ++n_real;
      }
      mean_t /= double(n_real);

      for (int k = 0; k < 8; ++k) {
        const CopyRef orig = dup.original_corners[k];
        const EdgNode& src = graph.nodes.at(orig);
        auto& bucket_next = next_prov[orig.index1d];
        if (bucket_next == 0) bucket_next = kMaxCopies;

        DuplicationRecord::StagedCopy sc;
        sc.index1d = orig.index1d;
        sc.prov_id = bucket_next++;
        sc.source_offset = orig.offset;
        sc.node = src;
        sc.node.parent_offset = 0;  // parent tracked via parent_prov until materialized

        if (dup.labels[k] == comp) {
          d.real[k] = true;
          sc.node.is_real = true;
          sc.parent_prov = orig.offset;  // collapses back into the original
        } else {
          d.real[k] = false;
          sc.node.is_real = false;
          sc.node.t = mean_t;
          // Rotation of the nearest real corner (canonical distance, ties by
          // smallest corner index). Corner positions differ by lattice steps.
          int best = -1;
          int best_d2 = 1 << 30;
          const auto sk = corner_step(k);
          for (int j = 0; j < 8; ++j) {
            if (dup.labels[j] != comp) continue;
            const auto sj = corner_step(j);
            const int d2 = (sk[0] - sj[0]) * (sk[0] - sj[0]) +
                           (sk[1] - sj[1]) * (sk[1] - sj[1]) +
                           (sk[2] - sj[2]) * (sk[2] - sj[2]);
            if (d2 < best_d2) {
              best_d2 = d2;
              best = j;
            }
          }
          sc.node.R = graph.nodes.at(dup.original_corners[best]).R;

          auto fv = first_virtual.find({orig.index1d, orig.offset});
          if (fv == first_virtual.end()) {
            first_virtual[{orig.index1d, orig.offset}] = sc.prov_id;
            sc.parent_prov = sc.prov_id;  // group root
          } else {
            sc.parent_prov = fv->second;
          }
        }

        sc.node.cell_offsets.fill(-1);
        d.corners[k] = CopyRef{orig.index1d, std::uint8_t(sc.prov_id)};
        rec.staged[orig.index1d].push_back(sc);
      }
      dup.duplicates.push_back(std::move(d));
    }

    graph.cells.erase(cit);
    detail::sync_anchor_mirror(graph, cref.anchor);
    rec.cells.push_back(std::move(dup));
  }
  return rec;
}

// Completes a duplication pass: per lattice point, union-find over existing
// copies plus staged ones, materialize surviving group roots into free bucket
// slots, and re-point every staged cell at the surviving copies.
inline void restore_connectivity(DeformGraph& graph, DuplicationRecord& rec) {
  if (rec.restored)
    throw std::logic_error("restore_connectivity: record already applied");

  // prov id -> final offset, per bucket
  std::map<std::int64_t, std::map<int, std::uint8_t>> final_offset;

  for (auto& [index1d, staged] : rec.staged) {
    // Dense id space: existing offsets 0..7 stay put, staged ids follow.
    int max_id = kMaxCopies - 1;
    for (const auto& sc : staged) max_id = std::max(max_id, sc.prov_id);

    std::vector<int> parents(max_id + 1);
    for (int i = 0; i <= max_id; ++i) parents[i] = i;
    for (const auto& sc : staged) parents[sc.prov_id] = sc.parent_prov;

    const std::vector<int> roots = resolve_parents(parents);

    auto& fo = final_offset[index1d];
    for (int off = 0; off < kMaxCopies; ++off) fo[off] = std::uint8_t(off);

    for (const auto& sc : staged) {
      const int root = roots[sc.prov_id];
      if (root < kMaxCopies) {
        fo[sc.prov_id] = std::uint8_t(root);  // collapsed into an existing copy
        continue;
      }
      if (root != sc.prov_id) continue;  // another staged copy materializes the group
      EdgNode node = sc.node;
      const CopyRef ref = graph.nodes.insert(index1d, node);
      graph.nodes.at(ref).self = ref;
      graph.nodes.at(ref).parent_offset = ref.offset;
      fo[sc.prov_id] = ref.offset;
      rec.birth[ref] = CopyRef{index1d, sc.source_offset};
    }
    // Non-root staged ids map to their root's final offset.
    for (const auto& sc : staged) {
      const int root = roots[sc.prov_id];
      if (root >= kMaxCopies && root != sc.prov_id) fo[sc.prov_id] = fo.at(root);
    }
  }

  for (auto& dup : rec.cells) {
    for (auto& d : dup.duplicates) {
      std::array<std::uint8_t, 8> offsets{};
      for (int k = 0; k < 8; ++k) {
        const auto& fo = final_offset.at(d.corners[k].index1d);
        const std::uint8_t off = fo.at(int(d.corners[k].offset));
        d.corners[k] = CopyRef{d.corners[k].index1d, off};
        offsets[k] = off;
      }
      d.cell = detail::insert_cell(graph, d.corners[0], offsets);
    }
  }
  rec.restored = true;
}

// Structured text dump. One line per node, cell, and edge; floats printed
// with %.9g so dumps are byte-stable.
inline void dump_graph(const DeformGraph& graph, std::ostream& os,
                       const std::map<EdgeKey, double>* line_weights = nullptr) {
  char buf[256];
  std::int64_t n_nodes = 0;
  for (const auto& [idx, bucket] : graph.nodes.buckets()) {
    (void)idx;
    n_nodes += bucket.count();
  }
  std::snprintf(buf, sizeof(buf), "graph nodes=%lld cells=%zu spacing=%.9g\n",
                static_cast<long long>(n_nodes), graph.cells.size(), graph.spacing());
  os << buf;

  for (const auto& [idx, bucket] : graph.nodes.buckets()) {
    const auto c = graph.nodes.dims().coord_of(idx);
    for (int off = 0; off < kMaxCopies; ++off) {
      if (!bucket.occupied(std::uint8_t(off))) continue;
      const EdgNode& n = bucket.at(std::uint8_t(off));
      std::snprintf(buf, sizeof(buf),
                    "node %lld:%d coord=(%d,%d,%d) real=%d parent=%d "
                    "g=(%.9g %.9g %.9g) t=(%.9g %.9g %.9g)\n",
                    static_cast<long long>(idx), off, c[0], c[1], c[2],
                    n.is_real ? 1 : 0, int(n.parent_offset), n.g.x(), n.g.y(),
                    n.g.z(), n.t.x(), n.t.y(), n.t.z());
      os << buf;
    }
  }

  for (const auto& [ref, rec] : graph.cells) {
    std::snprintf(buf, sizeof(buf), "cell %lld:%d/%d corners=%d,%d,%d,%d,%d,%d,%d,%d\n",
                  static_cast<long long>(ref.anchor.index1d), int(ref.anchor.offset),
                  int(ref.salt), int(rec.corner_offsets[0]), int(rec.corner_offsets[1]),
                  int(rec.corner_offsets[2]), int(rec.corner_offsets[3]),
                  int(rec.corner_offsets[4]), int(rec.corner_offsets[5]),
                  int(rec.corner_offsets[6]), int(rec.corner_offsets[7]));
    os << buf;
  }

  for (const EdgeKey& e : graph_edges(graph)) {
    double l = 1.0;
    if (line_weights) {
      auto it = line_weights->find(e);
      if (it != line_weights->end()) l = it->second;
    }
    std::snprintf(buf, sizeof(buf), "edge %lld:%d -- %lld:%d l=%.9g\n",
                  static_cast<long long>(e.first.index1d), int(e.first.offset),
                  static_cast<long long>(e.second.index1d), int(e.second.offset), l);
    os << buf;
  }
}

}  // namespace tcf
