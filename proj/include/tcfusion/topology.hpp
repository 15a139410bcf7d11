#pragma once
// Topology-change event detection and the connectivity surgery it triggers.
//
// Detection runs the nonrigid solver in both directions. The forward pass
// registers the model toward the newest frame; edges whose line-process
// weight collapses mark candidate separations. A short backward pass then
// re-registers the already-warped model toward the frame it came from,
// reusing the deformation graph with its stretched live shape as the rest
// shape and dropping sparse terms. Pulling the surface back onto the source
// data re-measures each edge's relative displacement under a fresh rotation
// fit: a genuine separation moves a whole piece, so the dense term restores
// it quickly and the strain shows up again well below the (tighter) backward
// threshold, while a kink injected by one bad correspondence is carried by a
// handful of points, heals only partially, and lands above it. Confirmed
// cutting edges drive cell duplication on the deformation graph, and the new
// connectivity is propagated into the TSDF volume.

#include <array>
#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "tcfusion/registration.hpp"
#include "tcfusion/tsdf_volume.hpp"
#include "tcfusion/warp_field.hpp"

namespace tcf {

// An edge is cutting when the forward weight falls below 0.5 and the backward
// weight stays below 0.8; either side alone vetoes the edge.
inline constexpr double kForwardCutThreshold = 0.5;
inline constexpr double kBackwardCutThreshold = 0.8;

struct CuttingEdgeReport {
  std::vector<EdgeKey> edges;  // cutting subset, in key order
  LineProcess forward_l;       // the full weight sets the decision was made from
  LineProcess backward_l;
  int frame_index = 0;
};

// Finds the active cell whose lattice box contains p. A still-valid hint cell
// is kept so points that have not left their box keep their binding; among
// duplicates of the same lattice cell the first copy in map order wins.
// Returns false when p lies outside the active grid.
inline bool locate_cell(const DeformGraph& graph, const Eigen::Vector3d& p,
                        const CellRef& hint, CellRef& out) {
  const GridDims& dims = graph.nodes.dims();
  const double tol = 1e-9;
  if (graph.cells.count(hint)) {
    const Eigen::Vector3d u = (p - cell_base_position(graph, hint)) / dims.spacing;
    if (u.minCoeff() >= -tol && u.maxCoeff() <= 1.0 + tol) {
      out = hint;
      return true;
    }
  }
  std::array<int, 3> c;
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - dims.origin[a]) / dims.spacing;
    if (u < -tol || u > dims.extent(a) - 1 + tol) return false;
    c[a] = std::min(int(std::floor(u)), dims.extent(a) - 2);
  }
  const std::int64_t idx = dims.linear_index(c[0], c[1], c[2]);
  auto it = graph.cells.lower_bound(CellRef{CopyRef{idx, 0}, 0});
  if (it == graph.cells.end() || it->first.anchor.index1d != idx) return false;
  out = it->first;
  return true;
}

// Re-registers the forward-solved model toward the frame it was registered
// from and returns the line process of that backward solve.
//
// The graph is copied with its displacement field intact, so the solve
// starts exactly at the registered surface and relaxes toward the source
// frame under fresh correspondences (sparse matches from the forward pass
// are deliberately not reused). The two outcomes the detector needs to
// separate behave differently under that relaxation: a spurious flag from a
// bad correspondence heals, because nothing in the source frame re-creates
// the spike that caused it, while a genuine separation cannot heal, because
// the source frame still observes the pieces apart and pins the accumulated
// differential in place. Restarting the field instead would erase that
// memory and let the regularizer absorb one frame of relative motion
// smoothly, which would veto every real cut. Two sweeps keep the pass
// cheap.
inline LineProcess backward_register(const DeformGraph& graph,
                                     const std::vector<SurfacePoint>& points,
                                     const DepthFrame& source,
                                     const GlobalPose& source_pose, SolverConfig cfg,
                                     SolveStats* stats = nullptr) {
  DeformGraph back = graph;
  cfg.max_outer_sweeps = 2;
  const DeformationState st =
      nonrigid_solve(back, points, {}, source, source_pose, cfg, stats);
  return st.line;
}

// Pure conjunction of the two threshold tests over identical edge sets.
inline CuttingEdgeReport detect_cutting_edges(const LineProcess& forward_l,
                                              const LineProcess& backward_l,
                                              int frame_index = 0) {
  if (forward_l.size() != backward_l.size())
    throw std::invalid_argument(
        "detect_cutting_edges: weight sets cover different edges");
  CuttingEdgeReport rep;
  rep.frame_index = frame_index;
  rep.forward_l = forward_l;
  rep.backward_l = backward_l;
  for (const auto& [edge, lf] : forward_l) {
    const auto it = backward_l.find(edge);
    if (it == backward_l.end())
      throw std::invalid_argument(
          "detect_cutting_edges: weight sets cover different edges");
    if (lf < kForwardCutThreshold && it->second < kBackwardCutThreshold)
      rep.edges.push_back(edge);
  }
  return rep;
}

struct TopologyUpdateResult {
  std::vector<CellRef> candidates;  // active cells that contained a cutting edge
  DuplicationRecord graph_rec;
  VolumeUpdateRecord volume_rec;
};

// Duplicates every active cell containing a confirmed cutting edge and
// propagates the new connectivity into the volume. Real voxels keep their
// fused values; only virtual copies are created. Cells split by an earlier
// update no longer match the reported corner copies and are skipped, so
// re-applying the same report is a no-op.
inline TopologyUpdateResult apply_topology_update(DeformGraph& graph,
                                                  TsdfVolume& vol,
                                                  const CuttingEdgeReport& report) {
  TopologyUpdateResult res;
  if (report.edges.empty()) return res;

  const std::set<EdgeKey> cutting(report.edges.begin(), report.edges.end());
  for (const auto& [cref, crec] : graph.cells) {
    (void)crec;
    const std::array<CopyRef, 8> corners = cell_corners(graph, cref);
    for (const auto& [a, b] : kCellEdges) {
      if (cutting.count(make_edge(corners[a], corners[b]))) {
        res.candidates.push_back(cref);
        break;
      }
    }
  }
  if (res.candidates.empty()) return res;

  res.graph_rec = duplicate_cells(graph, res.candidates, report.edges);
  restore_connectivity(graph, res.graph_rec);
  res.volume_rec = propagate_connectivity(vol, res.graph_rec);
  assign_virtual_tsdf(vol, res.volume_rec);
  return res;
}

}  // namespace tcf
