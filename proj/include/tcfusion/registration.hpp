#pragma once
// Per-frame deformation estimation.
//
// A frame is registered in two stages: dense projective ICP for the global
// rigid pose, then alternating minimization of
//
//   E = w_s * E_spr + w_d * E_dense + w_r * E_reg
//
// over node displacements t_i, per-node rotations R_i and per-edge line
// process weights l_ij. E_spr sums squared distances of warped sparse feature
// pairs, E_dense is the count-normalized point-to-plane error of dense
// correspondences, and E_reg sums, once per unordered lattice edge with
// i = min(i, j),
//
//   l_ij * |(R_i - I)(g_i - g_j) - (t_i - t_j)|^2 + mu * (sqrt(l_ij) - 1)^2.
//
// Displacement step: every residual is linear in t (the warp blends
// displacements only), so one Gauss-Newton solve minimizes E over t exactly.
// Conjugate gradients started from zero decrease that quadratic monotonically,
// so the step never increases E even when stopped before convergence.
// Rotation step: per-node orthogonal Procrustes over its carried edges, with
// the determinant sign guarded. Line process step: closed form
// l = (mu / (mu + r^2))^2, the stationary point of the per-edge objective.
// Each step is an exact coordinate-wise minimizer, so E is non-increasing
// across the whole sweep at fixed correspondences.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

#include "tcfusion/camera.hpp"
#include "tcfusion/warp_field.hpp"

namespace tcf {

struct DegeneratePoseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SolverConfig {
  double omega_s = 1.0;   // sparse feature term weight
  double omega_d = 1.0;   // dense depth term weight
  double omega_r = 5.0;   // regularization term weight
  double mu = 1e-4;       // line process penalty scale, meters^2
  int max_outer_sweeps = 5;
  double pcg_tol = 1e-5;  // relative residual
  int pcg_max_iters = 200;
  double energy_rel_tol = 1e-6;
  int icp_iters = 10;
  double corr_dist_max = 0.05;                    // meters
  double corr_normal_max_angle = 60.0 * M_PI / 180.0;  // radians

  static double default_mu(double edg_spacing) {
    const double s = 0.2 * edg_spacing;
    return s * s;
  }

  void validate() const {
    if (omega_s < 0 || omega_d < 0 || omega_r < 0)
      throw std::invalid_argument("term weights must be non-negative");
    if (mu <= 0) throw std::invalid_argument("mu must be positive");
    if (pcg_tol <= 0 || energy_rel_tol <= 0)
      throw std::invalid_argument("tolerances must be positive");
    if (max_outer_sweeps < 1 || pcg_max_iters < 1 || icp_iters < 1)
      throw std::invalid_argument("iteration counts must be positive");
    if (corr_dist_max <= 0 || corr_normal_max_angle <= 0)
      throw std::invalid_argument("correspondence gates must be positive");
  }
};

// A canonical surface sample: position, outward normal and the EDG cell that
// warps it.
struct SurfacePoint {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  CellRef cell;
};

struct DenseCorrespondence {
  Eigen::Vector3d source = Eigen::Vector3d::Zero();  // canonical position
  CellRef cell;
  Eigen::Vector3d y = Eigen::Vector3d::Zero();  // target point, camera space
  Eigen::Vector3d n = Eigen::Vector3d::UnitZ();  // target normal, unit length
};

struct SparseCorrespondence {
  Eigen::Vector3d source = Eigen::Vector3d::Zero();  // canonical position
  CellRef cell;
  Eigen::Vector3d y = Eigen::Vector3d::Zero();
};

struct CorrespondenceSet {
  std::vector<DenseCorrespondence> dense;
  std::vector<SparseCorrespondence> sparse;
};

// Line process weights keyed by unordered lattice edge. Edges missing from
// the map count as l = 1 (fresh edges after a connectivity update).
using LineProcess = std::map<EdgeKey, double>;

inline double line_weight(const LineProcess& line, const EdgeKey& e) {
  const auto it = line.find(e);
  return it == line.end() ? 1.0 : it->second;
}

inline LineProcess unit_line_process(const DeformGraph& graph) {
  LineProcess line;
  for (const EdgeKey& e : graph_edges(graph)) line[e] = 1.0;
  return line;
}

struct DeformationState {
  GlobalPose pose;
  LineProcess line;
};

struct EnergyBreakdown {
  double total = 0, spr = 0, dense = 0, reg = 0;
};

// Stable enumeration of node copies; the column block of copy order[i] is 3i.
struct NodeIndex {
  std::vector<CopyRef> order;
  std::map<CopyRef, int> slot;
};

inline NodeIndex index_nodes(const DeformGraph& graph) {
  NodeIndex idx;
  for (const auto& [i1d, bucket] : graph.nodes.buckets())
    for (int off = 0; off < kMaxCopies; ++off)
      if (bucket.occupied(std::uint8_t(off))) {
        const CopyRef ref{i1d, std::uint8_t(off)};
        idx.slot[ref] = int(idx.order.size());
        idx.order.push_back(ref);
      }
  return idx;
}

namespace detail {

// Edge residual r = (R_a - I)(g_a - g_b) - (t_a - t_b) with a = min(a, b).
inline Eigen::Vector3d edge_residual(const DeformGraph& graph, const EdgeKey& e) {
  const EdgNode& a = graph.nodes.at(e.first);
  const EdgNode& b = graph.nodes.at(e.second);
  return (a.R - Eigen::Matrix3d::Identity()) * (a.g - b.g) - (a.t - b.t);
}

}  // namespace detail

inline EnergyBreakdown energy_total(const DeformGraph& graph, const GlobalPose& pose,
                                    const LineProcess& line,
                                    const CorrespondenceSet& corr,
                                    const SolverConfig& cfg) {
  EnergyBreakdown e;
  for (const SparseCorrespondence& s : corr.sparse)
    e.spr += (warp_point(graph, s.cell, pose, s.source) - s.y).squaredNorm();
  if (!corr.dense.empty()) {
    double sum = 0;
    for (const DenseCorrespondence& d : corr.dense) {
      const double r = d.n.dot(warp_point(graph, d.cell, pose, d.source) - d.y);
      sum += r * r;
    }
    e.dense = sum / double(corr.dense.size());
  }
  for (const EdgeKey& edge : graph_edges(graph)) {
    const double l = line_weight(line, edge);
    const double sq = detail::edge_residual(graph, edge).squaredNorm();
    const double sl = std::sqrt(l) - 1.0;
    e.reg += l * sq + cfg.mu * sl * sl;
  }
  e.total = cfg.omega_s * e.spr + cfg.omega_d * e.dense + cfg.omega_r * e.reg;
  return e;
}

namespace detail {

// Weighted Gauss-Newton system for the displacement step: rows of J and the
// residual vector r carry sqrt(row weight), so A = J^T J and b = -J^T r.
// Row layout: one point-to-plane row per dense pair with corner coefficients
// alpha_k (R^T n)^T, three rows per sparse pair with alpha_k R blocks, three
// rows per lattice edge with -I at the carrier and +I at the neighbor.
inline void assemble_normal_equations(const DeformGraph& graph, const GlobalPose& pose,
                                      const LineProcess& line,
                                      const CorrespondenceSet& corr,
                                      const SolverConfig& cfg, const NodeIndex& idx,
                                      Eigen::SparseMatrix<double>& A,
                                      Eigen::VectorXd& b) {
  const int n = int(idx.order.size());
  std::vector<Eigen::Triplet<double>> trips;
  std::vector<double> resid;
  int row = 0;

  auto corners_weights = [&](const CellRef& cell, const Eigen::Vector3d& p,
                             std::array<CopyRef, 8>& refs, std::array<double, 8>& w) {
    refs = cell_corners(graph, cell);
    w = trilinear_weights(p, cell_base_position(graph, cell), graph.spacing());
  };

  if (!corr.dense.empty()) {
    const double sw = std::sqrt(cfg.omega_d / double(corr.dense.size()));
    for (const DenseCorrespondence& d : corr.dense) {
      std::array<CopyRef, 8> refs;
      std::array<double, 8> w;
      corners_weights(d.cell, d.source, refs, w);
      const Eigen::Vector3d c = pose.R.transpose() * d.n;
      const double r = d.n.dot(warp_point(graph, d.cell, pose, d.source) - d.y);
      for (int k = 0; k < 8; ++k) {
        if (w[k] == 0.0) continue;
        const int col = 3 * idx.slot.at(refs[k]);
        for (int a = 0; a < 3; ++a)
          trips.emplace_back(row, col + a, sw * w[k] * c[a]);
      }
      resid.push_back(sw * r);
      ++row;
    }
  }

  const double sws = std::sqrt(cfg.omega_s);
  for (const SparseCorrespondence& s : corr.sparse) {
    std::array<CopyRef, 8> refs;
    std::array<double, 8> w;
    corners_weights(s.cell, s.source, refs, w);
    const Eigen::Vector3d r = warp_point(graph, s.cell, pose, s.source) - s.y;
    for (int a = 0; a < 3; ++a) {
      for (int k = 0; k < 8; ++k) {
        if (w[k] == 0.0) continue;
        const int col = 3 * idx.slot.at(refs[k]);
        for (int c = 0; c < 3; ++c)
          trips.emplace_back(row, col + c, sws * w[k] * pose.R(a, c));
      }
      resid.push_back(sws * r[a]);
      ++row;
    }
  }

  for (const EdgeKey& edge : graph_edges(graph)) {
    const double l = line_weight(line, edge);
    const double sw = std::sqrt(cfg.omega_r * l);
    if (sw == 0.0) continue;
    const Eigen::Vector3d r = edge_residual(graph, edge);
    const int ca = 3 * idx.slot.at(edge.first);
    const int cb = 3 * idx.slot.at(edge.second);
    for (int a = 0; a < 3; ++a) {
      trips.emplace_back(row, ca + a, -sw);
      trips.emplace_back(row, cb + a, sw);
      resid.push_back(sw * r[a]);
      ++row;
    }
  }

  if (row == 0) {
    A = Eigen::SparseMatrix<double>(3 * n, 3 * n);
    b = Eigen::VectorXd::Zero(3 * n);
    return;
  }
  Eigen::SparseMatrix<double> J(row, 3 * n);
  J.setFromTriplets(trips.begin(), trips.end());
  Eigen::VectorXd rv = Eigen::Map<Eigen::VectorXd>(resid.data(), row);
  A = Eigen::SparseMatrix<double>(J.transpose() * J);
  b = -J.transpose() * rv;
}

}  // namespace detail

// Gradient of E_total with respect to the stacked displacements, in the
// column order of idx. (The line process term does not depend on t.)
inline Eigen::VectorXd energy_gradient_t(const DeformGraph& graph,
                                         const GlobalPose& pose,
                                         const LineProcess& line,
                                         const CorrespondenceSet& corr,
                                         const SolverConfig& cfg,
                                         const NodeIndex& idx) {
  Eigen::SparseMatrix<double> A;
  Eigen::VectorXd b;
  detail::assemble_normal_equations(graph, pose, line, corr, cfg, idx, A, b);
  return -2.0 * b;  // b = -J^T W r, gradient = 2 J^T W r
}

struct PcgResult {
  int iterations = 0;
  double rel_residual = 0;
  bool converged = false;
};

// Jacobi-preconditioned conjugate gradients from x = 0.
inline PcgResult pcg_solve(const Eigen::SparseMatrix<double>& A,
                           const Eigen::VectorXd& b, double tol, int max_iters,
                           Eigen::VectorXd& x) {
  PcgResult out;
  const int n = int(b.size());
  x = Eigen::VectorXd::Zero(n);
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    out.converged = true;
    return out;
  }
  Eigen::VectorXd minv(n);
  for (int i = 0; i < n; ++i) {
    const double d = A.coeff(i, i);
    minv[i] = d > 1e-300 ? 1.0 / d : 1.0;
  }
  Eigen::VectorXd r = b;
  Eigen::VectorXd z = minv.asDiagonal() * r;
  Eigen::VectorXd p = z;
  double rz = r.dot(z);
  for (int it = 0; it < max_iters; ++it) {
    const Eigen::VectorXd Ap = A * p;
    const double pAp = p.dot(Ap);
    if (pAp <= 0.0) break;  // null-space direction: stop, x stays valid
    const double alpha = rz / pAp;
    x += alpha * p;
    r -= alpha * Ap;
    ++out.iterations;
    out.rel_residual = r.norm() / bnorm;
    if (out.rel_residual <= tol) {
      out.converged = true;
      return out;
    }
    z = minv.asDiagonal() * r;
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  out.rel_residual = r.norm() / bnorm;
  return out;
}

struct DisplacementStats {
  PcgResult pcg;
  int excluded_nodes = 0;  // copies no residual row touches; they keep t
};

// Step 1: Gauss-Newton displacement update at fixed rotations and line
// process. Never increases E_total.
inline DisplacementStats solve_displacements(DeformGraph& graph, const GlobalPose& pose,
                                             const LineProcess& line,
                                             const CorrespondenceSet& corr,
                                             const SolverConfig& cfg) {
  const NodeIndex idx = index_nodes(graph);
  Eigen::SparseMatrix<double> A;
  Eigen::VectorXd b;
  detail::assemble_normal_equations(graph, pose, line, corr, cfg, idx, A, b);

  DisplacementStats stats;
  for (std::size_t i = 0; i < idx.order.size(); ++i) {
    const double d = A.coeff(3 * int(i), 3 * int(i)) + A.coeff(3 * int(i) + 1, 3 * int(i) + 1) +
                     A.coeff(3 * int(i) + 2, 3 * int(i) + 2);
    if (d == 0.0) ++stats.excluded_nodes;
  }

  Eigen::VectorXd x;
  stats.pcg = pcg_solve(A, b, cfg.pcg_tol, cfg.pcg_max_iters, x);
  for (std::size_t i = 0; i < idx.order.size(); ++i)
    graph.nodes.at(idx.order[i]).t += x.segment<3>(3 * int(i));
  return stats;
}

struct RotationStats {
  int updated = 0;
  int kept = 0;  // fewer than two weighted edges: rotation left as is
};

// Step 2: per-node orthogonal Procrustes at fixed displacements and line
// process. Node i carries every unordered edge whose smaller endpoint it is;
// R_i minimizes sum_e l_e |R d_e - d~_e|^2 with d the canonical and d~ the
// displaced difference. Closed form via SVD of B = sum_e l_e d_e d~_e^T with
// the reflection guarded by det(VU^T).
inline RotationStats solve_rotations(DeformGraph& graph, const LineProcess& line) {
  RotationStats stats;
  const std::vector<EdgeKey> edges = graph_edges(graph);
  std::size_t i = 0;
  while (i < edges.size()) {
    const CopyRef carrier = edges[i].first;
    Eigen::Matrix3d B = Eigen::Matrix3d::Zero();
    int weighted = 0;
    std::size_t j = i;
    for (; j < edges.size() && edges[j].first == carrier; ++j) {
      const double l = line_weight(line, edges[j]);
      if (l < 1e-12) continue;
      const EdgNode& a = graph.nodes.at(edges[j].first);
      const EdgNode& b = graph.nodes.at(edges[j].second);
      const Eigen::Vector3d d = a.g - b.g;
      const Eigen::Vector3d dt = (a.g + a.t) - (b.g + b.t);
      B += l * d * dt.transpose();
      ++weighted;
    }
    if (weighted >= 2) {
      Eigen::JacobiSVD<Eigen::Matrix3d> svd(B, Eigen::ComputeFullU | Eigen::ComputeFullV);
      const Eigen::Matrix3d& U = svd.matrixU();
      const Eigen::Matrix3d& V = svd.matrixV();
      Eigen::Matrix3d R = V * U.transpose();
      if (R.determinant() < 0) {
        Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
        flip(2, 2) = -1;
        R = V * flip * U.transpose();
      }
      graph.nodes.at(carrier).R = R;
      ++stats.updated;
    } else {
      ++stats.kept;
    }
    i = j;
  }
  return stats;
}

// Step 3: closed-form line process at fixed displacements and rotations:
// l = (mu / (mu + r^2))^2 per edge, the stationary point of l r^2 + Psi(l).
inline LineProcess solve_line_process(const DeformGraph& graph, const SolverConfig& cfg) {
  LineProcess line;
  for (const EdgeKey& edge : graph_edges(graph)) {
    const double sq = detail::edge_residual(graph, edge).squaredNorm();
    const double ratio = cfg.mu / (cfg.mu + sq);
    line[edge] = ratio * ratio;
  }
  return line;
}

// Grazing-view gate: depth interpolation and image-space normals both degrade
// sharply where the surface turns away from the camera, with a one-signed
// depth bias that would drag the whole fit. Pairs whose target normal makes
// more than 60 degrees with the view ray are dropped.
inline bool grazing_view(const Eigen::Vector3d& y, const Eigen::Vector3d& n) {
  return n.dot(y.normalized()) > -0.5;
}

// Projective data association: each canonical sample is warped into camera
// space and projected into the depth image; the target point interpolates
// depth bilinearly at the continuous pixel position (with the normal read at
// the nearest pixel), gated by distance and normal agreement.
inline CorrespondenceSet find_dense_correspondences(
    const std::vector<SurfacePoint>& points, const DeformGraph& graph,
    const GlobalPose& pose, const DepthFrame& frame,
    const std::vector<Eigen::Vector3d>& normals, const SolverConfig& cfg) {
  CorrespondenceSet out;
  const double cos_max = std::cos(cfg.corr_normal_max_angle);
  for (const SurfacePoint& sp : points) {
    const Eigen::Vector3d w = warp_point(graph, sp.cell, pose, sp.position);
    if (w.z() <= 0) continue;
    const Eigen::Vector2d px = project(frame.K, w);
    const int u = int(std::lround(px.x()));
    const int v = int(std::lround(px.y()));
    if (!frame.in_bounds(u, v)) continue;
    const double z = sample_depth_bilinear(frame, px.x(), px.y());
    if (z <= 0) continue;
    const Eigen::Vector3d& n = normals[std::size_t(v) * frame.width + u];
    if (n.squaredNorm() < 0.5) continue;  // no valid normal at this pixel
    const Eigen::Vector3d y = backproject(frame.K, px.x(), px.y(), z);
    if (grazing_view(y, n)) continue;
    if ((w - y).norm() > cfg.corr_dist_max) continue;
    if ((pose.R * sp.normal).dot(n) < cos_max) continue;
    out.dense.push_back({sp.position, sp.cell, y, n});
  }
  return out;
}

// Dense projective point-to-plane ICP for the global pose. Input points are
// in canonical-warped space (node displacements applied, pose not). Each
// iteration re-associates, solves the linearized 6-DOF system and accepts the
// update only if the point-to-plane error on the current associations does
// not increase.
//
// The converged pose is kept only if it beats the starting pose on the
// lower-quartile absolute residual. Least squares is happy to explain
// partial motion with a rotation ramp (a ramp fits a step better than a
// constant), which would smuggle deformation into the global frame and
// spread the misfit over the whole model. The global frame should instead
// stay pinned to the largest coherently moving piece: a genuine rigid
// motion fits nearly all points and passes easily, while a compromise fit
// improves no coherent subset and is discarded for the deformation solve
// to handle. The quartile, unlike the mean or median, still picks the
// anchored piece when the scene splits into equal halves.
inline GlobalPose rigid_icp(const std::vector<Eigen::Vector3d>& points,
                            const std::vector<Eigen::Vector3d>& point_normals,
                            const DepthFrame& frame, const GlobalPose& init,
                            const SolverConfig& cfg) {
  if (points.size() != point_normals.size())
    throw std::invalid_argument("point/normal count mismatch");
  const std::vector<Eigen::Vector3d> normals = depth_normals(frame);
  const double cos_max = std::cos(cfg.corr_normal_max_angle);
  GlobalPose pose = init;

  // lower-quartile |n . (p - y)| over the pose's own projective associations
  const auto quartile_residual = [&](const GlobalPose& p) {
    std::vector<double> r;
    r.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Eigen::Vector3d w = p.apply(points[i]);
      if (w.z() <= 0) continue;
      const Eigen::Vector2d px = project(frame.K, w);
      const int u = int(std::lround(px.x()));
      const int v = int(std::lround(px.y()));
      if (!frame.in_bounds(u, v)) continue;
      const double z = sample_depth_bilinear(frame, px.x(), px.y());
      if (z <= 0) continue;
      const Eigen::Vector3d& n = normals[std::size_t(v) * frame.width + u];
      if (n.squaredNorm() < 0.5) continue;
      const Eigen::Vector3d y = backproject(frame.K, px.x(), px.y(), z);
      if (grazing_view(y, n)) continue;
      if ((w - y).norm() > cfg.corr_dist_max) continue;
      r.push_back(std::abs(n.dot(w - y)));
    }
    if (r.empty()) return std::numeric_limits<double>::infinity();
    std::nth_element(r.begin(), r.begin() + std::ptrdiff_t(r.size() / 4), r.end());
    return r[r.size() / 4];
  };
  const double init_quartile = quartile_residual(init);

  for (int it = 0; it < cfg.icp_iters; ++it) {
    std::vector<Eigen::Vector3d> src, tgt, tn;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Eigen::Vector3d w = pose.apply(points[i]);
      if (w.z() <= 0) continue;
      const Eigen::Vector2d px = project(frame.K, w);
      const int u = int(std::lround(px.x()));
      const int v = int(std::lround(px.y()));
      if (!frame.in_bounds(u, v)) continue;
      const double z = sample_depth_bilinear(frame, px.x(), px.y());
      if (z <= 0) continue;
      const Eigen::Vector3d& n = normals[std::size_t(v) * frame.width + u];
      if (n.squaredNorm() < 0.5) continue;
      const Eigen::Vector3d y = backproject(frame.K, px.x(), px.y(), z);
      if (grazing_view(y, n)) continue;
      if ((w - y).norm() > cfg.corr_dist_max) continue;
      if ((pose.R * point_normals[i]).dot(n) < cos_max) continue;
      src.push_back(points[i]);
      tgt.push_back(y);
      tn.push_back(n);
    }
    if (src.size() < 6)
      throw DegeneratePoseError("rigid alignment has fewer than 6 correspondences");

    auto error = [&](const GlobalPose& p) {
      double e = 0;
      for (std::size_t i = 0; i < src.size(); ++i) {
        const double r = tn[i].dot(p.apply(src[i]) - tgt[i]);
        e += r * r;
      }
      return e / double(src.size());
    };
    const double before = error(pose);

    // linearize around the current pose with a left increment (w, u):
    // p' -> p' + w x p' + u, residual row [ (p' x n)^T  n^T ]
    Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
      const Eigen::Vector3d p = pose.apply(src[i]);
      Eigen::Matrix<double, 6, 1> J;
      J.head<3>() = p.cross(tn[i]);
      J.tail<3>() = tn[i];
      const double r = tn[i].dot(p - tgt[i]);
      H += J * J.transpose();
      g -= J * r;
    }
    const Eigen::Matrix<double, 6, 1> xi = H.ldlt().solve(g);
    if (!xi.allFinite()) break;

    GlobalPose next = pose;
    const Eigen::Vector3d w = xi.head<3>();
    const double angle = w.norm();
    const Eigen::Matrix3d dR =
        angle < 1e-15 ? Eigen::Matrix3d::Identity()
                      : Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
    next.R = dR * pose.R;
    next.t = dR * pose.t + xi.tail<3>();
    if (error(next) > before) break;  // reject the step, keep the last pose
    pose = next;
    if (angle + xi.tail<3>().norm() < 1e-13) break;
  }
  if (quartile_residual(pose) > init_quartile) return init;
  return pose;
}

struct SweepRecord {
  EnergyBreakdown initial;       // after correspondence refresh
  EnergyBreakdown after_t;       // after the displacement step
  EnergyBreakdown after_r;       // after the rotation step
  EnergyBreakdown after_l;       // after the line process step
  int dense_count = 0;
  PcgResult pcg;
};

struct SolveStats {
  std::vector<SweepRecord> sweeps;
  bool converged = false;
};

// Alternating minimization driver. Rotations reset to identity and the line
// process to 1 on entry; displacements continue from the graph's current
// field. Correspondences are refreshed each sweep; inside a sweep they stay
// fixed, so the recorded energies are non-increasing.
inline DeformationState nonrigid_solve(DeformGraph& graph,
                                       const std::vector<SurfacePoint>& points,
                                       const std::vector<SparseCorrespondence>& sparse,
                                       const DepthFrame& frame, const GlobalPose& pose,
                                       const SolverConfig& cfg,
                                       SolveStats* stats = nullptr) {
  cfg.validate();
  const NodeIndex idx = index_nodes(graph);
  for (const CopyRef& ref : idx.order)
    graph.nodes.at(ref).R = Eigen::Matrix3d::Identity();
  LineProcess line = unit_line_process(graph);
  const std::vector<Eigen::Vector3d> normals = depth_normals(frame);

  double prev_energy = -1.0;
  for (int sweep = 0; sweep < cfg.max_outer_sweeps; ++sweep) {
    CorrespondenceSet corr =
        find_dense_correspondences(points, graph, pose, frame, normals, cfg);
    corr.sparse = sparse;

    SweepRecord rec;
    rec.dense_count = int(corr.dense.size());
    rec.initial = energy_total(graph, pose, line, corr, cfg);
    rec.pcg = solve_displacements(graph, pose, line, corr, cfg).pcg;
    rec.after_t = energy_total(graph, pose, line, corr, cfg);
    solve_rotations(graph, line);
    rec.after_r = energy_total(graph, pose, line, corr, cfg);
    line = solve_line_process(graph, cfg);
    rec.after_l = energy_total(graph, pose, line, corr, cfg);
    if (stats) stats->sweeps.push_back(rec);

    const double e = rec.after_l.total;
    if (prev_energy >= 0 &&
        std::abs(prev_energy - e) <= cfg.energy_rel_tol * std::max(prev_energy, 1e-30)) {
      if (stats) stats->converged = true;
      break;
    }
    prev_energy = e;
  }
  return DeformationState{pose, std::move(line)};
}

}  // namespace tcf
