#pragma once
// Frame loop tying the modules together: per frame, rigid alignment,
// non-rigid registration, the backward cut check, connectivity updates,
// depth fusion, graph growth and surface extraction. Also owns run
// configuration, ground-truth evaluation, the metrics CSV and playback of
// the final surface through the recorded per-frame fields.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "tcfusion/camera.hpp"
#include "tcfusion/depth_io.hpp"
#include "tcfusion/grid_core.hpp"
#include "tcfusion/meshing.hpp"
#include "tcfusion/registration.hpp"
#include "tcfusion/scene.hpp"
#include "tcfusion/topology.hpp"
#include "tcfusion/tsdf_volume.hpp"
#include "tcfusion/warp_field.hpp"

namespace tcf {

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Run configuration. Precedence is defaults < config file < explicit
// overrides, which the CLI applies after loading the file. A grid left at
// extents (0,0,0) is derived from the scene; directory input requires an
// explicit grid. A non-positive solver mu is filled from the node spacing.
struct PipelineConfig {
  int k = 1;
  double voxel_spacing = 0.006;  // meters
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  std::array<int, 3> node_dims = {0, 0, 0};

  int width = 640;
  int height = 480;
  Intrinsics K{570.0, 570.0, 319.5, 239.5};

  SolverConfig solver = default_solver();
  bool topology_updates = true;
  double off_surface_threshold = 1.0;  // in TSDF cell widths

  std::string scene_name;  // one of the synthetic scenes, or empty
  std::string input_dir;   // directory of depth frames, or empty
  int frames = 20;
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;

  double edg_spacing() const { return (2 * k + 1) * voxel_spacing; }

  // Count-normalized dense rows need substantial weight against the
  // per-edge regularizer before surfaces can follow the data closely enough
  // for discontinuities to localize; mu is filled per grid at run time.
  static SolverConfig default_solver() {
    SolverConfig cfg;
    cfg.omega_d = 200.0;
    cfg.mu = 0.0;
    return cfg;
  }

  void validate() const {
    if (k < 1 || k > 3) throw PipelineError("config: k must be 1, 2 or 3");
    if (voxel_spacing <= 0) throw PipelineError("config: voxel spacing must be positive");
    if (width <= 0 || height <= 0) throw PipelineError("config: image extents must be positive");
    if (K.fx <= 0 || K.fy <= 0) throw PipelineError("config: focal lengths must be positive");
    if (frames < 1) throw PipelineError("config: frame count must be positive");
    if (off_surface_threshold <= 0)
      throw PipelineError("config: off-surface threshold must be positive");
    if (scene_name.empty() == input_dir.empty())
      throw PipelineError("config: exactly one of scene or input directory required");
    if (!input_dir.empty() &&
        (node_dims[0] < 2 || node_dims[1] < 2 || node_dims[2] < 2))
      throw PipelineError("config: directory input requires explicit grid extents");
  }
};

namespace pipeline_detail {

inline void apply_json(PipelineConfig& cfg, const nlohmann::json& j) {
  auto num = [](const nlohmann::json& v, const char* what) -> double {
    if (!v.is_number()) throw PipelineError(std::string("config: ") + what + " must be a number");
    return v.get<double>();
  };
  for (const auto& [key, val] : j.items()) {
    if (key == "k") cfg.k = int(num(val, "k"));
    else if (key == "voxel_spacing") cfg.voxel_spacing = num(val, "voxel_spacing");
    else if (key == "origin") {
      if (!val.is_array() || val.size() != 3) throw PipelineError("config: origin must be [x, y, z]");
      for (int a = 0; a < 3; ++a) cfg.origin[a] = num(val[a], "origin");
    } else if (key == "node_dims") {
      if (!val.is_array() || val.size() != 3) throw PipelineError("config: node_dims must be [nx, ny, nz]");
      for (int a = 0; a < 3; ++a) cfg.node_dims[std::size_t(a)] = int(num(val[a], "node_dims"));
    } else if (key == "width") cfg.width = int(num(val, "width"));
    else if (key == "height") cfg.height = int(num(val, "height"));
    else if (key == "camera") {
      for (const auto& [ck, cv] : val.items()) {
        if (ck == "fx") cfg.K.fx = num(cv, "camera.fx");
        else if (ck == "fy") cfg.K.fy = num(cv, "camera.fy");
        else if (ck == "cx") cfg.K.cx = num(cv, "camera.cx");
        else if (ck == "cy") cfg.K.cy = num(cv, "camera.cy");
        else throw PipelineError("config: unknown camera key '" + ck + "'");
      }
    } else if (key == "solver") {
      SolverConfig& s = cfg.solver;
      for (const auto& [sk, sv] : val.items()) {
        if (sk == "omega_s") s.omega_s = num(sv, "solver.omega_s");
        else if (sk == "omega_d") s.omega_d = num(sv, "solver.omega_d");
        else if (sk == "omega_r") s.omega_r = num(sv, "solver.omega_r");
        else if (sk == "mu") s.mu = num(sv, "solver.mu");
        else if (sk == "max_outer_sweeps") s.max_outer_sweeps = int(num(sv, "solver.max_outer_sweeps"));
        else if (sk == "pcg_tol") s.pcg_tol = num(sv, "solver.pcg_tol");
        else if (sk == "pcg_max_iters") s.pcg_max_iters = int(num(sv, "solver.pcg_max_iters"));
        else if (sk == "energy_rel_tol") s.energy_rel_tol = num(sv, "solver.energy_rel_tol");
        else if (sk == "icp_iters") s.icp_iters = int(num(sv, "solver.icp_iters"));
        else if (sk == "corr_dist_max") s.corr_dist_max = num(sv, "solver.corr_dist_max");
        else if (sk == "corr_normal_max_angle") s.corr_normal_max_angle = num(sv, "solver.corr_normal_max_angle");
        else throw PipelineError("config: unknown solver key '" + sk + "'");
      }
    } else if (key == "scene") {
      for (const auto& [sk, sv] : val.items()) {
        if (sk == "name") {
          if (!sv.is_string()) throw PipelineError("config: scene.name must be a string");
          cfg.scene_name = sv.get<std::string>();
        } else if (sk == "frames") cfg.frames = int(num(sv, "scene.frames"));
        else if (sk == "noise_sigma") cfg.noise_sigma = num(sv, "scene.noise_sigma");
        else if (sk == "seed") cfg.seed = std::uint64_t(num(sv, "scene.seed"));
        else throw PipelineError("config: unknown scene key '" + sk + "'");
      }
    } else if (key == "input_dir") {
      if (!val.is_string()) throw PipelineError("config: input_dir must be a string");
      cfg.input_dir = val.get<std::string>();
    } else if (key == "frames") cfg.frames = int(num(val, "frames"));
    else if (key == "topology_updates") {
      if (!val.is_boolean()) throw PipelineError("config: topology_updates must be a boolean");
      cfg.topology_updates = val.get<bool>();
    } else if (key == "off_surface_threshold") cfg.off_surface_threshold = num(val, "off_surface_threshold");
    else throw PipelineError("config: unknown key '" + key + "'");
  }
}

}  // namespace pipeline_detail

inline PipelineConfig load_pipeline_config(const std::string& path,
                                           PipelineConfig base = PipelineConfig()) {
  std::ifstream in(path);
  if (!in) throw PipelineError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw PipelineError("config: " + path + ": " + e.what());
  }
  if (!j.is_object()) throw PipelineError("config: " + path + ": top level must be an object");
  pipeline_detail::apply_json(base, j);
  return base;
}

// Scene grids are derived from the geometry: a bounding box over all frames,
// inflated by the truncation band, with the lattice shifted so the symmetry
// planes (x = 0, y = 0, z = object depth) land mid-cell rather than on node
// planes, keeping cuts interior to cells.
inline void derive_scene_grid(PipelineConfig& cfg) {
  using namespace scene_detail;
  const SceneKind kind = scene_by_name(cfg.scene_name);
  const double dz = std::max(0, cfg.frames - 1 - cfg.frames / 3) * kSplitStep;
  Eigen::Vector3d lo, hi;
  switch (kind) {
    case SceneKind::kSphere:
      lo = {-kSphereRadius, -kSphereRadius, kDepth - kSphereRadius};
      hi = {kSphereRadius, kSphereRadius, kDepth + kSphereRadius};
      break;
    case SceneKind::kRigidSphere: {
      lo = {-kSphereRadius, -kSphereRadius, kDepth - kSphereRadius};
      hi = Eigen::Vector3d(kSphereRadius, kSphereRadius, kDepth + kSphereRadius) +
           rigid_translation(cfg.frames - 1);
      break;
    }
    case SceneKind::kCylinderSplit:
      lo = {-kCylHalfLen, -kCylRadius, kDepth - kCylRadius};
      hi = {kCylHalfLen, kCylRadius, kDepth + kCylRadius + dz};
      break;
    case SceneKind::kSheetCut:
    case SceneKind::kSheetTwoCuts:
      lo = {-kSheetHalfX, -kSheetHalfY, kDepth};
      hi = {kSheetHalfX, kSheetHalfY, kDepth + dz};
      break;
    case SceneKind::kContact: {
      const double cx = kContactRadius + kContactGap / 2;
      lo = {-cx - kContactRadius, -kContactRadius, kDepth - kContactRadius};
      hi = {cx + kContactRadius, kContactRadius, kDepth + kContactRadius};
      break;
    }
  }
  const double s = cfg.edg_spacing();
  const double m = 2.5 * cfg.voxel_spacing + 2 * cfg.voxel_spacing;
  const Eigen::Vector3d anchor(0.0, 0.0, kDepth);
  for (int a = 0; a < 3; ++a) {
    const int n = int(std::ceil((anchor[a] - lo[a] + m) / s - 0.5));
    cfg.origin[a] = anchor[a] - (n + 0.5) * s;
    cfg.node_dims[std::size_t(a)] =
        std::max(2, int(std::ceil((hi[a] + m - cfg.origin[a]) / s)) + 1);
  }
}

// A frame stream plus optional per-frame ground truth for evaluation.
struct FrameSource {
  int count = 0;
  std::function<DepthFrame(int)> frame;
  std::function<CanonicalMesh(int)> gt;  // empty when no ground truth known
};

inline FrameSource scene_source(const PipelineConfig& cfg) {
  SceneSpec spec;
  spec.kind = scene_by_name(cfg.scene_name);
  spec.frames = cfg.frames;
  spec.noise_sigma = cfg.noise_sigma;
  spec.seed = cfg.seed;
  spec.width = cfg.width;
  spec.height = cfg.height;
  spec.K = cfg.K;

  auto cache = std::make_shared<std::map<int, SceneFrame>>();
  auto fetch = [spec, cache](int f) -> const SceneFrame& {
    auto it = cache->find(f);
    if (it == cache->end()) it = cache->emplace(f, synth_scene(spec, f)).first;
    if (cache->size() > 4) cache->erase(cache->begin());
    return cache->find(f)->second;
  };
  FrameSource src;
  src.count = spec.frames;
  src.frame = [fetch](int f) { return fetch(f).depth; };
  src.gt = [fetch](int f) { return fetch(f).gt_mesh; };
  return src;
}

namespace pipeline_detail {

inline std::vector<std::string> sorted_files(const std::string& dir,
                                             std::initializer_list<const char*> exts) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw PipelineError("input: not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (std::find_if(exts.begin(), exts.end(),
                     [&](const char* x) { return ext == x; }) != exts.end())
      files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace pipeline_detail

inline FrameSource directory_source(const PipelineConfig& cfg) {
  auto files = pipeline_detail::sorted_files(cfg.input_dir, {".png", ".raw"});
  if (files.empty()) throw PipelineError("input: no depth frames in " + cfg.input_dir);
  const int count = std::min<int>(cfg.frames, int(files.size()));
  const Intrinsics K = cfg.K;
  FrameSource src;
  src.count = count;
  src.frame = [files, K](int f) { return load_frame(files[std::size_t(f)], K); };
  return src;
}

struct NodeState {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
};

// Everything needed to replay one frame: the pose, every node copy's state
// at the frame's graph version, the cut report, and the copy remapping
// created if the report was applied (new copy -> its pre-update source).
struct FrameRecord {
  int frame = 0;
  GlobalPose pose;
  std::map<CopyRef, NodeState> nodes;
  CuttingEdgeReport report;
  std::map<CopyRef, CopyRef> node_birth;
};

struct EvalResult {
  double mean_pct = 0;  // nearest-surface distances as % of TSDF cell width
  double max_pct = 0;
  double rms_pct = 0;
  int off_surface = 0;  // vertices farther than the threshold
};

struct MetricsRow {
  int frame = 0;
  double mean_pct = 0;
  double max_pct = 0;
  int off_surface = 0;
  int cutting_edges = 0;
};

namespace pipeline_detail {

inline Eigen::Vector3d closest_on_triangle(const Eigen::Vector3d& p,
                                           const Eigen::Vector3d& a,
                                           const Eigen::Vector3d& b,
                                           const Eigen::Vector3d& c) {
  const Eigen::Vector3d ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Eigen::Vector3d bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;
  const Eigen::Vector3d cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && d4 - d3 >= 0 && d5 - d6 >= 0)
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

// Uniform-grid index over triangles for nearest-surface queries; the ring
// search widens until no farther bin can contain a closer triangle.
class TriangleGrid {
 public:
  TriangleGrid(const CanonicalMesh& mesh, double h) : mesh_(&mesh), h_(h) {
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
      Eigen::Vector3d lo = mesh.vertices[std::size_t(mesh.triangles[t][0])];
      Eigen::Vector3d hi = lo;
      for (int i = 1; i < 3; ++i) {
        const Eigen::Vector3d& v = mesh.vertices[std::size_t(mesh.triangles[t][i])];
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
      const auto cl = bin(lo), ch = bin(hi);
      for (int z = cl[2]; z <= ch[2]; ++z)
        for (int y = cl[1]; y <= ch[1]; ++y)
          for (int x = cl[0]; x <= ch[0]; ++x)
            bins_[{x, y, z}].push_back(int(t));
    }
    // The search never needs to widen past the binned box.
    if (!bins_.empty()) {
      mn_ = bins_.begin()->first;
      mx_ = mn_;
      for (const auto& [c, tris] : bins_) {
        (void)tris;
        for (int a = 0; a < 3; ++a) {
          mn_[a] = std::min(mn_[a], c[a]);
          mx_[a] = std::max(mx_[a], c[a]);
        }
      }
      for (int a = 0; a < 3; ++a) rings_ = std::max(rings_, mx_[a] - mn_[a] + 2);
    }
  }

  double distance(const Eigen::Vector3d& p) const {
    double best = std::numeric_limits<double>::infinity();
    const auto c = bin(p);
    // The ring stopping bound assumes p lies in its own bin; points outside
    // the binned box fall back to scanning everything.
    for (int a = 0; a < 3; ++a)
      if (c[a] < mn_[a] - 1 || c[a] > mx_[a] + 1) {
        for (const auto& [cb, tris] : bins_) {
          (void)tris;
          scan_bin(p, cb, best);
        }
        return best;
      }
    for (int k = 0; k <= rings_; ++k) {
      if (best <= (k - 1) * h_) break;
      scan_ring(p, c, k, best);
    }
    return best;
  }

 private:
  std::array<int, 3> bin(const Eigen::Vector3d& p) const {
    return {int(std::floor(p.x() / h_)), int(std::floor(p.y() / h_)),
            int(std::floor(p.z() / h_))};
  }

  void scan_bin(const Eigen::Vector3d& p, const std::array<int, 3>& c,
                double& best) const {
    const auto it = bins_.find(c);
    if (it == bins_.end()) return;
    for (const int t : it->second) {
      const auto& tri = mesh_->triangles[std::size_t(t)];
      const Eigen::Vector3d q = closest_on_triangle(
          p, mesh_->vertices[std::size_t(tri[0])], mesh_->vertices[std::size_t(tri[1])],
          mesh_->vertices[std::size_t(tri[2])]);
      best = std::min(best, (q - p).norm());
    }
  }

  void scan_ring(const Eigen::Vector3d& p, const std::array<int, 3>& c, int k,
                 double& best) const {
    if (k == 0) {
      scan_bin(p, c, best);
      return;
    }
    for (int dz = -k; dz <= k; ++dz)
      for (int dy = -k; dy <= k; ++dy)
        for (int dx = -k; dx <= k; ++dx) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != k) continue;
          scan_bin(p, {c[0] + dx, c[1] + dy, c[2] + dz}, best);
        }
  }

  const CanonicalMesh* mesh_;
  double h_;
  std::map<std::array<int, 3>, std::vector<int>> bins_;
  std::array<int, 3> mn_ = {0, 0, 0}, mx_ = {-1, -1, -1};
  int rings_ = 0;
};

}  // namespace pipeline_detail

// Nearest-surface error of every reconstructed vertex against a reference
// mesh, reported as percentages of the TSDF cell width. Vertices farther
// than `off_surface_cells` cell widths count as off-surface.
inline EvalResult evaluate(const CanonicalMesh& recon, const CanonicalMesh& reference,
                           double cell_width, double off_surface_cells = 1.0) {
  if (reference.triangles.empty())
    throw std::invalid_argument("evaluate: reference mesh has no triangles");
  if (cell_width <= 0) throw std::invalid_argument("evaluate: cell width must be positive");
  EvalResult r;
  if (recon.vertices.empty()) return r;

  pipeline_detail::TriangleGrid grid(reference, 4 * cell_width);
  double sum = 0, sum2 = 0;
  for (const Eigen::Vector3d& v : recon.vertices) {
    const double d = grid.distance(v);
    sum += d;
    sum2 += d * d;
    r.max_pct = std::max(r.max_pct, d);
    if (d > off_surface_cells * cell_width) ++r.off_surface;
  }
  const double n = double(recon.vertices.size());
  r.mean_pct = 100.0 * (sum / n) / cell_width;
  r.rms_pct = 100.0 * std::sqrt(sum2 / n) / cell_width;
  r.max_pct = 100.0 * r.max_pct / cell_width;
  return r;
}

struct PipelineResult {
  std::vector<FrameRecord> records;
  std::vector<CanonicalMesh> live_meshes;  // per frame, camera space
  CanonicalMesh final_mesh;                // canonical, final graph version
  DeformGraph graph;
  TsdfVolume volume;
  std::vector<SolveStats> solve_stats;  // forward solve, empty record at frame 0
  std::vector<MetricsRow> metrics;      // filled when the source has ground truth
};

namespace pipeline_detail {

inline std::map<CopyRef, NodeState> snapshot_nodes(const DeformGraph& graph) {
  std::map<CopyRef, NodeState> snap;
  for (const auto& [i1d, bucket] : graph.nodes.buckets())
    for (int off = 0; off < kMaxCopies; ++off)
      if (bucket.occupied(std::uint8_t(off))) {
        const EdgNode& n = bucket.at(std::uint8_t(off));
        snap[CopyRef{i1d, std::uint8_t(off)}] = NodeState{n.R, n.t};
      }
  return snap;
}

inline std::vector<SurfacePoint> surface_points(const CanonicalMesh& mesh) {
  const std::vector<Eigen::Vector3d> normals = mesh_normals(mesh);
  std::vector<SurfacePoint> pts(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i)
    pts[i] = SurfacePoint{mesh.vertices[i], normals[i], mesh.vertex_cell[i]};
  return pts;
}

}  // namespace pipeline_detail

// Runs the full loop over a frame source. Frame 0 bootstraps the grid and
// fuses at identity; every later frame re-estimates the pose and field,
// checks for cuts against the previous frame, applies confirmed ones, fuses,
// grows the graph and re-extracts the surface. Decode failures abort with
// the frame index; solver degeneracies are logged and survived.
inline PipelineResult run_reconstruction(const PipelineConfig& config,
                                         const FrameSource& source,
                                         std::ostream* log = nullptr) {
  PipelineConfig cfg = config;
  if (!cfg.scene_name.empty() && cfg.node_dims == std::array<int, 3>{0, 0, 0})
    derive_scene_grid(cfg);
  cfg.validate();
  if (cfg.solver.mu <= 0) cfg.solver.mu = SolverConfig::default_mu(cfg.edg_spacing());
  cfg.solver.validate();
  if (source.count < 1) throw PipelineError("run: frame source is empty");

  const GridDims dims(cfg.node_dims[0], cfg.node_dims[1], cfg.node_dims[2],
                      cfg.edg_spacing(), cfg.origin);
  PipelineResult res;
  res.graph = DeformGraph(dims);
  res.volume = TsdfVolume(dims, cfg.k);

  GlobalPose pose;
  DepthFrame prev_frame;
  GlobalPose prev_pose;
  CanonicalMesh prev_mesh;

  for (int f = 0; f < source.count; ++f) {
    DepthFrame frame;
    try {
      frame = source.frame(f);
    } catch (const std::exception& e) {
      throw PipelineError("frame " + std::to_string(f) + ": " + e.what());
    }
    if (frame.width != cfg.width || frame.height != cfg.height)
      throw PipelineError("frame " + std::to_string(f) + ": unexpected image size");

    FrameRecord rec;
    rec.frame = f;
    SolveStats stats;

    if (f > 0) {
      const std::vector<SurfacePoint> pts = pipeline_detail::surface_points(prev_mesh);
      std::vector<Eigen::Vector3d> rigid_pts(pts.size()), rigid_nrm(pts.size());
      for (std::size_t i = 0; i < pts.size(); ++i) {
        rigid_pts[i] = warp_point(res.graph, pts[i].cell, GlobalPose{}, pts[i].position);
        rigid_nrm[i] = pts[i].normal;
      }
      try {
        pose = rigid_icp(rigid_pts, rigid_nrm, frame, pose, cfg.solver);
      } catch (const DegeneratePoseError& e) {
        if (log) *log << "frame " << f << ": rigid alignment degenerate (" << e.what()
                      << "), keeping previous pose\n";
      }

      const DeformationState state =
          nonrigid_solve(res.graph, pts, {}, frame, pose, cfg.solver, &stats);
      if (log && !stats.converged)
        *log << "frame " << f << ": registration stopped before convergence\n";

      const LineProcess back =
          backward_register(res.graph, pts, prev_frame, prev_pose, cfg.solver);
      rec.report = detect_cutting_edges(state.line, back, f);
      if (log && !rec.report.edges.empty())
        *log << "frame " << f << ": " << rec.report.edges.size() << " cutting edge(s)"
             << (cfg.topology_updates ? "" : " (updates disabled)") << "\n";

      if (cfg.topology_updates && !rec.report.edges.empty()) {
        const TopologyUpdateResult up = apply_topology_update(res.graph, res.volume, rec.report);
        rec.node_birth = up.graph_rec.birth;
        if (log && !up.candidates.empty())
          *log << "frame " << f << ": split " << up.candidates.size() << " cell(s)\n";
      }
    }

    // Frame 0 has nothing active yet, so the grid must grow before fusion;
    // afterwards fusion runs on the frame's estimated field first and fresh
    // cells wait one frame for data.
    if (f == 0) {
      activate_newly_observed(res.volume, frame, res.graph, pose);
      fuse_depth(res.volume, frame, res.graph, pose);
    } else {
      fuse_depth(res.volume, frame, res.graph, pose);
      activate_newly_observed(res.volume, frame, res.graph, pose);
    }

    CanonicalMesh mesh = marching_cubes(res.volume);
    CanonicalMesh live = warp_mesh(mesh, res.graph, pose);

    rec.pose = pose;
    rec.nodes = pipeline_detail::snapshot_nodes(res.graph);

    if (source.gt) {
      const EvalResult ev = evaluate(live, source.gt(f), res.volume.voxel_spacing(),
                                     cfg.off_surface_threshold);
      res.metrics.push_back(MetricsRow{f, ev.mean_pct, ev.max_pct, ev.off_surface,
                                       int(rec.report.edges.size())});
    }
    if (log)
      *log << "frame " << f << ": " << mesh.vertices.size() << " vertices, "
           << res.graph.cells.size() << " graph cells\n";

    res.records.push_back(std::move(rec));
    res.live_meshes.push_back(live);
    res.solve_stats.push_back(std::move(stats));
    prev_mesh = std::move(mesh);
    prev_frame = std::move(frame);
    prev_pose = pose;
  }

  res.final_mesh = std::move(prev_mesh);
  return res;
}

// Warps the final canonical surface into the live frame of an earlier frame
// by resolving every node copy back through the recorded remapping tables to
// the copy that existed then. Vertices whose region did not exist at that
// frame cannot be replayed.
inline CanonicalMesh playback_mesh(const PipelineResult& res, int frame) {
  if (frame < 0 || frame >= int(res.records.size()))
    throw std::invalid_argument("playback: frame index out of range");
  const FrameRecord& rec = res.records[std::size_t(frame)];

  std::map<CopyRef, Eigen::Vector3d> resolved;
  auto node_t = [&](const CopyRef& copy) -> const Eigen::Vector3d& {
    const auto hit = resolved.find(copy);
    if (hit != resolved.end()) return hit->second;
    CopyRef cur = copy;
    for (int g = int(res.records.size()) - 1; g > frame; --g) {
      const auto it = res.records[std::size_t(g)].node_birth.find(cur);
      if (it != res.records[std::size_t(g)].node_birth.end()) cur = it->second;
    }
    const auto st = rec.nodes.find(cur);
    if (st == rec.nodes.end())
      throw StaleReferenceError("playback: node has no ancestor at frame " +
                                std::to_string(frame));
    return resolved.emplace(copy, st->second.t).first->second;
  };

  CanonicalMesh out = res.final_mesh;
  for (std::size_t i = 0; i < out.vertices.size(); ++i) {
    const CellRef& cell = res.final_mesh.vertex_cell[i];
    const auto corners = cell_corners(res.graph, cell);
    const auto w = trilinear_weights(res.final_mesh.vertices[i],
                                     cell_base_position(res.graph, cell),
                                     res.graph.spacing());
    Eigen::Vector3d disp = Eigen::Vector3d::Zero();
    for (int k = 0; k < 8; ++k) disp += w[std::size_t(k)] * node_t(corners[std::size_t(k)]);
    out.vertices[i] = rec.pose.apply(res.final_mesh.vertices[i] + disp);
  }
  return out;
}

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& os) {
  os << "frame,mean_pct,max_pct,off_surface_count,cutting_edges\n";
  os << std::fixed << std::setprecision(6);
  for (const MetricsRow& r : rows)
    os << r.frame << ',' << r.mean_pct << ',' << r.max_pct << ',' << r.off_surface
       << ',' << r.cutting_edges << '\n';
}

// Minimal OBJ reader for reference meshes: vertices and triangulated faces,
// 1-based indices, "v/vt/vn" forms accepted, everything else ignored.
inline CanonicalMesh read_obj(std::istream& is) {
  CanonicalMesh m;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Eigen::Vector3d v;
      if (!(ls >> v.x() >> v.y() >> v.z())) throw PipelineError("obj: bad vertex line");
      m.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        const std::size_t slash = tok.find('/');
        const int i = std::stoi(slash == std::string::npos ? tok : tok.substr(0, slash));
        if (i < 1 || i > int(m.vertices.size())) throw PipelineError("obj: face index out of range");
        idx.push_back(i - 1);
      }
      if (idx.size() < 3) throw PipelineError("obj: face with fewer than 3 vertices");
      for (std::size_t t = 2; t < idx.size(); ++t)
        m.triangles.push_back({idx[0], idx[t - 1], idx[t]});
    }
  }
  return m;
}

inline CanonicalMesh read_obj_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PipelineError("obj: cannot open " + path);
  return read_obj(in);
}

inline void export_playback(const PipelineResult& res, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (int f = 0; f < int(res.records.size()); ++f) {
    const CanonicalMesh m = playback_mesh(res, f);
    std::ostringstream name;
    name << "playback_" << std::setw(4) << std::setfill('0') << f << ".obj";
    std::ofstream out(fs::path(dir) / name.str());
    if (!out) throw PipelineError("playback: cannot write to " + dir);
    write_obj(m, out);
  }
}

}  // namespace tcf
