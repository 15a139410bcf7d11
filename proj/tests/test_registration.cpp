#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "tcfusion/registration.hpp"

using namespace tcf;

namespace {

DeformGraph make_block(int cx, int cy, int cz, double spacing,
                       const Eigen::Vector3d& origin) {
  DeformGraph g(GridDims(cx + 1, cy + 1, cz + 1, spacing, origin));
  std::vector<std::array<int, 3>> cells;
  for (int z = 0; z < cz; ++z)
    for (int y = 0; y < cy; ++y)
      for (int x = 0; x < cx; ++x) cells.push_back({x, y, z});
  expand_graph(g, cells);
  return g;
}

CellRef cell_ref_at(const DeformGraph& g, const Eigen::Vector3d& p) {
  const GridDims& dims = g.nodes.dims();
  std::array<int, 3> c;
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - dims.origin[a]) / dims.spacing;
    c[a] = std::clamp(int(std::floor(u)), 0, dims.extent(a) - 2);
  }
  const CellRef ref{CopyRef{dims.linear_index(c[0], c[1], c[2]), 0}, 0};
  REQUIRE(g.cells.count(ref) == 1);
  return ref;
}

std::vector<CopyRef> node_refs(const DeformGraph& g) {
  std::vector<CopyRef> refs;
  for (const auto& [idx, bucket] : g.nodes.buckets())
    for (int off = 0; off < kMaxCopies; ++off)
      if (bucket.occupied(std::uint8_t(off)))
        refs.push_back(CopyRef{idx, std::uint8_t(off)});
  return refs;
}

Eigen::Matrix3d random_rotation(std::mt19937& rng, double max_angle) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::Vector3d axis(u(rng), u(rng), u(rng));
  while (axis.norm() < 1e-6) axis = Eigen::Vector3d(u(rng), u(rng), u(rng));
  std::uniform_real_distribution<double> a(0.0, max_angle);
  return Eigen::AngleAxisd(a(rng), axis.normalized()).toRotationMatrix();
}

// --- tiny analytic test scene: union of spheres rendered by ray casting ---

struct TestSphere {
  Eigen::Vector3d c;
  double r;
};

Intrinsics test_intrinsics() { return {570.0, 570.0, 319.5, 239.5}; }

DepthFrame render_spheres(const std::vector<TestSphere>& spheres) {
  DepthFrame f(640, 480, test_intrinsics());
  for (int v = 0; v < f.height; ++v) {
    for (int u = 0; u < f.width; ++u) {
      const Eigen::Vector3d d((u - f.K.cx) / f.K.fx, (v - f.K.cy) / f.K.fy, 1.0);
      double best = 0;
      for (const TestSphere& s : spheres) {
        const double dd = d.dot(d);
        const double dc = d.dot(s.c);
        const double disc = dc * dc - dd * (s.c.dot(s.c) - s.r * s.r);
        if (disc < 0) continue;
        const double t = (dc - std::sqrt(disc)) / dd;
        if (t <= 0) continue;
        if (best == 0 || t < best) best = t;
      }
      f.at(u, v) = float(best);  // ray dir has unit z, so depth equals t
    }
  }
  return f;
}

// camera-facing surface samples with outward normals
void sample_spheres(const std::vector<TestSphere>& spheres, int nt, int np,
                    std::vector<Eigen::Vector3d>& points,
                    std::vector<Eigen::Vector3d>& normals) {
  for (const TestSphere& s : spheres) {
    for (int i = 1; i < nt; ++i) {
      const double theta = M_PI * i / nt;
      for (int j = 0; j < np; ++j) {
        const double phi = 2 * M_PI * j / np;
        const Eigen::Vector3d n(std::sin(theta) * std::cos(phi),
                                std::sin(theta) * std::sin(phi), std::cos(theta));
        const Eigen::Vector3d p = s.c + s.r * n;
        if (n.dot(p.normalized()) > -0.3) continue;  // keep camera-facing points
        points.push_back(p);
        normals.push_back(n);
      }
    }
  }
}

const std::vector<TestSphere> kCompound = {{{0.00, 0.00, 0.60}, 0.08},
                                           {{0.16, 0.06, 0.55}, 0.05},
                                           {{-0.14, -0.08, 0.64}, 0.06}};

std::vector<SurfacePoint> surface_points(const DeformGraph& g,
                                         const std::vector<Eigen::Vector3d>& pts,
                                         const std::vector<Eigen::Vector3d>& nrm) {
  std::vector<SurfacePoint> out;
  for (std::size_t i = 0; i < pts.size(); ++i)
    out.push_back({pts[i], nrm[i], cell_ref_at(g, pts[i])});
  return out;
}

double rotation_angle(const Eigen::Matrix3d& A, const Eigen::Matrix3d& B) {
  const double c = std::clamp(((A.transpose() * B).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

}  // namespace

TEST_CASE("solver config validation", "[registration]") {
  SolverConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  SolverConfig bad = cfg;
  bad.mu = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.omega_r = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.pcg_max_iters = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(SolverConfig::default_mu(0.05) == Catch::Approx(1e-4));
}

TEST_CASE("energy is zero at rest with perfect correspondences", "[registration]") {
  DeformGraph g = make_block(2, 2, 2, 0.05, Eigen::Vector3d::Zero());
  SolverConfig cfg;
  cfg.mu = SolverConfig::default_mu(g.spacing());
  GlobalPose pose;
  LineProcess line = unit_line_process(g);

  CorrespondenceSet corr;
  const Eigen::Vector3d p(0.04, 0.03, 0.06);
  const CellRef cell = cell_ref_at(g, p);
  corr.dense.push_back({p, cell, p, Eigen::Vector3d::UnitZ()});
  corr.sparse.push_back({p, cell, p});

  const EnergyBreakdown e = energy_total(g, pose, line, corr, cfg);
  CHECK(e.total == 0.0);
  CHECK(e.spr == 0.0);
  CHECK(e.dense == 0.0);
  CHECK(e.reg == 0.0);  // l = 1 everywhere: the penalty term vanishes

  // empty sparse set contributes exactly zero
  corr.sparse.clear();
  CHECK(energy_total(g, pose, line, corr, cfg).spr == 0.0);
}

TEST_CASE("a fully released edge contributes exactly mu", "[registration]") {
  DeformGraph g = make_block(1, 1, 1, 0.05, Eigen::Vector3d::Zero());
  SolverConfig cfg;
  cfg.mu = 0.0625;
  // give the graph some strain so released edges would otherwise cost energy
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(-0.01, 0.01);
  for (const CopyRef& ref : node_refs(g))
    g.nodes.at(ref).t = Eigen::Vector3d(u(rng), u(rng), u(rng));

  LineProcess line = unit_line_process(g);
  const EdgeKey victim = graph_edges(g).front();
  const double with_l1 = energy_total(g, GlobalPose{}, line, {}, cfg).reg;
  const double r2 = detail::edge_residual(g, victim).squaredNorm();
  line[victim] = 0.0;
  const double with_l0 = energy_total(g, GlobalPose{}, line, {}, cfg).reg;
  CHECK(with_l0 - (with_l1 - r2) == Catch::Approx(cfg.mu).margin(1e-15));
}

TEST_CASE("line process closed form: exact values and stationarity", "[registration]") {
  DeformGraph g = make_block(1, 1, 1, 0.5, Eigen::Vector3d::Zero());
  SolverConfig cfg;
  cfg.mu = 0.0625;  // power of two so the forced cases are exact

  // translate the x = 1 face: x-parallel edges get residual exactly (v, 0, 0)
  auto set_face = [&](const Eigen::Vector3d& v) {
    for (const CopyRef& ref : node_refs(g))
      g.nodes.at(ref).t = g.nodes.at(ref).g.x() > 0.25 ? v : Eigen::Vector3d::Zero();
  };

  set_face(Eigen::Vector3d(0.25, 0, 0));  // residual^2 = 0.0625 = mu
  LineProcess line = solve_line_process(g, cfg);
  int quarter = 0, ones = 0;
  for (const auto& [e, l] : line) {
    (void)e;
    if (l == 0.25) ++quarter;
    if (l == 1.0) ++ones;
  }
  CHECK(quarter == 4);  // the four x-parallel edges
  CHECK(ones == 8);     // all edges within the two faces carry no strain

  set_face(Eigen::Vector3d(0.25, 0.25, 0.25));  // residual^2 = 3 mu
  line = solve_line_process(g, cfg);
  int sixteenth = 0;
  for (const auto& [e, l] : line)
    if (l == 0.0625) ++sixteenth;
  CHECK(sixteenth == 4);

  // stationarity of l r^2 + mu (sqrt(l) - 1)^2 on random strains
  std::mt19937 rng(23);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  cfg.mu = SolverConfig::default_mu(g.spacing());
  for (const CopyRef& ref : node_refs(g))
    g.nodes.at(ref).t = Eigen::Vector3d(u(rng), u(rng), u(rng));
  line = solve_line_process(g, cfg);
  for (const EdgeKey& e : graph_edges(g)) {
    const double l = line.at(e);
    REQUIRE(l > 0.0);
    REQUIRE(l <= 1.0);
    const double r2 = detail::edge_residual(g, e).squaredNorm();
    CHECK(std::abs(r2 + cfg.mu * (1.0 - 1.0 / std::sqrt(l))) < 1e-9);
    // local minimum: nudging l in either direction does not reduce the cost
    auto cost = [&](double x) {
      const double s = std::sqrt(x) - 1.0;
      return x * r2 + cfg.mu * s * s;
    };
    CHECK(cost(l) <= cost(std::min(1.0, l * 1.01)) + 1e-15);
    CHECK(cost(l) <= cost(l * 0.99) + 1e-15);
  }
}

TEST_CASE("displacement step: zero system leaves the field unchanged", "[registration]") {
  DeformGraph g = make_block(2, 1, 1, 0.05, Eigen::Vector3d::Zero());
  std::mt19937 rng(9);
  std::uniform_real_distribution<double> u(-0.01, 0.01);
  std::map<std::int64_t, Eigen::Vector3d> before;
  for (const CopyRef& ref : node_refs(g)) {
    g.nodes.at(ref).t = Eigen::Vector3d(u(rng), u(rng), u(rng));
    before[ref.copy_index()] = g.nodes.at(ref).t;
  }
  SolverConfig cfg;
  LineProcess line;
  for (const EdgeKey& e : graph_edges(g)) line[e] = 0.0;
  const auto stats = solve_displacements(g, GlobalPose{}, line, {}, cfg);
  for (const CopyRef& ref : node_refs(g))
    CHECK(g.nodes.at(ref).t == before.at(ref.copy_index()));
  CHECK(stats.excluded_nodes == int(node_refs(g).size()));
}

TEST_CASE("displacement step: one dense row reduces to scalar least squares",
          "[registration]") {
  DeformGraph g = make_block(1, 1, 1, 0.05, Eigen::Vector3d::Zero());
  SolverConfig cfg;
  cfg.omega_r = 0;  // isolate the data term
  cfg.pcg_tol = 1e-14;
  GlobalPose pose;
  pose.R = Eigen::AngleAxisd(0.4, Eigen::Vector3d(1, 1, 0).normalized()).toRotationMatrix();
  pose.t = Eigen::Vector3d(0.01, 0, 0.02);

  // a correspondence exactly at corner 0: all blend weight on one node
  CorrespondenceSet corr;
  const Eigen::Vector3d v = Eigen::Vector3d::Zero();
  const Eigen::Vector3d n = Eigen::Vector3d(0.3, -0.5, 0.8).normalized();
  const Eigen::Vector3d y = pose.apply(v) + 0.007 * n;
  corr.dense.push_back({v, cell_ref_at(g, v), y, n});

  const double r0 = n.dot(pose.apply(v) - y);
  solve_displacements(g, pose, {}, corr, cfg);
  const Eigen::Vector3d delta = g.nodes.at(CopyRef{0, 0}).t;
  // the projection of the update onto R^T n cancels the residual
  CHECK((pose.R.transpose() * n).dot(delta) == Catch::Approx(-r0).margin(1e-10));
  CHECK(n.dot(warp_point(g, cell_ref_at(g, v), pose, v) - y) ==
        Catch::Approx(0.0).margin(1e-10));
}

TEST_CASE("pcg matches a dense direct solve on a random 27-node system",
          "[registration]") {
  DeformGraph g = make_block(2, 2, 2, 0.05, Eigen::Vector3d::Zero());
  REQUIRE(node_refs(g).size() == 27);
  std::mt19937 rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> s(-0.01, 0.01);
  for (const CopyRef& ref : node_refs(g)) {
    g.nodes.at(ref).t = Eigen::Vector3d(s(rng), s(rng), s(rng));
    g.nodes.at(ref).R = random_rotation(rng, 0.3);
  }
  LineProcess line;
  for (const EdgeKey& e : graph_edges(g)) line[e] = 0.1 + 0.9 * u(rng);

  GlobalPose pose;
  pose.R = random_rotation(rng, 0.2);
  pose.t = Eigen::Vector3d(0.02, -0.01, 0.03);

  CorrespondenceSet corr;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector3d p(0.1 * u(rng), 0.1 * u(rng), 0.1 * u(rng));
    Eigen::Vector3d n(s(rng), s(rng), s(rng));
    while (n.norm() < 1e-4) n = Eigen::Vector3d(s(rng), s(rng), s(rng));
    n.normalize();
    corr.dense.push_back({p, cell_ref_at(g, p), p + Eigen::Vector3d(s(rng), s(rng), s(rng)), n});
  }
  for (int i = 0; i < 5; ++i) {
    const Eigen::Vector3d p(0.1 * u(rng), 0.1 * u(rng), 0.1 * u(rng));
    corr.sparse.push_back({p, cell_ref_at(g, p), p + Eigen::Vector3d(s(rng), s(rng), s(rng))});
  }

  SolverConfig cfg;
  cfg.pcg_tol = 1e-13;
  cfg.pcg_max_iters = 2000;
  const NodeIndex idx = index_nodes(g);
  Eigen::SparseMatrix<double> A;
  Eigen::VectorXd b;
  detail::assemble_normal_equations(g, pose, line, corr, cfg, idx, A, b);
  const Eigen::VectorXd exact = Eigen::MatrixXd(A).ldlt().solve(b);

  std::map<std::int64_t, Eigen::Vector3d> before;
  for (const CopyRef& ref : node_refs(g)) before[ref.copy_index()] = g.nodes.at(ref).t;
  const auto stats = solve_displacements(g, pose, line, corr, cfg);
  CHECK(stats.pcg.converged);

  Eigen::VectorXd delta(exact.size());
  for (std::size_t i = 0; i < idx.order.size(); ++i)
    delta.segment<3>(3 * int(i)) =
        g.nodes.at(idx.order[i]).t - before.at(idx.order[i].copy_index());
  CHECK((delta - exact).norm() / exact.norm() < 1e-6);
}

TEST_CASE("analytic displacement gradient matches finite differences",
          "[registration]") {
  DeformGraph g = make_block(2, 1, 1, 0.05, Eigen::Vector3d::Zero());
  std::mt19937 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> s(-0.008, 0.008);
  for (const CopyRef& ref : node_refs(g)) {
    g.nodes.at(ref).t = Eigen::Vector3d(s(rng), s(rng), s(rng));
    g.nodes.at(ref).R = random_rotation(rng, 0.4);
  }
  LineProcess line;
  for (const EdgeKey& e : graph_edges(g)) line[e] = 0.05 + 0.95 * u(rng);
  GlobalPose pose;
  pose.R = random_rotation(rng, 0.3);
  pose.t = Eigen::Vector3d(-0.01, 0.02, 0.005);

  CorrespondenceSet corr;
  for (int i = 0; i < 20; ++i) {
    const Eigen::Vector3d p(0.09 * u(rng), 0.045 * u(rng), 0.045 * u(rng));
    Eigen::Vector3d n(s(rng), s(rng), s(rng) + 0.01);
    n.normalize();
    corr.dense.push_back({p, cell_ref_at(g, p), p + Eigen::Vector3d(s(rng), s(rng), s(rng)), n});
  }
  corr.sparse.push_back({Eigen::Vector3d(0.03, 0.02, 0.01),
                         cell_ref_at(g, Eigen::Vector3d(0.03, 0.02, 0.01)),
                         Eigen::Vector3d(0.035, 0.018, 0.012)});

  SolverConfig cfg;
  cfg.mu = SolverConfig::default_mu(g.spacing());
  const NodeIndex idx = index_nodes(g);
  const Eigen::VectorXd grad = energy_gradient_t(g, pose, line, corr, cfg, idx);

  const double h = 1e-6 * g.spacing();
  Eigen::VectorXd fd(grad.size());
  for (std::size_t i = 0; i < idx.order.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      EdgNode& node = g.nodes.at(idx.order[i]);
      const double saved = node.t[a];
      node.t[a] = saved + h;
      const double ep = energy_total(g, pose, line, corr, cfg).total;
      node.t[a] = saved - h;
      const double em = energy_total(g, pose, line, corr, cfg).total;
      node.t[a] = saved;
      fd[3 * int(i) + a] = (ep - em) / (2 * h);
    }
  }
  CHECK((grad - fd).norm() / fd.norm() < 1e-4);
}

TEST_CASE("rotation step recovers identity and known rigid rotations",
          "[registration]") {
  DeformGraph g = make_block(2, 2, 2, 0.05, Eigen::Vector3d::Zero());
  const LineProcess line = unit_line_process(g);

  auto stats = solve_rotations(g, line);  // rest state
  CHECK(stats.updated > 0);
  for (const CopyRef& ref : node_refs(g))
    CHECK((g.nodes.at(ref).R - Eigen::Matrix3d::Identity()).norm() < 1e-9);

  const Eigen::Matrix3d Q =
      Eigen::AngleAxisd(0.5, Eigen::Vector3d(1, -2, 0.5).normalized()).toRotationMatrix();
  const Eigen::Vector3d c(0.05, 0.05, 0.05);
  for (const CopyRef& ref : node_refs(g)) {
    EdgNode& n = g.nodes.at(ref);
    n.t = Q * (n.g - c) + c - n.g;
  }
  stats = solve_rotations(g, line);
  CHECK(stats.updated > 0);
  std::size_t carriers = 0;
  const auto edges = graph_edges(g);
  for (const CopyRef& ref : node_refs(g)) {
    int carried = 0;
    for (const EdgeKey& e : edges) carried += e.first == ref;
    if (carried < 2) continue;
    ++carriers;
    CHECK((g.nodes.at(ref).R - Q).norm() < 1e-9);
    CHECK((g.nodes.at(ref).R.transpose() * g.nodes.at(ref).R -
           Eigen::Matrix3d::Identity())
              .lpNorm<Eigen::Infinity>() < 1e-9);
    CHECK(g.nodes.at(ref).R.determinant() > 0);
  }
  CHECK(carriers > 0);
}

TEST_CASE("rotation step beats random rotation sampling", "[registration]") {
  DeformGraph g = make_block(1, 1, 1, 0.05, Eigen::Vector3d::Zero());
  std::mt19937 rng(55);
  std::uniform_real_distribution<double> s(-0.02, 0.02);
  for (const CopyRef& ref : node_refs(g))
    g.nodes.at(ref).t = Eigen::Vector3d(s(rng), s(rng), s(rng));
  LineProcess line;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const EdgeKey& e : graph_edges(g)) line[e] = 0.2 + 0.8 * u(rng);

  solve_rotations(g, line);

  // corner 0 carries three edges; evaluate its local objective
  const CopyRef carrier{0, 0};
  auto objective = [&](const Eigen::Matrix3d& R) {
    double e = 0;
    for (const EdgeKey& edge : graph_edges(g)) {
      if (!(edge.first == carrier)) continue;
      const EdgNode& a = g.nodes.at(edge.first);
      const EdgNode& b = g.nodes.at(edge.second);
      const Eigen::Vector3d d = a.g - b.g;
      const Eigen::Vector3d dt = (a.g + a.t) - (b.g + b.t);
      e += line.at(edge) * (R * d - dt).squaredNorm();
    }
    return e;
  };
  const double solved = objective(g.nodes.at(carrier).R);
  for (int i = 0; i < 2000; ++i)
    CHECK(solved <= objective(random_rotation(rng, M_PI)) + 1e-12);
}

TEST_CASE("rotation step keeps nodes with fewer than two weighted edges",
          "[registration]") {
  DeformGraph g = make_block(1, 1, 1, 0.05, Eigen::Vector3d::Zero());
  std::mt19937 rng(71);
  std::uniform_real_distribution<double> s(-0.02, 0.02);
  for (const CopyRef& ref : node_refs(g))
    g.nodes.at(ref).t = Eigen::Vector3d(s(rng), s(rng), s(rng));

  LineProcess line;
  for (const EdgeKey& e : graph_edges(g)) line[e] = 1.0;
  // strip corner 0 down to a single weighted edge
  const CopyRef carrier{0, 0};
  int left = 1;
  for (const EdgeKey& e : graph_edges(g))
    if (e.first == carrier && left-- <= 0) line[e] = 0.0;

  const Eigen::Matrix3d marker =
      Eigen::AngleAxisd(1.0, Eigen::Vector3d::UnitX()).toRotationMatrix();
  g.nodes.at(carrier).R = marker;
  const auto stats = solve_rotations(g, line);
  CHECK(stats.kept >= 1);
  CHECK((g.nodes.at(carrier).R - marker).norm() == 0.0);
}

TEST_CASE("alternation never increases the energy", "[registration]") {
  DeformGraph g = make_block(2, 2, 1, 0.05, Eigen::Vector3d::Zero());
  std::mt19937 rng(83);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> s(-0.01, 0.01);
  for (const CopyRef& ref : node_refs(g))
    g.nodes.at(ref).t = Eigen::Vector3d(s(rng), s(rng), s(rng));

  GlobalPose pose;
  CorrespondenceSet corr;
  for (int i = 0; i < 40; ++i) {
    const Eigen::Vector3d p(0.09 * u(rng), 0.09 * u(rng), 0.045 * u(rng));
    Eigen::Vector3d n(s(rng), s(rng), 0.01 + u(rng) * 0.01);
    n.normalize();
    corr.dense.push_back({p, cell_ref_at(g, p), p + Eigen::Vector3d(s(rng), s(rng), s(rng)), n});
  }

  SolverConfig cfg;
  cfg.mu = SolverConfig::default_mu(g.spacing());
  cfg.pcg_max_iters = 7;  // even a truncated solve must not increase E
  LineProcess line = unit_line_process(g);

  for (int round = 0; round < 3; ++round) {
    const double e0 = energy_total(g, pose, line, corr, cfg).total;
    solve_displacements(g, pose, line, corr, cfg);
    const double e1 = energy_total(g, pose, line, corr, cfg).total;
    solve_rotations(g, line);
    const double e2 = energy_total(g, pose, line, corr, cfg).total;
    line = solve_line_process(g, cfg);
    const double e3 = energy_total(g, pose, line, corr, cfg).total;
    CHECK(e1 <= e0 + 1e-10);
    CHECK(e2 <= e1 + 1e-10);
    CHECK(e3 <= e2 + 1e-10);
  }
}

TEST_CASE("projective association finds and gates pairs", "[registration]") {
  const DepthFrame frame = render_spheres({kCompound[0]});
  DeformGraph g = make_block(4, 4, 3, 0.08, Eigen::Vector3d(-0.16, -0.16, 0.48));
  const std::vector<Eigen::Vector3d> normals = depth_normals(frame);
  SolverConfig cfg;
  GlobalPose pose;

  // a sample placed exactly on the back-projection of a pixel round-trips
  const int u = 320, v = 240;
  REQUIRE(frame.at(u, v) > 0);
  const Eigen::Vector3d hit = backproject(frame.K, u, v, frame.at(u, v));
  const Eigen::Vector3d n = (hit - kCompound[0].c).normalized();
  std::vector<SurfacePoint> pts{{hit, n, cell_ref_at(g, hit)}};
  auto corr = find_dense_correspondences(pts, g, pose, frame, normals, cfg);
  REQUIRE(corr.dense.size() == 1);
  CHECK((corr.dense[0].y - hit).norm() < 1e-12);

  // far off the surface along the view ray: same pixel, gated by distance
  SolverConfig tight = cfg;
  tight.corr_dist_max = 0.01;
  pts[0].position = hit - n * (5 * tight.corr_dist_max);  // toward the center
  pts[0].cell = cell_ref_at(g, pts[0].position);
  CHECK(find_dense_correspondences(pts, g, pose, frame, normals, tight).dense.empty());

  // projecting outside the image: no pair (narrow frame, same optics)
  DepthFrame narrow(40, 480, test_intrinsics());
  const std::vector<Eigen::Vector3d> narrow_normals = depth_normals(narrow);
  pts[0] = {hit, n, cell_ref_at(g, hit)};
  CHECK(find_dense_correspondences(pts, g, pose, narrow, narrow_normals, cfg)
            .dense.empty());
}

TEST_CASE("rigid icp: identity fixed point, translation and rotation recovery",
          "[registration]") {
  std::vector<Eigen::Vector3d> pts, nrm;
  sample_spheres(kCompound, 24, 48, pts, nrm);
  SolverConfig cfg;

  SECTION("identity") {
    const DepthFrame frame = render_spheres(kCompound);
    const GlobalPose pose = rigid_icp(pts, nrm, frame, GlobalPose{}, cfg);
    CHECK(pose.t.norm() < 1e-4);
    CHECK(rotation_angle(pose.R, Eigen::Matrix3d::Identity()) < 1e-3);
  }

  SECTION("translation") {
    const Eigen::Vector3d d(0.01, 0, 0);
    std::vector<TestSphere> moved = kCompound;
    for (TestSphere& s : moved) s.c += d;
    const DepthFrame frame = render_spheres(moved);
    const GlobalPose pose = rigid_icp(pts, nrm, frame, GlobalPose{}, cfg);
    CHECK((pose.t - d).norm() < 1e-4);
    CHECK(rotation_angle(pose.R, Eigen::Matrix3d::Identity()) < 2e-4);
  }

  SECTION("rotation about the centroid") {
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const TestSphere& s : kCompound) c += s.c / 3.0;
    const Eigen::Matrix3d Q =
        Eigen::AngleAxisd(5.0 * M_PI / 180.0, Eigen::Vector3d::UnitY()).toRotationMatrix();
    std::vector<TestSphere> moved = kCompound;
    for (TestSphere& s : moved) s.c = Q * (s.c - c) + c;
    const DepthFrame frame = render_spheres(moved);
    const GlobalPose pose = rigid_icp(pts, nrm, frame, GlobalPose{}, cfg);
    CHECK(rotation_angle(pose.R, Q) < 0.1 * M_PI / 180.0);
    CHECK((pose.t - (c - Q * c)).norm() < 5e-4);
  }

  SECTION("too few correspondences") {
    DepthFrame empty(640, 480, test_intrinsics());
    CHECK_THROWS_AS(rigid_icp(pts, nrm, empty, GlobalPose{}, cfg), DegeneratePoseError);
  }
}

TEST_CASE("nonrigid solve: static scene is a fixed point", "[registration]") {
  const std::vector<TestSphere> scene = {kCompound[0]};
  const DepthFrame frame = render_spheres(scene);
  DeformGraph g = make_block(4, 4, 3, 0.08, Eigen::Vector3d(-0.16, -0.16, 0.48));

  std::vector<Eigen::Vector3d> pts, nrm;
  sample_spheres(scene, 20, 40, pts, nrm);
  const std::vector<SurfacePoint> samples = surface_points(g, pts, nrm);

  SolverConfig cfg;
  cfg.mu = SolverConfig::default_mu(g.spacing());
  SolveStats stats;
  const DeformationState state = nonrigid_solve(g, samples, {}, frame, GlobalPose{}, cfg, &stats);

  REQUIRE_FALSE(stats.sweeps.empty());
  CHECK(stats.sweeps[0].dense_count > 100);
  for (const CopyRef& ref : node_refs(g)) CHECK(g.nodes.at(ref).t.norm() < 1e-4);
  for (const auto& [e, l] : state.line) {
    (void)e;
    CHECK(l >= 0.99);
  }
  for (const SweepRecord& rec : stats.sweeps) {
    CHECK(rec.after_t.total <= rec.initial.total + 1e-10);
    CHECK(rec.after_r.total <= rec.after_t.total + 1e-10);
    CHECK(rec.after_l.total <= rec.after_r.total + 1e-10);
  }
}

TEST_CASE("nonrigid solve recovers a small rigid translation", "[registration]") {
  const std::vector<TestSphere> scene = {kCompound[0]};
  const Eigen::Vector3d d(0.004, -0.002, 0.003);
  std::vector<TestSphere> moved = scene;
  moved[0].c += d;
  const DepthFrame frame = render_spheres(moved);

  DeformGraph g = make_block(4, 4, 3, 0.08, Eigen::Vector3d(-0.16, -0.16, 0.48));
  std::vector<Eigen::Vector3d> pts, nrm;
  sample_spheres(scene, 20, 40, pts, nrm);
  const std::vector<SurfacePoint> samples = surface_points(g, pts, nrm);

  SolverConfig cfg;
  cfg.mu = SolverConfig::default_mu(g.spacing());
  const DeformationState state = nonrigid_solve(g, samples, {}, frame, GlobalPose{}, cfg);

  // nodes of cells that carry data follow the rigid motion
  std::set<std::int64_t> data_cells;
  for (const SurfacePoint& sp : samples) data_cells.insert(sp.cell.anchor.index1d);
  for (const auto& [ref, rec] : g.cells) {
    if (!data_cells.count(ref.anchor.index1d)) continue;
    for (const CopyRef& corner : cell_corners(g, ref))
      CHECK((g.nodes.at(corner).t - d).norm() < 1e-3);
  }
  for (const auto& [e, l] : state.line) {
    (void)e;
    CHECK(l > 0.9);
  }

  // warped samples land on the moved surface
  for (const SurfacePoint& sp : samples) {
    const Eigen::Vector3d w = warp_point(g, sp.cell, state.pose, sp.position);
    CHECK(std::abs((w - moved[0].c).norm() - moved[0].r) < 1e-3);
  }
}

TEST_CASE("nonrigid solve is deterministic", "[registration]") {
  const std::vector<TestSphere> scene = {kCompound[0]};
  std::vector<TestSphere> moved = scene;
  moved[0].c += Eigen::Vector3d(0.003, 0.001, -0.002);
  const DepthFrame frame = render_spheres(moved);
  std::vector<Eigen::Vector3d> pts, nrm;
  sample_spheres(scene, 16, 32, pts, nrm);

  auto run = [&]() {
    DeformGraph g = make_block(4, 4, 3, 0.08, Eigen::Vector3d(-0.16, -0.16, 0.48));
    const std::vector<SurfacePoint> samples = surface_points(g, pts, nrm);
    SolverConfig cfg;
    cfg.mu = SolverConfig::default_mu(g.spacing());
    nonrigid_solve(g, samples, {}, frame, GlobalPose{}, cfg);
    std::vector<Eigen::Vector3d> ts;
    for (const CopyRef& ref : node_refs(g)) ts.push_back(g.nodes.at(ref).t);
    return ts;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}
