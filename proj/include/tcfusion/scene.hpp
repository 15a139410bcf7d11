#pragma once
// Synthetic depth scenes with analytic ground truth.
//
// Every scene is a small arrangement of spheres, capped cylinders, and flat
// sheets about 0.6 m in front of the camera, rendered by exact per-pixel ray
// intersection (no marching), so valid depths satisfy the surface equations
// to floating-point precision. Frames are deterministic functions of
// (spec, frame index); optional Gaussian depth noise is seeded per frame.
//
// Ground truth comes back as a welded triangle mesh per rigid piece plus, for
// the scenes that separate, sample points along both sides of the cut rim.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tcfusion/camera.hpp"
#include "tcfusion/meshing.hpp"

namespace tcf {

enum class SceneKind {
  kSphere,         // static sphere
  kRigidSphere,    // sphere translating rigidly
  kCylinderSplit,  // cylinder whose halves separate in depth
  kSheetCut,       // flat sheet, one cut, right half recedes
  kSheetTwoCuts,   // flat sheet, two intersecting cuts, alternate quadrants recede
  kContact,        // two spheres closing to touch
};

inline SceneKind scene_by_name(const std::string& name) {
  if (name == "sphere") return SceneKind::kSphere;
  if (name == "rigid-sphere") return SceneKind::kRigidSphere;
  if (name == "cylinder-split") return SceneKind::kCylinderSplit;
  if (name == "sheet-cut") return SceneKind::kSheetCut;
  if (name == "sheet-two-cuts") return SceneKind::kSheetTwoCuts;
  if (name == "contact") return SceneKind::kContact;
  throw std::invalid_argument("unknown scene: " + name);
}

inline const char* scene_name(SceneKind kind) {
  switch (kind) {
    case SceneKind::kSphere: return "sphere";
    case SceneKind::kRigidSphere: return "rigid-sphere";
    case SceneKind::kCylinderSplit: return "cylinder-split";
    case SceneKind::kSheetCut: return "sheet-cut";
    case SceneKind::kSheetTwoCuts: return "sheet-two-cuts";
    case SceneKind::kContact: return "contact";
  }
  return "?";
}

struct SceneSpec {
  SceneKind kind = SceneKind::kSphere;
  int frames = 20;
  double noise_sigma = 0.0;  // meters, Gaussian, valid pixels only
  std::uint64_t seed = 1;
  int width = 640;
  int height = 480;
  Intrinsics K{570.0, 570.0, 319.5, 239.5};
};

struct SceneFrame {
  DepthFrame depth;
  CanonicalMesh gt_mesh;
  std::vector<Eigen::Vector3d> cut_boundary;
};

// Scene layout constants. Separating scenes hold still for the first third
// of their frames, then the moving piece recedes 4 mm per frame.
namespace scene_detail {

inline constexpr double kDepth = 0.60;        // nominal object distance
inline constexpr double kSphereRadius = 0.06;
inline constexpr double kCylRadius = 0.05;
inline constexpr double kCylHalfLen = 0.14;
inline constexpr double kSheetHalfX = 0.20;
inline constexpr double kSheetHalfY = 0.08;
inline constexpr double kSplitStep = 0.004;   // per-frame separation
inline constexpr double kContactRadius = 0.05;
inline constexpr double kContactGap = 0.04;   // initial surface gap

inline int split_start(const SceneSpec& spec) { return spec.frames / 3; }

inline double split_offset(const SceneSpec& spec, int frame) {
  return std::max(0, frame - split_start(spec)) * kSplitStep;
}

inline Eigen::Vector3d rigid_translation(int frame) {
  return frame * Eigen::Vector3d(0.0015, 0.0008, 0.002);
}

inline double contact_gap(const SceneSpec& spec, int frame) {
  const int last = std::max(1, spec.frames - 1);
  const double s = std::min(frame, last) / double(last);
  return kContactGap * (1.0 - s);
}

// Ray p = z * v, v = ((u-cx)/fx, (v-cy)/fy, 1); every hit solves for z, so a
// pixel's depth is the smallest valid root.
struct Ray {
  Eigen::Vector3d v;
};

inline double hit_sphere(const Ray& r, const Eigen::Vector3d& c, double rad) {
  const double a = r.v.squaredNorm();
  const double b = -2.0 * r.v.dot(c);
  const double c0 = c.squaredNorm() - rad * rad;
  const double disc = b * b - 4 * a * c0;
  if (disc < 0) return 0;
  const double z = (-b - std::sqrt(disc)) / (2 * a);
  return z > 0 ? z : 0;
}

// Capped cylinder along x: tube y^2 + (z - z0)^2 = rad^2 clipped to
// x in [xa, xb], plus the two end disks.
inline double hit_cylinder_x(const Ray& r, double xa, double xb, double z0,
                             double rad) {
  double best = 0;
  auto consider = [&best](double z) {
    if (z > 0 && (best == 0 || z < best)) best = z;
  };

  const double a = r.v.y() * r.v.y() + 1.0;
  const double b = -2.0 * z0;
  const double c0 = z0 * z0 - rad * rad;
  const double disc = b * b - 4 * a * c0;
  if (disc >= 0) {
    const double root = std::sqrt(disc);
    for (const double z : {(-b - root) / (2 * a), (-b + root) / (2 * a)}) {
      const double x = z * r.v.x();
      if (z > 0 && x >= xa && x <= xb) consider(z);
    }
  }
  if (r.v.x() != 0.0) {
    for (const double xcap : {xa, xb}) {
      const double z = xcap / r.v.x();
      if (z <= 0) continue;
      const double y = z * r.v.y();
      if (y * y + (z - z0) * (z - z0) <= rad * rad) consider(z);
    }
  }
  return best;
}

// Axis-aligned rectangle at constant depth.
inline double hit_rect(const Ray& r, double x0, double x1, double y0, double y1,
                       double z) {
  const double x = z * r.v.x(), y = z * r.v.y();
  return x >= x0 && x <= x1 && y >= y0 && y <= y1 ? z : 0;
}

inline void consider(double& best, double z) {
  if (z > 0 && (best == 0 || z < best)) best = z;
}

inline double cast_ray(const SceneSpec& spec, int frame, const Ray& r) {
  double best = 0;
  const double dz = split_offset(spec, frame);
  switch (spec.kind) {
    case SceneKind::kSphere:
      consider(best, hit_sphere(r, {0, 0, kDepth}, kSphereRadius));
      break;
    case SceneKind::kRigidSphere:
      consider(best, hit_sphere(r, Eigen::Vector3d(0, 0, kDepth) +
                                       rigid_translation(frame),
                                kSphereRadius));
      break;
    case SceneKind::kCylinderSplit:
      consider(best, hit_cylinder_x(r, -kCylHalfLen, 0.0, kDepth, kCylRadius));
      consider(best, hit_cylinder_x(r, 0.0, kCylHalfLen, kDepth + dz, kCylRadius));
      break;
    case SceneKind::kSheetCut:
      consider(best, hit_rect(r, -kSheetHalfX, 0.0, -kSheetHalfY, kSheetHalfY,
                              kDepth));
      consider(best, hit_rect(r, 0.0, kSheetHalfX, -kSheetHalfY, kSheetHalfY,
                              kDepth + dz));
      break;
    case SceneKind::kSheetTwoCuts:
      // Quadrants xy >= 0 recede together, the other two stay.
      consider(best, hit_rect(r, 0.0, kSheetHalfX, 0.0, kSheetHalfY, kDepth + dz));
      consider(best, hit_rect(r, -kSheetHalfX, 0.0, -kSheetHalfY, 0.0, kDepth + dz));
      consider(best, hit_rect(r, -kSheetHalfX, 0.0, 0.0, kSheetHalfY, kDepth));
      consider(best, hit_rect(r, 0.0, kSheetHalfX, -kSheetHalfY, 0.0, kDepth));
      break;
    case SceneKind::kContact: {
      const double cx = kContactRadius + contact_gap(spec, frame) / 2;
      consider(best, hit_sphere(r, {-cx, 0, kDepth}, kContactRadius));
      consider(best, hit_sphere(r, {cx, 0, kDepth}, kContactRadius));
      break;
    }
  }
  return best;
}

inline void append_mesh(CanonicalMesh& dst, const CanonicalMesh& src) {
  const int base = int(dst.vertices.size());
  dst.vertices.insert(dst.vertices.end(), src.vertices.begin(), src.vertices.end());
  for (const auto& t : src.triangles)
    dst.triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
}

inline CanonicalMesh uv_sphere(const Eigen::Vector3d& c, double rad, int rings = 24,
                               int sectors = 48) {
  CanonicalMesh m;
  m.vertices.push_back(c + Eigen::Vector3d(0, 0, -rad));  // near pole
  for (int i = 1; i < rings; ++i) {
    const double phi = M_PI * i / rings;
    for (int j = 0; j < sectors; ++j) {
      const double th = 2 * M_PI * j / sectors;
      m.vertices.push_back(c + rad * Eigen::Vector3d(std::sin(phi) * std::cos(th),
                                                     std::sin(phi) * std::sin(th),
                                                     -std::cos(phi)));
    }
  }
  m.vertices.push_back(c + Eigen::Vector3d(0, 0, rad));
  const int far_pole = int(m.vertices.size()) - 1;
  auto ring = [&](int i, int j) { return 1 + (i - 1) * sectors + (j % sectors); };
  for (int j = 0; j < sectors; ++j) m.triangles.push_back({0, ring(1, j + 1), ring(1, j)});
  for (int i = 1; i < rings - 1; ++i)
    for (int j = 0; j < sectors; ++j) {
      m.triangles.push_back({ring(i, j), ring(i, j + 1), ring(i + 1, j)});
      m.triangles.push_back({ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)});
    }
  for (int j = 0; j < sectors; ++j)
    m.triangles.push_back({ring(rings - 1, j), ring(rings - 1, j + 1), far_pole});
  return m;
}

inline CanonicalMesh capped_cylinder_x(double xa, double xb, double z0, double rad,
                                       int segs = 20, int sectors = 48) {
  CanonicalMesh m;
  for (int i = 0; i <= segs; ++i) {
    const double x = xa + (xb - xa) * i / segs;
    for (int j = 0; j < sectors; ++j) {
      const double th = 2 * M_PI * j / sectors;
      m.vertices.emplace_back(x, rad * std::sin(th), z0 - rad * std::cos(th));
    }
  }
  auto ring = [&](int i, int j) { return i * sectors + (j % sectors); };
  for (int i = 0; i < segs; ++i)
    for (int j = 0; j < sectors; ++j) {
      m.triangles.push_back({ring(i, j), ring(i + 1, j), ring(i, j + 1)});
      m.triangles.push_back({ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)});
    }
  const int ca = int(m.vertices.size());
  m.vertices.emplace_back(xa, 0, z0);
  const int cb = int(m.vertices.size());
  m.vertices.emplace_back(xb, 0, z0);
  for (int j = 0; j < sectors; ++j) {
    m.triangles.push_back({ca, ring(0, j), ring(0, j + 1)});
    m.triangles.push_back({cb, ring(segs, j + 1), ring(segs, j)});
  }
  return m;
}

inline CanonicalMesh rect_mesh(double x0, double x1, double y0, double y1, double z,
                               int nx = 20, int ny = 8) {
  CanonicalMesh m;
  for (int j = 0; j <= ny; ++j)
    for (int i = 0; i <= nx; ++i)
      m.vertices.emplace_back(x0 + (x1 - x0) * i / nx, y0 + (y1 - y0) * j / ny, z);
  auto at = [&](int i, int j) { return j * (nx + 1) + i; };
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      m.triangles.push_back({at(i, j), at(i + 1, j), at(i, j + 1)});
      m.triangles.push_back({at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)});
    }
  return m;
}

inline CanonicalMesh gt_mesh(const SceneSpec& spec, int frame) {
  CanonicalMesh m;
  const double dz = split_offset(spec, frame);
  switch (spec.kind) {
    case SceneKind::kSphere:
      m = uv_sphere({0, 0, kDepth}, kSphereRadius);
      break;
    case SceneKind::kRigidSphere:
      m = uv_sphere(Eigen::Vector3d(0, 0, kDepth) + rigid_translation(frame),
                    kSphereRadius);
      break;
    case SceneKind::kCylinderSplit:
      if (dz == 0.0) {
        m = capped_cylinder_x(-kCylHalfLen, kCylHalfLen, kDepth, kCylRadius, 40);
      } else {
        m = capped_cylinder_x(-kCylHalfLen, 0.0, kDepth, kCylRadius);
        append_mesh(m, capped_cylinder_x(0.0, kCylHalfLen, kDepth + dz, kCylRadius));
      }
      break;
    case SceneKind::kSheetCut:
      if (dz == 0.0) {
        m = rect_mesh(-kSheetHalfX, kSheetHalfX, -kSheetHalfY, kSheetHalfY, kDepth,
                      40, 16);
      } else {
        m = rect_mesh(-kSheetHalfX, 0.0, -kSheetHalfY, kSheetHalfY, kDepth);
        append_mesh(m, rect_mesh(0.0, kSheetHalfX, -kSheetHalfY, kSheetHalfY,
                                 kDepth + dz));
      }
      break;
    case SceneKind::kSheetTwoCuts:
      if (dz == 0.0) {
        m = rect_mesh(-kSheetHalfX, kSheetHalfX, -kSheetHalfY, kSheetHalfY, kDepth,
                      40, 16);
      } else {
        m = rect_mesh(0.0, kSheetHalfX, 0.0, kSheetHalfY, kDepth + dz);
        append_mesh(m, rect_mesh(-kSheetHalfX, 0.0, -kSheetHalfY, 0.0, kDepth + dz));
        append_mesh(m, rect_mesh(-kSheetHalfX, 0.0, 0.0, kSheetHalfY, kDepth));
        append_mesh(m, rect_mesh(0.0, kSheetHalfX, -kSheetHalfY, 0.0, kDepth));
      }
      break;
    case SceneKind::kContact: {
      const double cx = kContactRadius + contact_gap(spec, frame) / 2;
      m = uv_sphere({-cx, 0, kDepth}, kContactRadius);
      append_mesh(m, uv_sphere({cx, 0, kDepth}, kContactRadius));
      break;
    }
  }
  return m;
}

inline std::vector<Eigen::Vector3d> cut_boundary(const SceneSpec& spec, int frame) {
  std::vector<Eigen::Vector3d> pts;
  const double dz = split_offset(spec, frame);
  if (dz == 0.0) return pts;
  switch (spec.kind) {
    case SceneKind::kCylinderSplit:
      for (int j = 0; j < 32; ++j) {
        const double th = 2 * M_PI * j / 32;
        const double y = kCylRadius * std::sin(th);
        const double zr = -kCylRadius * std::cos(th);
        pts.emplace_back(0, y, kDepth + zr);        // left rim
        pts.emplace_back(0, y, kDepth + dz + zr);   // right rim
      }
      break;
    case SceneKind::kSheetCut:
      for (int j = 0; j <= 16; ++j) {
        const double y = -kSheetHalfY + 2 * kSheetHalfY * j / 16;
        pts.emplace_back(0, y, kDepth);
        pts.emplace_back(0, y, kDepth + dz);
      }
      break;
    case SceneKind::kSheetTwoCuts:
      for (int j = 0; j <= 16; ++j) {
        const double y = -kSheetHalfY + 2 * kSheetHalfY * j / 16;
        pts.emplace_back(0, y, kDepth);
        pts.emplace_back(0, y, kDepth + (y >= 0 ? dz : 0.0));
        pts.emplace_back(0, y, kDepth + (y >= 0 ? 0.0 : dz));
      }
      for (int i = 0; i <= 16; ++i) {
        const double x = -kSheetHalfX + 2 * kSheetHalfX * i / 16;
        pts.emplace_back(x, 0, kDepth);
        pts.emplace_back(x, 0, kDepth + (x >= 0 ? dz : 0.0));
        pts.emplace_back(x, 0, kDepth + (x >= 0 ? 0.0 : dz));
      }
      break;
    default:
      break;
  }
  return pts;
}

}  // namespace scene_detail

inline SceneFrame synth_scene(const SceneSpec& spec, int frame) {
  if (frame < 0 || frame >= spec.frames)
    throw std::invalid_argument("synth_scene: frame index out of range");

  SceneFrame out{DepthFrame(spec.width, spec.height, spec.K),
                 scene_detail::gt_mesh(spec, frame),
                 scene_detail::cut_boundary(spec, frame)};
  for (int v = 0; v < spec.height; ++v)
    for (int u = 0; u < spec.width; ++u) {
      const scene_detail::Ray r{{(u - spec.K.cx) / spec.K.fx,
                                 (v - spec.K.cy) / spec.K.fy, 1.0}};
      const double z = scene_detail::cast_ray(spec, frame, r);
      if (z > 0) out.depth.at(u, v) = float(z);
    }

  if (spec.noise_sigma > 0) {
    std::mt19937_64 rng(spec.seed ^ (0x9E3779B97F4A7C15ULL * std::uint64_t(frame + 1)));
    std::normal_distribution<double> gauss(0.0, spec.noise_sigma);
    for (float& d : out.depth.depth)
      if (d > 0) d = float(std::max(0.01, double(d) + gauss(rng)));
  }
  return out;
}

}  // namespace tcf
