#pragma once
// Pinhole camera model and metric depth frames.
//
// Depth images are row-major, meters, 0 = invalid. The camera looks down +z,
// so pixel (u, v) at depth z back-projects to z * ((u-cx)/fx, (v-cy)/fy, 1).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace tcf {

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

struct DepthFrame {
  int width = 0;
  int height = 0;
  Intrinsics K;
  std::vector<float> depth;  // meters, 0 = invalid

  DepthFrame() = default;

  DepthFrame(int w, int h, const Intrinsics& k)
      : width(w), height(h), K(k), depth(std::size_t(w) * std::size_t(h), 0.0f) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("depth frame extents must be positive");
    if (k.fx <= 0 || k.fy <= 0)
      throw std::invalid_argument("focal lengths must be positive");
  }

  bool in_bounds(int u, int v) const {
    return u >= 0 && u < width && v >= 0 && v < height;
  }

  float at(int u, int v) const { return depth[std::size_t(v) * width + u]; }
  float& at(int u, int v) { return depth[std::size_t(v) * width + u]; }
};

inline Eigen::Vector2d project(const Intrinsics& K, const Eigen::Vector3d& p) {
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

inline Eigen::Vector3d backproject(const Intrinsics& K, double u, double v, double z) {
  return {(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z};
}

// Bilinear depth lookup at a continuous pixel position. Returns 0 unless all
// four taps are valid and agree to within max_jump (no interpolation across
// silhouettes).
inline double sample_depth_bilinear(const DepthFrame& f, double u, double v,
                                    double max_jump = 0.05) {
  const int u0 = int(std::floor(u));
  const int v0 = int(std::floor(v));
  if (u0 < 0 || u0 + 1 >= f.width || v0 < 0 || v0 + 1 >= f.height) return 0.0;
  const double z00 = f.at(u0, v0), z10 = f.at(u0 + 1, v0);
  const double z01 = f.at(u0, v0 + 1), z11 = f.at(u0 + 1, v0 + 1);
  if (z00 <= 0 || z10 <= 0 || z01 <= 0 || z11 <= 0) return 0.0;
  const double lo = std::min(std::min(z00, z10), std::min(z01, z11));
  const double hi = std::max(std::max(z00, z10), std::max(z01, z11));
  if (hi - lo > max_jump) return 0.0;
  const double fu = u - u0, fv = v - v0;
  return (z00 * (1 - fu) + z10 * fu) * (1 - fv) + (z01 * (1 - fu) + z11 * fu) * fv;
}

// Per-pixel surface normals in camera space from central differences of the
// back-projected point map. Pixels without four valid neighbors, or across a
// depth discontinuity larger than max_jump, get a zero normal. Normals are
// oriented toward the camera.
inline std::vector<Eigen::Vector3d> depth_normals(const DepthFrame& f,
                                                  double max_jump = 0.05) {
  std::vector<Eigen::Vector3d> normals(f.depth.size(), Eigen::Vector3d::Zero());
  auto point = [&](int u, int v) { return backproject(f.K, u, v, f.at(u, v)); };
  for (int v = 1; v + 1 < f.height; ++v) {
    for (int u = 1; u + 1 < f.width; ++u) {
      const float z = f.at(u, v);
      if (z <= 0) continue;
      const float zl = f.at(u - 1, v), zr = f.at(u + 1, v);
      const float zu = f.at(u, v - 1), zd = f.at(u, v + 1);
      if (zl <= 0 || zr <= 0 || zu <= 0 || zd <= 0) continue;
      if (std::abs(zl - z) > max_jump || std::abs(zr - z) > max_jump ||
          std::abs(zu - z) > max_jump || std::abs(zd - z) > max_jump)
        continue;
      const Eigen::Vector3d dx = point(u + 1, v) - point(u - 1, v);
      const Eigen::Vector3d dy = point(u, v + 1) - point(u, v - 1);
      Eigen::Vector3d n = dx.cross(dy);
      const double len = n.norm();
      if (len < 1e-12) continue;
      n /= len;
      if (n.dot(point(u, v)) > 0) n = -n;  // face the camera
      normals[std::size_t(v) * f.width + u] = n;
    }
  }
  return normals;
}

}  // namespace tcf
