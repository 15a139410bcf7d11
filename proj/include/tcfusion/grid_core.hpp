#pragma once

// Regular lattice indexing plus the non-manifold copy storage used by the
// deformation graph and the TSDF volume. A lattice point may hold up to 8
// coexisting copies of its payload; a copy is addressed by (linear index,
// bucket offset). Absent buckets mean the point is inactive. Offsets are
// stable while a structural update pass is running: passes insert first and
// free slots only at the end.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace tcf {

class CapacityError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class StructuralError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct GridDims {
  int nx = 0, ny = 0, nz = 0;
  double spacing = 0.0;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();

  GridDims() = default;
  GridDims(int nx_, int ny_, int nz_, double spacing_,
           const Eigen::Vector3d& origin_ = Eigen::Vector3d::Zero())
      : nx(nx_), ny(ny_), nz(nz_), spacing(spacing_), origin(origin_) {
    if (nx < 2 || ny < 2 || nz < 2)
      throw std::invalid_argument("GridDims: every extent must be >= 2");
    if (!(spacing > 0.0))
      throw std::invalid_argument("GridDims: spacing must be > 0");
  }

  std::int64_t num_points() const {
    return std::int64_t(nx) * ny * nz;
  }

  int extent(int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }

  bool contains(int x, int y, int z) const {
    return x >= 0 && x < nx && y >= 0 && y < ny && z >= 0 && z < nz;
  }

  // x fastest, then y, then z.
  std::int64_t linear_index(int x, int y, int z) const {
    if (!contains(x, y, z))
      throw std::out_of_range("linear_index: coordinate outside grid");
    return x + std::int64_t(nx) * (y + std::int64_t(ny) * z);
  }

  std::array<int, 3> coord_of(std::int64_t index) const {
    if (index < 0 || index >= num_points())
      throw std::out_of_range("coord_of: index outside grid");
    const int x = int(index % nx);
    const int y = int((index / nx) % ny);
    const int z = int(index / (std::int64_t(nx) * ny));
    return {x, y, z};
  }

  Eigen::Vector3d position(int x, int y, int z) const {
    return origin + spacing * Eigen::Vector3d(x, y, z);
  }

  Eigen::Vector3d position(std::int64_t index) const {
    const auto c = coord_of(index);
    return position(c[0], c[1], c[2]);
  }
};

constexpr int kMaxCopies = 8;

struct CopyRef {
  std::int64_t index1d = -1;
  std::uint8_t offset = 0;

  bool valid() const { return index1d >= 0; }

  // Dense id used for logs and hashing: 8 * index + offset.
  std::int64_t copy_index() const { return index1d * kMaxCopies + offset; }

  friend bool operator==(const CopyRef& a, const CopyRef& b) {
    return a.index1d == b.index1d && a.offset == b.offset;
  }
  friend bool operator!=(const CopyRef& a, const CopyRef& b) { return !(a == b); }
  friend bool operator<(const CopyRef& a, const CopyRef& b) {
    if (a.index1d != b.index1d) return a.index1d < b.index1d;
    return a.offset < b.offset;
  }
};

template <typename T>
class Bucket {
public:
  std::uint8_t insert(T value) {
    for (int i = 0; i < kMaxCopies; ++i) {
      if (!slots_[i]) {
        slots_[i] = std::move(value);
        return std::uint8_t(i);
      }
    }
    throw CapacityError("Bucket: more than 8 copies at one lattice point");
  }

  bool occupied(std::uint8_t offset) const {
    return offset < kMaxCopies && slots_[offset].has_value();
  }

  T& at(std::uint8_t offset) {
    if (!occupied(offset))
      throw std::out_of_range("Bucket: empty slot");
    return *slots_[offset];
  }
  const T& at(std::uint8_t offset) const {
    if (!occupied(offset))
      throw std::out_of_range("Bucket: empty slot");
    return *slots_[offset];
  }

  void erase(std::uint8_t offset) {
    if (!occupied(offset))
      throw std::out_of_range("Bucket: erase of empty slot");
    slots_[offset].reset();
  }

  int count() const {
    int n = 0;
    for (const auto& s : slots_)
      if (s) ++n;
    return n;
  }

private:
  std::array<std::optional<T>, kMaxCopies> slots_;
};

template <typename T>
class BucketGrid {
public:
  BucketGrid() = default;
  explicit BucketGrid(const GridDims& dims) : dims_(dims) {}

  const GridDims& dims() const { return dims_; }

  bool active(std::int64_t index1d) const { return buckets_.count(index1d) != 0; }

  bool contains(const CopyRef& ref) const {
    auto it = buckets_.find(ref.index1d);
    return it != buckets_.end() && it->second.occupied(ref.offset);
  }

  CopyRef insert(std::int64_t index1d, T value) {
    if (index1d < 0 || index1d >= dims_.num_points())
      throw std::out_of_range("BucketGrid: index outside grid");
    const std::uint8_t off = buckets_[index1d].insert(std::move(value));
    return CopyRef{index1d, off};
  }

  T& at(const CopyRef& ref) {
    auto it = buckets_.find(ref.index1d);
    if (it == buckets_.end())
      throw std::out_of_range("BucketGrid: inactive lattice point");
    return it->second.at(ref.offset);
  }
  const T& at(const CopyRef& ref) const {
    auto it = buckets_.find(ref.index1d);
    if (it == buckets_.end())
      throw std::out_of_range("BucketGrid: inactive lattice point");
    return it->second.at(ref.offset);
  }

  void erase(const CopyRef& ref) {
    auto it = buckets_.find(ref.index1d);
    if (it == buckets_.end())
      throw std::out_of_range("BucketGrid: inactive lattice point");
    it->second.erase(ref.offset);
    if (it->second.count() == 0)
      buckets_.erase(it);
  }

  const Bucket<T>* find_bucket(std::int64_t index1d) const {
    auto it = buckets_.find(index1d);
    return it == buckets_.end() ? nullptr : &it->second;
  }
  Bucket<T>* find_bucket(std::int64_t index1d) {
    auto it = buckets_.find(index1d);
    return it == buckets_.end() ? nullptr : &it->second;
  }

  // Ordered by linear index; iteration order is the determinism contract.
  const std::map<std::int64_t, Bucket<T>>& buckets() const { return buckets_; }

private:
  GridDims dims_;
  std::map<std::int64_t, Bucket<T>> buckets_;
};

// Maps every element to the terminus of its parent chain (a self-parent).
// Parent chains must be a forest; a cycle is a structural error.
inline std::vector<int> resolve_parents(const std::vector<int>& parents) {
  const int n = int(parents.size());
  for (int i = 0; i < n; ++i)
    if (parents[i] < 0 || parents[i] >= n)
      throw std::invalid_argument("resolve_parents: parent id out of range");

  std::vector<int> root(n, -1);
  std::vector<int> chain;
  for (int i = 0; i < n; ++i) {
    if (root[i] >= 0) continue;
    chain.clear();
    int cur = i;
    int steps = 0;
    while (root[cur] < 0 && parents[cur] != cur) {
      chain.push_back(cur);
      cur = parents[cur];
      if (++steps > n)
        throw StructuralError("resolve_parents: cyclic parent chain");
    }
    const int r = root[cur] >= 0 ? root[cur] : cur;
    root[cur] = r;
    for (int c : chain) root[c] = r;  // path compression
  }
  return root;
}

// Incremental union-find; the smallest member id of a class is its root.
class DisjointSet {
public:
  explicit DisjointSet(int n) : parent_(n) {
    for (int i = 0; i < n; ++i) parent_[i] = i;
  }

  int find(int a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }

  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b)
      parent_[b] = a;
    else
      parent_[a] = b;
  }

private:
  std::vector<int> parent_;
};

}  // namespace tcf
