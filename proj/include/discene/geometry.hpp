#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "discene/common.hpp"

namespace discene {

/// Axis-aligned voxel grid geometry. Containment uses half-open intervals
/// [lo, hi) per axis.
struct GridSpec {
  std::array<std::size_t, 3> dims{0, 0, 0};  // voxel counts (X, Y, Z)
  double voxel_size = 0.0;                   // meters
  Vec3 origin{};                             // grid corner, meters

  GridSpec() = default;
  GridSpec(std::size_t x, std::size_t y, std::size_t z, double vs, Vec3 org = {})
      : dims{x, y, z}, voxel_size(vs), origin(org) {
    require(x > 0 && y > 0 && z > 0, "GridSpec: dims must be positive");
    require(vs > 0.0, "GridSpec: voxel_size must be positive");
  }

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }

  /// Linear index, x-major: x is the slowest axis, z the fastest.
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (x * dims[1] + y) * dims[2] + z;
  }
  std::array<std::size_t, 3> coords(std::size_t idx) const {
    const std::size_t z = idx % dims[2];
    const std::size_t y = (idx / dims[2]) % dims[1];
    const std::size_t x = idx / (dims[1] * dims[2]);
    return {x, y, z};
  }

  Vec3 voxel_center(std::size_t x, std::size_t y, std::size_t z) const {
    return origin + Vec3{(static_cast<double>(x) + 0.5) * voxel_size,
                         (static_cast<double>(y) + 0.5) * voxel_size,
                         (static_cast<double>(z) + 0.5) * voxel_size};
  }

  /// Voxel containing p, or nullopt when out of bounds.
  std::optional<std::array<std::size_t, 3>> locate(const Vec3& p) const {
    const Vec3 rel = (p - origin) / voxel_size;
    const double fx = std::floor(rel.x), fy = std::floor(rel.y),
                 fz = std::floor(rel.z);
    if (fx < 0 || fy < 0 || fz < 0) return std::nullopt;
    const auto x = static_cast<std::size_t>(fx);
    const auto y = static_cast<std::size_t>(fy);
    const auto z = static_cast<std::size_t>(fz);
    if (x >= dims[0] || y >= dims[1] || z >= dims[2]) return std::nullopt;
    return std::array<std::size_t, 3>{x, y, z};
  }

  Vec3 extent() const {
    return {dims[0] * voxel_size, dims[1] * voxel_size, dims[2] * voxel_size};
  }

  bool operator==(const GridSpec& o) const {
    return dims == o.dims && voxel_size == o.voxel_size &&
           origin.x == o.origin.x && origin.y == o.origin.y &&
           origin.z == o.origin.z;
  }
};

/// Dense labeled grid; class 0 is reserved for empty space.
struct VoxelGrid {
  GridSpec spec;
  std::vector<std::uint8_t> labels;  // length X*Y*Z, x-major

  VoxelGrid() = default;
  explicit VoxelGrid(GridSpec s) : spec(s), labels(s.voxel_count(), 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t z) {
    return labels[spec.index(x, y, z)];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const {
    return labels[spec.index(x, y, z)];
  }

  std::size_t occupied_count() const {
    std::size_t n = 0;
    for (auto v : labels) n += (v != 0);
    return n;
  }

  bool operator==(const VoxelGrid& o) const {
    return spec == o.spec && labels == o.labels;
  }
};

/// Pinhole camera: intrinsics in pixels plus a rigid camera-to-world pose.
/// Camera frame: +x right, +y down, +z forward.
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major c2w
  Vec3 position{};

  Vec3 rotate_to_world(const Vec3& c) const {
    return {rotation[0] * c.x + rotation[1] * c.y + rotation[2] * c.z,
            rotation[3] * c.x + rotation[4] * c.y + rotation[5] * c.z,
            rotation[6] * c.x + rotation[7] * c.y + rotation[8] * c.z};
  }
  Vec3 world_to_camera(const Vec3& w) const {
    const Vec3 d = w - position;
    // Rotation is orthonormal, so world->camera uses the transpose.
    return {rotation[0] * d.x + rotation[3] * d.y + rotation[6] * d.z,
            rotation[1] * d.x + rotation[4] * d.y + rotation[7] * d.z,
            rotation[2] * d.x + rotation[5] * d.y + rotation[8] * d.z};
  }

  /// Projects a world point to (u, v) pixels and camera-frame depth z.
  /// u/v are meaningless when z <= 0.
  Vec3 project(const Vec3& w) const {
    const Vec3 c = world_to_camera(w);
    if (c.z <= 0.0) return {0.0, 0.0, c.z};
    return {fx * c.x / c.z + cx, fy * c.y / c.z + cy, c.z};
  }

  static Camera look_at(const Vec3& eye, const Vec3& target, double fx,
                        double fy, double cx, double cy) {
    Camera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = cx;
    cam.cy = cy;
    cam.position = eye;
    const Vec3 fwd = (target - eye).normalized();
    Vec3 up{0.0, 0.0, 1.0};
    if (std::abs(fwd.dot(up)) > 1.0 - 1e-6) up = Vec3{0.0, 1.0, 0.0};
    const Vec3 right = fwd.cross(up).normalized();
    const Vec3 down = fwd.cross(right);
    cam.rotation = {right.x, down.x, fwd.x,   //
                    right.y, down.y, fwd.y,   //
                    right.z, down.z, fwd.z};
    return cam;
  }
};

/// Occupied voxels of a grid as an unordered set of (center, class) pairs.
struct GroundTruthSet {
  std::vector<Vec3> positions;         // voxel centers, meters
  std::vector<std::uint8_t> classes;   // in [1, K_total)

  std::size_t size() const { return positions.size(); }
};

/// Point-set prediction: M' positions with per-point semantic logits.
/// Logit column k scores semantic class id k+1 (class 0 = empty has none).
struct PredictionSet {
  Tensor positions;  // M' x 3
  Tensor logits;     // M' x K_sem

  std::size_t size() const { return positions.rows(); }
};

struct MetricsReport {
  double iou = 0.0;
  std::vector<std::optional<double>> per_class_iou;  // index k = class id k+1
  std::optional<double> miou;                        // nullopt = no classes
};

namespace detail {

/// Majority vote per voxel; ties broken by lowest class id.
inline VoxelGrid vote_grid(std::vector<std::pair<std::size_t, std::uint8_t>> votes,
                           const GridSpec& spec) {
  VoxelGrid grid(spec);
  std::sort(votes.begin(), votes.end());
  std::size_t i = 0;
  while (i < votes.size()) {
    const std::size_t voxel = votes[i].first;
    std::uint8_t best_class = 0;
    std::size_t best_count = 0;
    while (i < votes.size() && votes[i].first == voxel) {
      const std::uint8_t cls = votes[i].second;
      std::size_t count = 0;
      while (i < votes.size() && votes[i].first == voxel &&
             votes[i].second == cls) {
        ++count;
        ++i;
      }
      if (count > best_count) {  // ties keep the earlier (lower) class id
        best_count = count;
        best_class = cls;
      }
    }
    grid.labels[voxel] = best_class;
  }
  return grid;
}

}  // namespace detail

/// Rasterizes labeled points into a grid. Out-of-bounds points are dropped
/// (and tallied into *dropped when given); voxels hit by several classes
/// take the majority class, ties to the lowest id.
inline VoxelGrid voxelize(const std::vector<std::pair<Vec3, std::uint8_t>>& points,
                          const GridSpec& spec, std::size_t* dropped = nullptr) {
  std::vector<std::pair<std::size_t, std::uint8_t>> votes;
  votes.reserve(points.size());
  std::size_t oob = 0;
  for (const auto& [pos, cls] : points) {
    require(pos.finite(), "voxelize: positions must be finite");
    if (const auto c = spec.locate(pos)) {
      votes.emplace_back(spec.index((*c)[0], (*c)[1], (*c)[2]), cls);
    } else {
      ++oob;
    }
  }
  if (dropped) *dropped = oob;
  return detail::vote_grid(std::move(votes), spec);
}

/// One entry per non-empty voxel, iterated x-major (x slowest, z fastest).
inline GroundTruthSet extract_gt_set(const VoxelGrid& grid) {
  GroundTruthSet gt;
  const auto& s = grid.spec;
  for (std::size_t x = 0; x < s.dims[0]; ++x) {
    for (std::size_t y = 0; y < s.dims[1]; ++y) {
      for (std::size_t z = 0; z < s.dims[2]; ++z) {
        const std::uint8_t label = grid.at(x, y, z);
        if (label != 0) {
          gt.positions.push_back(s.voxel_center(x, y, z));
          gt.classes.push_back(label);
        }
      }
    }
  }
  return gt;
}

/// Converts a point-set prediction to a voxel grid. A point votes iff its
/// max softmax probability reaches score_threshold; votes carry the argmax
/// class (lowest index on logit ties).
inline VoxelGrid predset_to_grid(const PredictionSet& pred, const GridSpec& spec,
                                 double score_threshold = 0.0) {
  require(pred.logits.finite(), "predset_to_grid: logits must be finite");
  const std::size_t k = pred.logits.cols();
  std::vector<std::pair<std::size_t, std::uint8_t>> votes;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    std::size_t arg = 0;
    double best = pred.logits(i, 0);
    for (std::size_t j = 1; j < k; ++j) {
      if (pred.logits(i, j) > best) {
        best = pred.logits(i, j);
        arg = j;
      }
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      denom += std::exp(pred.logits(i, j) - best);
    }
    const double prob = 1.0 / denom;
    if (prob < score_threshold) continue;
    if (const auto c = spec.locate(pred.positions.row3(i))) {
      votes.emplace_back(spec.index((*c)[0], (*c)[1], (*c)[2]),
                         static_cast<std::uint8_t>(arg + 1));
    }
  }
  return detail::vote_grid(std::move(votes), spec);
}

/// Binary occupied/empty IoU. Two all-empty grids compare as 1.
inline double occupancy_iou(const VoxelGrid& pred, const VoxelGrid& gt) {
  require(pred.spec == gt.spec, "occupancy_iou: grid specs differ");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] != 0;
    const bool g = gt.labels[i] != 0;
    tp += (p && g);
    fp += (p && !g);
    fn += (!p && g);
  }
  const std::size_t denom = tp + fp + fn;
  return denom == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(denom);
}

/// Per-class IoU over semantic classes 1..k_sem (empty excluded). Classes
/// absent from both grids are excluded from the mean.
inline MetricsReport miou(const VoxelGrid& pred, const VoxelGrid& gt,
                          std::size_t k_sem) {
  require(pred.spec == gt.spec, "miou: grid specs differ");
  std::vector<std::size_t> tp(k_sem + 1, 0), fp(k_sem + 1, 0), fn(k_sem + 1, 0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const std::uint8_t p = pred.labels[i];
    const std::uint8_t g = gt.labels[i];
    if (p == g) {
      if (p != 0 && p <= k_sem) ++tp[p];
    } else {
      if (p != 0 && p <= k_sem) ++fp[p];
      if (g != 0 && g <= k_sem) ++fn[g];
    }
  }
  MetricsReport report;
  report.iou = occupancy_iou(pred, gt);
  report.per_class_iou.resize(k_sem);
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 1; c <= k_sem; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    const double v = static_cast<double>(tp[c]) / static_cast<double>(denom);
    report.per_class_iou[c - 1] = v;
    sum += v;
    ++defined;
  }
  if (defined > 0) report.miou = sum / static_cast<double>(defined);
  return report;
}

}  // namespace discene
