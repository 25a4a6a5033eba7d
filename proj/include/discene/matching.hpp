#pragma once

#include <atomic>
#include <cstdint>
#include <limits>
#include <vector>

#include "discene/common.hpp"
#include "discene/geometry.hpp"

namespace discene {

/// Square pairwise cost matrix; entry (i, j) prices assigning row i to
/// column j.
struct CostMatrix {
  Tensor values;  // N x N

  CostMatrix() = default;
  explicit CostMatrix(std::size_t n) : values({n, n}) {}
  explicit CostMatrix(Tensor t) : values(std::move(t)) {
    require(values.rank() == 2 && values.rows() == values.cols(),
            "CostMatrix: matrix must be square");
  }

  std::size_t n() const { return values.rows(); }
  double at(std::size_t i, std::size_t j) const { return values(i, j); }
  double& at(std::size_t i, std::size_t j) { return values(i, j); }
};

struct MatchResult {
  std::vector<std::size_t> assignment;  // row i -> column assignment[i]
  double total_cost = 0.0;
};

/// Number of hungarian() invocations in this process. Lets tests assert
/// which code paths perform bipartite matching.
inline std::atomic<std::uint64_t>& hungarian_call_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

/// Exact minimum-cost assignment via shortest augmenting paths (O(N^3),
/// Jonker-Volgenant style). Deterministic: equal-cost optima always resolve
/// the same way for the same input.
inline MatchResult hungarian(const CostMatrix& cost) {
  const std::size_t n = cost.n();
  require(cost.values.finite(), "hungarian: cost matrix must be finite");
  hungarian_call_count().fetch_add(1, std::memory_order_relaxed);

  MatchResult result;
  result.assignment.assign(n, 0);
  if (n == 0) return result;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials/links; p[j] = row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= n; ++j) {
    result.assignment[p[j] - 1] = j - 1;
  }
  result.total_cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    result.total_cost += cost.at(i, result.assignment[i]);
  }
  return result;
}

/// Pairwise Euclidean distances between two equally sized center lists.
inline CostMatrix build_query_cost_matrix(const Tensor& student_centers,
                                          const Tensor& teacher_centers) {
  require(student_centers.rows() == teacher_centers.rows(),
          "build_query_cost_matrix: center counts differ");
  require(student_centers.finite() && teacher_centers.finite(),
          "build_query_cost_matrix: centers must be finite");
  const std::size_t n = student_centers.rows();
  CostMatrix cost(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 s = student_centers.row3(i);
    for (std::size_t j = 0; j < n; ++j) {
      cost.at(i, j) = std::sqrt(squared_dist(s, teacher_centers.row3(j)));
    }
  }
  return cost;
}

namespace detail {

/// Uniform grid over the target points for exact nearest-neighbor queries.
/// Candidates are compared as (squared distance, index); the expanding ring
/// search only stops once no unvisited cell can hold a lexicographically
/// smaller pair, so results are identical to a full scan.
class NnGrid {
 public:
  explicit NnGrid(const std::vector<Vec3>& targets) : targets_(targets) {
    lo_ = hi_ = targets[0];
    for (const Vec3& p : targets) {
      for (int a = 0; a < 3; ++a) {
        lo_[a] = std::min(lo_[a], p[a]);
        hi_[a] = std::max(hi_[a], p[a]);
      }
    }
    const double extent =
        std::max({hi_.x - lo_.x, hi_.y - lo_.y, hi_.z - lo_.z});
    const auto per_axis = static_cast<std::size_t>(
        std::ceil(std::cbrt(static_cast<double>(targets.size()))));
    usable_ = extent > 0.0 && per_axis > 1;
    if (!usable_) return;
    cell_ = extent / static_cast<double>(per_axis);
    for (int a = 0; a < 3; ++a) {
      dims_[a] = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::floor((hi_[a] - lo_[a]) / cell_)) + 1);
    }
    buckets_.resize(dims_[0] * dims_[1] * dims_[2]);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      buckets_[bucket_of(cell_coords(targets[i]))].push_back(i);
    }
  }

  bool usable() const { return usable_; }

  std::size_t query(const Vec3& q) const {
    const auto qc = cell_coords(q);
    double best_d2 = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    bool found = false;
    const std::size_t max_ring = max_ring_from(qc);
    for (std::size_t r = 0; r <= max_ring; ++r) {
      if (found) {
        const double lb = (static_cast<double>(r) - 1.0) * cell_;
        if (lb > 0.0 && lb * lb > best_d2) break;
      }
      scan_ring(qc, r, q, best_d2, best_idx, found);
    }
    return best_idx;
  }

 private:
  std::array<long, 3> cell_coords(const Vec3& p) const {
    std::array<long, 3> c;
    for (int a = 0; a < 3; ++a) {
      long v = static_cast<long>(std::floor((p[a] - lo_[a]) / cell_));
      c[a] = std::clamp(v, 0L, static_cast<long>(dims_[a]) - 1);
    }
    return c;
  }
  std::size_t bucket_of(const std::array<long, 3>& c) const {
    return (static_cast<std::size_t>(c[0]) * dims_[1] +
            static_cast<std::size_t>(c[1])) *
               dims_[2] +
           static_cast<std::size_t>(c[2]);
  }
  std::size_t max_ring_from(const std::array<long, 3>& c) const {
    std::size_t r = 0;
    for (int a = 0; a < 3; ++a) {
      r = std::max(r, static_cast<std::size_t>(
                          std::max(c[a], static_cast<long>(dims_[a]) - 1 - c[a])));
    }
    return r;
  }

  void consider_cell(const std::array<long, 3>& c, const Vec3& q,
                     double& best_d2, std::size_t& best_idx, bool& found) const {
    for (const std::size_t idx : buckets_[bucket_of(c)]) {
      const double d2 = squared_dist(q, targets_[idx]);
      if (!found || d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
        best_d2 = d2;
        best_idx = idx;
        found = true;
      }
    }
  }

  void scan_ring(const std::array<long, 3>& qc, std::size_t r, const Vec3& q,
                 double& best_d2, std::size_t& best_idx, bool& found) const {
    const long rr = static_cast<long>(r);
    for (long dx = -rr; dx <= rr; ++dx) {
      const long x = qc[0] + dx;
      if (x < 0 || x >= static_cast<long>(dims_[0])) continue;
      for (long dy = -rr; dy <= rr; ++dy) {
        const long y = qc[1] + dy;
        if (y < 0 || y >= static_cast<long>(dims_[1])) continue;
        const bool face = std::labs(dx) == rr || std::labs(dy) == rr;
        for (long dz = -rr; dz <= rr; ++dz) {
          if (!face && std::labs(dz) != rr) continue;  // Chebyshev shell only
          const long z = qc[2] + dz;
          if (z < 0 || z >= static_cast<long>(dims_[2])) continue;
          consider_cell({x, y, z}, q, best_d2, best_idx, found);
        }
      }
    }
  }

  const std::vector<Vec3>& targets_;
  Vec3 lo_{}, hi_{};
  double cell_ = 0.0;
  std::array<std::size_t, 3> dims_{1, 1, 1};
  std::vector<std::vector<std::size_t>> buckets_;
  bool usable_ = false;
};

}  // namespace detail

/// For every query point, the index of its exact nearest target (Euclidean,
/// ties to the lowest target index).
inline std::vector<std::size_t> nearest_indices(const std::vector<Vec3>& queries,
                                                const std::vector<Vec3>& targets) {
  require(!targets.empty(), "nearest_indices: target set is empty");
  std::vector<std::size_t> out(queries.size(), 0);
  if (targets.size() >= 48) {
    const detail::NnGrid grid(targets);
    if (grid.usable()) {
      for (std::size_t i = 0; i < queries.size(); ++i) {
        out[i] = grid.query(queries[i]);
      }
      return out;
    }
  }
  for (std::size_t i = 0; i < queries.size(); ++i) {
    double best_d2 = std::numeric_limits<double>::infinity();
    std::size_t best = 0;
    for (std::size_t j = 0; j < targets.size(); ++j) {
      const double d2 = squared_dist(queries[i], targets[j]);
      if (d2 < best_d2) {
        best_d2 = d2;
        best = j;
      }
    }
    out[i] = best;
  }
  return out;
}

/// Mutual nearest-neighbor indices: (for each A point its nearest B, for
/// each B point its nearest A).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
nearest_neighbor_pairs(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  require(!a.empty() && !b.empty(), "nearest_neighbor_pairs: empty point set");
  return {nearest_indices(a, b), nearest_indices(b, a)};
}

/// Assigns each prediction the class of its nearest ground-truth position.
inline std::vector<std::uint8_t> nn_label_assign(const std::vector<Vec3>& pred_positions,
                                                 const GroundTruthSet& gt) {
  require(gt.size() >= 1, "nn_label_assign: ground-truth set is empty");
  const auto nearest = nearest_indices(pred_positions, gt.positions);
  std::vector<std::uint8_t> classes(pred_positions.size());
  for (std::size_t i = 0; i < pred_positions.size(); ++i) {
    classes[i] = gt.classes[nearest[i]];
  }
  return classes;
}

}  // namespace discene
