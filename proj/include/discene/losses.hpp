#pragma once

#include <map>
#include <string>
#include <vector>

#include "discene/autodiff.hpp"
#include "discene/common.hpp"
#include "discene/geometry.hpp"
#include "discene/matching.hpp"

namespace discene {

/// Scalar loss plus gradients w.r.t. every differentiable (student-side)
/// input, keyed by input name. Teacher/ground-truth inputs never appear.
struct LossValue {
  double value = 0.0;
  std::map<std::string, Tensor> grads;
};

/// One query's state after a decoder layer: point-set center, feature
/// vector, and the R predicted points with their semantic logits.
struct QuerySnapshot {
  Vec3 center;
  Tensor feature;  // C
  Tensor points;   // R x 3
  Tensor logits;   // R x K_sem
};

/// Distillation level weights (lambda 1..4 applied to EFA/QL/PL/AL).
struct DistillWeights {
  double efa = 1.0;
  double ql = 0.2;
  double pl = 0.2;
  double al = 0.5;
};

enum class QlMode { kCfd, kFld };

/// N snapshots of one layer stacked into per-field tensors.
struct QueryBatch {
  Tensor centers;   // N x 3
  Tensor features;  // N x C
  Tensor points;    // (N*R) x 3
  Tensor logits;    // (N*R) x K
  std::size_t n_queries = 0;
  std::size_t points_per_query = 0;
};

/// Same fields as QueryBatch but as live tape values.
struct QueryBatchValues {
  ad::Value centers;
  ad::Value features;
  ad::Value points;
  ad::Value logits;
  std::size_t n_queries = 0;
  std::size_t points_per_query = 0;
};

inline QueryBatch stack_snapshots(const std::vector<QuerySnapshot>& snaps) {
  require(!snaps.empty(), "stack_snapshots: empty snapshot list");
  const std::size_t n = snaps.size();
  const std::size_t c = snaps[0].feature.size();
  const std::size_t r = snaps[0].points.rows();
  const std::size_t k = snaps[0].logits.cols();
  QueryBatch batch;
  batch.n_queries = n;
  batch.points_per_query = r;
  batch.centers = Tensor{n, 3};
  batch.features = Tensor{n, c};
  batch.points = Tensor{n * r, 3};
  batch.logits = Tensor{n * r, k};
  for (std::size_t i = 0; i < n; ++i) {
    require(snaps[i].feature.size() == c && snaps[i].points.rows() == r &&
                snaps[i].logits.rows() == r && snaps[i].logits.cols() == k,
            "stack_snapshots: inconsistent snapshot shapes");
    batch.centers.set_row3(i, snaps[i].center);
    for (std::size_t j = 0; j < c; ++j) {
      batch.features(i, j) = snaps[i].feature[j];
    }
    for (std::size_t p = 0; p < r; ++p) {
      for (std::size_t j = 0; j < 3; ++j) {
        batch.points(i * r + p, j) = snaps[i].points(p, j);
      }
      for (std::size_t j = 0; j < k; ++j) {
        batch.logits(i * r + p, j) = snaps[i].logits(p, j);
      }
    }
  }
  return batch;
}

inline std::vector<QuerySnapshot> unstack_snapshots(const QueryBatch& batch) {
  std::vector<QuerySnapshot> snaps(batch.n_queries);
  const std::size_t c = batch.features.cols();
  const std::size_t r = batch.points_per_query;
  const std::size_t k = batch.logits.cols();
  for (std::size_t i = 0; i < batch.n_queries; ++i) {
    snaps[i].center = batch.centers.row3(i);
    snaps[i].feature = Tensor{c};
    for (std::size_t j = 0; j < c; ++j) {
      snaps[i].feature[j] = batch.features(i, j);
    }
    snaps[i].points = Tensor{r, 3};
    snaps[i].logits = Tensor{r, k};
    for (std::size_t p = 0; p < r; ++p) {
      for (std::size_t j = 0; j < 3; ++j) {
        snaps[i].points(p, j) = batch.points(i * r + p, j);
      }
      for (std::size_t j = 0; j < k; ++j) {
        snaps[i].logits(p, j) = batch.logits(i * r + p, j);
      }
    }
  }
  return snaps;
}

inline std::vector<Vec3> tensor_rows_to_vec3(const Tensor& t) {
  std::vector<Vec3> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) out[i] = t.row3(i);
  return out;
}

// ---------------------------------------------------------------------------
// Graph builders. These compose onto an existing tape; the standalone
// operations below wrap them with fresh leaves and a backward pass.
// ---------------------------------------------------------------------------

namespace graphs {

/// Feature alignment: MSE of channel-normalized feature maps (rows are
/// spatial locations, columns channels). Teacher enters as a constant.
inline ad::Value efa(ad::Tape& tape, ad::Value student_features,
                     const Tensor& teacher_features) {
  require(tape.data(student_features).same_shape(teacher_features),
          "efa: feature shapes differ");
  const ad::Value teacher = tape.constant(teacher_features);
  return ad::mse(ad::l2_normalize_rows(student_features),
                 ad::l2_normalize_rows(teacher));
}

/// Coarse feature-based distillation for a batch of matched pairs:
/// mean_i [ L1(center_i) + MSE(normalized feature_i) ]. Teacher tensors
/// must already be permuted into student order.
inline ad::Value cfd_batch(ad::Tape& tape, ad::Value student_centers,
                           ad::Value student_features,
                           const Tensor& teacher_centers,
                           const Tensor& teacher_features) {
  const std::size_t n = tape.data(student_centers).rows();
  require(teacher_centers.rows() == n &&
              tape.data(student_features).same_shape(teacher_features),
          "cfd_batch: shape mismatch");
  const ad::Value tc = tape.constant(teacher_centers);
  const ad::Value tf = tape.constant(teacher_features);
  const ad::Value l1 = ad::l1_sum(student_centers, tc);
  const ad::Value feat = ad::mse(ad::l2_normalize_rows(student_features),
                                 ad::l2_normalize_rows(tf));
  return ad::weighted_sum(tape,
                          {{1.0 / static_cast<double>(n), l1}, {1.0, feat}});
}

/// Fine-grained logit-based distillation for a batch of matched pairs:
/// mean_i (1/R) sum_j [ L1(point_ij) + KL(teacher_ij || student_ij) ].
inline ad::Value fld_batch(ad::Tape& tape, ad::Value student_points,
                           ad::Value student_logits,
                           const Tensor& teacher_points,
                           const Tensor& teacher_logits, std::size_t n_queries,
                           std::size_t points_per_query) {
  require(tape.data(student_points).same_shape(teacher_points) &&
              tape.data(student_logits).same_shape(teacher_logits),
          "fld_batch: shape mismatch");
  const double inv = 1.0 / static_cast<double>(n_queries * points_per_query);
  const ad::Value tp = tape.constant(teacher_points);
  const ad::Value tl = tape.constant(teacher_logits);
  const ad::Value l1 = ad::l1_sum(student_points, tp);
  const ad::Value kl = ad::kl_rows_sum(tl, student_logits);
  return ad::weighted_sum(tape, {{inv, l1}, {inv, kl}});
}

/// Reorders teacher-side rows so entry i lines up with student query i.
inline Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm,
                           std::size_t group = 1) {
  Tensor out(t.shape);
  const std::size_t k = t.cols();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t g = 0; g < group; ++g) {
      const std::size_t dst = i * group + g, src = perm[i] * group + g;
      for (std::size_t j = 0; j < k; ++j) out(dst, j) = t(src, j);
    }
  }
  return out;
}

/// Query-level distillation: per layer, Hungarian-match student to teacher
/// queries on center distance, then average the per-pair loss; layers sum.
/// The matching is a fixed selection (no gradient through the assignment).
inline ad::Value query_level(ad::Tape& tape,
                             const std::vector<QueryBatchValues>& student_layers,
                             const std::vector<QueryBatch>& teacher_layers,
                             QlMode mode) {
  require(student_layers.size() == teacher_layers.size(),
          "query_level: layer count mismatch");
  std::vector<std::pair<double, ad::Value>> per_layer;
  for (std::size_t d = 0; d < student_layers.size(); ++d) {
    const auto& s = student_layers[d];
    const auto& t = teacher_layers[d];
    require(s.n_queries == t.n_queries, "query_level: query count mismatch");
    const CostMatrix cost =
        build_query_cost_matrix(tape.data(s.centers), t.centers);
    const MatchResult match = hungarian(cost);
    if (mode == QlMode::kCfd) {
      const Tensor tc = permute_rows(t.centers, match.assignment);
      const Tensor tf = permute_rows(t.features, match.assignment);
      per_layer.emplace_back(1.0, cfd_batch(tape, s.centers, s.features, tc, tf));
    } else {
      const Tensor tp =
          permute_rows(t.points, match.assignment, t.points_per_query);
      const Tensor tl =
          permute_rows(t.logits, match.assignment, t.points_per_query);
      per_layer.emplace_back(
          1.0, fld_batch(tape, s.points, s.logits, tp, tl, s.n_queries,
                         s.points_per_query));
    }
  }
  return ad::weighted_sum(tape, per_layer);
}

/// Prior/anchor-level distillation: identity pairing (no matching), CFD per
/// pair, averaged over queries and summed over layers.
inline ad::Value index_aligned_cfd(ad::Tape& tape,
                                   const std::vector<QueryBatchValues>& student_layers,
                                   const std::vector<QueryBatch>& teacher_layers) {
  require(student_layers.size() == teacher_layers.size(),
          "index_aligned_cfd: layer count mismatch");
  std::vector<std::pair<double, ad::Value>> per_layer;
  for (std::size_t d = 0; d < student_layers.size(); ++d) {
    const auto& s = student_layers[d];
    const auto& t = teacher_layers[d];
    require(s.n_queries == t.n_queries,
            "index_aligned_cfd: query count mismatch");
    per_layer.emplace_back(
        1.0, cfd_batch(tape, s.centers, s.features, t.centers, t.features));
  }
  return ad::weighted_sum(tape, per_layer);
}

/// Task loss of one forward pass: per decoder layer, Chamfer on the
/// flattened points against ground-truth voxel centers plus focal loss on
/// point logits against nearest-neighbor-assigned semantic targets.
inline ad::Value task(ad::Tape& tape,
                      const std::vector<QueryBatchValues>& layers,
                      const GroundTruthSet& gt, double focal_alpha = 1.0,
                      double focal_gamma = 2.0) {
  require(!layers.empty(), "task: no layers");
  require(gt.size() >= 1, "task: empty ground-truth set");
  const Tensor gt_positions = Tensor::from_rows(gt.positions);
  std::vector<std::pair<double, ad::Value>> terms;
  for (const auto& layer : layers) {
    terms.emplace_back(1.0, ad::chamfer(layer.points, gt_positions));
    const auto classes =
        nn_label_assign(tensor_rows_to_vec3(tape.data(layer.points)), gt);
    std::vector<std::size_t> targets(classes.size());
    for (std::size_t i = 0; i < classes.size(); ++i) {
      require(classes[i] >= 1, "task: ground-truth class 0 is reserved");
      targets[i] = classes[i] - 1;  // class ids -> semantic logit indices
    }
    terms.emplace_back(1.0, ad::focal_mean(layer.logits, std::move(targets),
                                           focal_alpha, focal_gamma));
  }
  return ad::weighted_sum(tape, terms);
}

}  // namespace graphs

// ---------------------------------------------------------------------------
// Standalone operations: fresh tape, named leaves, one backward pass.
// ---------------------------------------------------------------------------

namespace detail {
inline LossValue finish(ad::Tape& tape, ad::Value root,
                        const std::vector<std::pair<std::string, ad::Value>>& leaves) {
  LossValue out;
  out.value = tape.data(root).data[0];
  if (tape.requires_grad(root)) tape.backward(root);
  for (const auto& [name, leaf] : leaves) {
    out.grads[name] =
        tape.requires_grad(root) ? tape.grad(leaf) : Tensor(tape.data(leaf).shape);
  }
  return out;
}
}  // namespace detail

/// Symmetric Chamfer distance (squared Euclidean, mean per direction).
inline LossValue chamfer_distance(const Tensor& pred, const Tensor& gt) {
  require(pred.rows() >= 1 && gt.rows() >= 1,
          "chamfer_distance: point sets must be non-empty");
  ad::Tape tape;
  const ad::Value p = tape.leaf(pred);
  const ad::Value root = ad::chamfer(p, gt);
  return detail::finish(tape, root, {{"pred", p}});
}

/// Multi-class focal loss, mean over rows. Targets are semantic indices.
inline LossValue focal_loss(const Tensor& logits,
                            const std::vector<std::size_t>& targets,
                            double alpha = 1.0, double gamma = 2.0) {
  ad::Tape tape;
  const ad::Value z = tape.leaf(logits);
  const ad::Value root = ad::focal_mean(z, targets, alpha, gamma);
  return detail::finish(tape, root, {{"logits", z}});
}

/// Task loss over decoder layers (Chamfer + focal per layer, summed).
inline LossValue task_loss(const std::vector<PredictionSet>& layers,
                           const GroundTruthSet& gt, double focal_alpha = 1.0,
                           double focal_gamma = 2.0) {
  require(!layers.empty(), "task_loss: no layers");
  ad::Tape tape;
  std::vector<QueryBatchValues> layer_values;
  std::vector<std::pair<std::string, ad::Value>> leaves;
  for (std::size_t d = 0; d < layers.size(); ++d) {
    QueryBatchValues v;
    v.points = tape.leaf(layers[d].positions);
    v.logits = tape.leaf(layers[d].logits);
    v.n_queries = layers[d].positions.rows();
    v.points_per_query = 1;
    layer_values.push_back(v);
    leaves.emplace_back("layer" + std::to_string(d) + ".points", v.points);
    leaves.emplace_back("layer" + std::to_string(d) + ".logits", v.logits);
  }
  const ad::Value root =
      graphs::task(tape, layer_values, gt, focal_alpha, focal_gamma);
  return detail::finish(tape, root, leaves);
}

/// Encoder-level feature alignment loss (gradient to student only).
inline LossValue efa_loss(const Tensor& student_features,
                          const Tensor& teacher_features) {
  require(student_features.same_shape(teacher_features),
          "efa_loss: shape mismatch");
  ad::Tape tape;
  const ad::Value s = tape.leaf(student_features);
  const ad::Value root = graphs::efa(tape, s, teacher_features);
  return detail::finish(tape, root, {{"student_features", s}});
}

/// Coarse feature-based distillation between one student/teacher snapshot.
inline LossValue cfd_loss(const QuerySnapshot& student,
                          const QuerySnapshot& teacher) {
  require(student.feature.size() == teacher.feature.size(),
          "cfd_loss: feature dimension mismatch");
  ad::Tape tape;
  const ad::Value c = tape.leaf(Tensor::from_rows({student.center}));
  Tensor feat{std::size_t{1}, student.feature.size()};
  feat.data = student.feature.data;
  const ad::Value f = tape.leaf(std::move(feat));
  Tensor tfeat{std::size_t{1}, teacher.feature.size()};
  tfeat.data = teacher.feature.data;
  const ad::Value root = graphs::cfd_batch(
      tape, c, f, Tensor::from_rows({teacher.center}), tfeat);
  LossValue out = detail::finish(tape, root, {{"center", c}, {"feature", f}});
  out.grads["feature"].shape = student.feature.shape;
  return out;
}

/// Fine-grained logit-based distillation between one snapshot pair.
inline LossValue fld_loss(const QuerySnapshot& student,
                          const QuerySnapshot& teacher) {
  require(student.points.same_shape(teacher.points) &&
              student.logits.same_shape(teacher.logits),
          "fld_loss: shape mismatch");
  ad::Tape tape;
  const ad::Value p = tape.leaf(student.points);
  const ad::Value z = tape.leaf(student.logits);
  const ad::Value root = graphs::fld_batch(tape, p, z, teacher.points,
                                           teacher.logits, 1,
                                           student.points.rows());
  return detail::finish(tape, root, {{"points", p}, {"logits", z}});
}

namespace detail {

struct LayerLeaves {
  std::vector<QueryBatchValues> values;
  std::vector<std::pair<std::string, ad::Value>> leaves;
};

inline LayerLeaves make_layer_leaves(
    ad::Tape& tape, const std::vector<std::vector<QuerySnapshot>>& layers,
    QlMode mode) {
  LayerLeaves out;
  for (std::size_t d = 0; d < layers.size(); ++d) {
    const QueryBatch batch = stack_snapshots(layers[d]);
    QueryBatchValues v;
    v.n_queries = batch.n_queries;
    v.points_per_query = batch.points_per_query;
    const std::string prefix = "layer" + std::to_string(d) + ".";
    if (mode == QlMode::kCfd) {
      v.centers = tape.leaf(batch.centers);
      v.features = tape.leaf(batch.features);
      out.leaves.emplace_back(prefix + "centers", v.centers);
      out.leaves.emplace_back(prefix + "features", v.features);
      v.points = tape.constant(batch.points);
      v.logits = tape.constant(batch.logits);
    } else {
      // FLD still matches on centers, but they take no gradient.
      v.centers = tape.constant(batch.centers);
      v.features = tape.constant(batch.features);
      v.points = tape.leaf(batch.points);
      v.logits = tape.leaf(batch.logits);
      out.leaves.emplace_back(prefix + "points", v.points);
      out.leaves.emplace_back(prefix + "logits", v.logits);
    }
    out.values.push_back(v);
  }
  return out;
}

}  // namespace detail

/// Query-level distillation loss over D layers of N snapshots per side.
inline LossValue ql_loss(const std::vector<std::vector<QuerySnapshot>>& student_layers,
                         const std::vector<std::vector<QuerySnapshot>>& teacher_layers,
                         QlMode mode = QlMode::kCfd) {
  require(student_layers.size() == teacher_layers.size(),
          "ql_loss: layer count mismatch");
  ad::Tape tape;
  auto student = detail::make_layer_leaves(tape, student_layers, mode);
  std::vector<QueryBatch> teacher;
  teacher.reserve(teacher_layers.size());
  for (const auto& layer : teacher_layers) {
    teacher.push_back(stack_snapshots(layer));
  }
  const ad::Value root = graphs::query_level(tape, student.values, teacher, mode);
  return detail::finish(tape, root, student.leaves);
}

/// Prior-level distillation loss (index-aligned CFD over layers).
inline LossValue pl_loss(const std::vector<std::vector<QuerySnapshot>>& prior_layers,
                         const std::vector<std::vector<QuerySnapshot>>& teacher_layers) {
  require(prior_layers.size() == teacher_layers.size(),
          "pl_loss: layer count mismatch");
  ad::Tape tape;
  auto student = detail::make_layer_leaves(tape, prior_layers, QlMode::kCfd);
  std::vector<QueryBatch> teacher;
  teacher.reserve(teacher_layers.size());
  for (const auto& layer : teacher_layers) {
    teacher.push_back(stack_snapshots(layer));
  }
  const ad::Value root = graphs::index_aligned_cfd(tape, student.values, teacher);
  return detail::finish(tape, root, student.leaves);
}

/// Anchor-level distillation loss; same contract as pl_loss over anchor
/// query snapshots.
inline LossValue al_loss(const std::vector<std::vector<QuerySnapshot>>& student_anchor_layers,
                         const std::vector<std::vector<QuerySnapshot>>& teacher_anchor_layers) {
  return pl_loss(student_anchor_layers, teacher_anchor_layers);
}

/// Weighted combination of the four distillation components (Eq.-10-style
/// linear mix). Gradient maps merge with component-name prefixes.
inline LossValue distill_loss(const LossValue& efa, const LossValue& ql,
                              const LossValue& pl, const LossValue& al,
                              const DistillWeights& w) {
  require(w.efa >= 0 && w.ql >= 0 && w.pl >= 0 && w.al >= 0,
          "distill_loss: weights must be non-negative");
  LossValue out;
  out.value = w.efa * efa.value + w.ql * ql.value + w.pl * pl.value +
              w.al * al.value;
  const std::vector<std::pair<std::string, std::pair<const LossValue*, double>>>
      parts = {{"efa", {&efa, w.efa}},
               {"ql", {&ql, w.ql}},
               {"pl", {&pl, w.pl}},
               {"al", {&al, w.al}}};
  for (const auto& [name, part] : parts) {
    for (const auto& [key, grad] : part.first->grads) {
      Tensor scaled = grad;
      for (double& v : scaled.data) v *= part.second;
      out.grads[name + "." + key] = std::move(scaled);
    }
  }
  return out;
}

}  // namespace discene
