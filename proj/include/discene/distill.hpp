#pragma once

#include <optional>
#include <vector>

#include "discene/losses.hpp"
#include "discene/model.hpp"
#include "discene/rng.hpp"
#include "discene/syndata.hpp"

namespace discene {

/// Ground-truth voxel centers pinned as anchor query positions.
struct AnchorSet {
  std::vector<Vec3> positions;
  std::vector<std::uint8_t> classes;
};

/// Which distillation levels run, with their weights and the query-level
/// matching granularity; one row of the component ablation per instance.
struct DistillPlan {
  bool enable_efa = false;
  bool enable_ql = false;
  bool enable_pl = false;
  bool enable_al = false;
  bool enable_tgi = false;
  DistillWeights weights;
  QlMode ql_mode = QlMode::kCfd;

  bool any_distill() const {
    return enable_efa || enable_ql || enable_pl || enable_al;
  }

  static DistillPlan full() {
    DistillPlan p;
    p.enable_efa = p.enable_ql = p.enable_pl = p.enable_al = p.enable_tgi = true;
    return p;
  }
};

/// Per-voxel sampling weights that even out the class frequency
/// distribution: weight_i = 1 / (K_present * count(class_i)); sums to 1.
inline std::vector<double> class_rebalanced_weights(const GroundTruthSet& gt) {
  require(gt.size() >= 1, "class_rebalanced_weights: empty ground truth");
  std::map<std::uint8_t, std::size_t> counts;
  for (const std::uint8_t c : gt.classes) ++counts[c];
  const double k_present = static_cast<double>(counts.size());
  std::vector<double> weights(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    weights[i] = 1.0 / (k_present * static_cast<double>(counts[gt.classes[i]]));
  }
  return weights;
}

/// N class-rebalanced draws (with replacement) from the ground-truth set.
inline AnchorSet sample_anchors(const GroundTruthSet& gt, std::size_t n,
                                std::uint64_t seed) {
  require(gt.size() >= 1, "sample_anchors: empty ground truth");
  const std::vector<double> weights = class_rebalanced_weights(gt);
  std::vector<double> cumulative(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    cumulative[i] = acc;
  }
  cumulative.back() = 1.0;

  Rng rng(mix64(seed, 0xA2C402ULL));
  AnchorSet anchors;
  anchors.positions.reserve(n);
  anchors.classes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    const std::size_t idx = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), u) -
        cumulative.begin());
    anchors.positions.push_back(gt.positions[idx]);
    anchors.classes.push_back(gt.classes[idx]);
  }
  return anchors;
}

/// Anchor query override: centers pinned to the anchor positions, feature
/// channels taken verbatim from the donor embedding table.
inline Tensor make_query_override(const AnchorSet& anchors,
                                  const Tensor& donor_embeddings) {
  require(anchors.positions.size() == donor_embeddings.rows(),
          "make_query_override: anchor count must match the query count");
  Tensor out = donor_embeddings;
  for (std::size_t i = 0; i < anchors.positions.size(); ++i) {
    out.set_row3(i, anchors.positions[i]);
  }
  return out;
}

/// One training scene: grid, view, extracted ground truth, the rendered
/// depth observation, and (when the depth branch is active) the simulated
/// noisy depth prior.
struct SceneSample {
  VoxelGrid grid;
  Camera camera;
  GroundTruthSet gt;
  Tensor observation;
  std::optional<Tensor> depth_prior;
};

inline SceneSample make_scene_sample(VoxelGrid grid, const Camera& camera,
                                     std::size_t image_height,
                                     std::size_t image_width, bool with_prior,
                                     std::uint64_t prior_seed) {
  SceneSample s;
  s.camera = camera;
  s.gt = extract_gt_set(grid);
  s.observation = render_depth(grid, camera, image_height, image_width);
  if (with_prior) {
    s.depth_prior = make_depth_prior(s.observation, prior_seed);
  }
  s.grid = std::move(grid);
  return s;
}

struct DistillStepResult {
  LossValue total;  // value = l_task + weighted distillation; grads per param
  double l_task = 0.0;
  double l_efa = 0.0;
  double l_ql = 0.0;
  double l_pl = 0.0;
  double l_al = 0.0;
};

/// Anchor-sampling stream for a given step seed (exposed so independent
/// re-computations can draw the same anchors).
inline std::uint64_t anchor_seed(std::uint64_t rng_seed) {
  return mix64(rng_seed, 0xA11C0ULL);
}

/// One distillation step on one scene: student main forward for the task
/// loss, teacher main forward for QL/PL targets, a prior pass (student fed
/// teacher embeddings), anchor passes through both models, and the
/// encoder-alignment term, combined with the plan weights. Disabled levels
/// contribute an exact zero and skip their forward passes entirely. The
/// teacher is read-only throughout.
inline DistillStepResult distill_step(const Model& student, const Model* teacher,
                                      const SceneSample& scene,
                                      const DistillPlan& plan,
                                      std::uint64_t rng_seed) {
  require(!plan.any_distill() || teacher != nullptr,
          "distill_step: distillation enabled but no teacher given");
  if (teacher) {
    require(student.config.decoder_compatible(teacher->config),
            "distill_step: student/teacher decoder configs differ");
  }
  const Tensor* prior = scene.depth_prior ? &*scene.depth_prior : nullptr;

  ad::Tape tape;
  const ParamValues sp = lift_params(tape, student.params, true);

  const ad::Value student_fm =
      graphs::encode(tape, sp, student.config, scene.observation);
  const TraceValues main_trace = graphs::decode(
      tape, sp, student.config, student_fm, scene.camera, prior);
  const ad::Value task =
      graphs::task(tape, main_trace.layers, scene.gt);

  std::vector<std::pair<double, ad::Value>> terms = {{1.0, task}};
  DistillStepResult result;
  result.l_task = tape.data(task).data[0];

  if (plan.any_distill()) {
    const ParamValues tp = lift_params(tape, teacher->params, false);
    const ad::Value teacher_fm =
        graphs::encode(tape, tp, teacher->config, scene.observation);

    // Teacher main trace is shared by the QL and PL terms.
    std::vector<QueryBatch> teacher_batches;
    if (plan.enable_ql || plan.enable_pl) {
      const TraceValues teacher_trace = graphs::decode(
          tape, tp, teacher->config, teacher_fm, scene.camera, prior);
      for (const auto& layer : teacher_trace.layers) {
        QueryBatch batch;
        batch.centers = tape.data(layer.centers);
        batch.features = tape.data(layer.features);
        batch.points = tape.data(layer.points);
        batch.logits = tape.data(layer.logits);
        batch.n_queries = layer.n_queries;
        batch.points_per_query = layer.points_per_query;
        teacher_batches.push_back(std::move(batch));
      }
    }

    if (plan.enable_efa) {
      const ad::Value efa =
          graphs::efa(tape, student_fm, tape.data(teacher_fm));
      result.l_efa = tape.data(efa).data[0];
      terms.emplace_back(plan.weights.efa, efa);
    }
    if (plan.enable_ql) {
      const ad::Value ql = graphs::query_level(tape, main_trace.layers,
                                               teacher_batches, plan.ql_mode);
      result.l_ql = tape.data(ql).data[0];
      terms.emplace_back(plan.weights.ql, ql);
    }
    if (plan.enable_pl) {
      const TraceValues prior_trace =
          graphs::decode(tape, sp, student.config, student_fm, scene.camera,
                         prior, tp.at("embeddings"));
      const ad::Value pl =
          graphs::index_aligned_cfd(tape, prior_trace.layers, teacher_batches);
      result.l_pl = tape.data(pl).data[0];
      terms.emplace_back(plan.weights.pl, pl);
    }
    if (plan.enable_al) {
      const AnchorSet anchors = sample_anchors(
          scene.gt, student.config.n_queries, anchor_seed(rng_seed));
      Tensor centers{anchors.positions.size(), 3};
      for (std::size_t i = 0; i < anchors.positions.size(); ++i) {
        centers.set_row3(i, anchors.positions[i]);
      }
      // Student anchors keep the student's own (learnable) features.
      const ad::Value student_override = ad::concat_cols(
          tape.constant(centers),
          ad::slice_cols(sp.at("embeddings"), 3, 3 + student.config.feature_dim));
      const TraceValues student_anchor =
          graphs::decode(tape, sp, student.config, student_fm, scene.camera,
                         prior, student_override);
      const Tensor teacher_override = make_query_override(
          anchors, teacher->params.at("embeddings"));
      const TraceValues teacher_anchor = graphs::decode(
          tape, tp, teacher->config, teacher_fm, scene.camera, prior,
          tape.constant(teacher_override));
      std::vector<QueryBatch> teacher_anchor_batches;
      for (const auto& layer : teacher_anchor.layers) {
        QueryBatch batch;
        batch.centers = tape.data(layer.centers);
        batch.features = tape.data(layer.features);
        batch.n_queries = layer.n_queries;
        batch.points_per_query = layer.points_per_query;
        teacher_anchor_batches.push_back(std::move(batch));
      }
      const ad::Value al = graphs::index_aligned_cfd(
          tape, student_anchor.layers, teacher_anchor_batches);
      result.l_al = tape.data(al).data[0];
      terms.emplace_back(plan.weights.al, al);
    }
  }

  const ad::Value total = ad::weighted_sum(tape, terms);
  tape.backward(total);

  result.total.value = tape.data(total).data[0];
  for (const auto& [name, value] : sp.values) {
    result.total.grads[name] = tape.grad(value);
  }
  return result;
}

}  // namespace discene
