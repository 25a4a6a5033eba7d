#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "discene/autodiff.hpp"
#include "discene/geometry.hpp"
#include "discene/losses.hpp"
#include "discene/rng.hpp"

namespace discene {

/// Patch-MLP image encoder: the depth image is cut into patch x patch
/// blocks, each block runs through a small MLP. Teacher and student differ
/// in width/depth/channels but share the output resolution.
struct EncoderSpec {
  std::size_t width = 64;     // hidden width
  std::size_t depth = 2;      // number of hidden layers (>= 1)
  std::size_t channels = 32;  // raw encoder output channels
  std::size_t patch = 4;
};

struct ModelConfig {
  std::size_t n_queries = 64;
  std::vector<std::size_t> points_per_layer = {1, 4, 16};  // R_d, nondecreasing
  std::size_t feature_dim = 32;   // C
  std::size_t n_classes = 6;      // K_sem
  std::size_t feat_channels = 32; // decoder-side channels (post projection)
  EncoderSpec encoder;
  bool depth_branch_enabled = false;
  std::size_t depth_hidden = 8;
  std::size_t image_width = 32;
  std::size_t image_height = 32;

  std::size_t n_layers() const { return points_per_layer.size(); }
  std::size_t fm_width() const { return image_width / encoder.patch; }
  std::size_t fm_height() const { return image_height / encoder.patch; }

  void validate() const {
    require(n_queries >= 1, "ModelConfig: need at least one query");
    require(!points_per_layer.empty(), "ModelConfig: need at least one layer");
    for (std::size_t d = 1; d < points_per_layer.size(); ++d) {
      require(points_per_layer[d] >= points_per_layer[d - 1],
              "ModelConfig: points_per_layer must be nondecreasing");
    }
    require(encoder.depth >= 1, "ModelConfig: encoder depth must be >= 1");
    require(image_width % encoder.patch == 0 &&
                image_height % encoder.patch == 0,
            "ModelConfig: image size must be divisible by the patch size");
  }

  bool decoder_compatible(const ModelConfig& o) const {
    return n_queries == o.n_queries && points_per_layer == o.points_per_layer &&
           feature_dim == o.feature_dim && n_classes == o.n_classes &&
           feat_channels == o.feat_channels &&
           image_width == o.image_width && image_height == o.image_height;
  }
};

/// Defaults used by the CLI: a wide teacher and a narrow student sharing
/// the decoder architecture.
inline ModelConfig teacher_config() {
  ModelConfig c;
  c.encoder = EncoderSpec{64, 2, 32, 4};
  return c;
}

inline ModelConfig student_config() {
  ModelConfig c;
  c.encoder = EncoderSpec{16, 1, 16, 4};
  return c;
}

/// Named parameter tensors, lexicographically ordered by name.
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name) {
    const auto it = tensors.find(name);
    require(it != tensors.end(), "ModelParams: missing tensor " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    const auto it = tensors.find(name);
    require(it != tensors.end(), "ModelParams: missing tensor " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

/// Parameters lifted onto a tape; requires_grad distinguishes the trainable
/// model (student) from a frozen one (teacher).
struct ParamValues {
  std::map<std::string, ad::Value> values;

  ad::Value at(const std::string& name) const {
    const auto it = values.find(name);
    require(it != values.end(), "ParamValues: missing tensor " + name);
    return it->second;
  }
};

inline ParamValues lift_params(ad::Tape& tape, const ModelParams& params,
                               bool requires_grad) {
  ParamValues out;
  for (const auto& [name, tensor] : params.tensors) {
    out.values.emplace(name, tape.leaf(tensor, requires_grad));
  }
  return out;
}

namespace detail {

inline Tensor uniform_tensor(Rng& rng, std::vector<std::size_t> shape,
                             double scale) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-scale, scale);
  return t;
}

inline void init_linear(ModelParams& params, Rng& rng, const std::string& name,
                        std::size_t out_dim, std::size_t in_dim,
                        bool zero = false) {
  if (zero) {
    params.tensors[name + ".w"] = Tensor{out_dim, in_dim};
    params.tensors[name + ".b"] = Tensor{out_dim};
  } else {
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    params.tensors[name + ".w"] = uniform_tensor(rng, {out_dim, in_dim}, scale);
    params.tensors[name + ".b"] = Tensor{out_dim};
  }
}

}  // namespace detail

/// Fresh parameters. Query centers start on a jittered uniform grid inside
/// the scene box; query features start as small noise; the depth branch's
/// output layer starts at zero so enabling it does not perturb the forward
/// pass at initialization.
inline ModelParams init_params(const ModelConfig& config, const GridSpec& scene,
                               std::uint64_t seed) {
  config.validate();
  Rng rng(mix64(seed, 0x1417ULL));
  ModelParams params;

  const std::size_t n = config.n_queries, c = config.feature_dim;
  Tensor emb{n, 3 + c};
  const auto per_axis = static_cast<std::size_t>(
      std::ceil(std::cbrt(static_cast<double>(n))));
  const Vec3 extent = scene.extent();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t gx = i / (per_axis * per_axis);
    const std::size_t gy = (i / per_axis) % per_axis;
    const std::size_t gz = i % per_axis;
    const std::size_t cell[3] = {gx, gy, gz};
    for (int a = 0; a < 3; ++a) {
      const double step = extent[a] / static_cast<double>(per_axis);
      emb(i, a) = scene.origin[a] +
                  (static_cast<double>(cell[a]) + 0.5 + rng.uniform(-0.4, 0.4)) *
                      step;
    }
    for (std::size_t j = 0; j < c; ++j) {
      emb(i, 3 + j) = rng.uniform(-0.02, 0.02);
    }
  }
  params.tensors["embeddings"] = std::move(emb);

  const auto& enc = config.encoder;
  const std::size_t patch_dim = enc.patch * enc.patch;
  detail::init_linear(params, rng, "encoder.layer0", enc.width, patch_dim);
  for (std::size_t i = 1; i < enc.depth; ++i) {
    detail::init_linear(params, rng, "encoder.layer" + std::to_string(i),
                        enc.width, enc.width);
  }
  detail::init_linear(params, rng, "encoder.out", enc.channels, enc.width);
  detail::init_linear(params, rng, "encoder.proj", config.feat_channels,
                      enc.channels);

  for (std::size_t d = 0; d < config.n_layers(); ++d) {
    const std::string prefix = "decoder.layer" + std::to_string(d);
    const std::size_t r = config.points_per_layer[d];
    detail::init_linear(params, rng, prefix + ".mlp1", c,
                        c + config.feat_channels);
    detail::init_linear(params, rng, prefix + ".mlp2", c, c);
    detail::init_linear(params, rng, prefix + ".reg", r * 3, c);
    detail::init_linear(params, rng, prefix + ".cls", r * config.n_classes, c);
  }
  params.tensors["decoder.boundary"] =
      detail::uniform_tensor(rng, {config.feat_channels}, 0.1);

  if (config.depth_branch_enabled) {
    detail::init_linear(params, rng, "depth.mlp1", config.depth_hidden, 2);
    detail::init_linear(params, rng, "depth.mlp2", c, config.depth_hidden,
                        /*zero=*/true);
    params.tensors["depth.oov"] = Tensor{c};
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward graph.
// ---------------------------------------------------------------------------

/// Config + parameters of one network.
struct Model {
  ModelConfig config;
  ModelParams params;
};

struct TraceValues {
  ad::Value feature_map;  // (fmH*fmW) x feat_channels, post projection
  std::vector<QueryBatchValues> layers;
};

/// Plain-tensor view of a forward pass.
struct ForwardTrace {
  Tensor feature_map;
  std::vector<QueryBatch> layers;
  std::vector<PredictionSet> predictions;  // flattened point sets per layer
};

namespace graphs {

/// Cuts the observation into patches (row s = fm cell, x-major within a
/// row of cells) and normalizes depth to a tame range for the MLP.
inline Tensor patchify(const Tensor& observation, const ModelConfig& config) {
  require(observation.rows() == config.image_height &&
              observation.cols() == config.image_width,
          "patchify: observation size mismatch");
  require(observation.finite(), "patchify: observation must be finite");
  const std::size_t p = config.encoder.patch;
  const std::size_t fw = config.fm_width(), fh = config.fm_height();
  Tensor patches{fw * fh, p * p};
  for (std::size_t cy = 0; cy < fh; ++cy) {
    for (std::size_t cx = 0; cx < fw; ++cx) {
      const std::size_t row = cy * fw + cx;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          patches(row, py * p + px) =
              observation(cy * p + py, cx * p + px) * 0.1;
        }
      }
    }
  }
  return patches;
}

/// Encoder + projection to the shared decoder channel count.
inline ad::Value encode(ad::Tape& tape, const ParamValues& pv,
                        const ModelConfig& config, const Tensor& observation) {
  ad::Value h = tape.constant(patchify(observation, config));
  for (std::size_t i = 0; i < config.encoder.depth; ++i) {
    const std::string prefix = "encoder.layer" + std::to_string(i);
    h = ad::tanh(ad::linear(h, pv.at(prefix + ".w"), pv.at(prefix + ".b")));
  }
  const ad::Value raw =
      ad::linear(h, pv.at("encoder.out.w"), pv.at("encoder.out.b"));
  return ad::linear(raw, pv.at("encoder.proj.w"), pv.at("encoder.proj.b"));
}

/// One decoder layer: project centers, sample image features (boundary
/// feature outside the frustum), optionally add the depth-prior delta,
/// refine the query feature with a two-layer MLP, then emit R_d offsets
/// around the center and per-point logits. The new center is the point mean.
inline QueryBatchValues decode_layer(ad::Tape& tape, const ParamValues& pv,
                                     const ModelConfig& config,
                                     std::size_t layer_idx, ad::Value centers,
                                     ad::Value features, ad::Value feature_map,
                                     const Camera& camera,
                                     const Tensor* depth_prior) {
  require(layer_idx < config.n_layers(), "decode_layer: layer index out of range");
  const std::size_t r = config.points_per_layer[layer_idx];
  const std::size_t n = tape.data(centers).rows();
  const std::string prefix = "decoder.layer" + std::to_string(layer_idx);

  std::vector<char> in_view;
  const ad::Value uvz = ad::project_points(centers, camera, config.image_width,
                                           config.image_height, &in_view);

  if (config.depth_branch_enabled && depth_prior != nullptr) {
    const ad::Value d_q = ad::slice_cols(uvz, 2, 3);
    const ad::Value d_p = ad::sample_image_rows(*depth_prior, uvz, in_view);
    const ad::Value h = ad::tanh(ad::linear(ad::concat_cols(d_q, d_p),
                                            pv.at("depth.mlp1.w"),
                                            pv.at("depth.mlp1.b")));
    ad::Value delta = ad::linear(h, pv.at("depth.mlp2.w"), pv.at("depth.mlp2.b"));
    std::vector<char> out_of_view(in_view.size());
    for (std::size_t i = 0; i < in_view.size(); ++i) {
      out_of_view[i] = in_view[i] ? 0 : 1;
    }
    delta = ad::add_rows_where(delta, pv.at("depth.oov"), out_of_view);
    features = ad::add(features, delta);
  }

  const ad::Value sampled = ad::sample_feature_rows(
      feature_map, uvz, pv.at("decoder.boundary"), in_view, config.image_width,
      config.image_height, config.fm_width(), config.fm_height());

  const ad::Value h = ad::tanh(ad::linear(ad::concat_cols(features, sampled),
                                          pv.at(prefix + ".mlp1.w"),
                                          pv.at(prefix + ".mlp1.b")));
  const ad::Value new_features =
      ad::linear(h, pv.at(prefix + ".mlp2.w"), pv.at(prefix + ".mlp2.b"));

  const ad::Value offsets = ad::reshape(
      ad::linear(new_features, pv.at(prefix + ".reg.w"), pv.at(prefix + ".reg.b")),
      {n * r, 3});
  const ad::Value points = ad::group_broadcast_add(offsets, centers, r);
  const ad::Value new_centers = ad::group_mean_rows(points, r);
  const ad::Value logits = ad::reshape(
      ad::linear(new_features, pv.at(prefix + ".cls.w"), pv.at(prefix + ".cls.b")),
      {n * r, config.n_classes});

  QueryBatchValues out;
  out.centers = new_centers;
  out.features = new_features;
  out.points = points;
  out.logits = logits;
  out.n_queries = n;
  out.points_per_query = r;
  return out;
}

/// Full decode from a feature map; query_override (N x (3+C)) replaces the
/// learned embeddings when given.
inline TraceValues decode(ad::Tape& tape, const ParamValues& pv,
                          const ModelConfig& config, ad::Value feature_map,
                          const Camera& camera, const Tensor* depth_prior,
                          std::optional<ad::Value> query_override = {}) {
  const ad::Value queries =
      query_override ? *query_override : pv.at("embeddings");
  require(tape.data(queries).rows() == config.n_queries &&
              tape.data(queries).cols() == 3 + config.feature_dim,
          "decode: query tensor shape mismatch");
  ad::Value centers = ad::slice_cols(queries, 0, 3);
  ad::Value features = ad::slice_cols(queries, 3, 3 + config.feature_dim);

  TraceValues trace;
  trace.feature_map = feature_map;
  for (std::size_t d = 0; d < config.n_layers(); ++d) {
    const QueryBatchValues layer = decode_layer(
        tape, pv, config, d, centers, features, feature_map, camera, depth_prior);
    centers = layer.centers;
    features = layer.features;
    trace.layers.push_back(layer);
  }
  return trace;
}

inline TraceValues forward(ad::Tape& tape, const ParamValues& pv,
                           const ModelConfig& config, const Tensor& observation,
                           const Camera& camera, const Tensor* depth_prior,
                           std::optional<ad::Value> query_override = {}) {
  const ad::Value feature_map = encode(tape, pv, config, observation);
  return decode(tape, pv, config, feature_map, camera, depth_prior,
                query_override);
}

}  // namespace graphs

// ---------------------------------------------------------------------------
// Plain-tensor entry points (no gradients).
// ---------------------------------------------------------------------------

inline ForwardTrace materialize_trace(const ad::Tape& tape,
                                      const TraceValues& values) {
  ForwardTrace trace;
  trace.feature_map = tape.data(values.feature_map);
  for (const auto& layer : values.layers) {
    QueryBatch batch;
    batch.centers = tape.data(layer.centers);
    batch.features = tape.data(layer.features);
    batch.points = tape.data(layer.points);
    batch.logits = tape.data(layer.logits);
    batch.n_queries = layer.n_queries;
    batch.points_per_query = layer.points_per_query;
    trace.layers.push_back(batch);

    PredictionSet pred;
    pred.positions = tape.data(layer.points);
    pred.logits = tape.data(layer.logits);
    trace.predictions.push_back(std::move(pred));
  }
  return trace;
}

inline Tensor encode(const Tensor& observation, const ModelParams& params,
                     const ModelConfig& config) {
  ad::Tape tape;
  const ParamValues pv = lift_params(tape, params, false);
  return tape.data(graphs::encode(tape, pv, config, observation));
}

inline std::vector<QuerySnapshot> decode_layer(
    const std::vector<QuerySnapshot>& queries, const Tensor& feature_map,
    const Camera& camera, std::size_t layer_idx, const ModelParams& params,
    const ModelConfig& config, const Tensor* depth_prior = nullptr) {
  ad::Tape tape;
  const ParamValues pv = lift_params(tape, params, false);
  const QueryBatch batch = stack_snapshots(queries);
  const QueryBatchValues out = graphs::decode_layer(
      tape, pv, config, layer_idx, tape.constant(batch.centers),
      tape.constant(batch.features), tape.constant(feature_map), camera,
      depth_prior);
  QueryBatch result;
  result.centers = tape.data(out.centers);
  result.features = tape.data(out.features);
  result.points = tape.data(out.points);
  result.logits = tape.data(out.logits);
  result.n_queries = out.n_queries;
  result.points_per_query = out.points_per_query;
  return unstack_snapshots(result);
}

inline ForwardTrace forward(const ModelParams& params, const ModelConfig& config,
                            const Tensor& observation, const Camera& camera,
                            const Tensor* depth_prior = nullptr,
                            const Tensor* query_override = nullptr) {
  ad::Tape tape;
  const ParamValues pv = lift_params(tape, params, false);
  std::optional<ad::Value> override_value;
  if (query_override) override_value = tape.constant(*query_override);
  const TraceValues values = graphs::forward(tape, pv, config, observation,
                                             camera, depth_prior, override_value);
  return materialize_trace(tape, values);
}

/// Decode-only forward with an externally supplied feature map; used to
/// compare decoders independently of the encoders that feed them.
inline ForwardTrace forward_from_features(const ModelParams& params,
                                          const ModelConfig& config,
                                          const Tensor& feature_map,
                                          const Camera& camera,
                                          const Tensor* depth_prior = nullptr,
                                          const Tensor* query_override = nullptr) {
  ad::Tape tape;
  const ParamValues pv = lift_params(tape, params, false);
  std::optional<ad::Value> override_value;
  if (query_override) override_value = tape.constant(*query_override);
  const TraceValues values =
      graphs::decode(tape, pv, config, tape.constant(feature_map), camera,
                     depth_prior, override_value);
  return materialize_trace(tape, values);
}

/// Depth-prior feature delta for a single query center (Eq.-1-style MLP on
/// projected depth and sampled prior depth).
inline Tensor depth_branch(const Vec3& center, const Camera& camera,
                           const Tensor& prior_depth, const ModelParams& params,
                           const ModelConfig& config) {
  require(config.depth_branch_enabled, "depth_branch: branch is disabled");
  ad::Tape tape;
  const ParamValues pv = lift_params(tape, params, false);
  std::vector<char> in_view;
  const ad::Value uvz =
      ad::project_points(tape.constant(Tensor::from_rows({center})), camera,
                         config.image_width, config.image_height, &in_view);
  const ad::Value d_q = ad::slice_cols(uvz, 2, 3);
  const ad::Value d_p = ad::sample_image_rows(prior_depth, uvz, in_view);
  const ad::Value h =
      ad::tanh(ad::linear(ad::concat_cols(d_q, d_p), pv.at("depth.mlp1.w"),
                          pv.at("depth.mlp1.b")));
  ad::Value delta = ad::linear(h, pv.at("depth.mlp2.w"), pv.at("depth.mlp2.b"));
  std::vector<char> out_of_view = {in_view[0] ? char(0) : char(1)};
  delta = ad::add_rows_where(delta, pv.at("depth.oov"), out_of_view);
  Tensor out = tape.data(delta);
  out.shape = {out.size()};
  return out;
}

/// Copies decoder layers, heads, the boundary feature and (when both models
/// have one) the depth branch from teacher to student; query embeddings copy
/// iff copy_query_embeddings. Encoder and projection stay untouched.
inline void teacher_guided_init(ModelParams& student, const ModelParams& teacher,
                                bool copy_query_embeddings = true) {
  for (const auto& [name, tensor] : teacher.tensors) {
    const bool decoder_side = name.rfind("decoder.", 0) == 0;
    const bool depth_side = name.rfind("depth.", 0) == 0;
    if (!decoder_side && !depth_side) continue;
    if (depth_side && !student.has(name)) continue;
    require(student.has(name), "teacher_guided_init: student lacks " + name);
    require(student.at(name).shape == tensor.shape,
            "teacher_guided_init: shape mismatch for " + name);
    student.at(name) = tensor;
  }
  if (copy_query_embeddings) {
    require(student.at("embeddings").shape == teacher.at("embeddings").shape,
            "teacher_guided_init: embedding shape mismatch");
    student.at("embeddings") = teacher.at("embeddings");
  }
}

/// Simulated pre-trained depth model: clean render + Gaussian noise
/// (sigma 0.05 m) + a 2x bilinear downsample/upsample blur. Stands in for
/// an external metric depth estimator at desk scale.
inline Tensor make_depth_prior(const Tensor& clean_depth, std::uint64_t seed,
                               double noise_sigma = 0.05) {
  const std::size_t h = clean_depth.rows(), w = clean_depth.cols();
  Rng rng(mix64(seed, 0xD417ULL));
  Tensor noisy = clean_depth;
  for (auto& v : noisy.data) {
    const double n = rng.normal(0.0, noise_sigma);
    if (v > 0.0) v = std::max(0.0, v + n);
  }
  const std::size_t hw = std::max<std::size_t>(1, w / 2);
  const std::size_t hh = std::max<std::size_t>(1, h / 2);
  Tensor down{hh, hw};
  for (std::size_t y = 0; y < hh; ++y) {
    for (std::size_t x = 0; x < hw; ++x) {
      down(y, x) = 0.25 * (noisy(2 * y, 2 * x) + noisy(2 * y, 2 * x + 1) +
                           noisy(2 * y + 1, 2 * x) + noisy(2 * y + 1, 2 * x + 1));
    }
  }
  Tensor out{h, w};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = (static_cast<double>(x) + 0.5) / 2.0 - 0.5;
      const double gy = (static_cast<double>(y) + 0.5) / 2.0 - 0.5;
      const auto cell = ad::detail::locate_bilinear(gx, gy, hw, hh);
      const std::size_t x1 = cell.x0 + (hw >= 2 ? 1 : 0);
      const std::size_t y1 = cell.y0 + (hh >= 2 ? 1 : 0);
      out(y, x) = (1 - cell.ty) * ((1 - cell.tx) * down(cell.y0, cell.x0) +
                                   cell.tx * down(cell.y0, x1)) +
                  cell.ty * ((1 - cell.tx) * down(y1, cell.x0) +
                             cell.tx * down(y1, x1));
    }
  }
  return out;
}

}  // namespace discene
