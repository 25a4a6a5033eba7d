#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "discene/common.hpp"
#include "discene/geometry.hpp"
#include "discene/matching.hpp"

namespace discene::ad {

class Tape;

/// Handle to a node on a Tape.
struct Value {
  Tape* tape = nullptr;
  std::size_t idx = 0;
  bool valid() const { return tape != nullptr; }
};

/// Minimal reverse-mode tape over dense double tensors. Nodes record their
/// forward result plus a backward closure; gradients propagate only through
/// nodes that depend on a differentiable leaf, so constant subgraphs (e.g.
/// everything teacher-side) cost a forward pass and nothing else.
///
/// A tape is single-shot: build a graph, call backward() once on a scalar
/// root, read gradients off the leaves.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value leaf(Tensor t, bool requires_grad = true) {
    return push(std::move(t), requires_grad, nullptr);
  }
  Value constant(Tensor t) { return leaf(std::move(t), false); }

  const Tensor& data(Value v) const { return nodes_[v.idx].data; }
  const Tensor& data_at(std::size_t idx) const { return nodes_[idx].data; }
  Tensor& grad(Value v) { return nodes_[v.idx].grad; }
  const Tensor& grad_at(std::size_t idx) const { return nodes_[idx].grad; }
  Tensor& grad_mut(std::size_t idx) { return nodes_[idx].grad; }
  bool requires_grad(Value v) const { return nodes_[v.idx].requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  void backward(Value root) {
    require(data(root).size() == 1, "backward: root must be scalar");
    require(nodes_[root.idx].requires_grad,
            "backward: root does not depend on any differentiable leaf");
    nodes_[root.idx].grad.data[0] = 1.0;
    for (std::size_t i = root.idx + 1; i-- > 0;) {
      if (nodes_[i].requires_grad && nodes_[i].backward) {
        nodes_[i].backward();
      }
    }
  }

  Value push(Tensor data, bool requires_grad, std::function<void()> backward) {
    Node node;
    node.data = std::move(data);
    node.requires_grad = requires_grad;
    node.backward = std::move(backward);
    if (requires_grad) node.grad = Tensor(node.data.shape);
    nodes_.push_back(std::move(node));
    return Value{this, nodes_.size() - 1};
  }

 private:
  struct Node {
    Tensor data;
    Tensor grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

inline Tape* tape_of(Value a) {
  require(a.valid(), "ad: invalid value");
  return a.tape;
}

inline Tape* tape_of(Value a, Value b) {
  require(a.valid() && b.valid() && a.tape == b.tape,
          "ad: values from different tapes");
  return a.tape;
}

inline void axpy(Tensor& dst, double s, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += s * src.data[i];
}

}  // namespace detail

inline Value add(Value a, Value b) {
  Tape* t = detail::tape_of(a, b);
  require(t->data(a).same_shape(t->data(b)), "add: shape mismatch");
  Tensor out = t->data(a);
  detail::axpy(out, 1.0, t->data(b));
  const bool rg = t->requires_grad(a) || t->requires_grad(b);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, b, oi] {
      const Tensor& g = t->grad_at(oi);
      if (t->requires_grad(a)) detail::axpy(t->grad(a), 1.0, g);
      if (t->requires_grad(b)) detail::axpy(t->grad(b), 1.0, g);
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

inline Value sub(Value a, Value b) {
  Tape* t = detail::tape_of(a, b);
  require(t->data(a).same_shape(t->data(b)), "sub: shape mismatch");
  Tensor out = t->data(a);
  detail::axpy(out, -1.0, t->data(b));
  const bool rg = t->requires_grad(a) || t->requires_grad(b);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, b, oi] {
      const Tensor& g = t->grad_at(oi);
      if (t->requires_grad(a)) detail::axpy(t->grad(a), 1.0, g);
      if (t->requires_grad(b)) detail::axpy(t->grad(b), -1.0, g);
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

inline Value scale(Value a, double s) {
  Tape* t = detail::tape_of(a);
  Tensor out = t->data(a);
  for (double& v : out.data) v *= s;
  const bool rg = t->requires_grad(a);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, s, oi] { detail::axpy(t->grad(a), s, t->grad_at(oi)); };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

inline Value mul(Value a, Value b) {
  Tape* t = detail::tape_of(a, b);
  require(t->data(a).same_shape(t->data(b)), "mul: shape mismatch");
  Tensor out = t->data(a);
  const Tensor& db = t->data(b);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= db.data[i];
  const bool rg = t->requires_grad(a) || t->requires_grad(b);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, b, oi] {
      const Tensor& g = t->grad_at(oi);
      if (t->requires_grad(a)) {
        Tensor& ga = t->grad(a);
        const Tensor& db2 = t->data(b);
        for (std::size_t i = 0; i < ga.size(); ++i) {
          ga.data[i] += g.data[i] * db2.data[i];
        }
      }
      if (t->requires_grad(b)) {
        Tensor& gb = t->grad(b);
        const Tensor& da = t->data(a);
        for (std::size_t i = 0; i < gb.size(); ++i) {
          gb.data[i] += g.data[i] * da.data[i];
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

inline Value tanh(Value a) {
  Tape* t = detail::tape_of(a);
  Tensor out = t->data(a);
  for (double& v : out.data) v = std::tanh(v);
  const bool rg = t->requires_grad(a);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, oi] {
      const Tensor& g = t->grad_at(oi);
      const Tensor& y = t->data_at(oi);
      Tensor& ga = t->grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// y = x * W^T + b with x: n x in, W: out x in, b: out.
inline Value linear(Value x, Value w, Value b) {
  Tape* t = detail::tape_of(x, w);
  require(b.valid() && b.tape == t, "linear: bias from different tape");
  const Tensor& dx = t->data(x);
  const Tensor& dw = t->data(w);
  const Tensor& db = t->data(b);
  const std::size_t n = dx.rows(), in = dx.cols(), out_dim = dw.rows();
  require(dw.cols() == in, "linear: weight/input dim mismatch");
  require(db.size() == out_dim, "linear: bias dim mismatch");
  Tensor out{n, out_dim};
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = &dx.data[i * in];
    double* oi = &out.data[i * out_dim];
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wo = &dw.data[o * in];
      double acc = db.data[o];
      for (std::size_t k = 0; k < in; ++k) acc += xi[k] * wo[k];
      oi[o] = acc;
    }
  }
  const bool rg =
      t->requires_grad(x) || t->requires_grad(w) || t->requires_grad(b);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi_idx = t->node_count();
    bw = [t, x, w, b, n, in, out_dim, oi_idx] {
      const Tensor& g = t->grad_at(oi_idx);
      if (t->requires_grad(x)) {
        Tensor& gx = t->grad(x);
        const Tensor& dw2 = t->data(w);
        for (std::size_t i = 0; i < n; ++i) {
          double* gxi = &gx.data[i * in];
          const double* gi = &g.data[i * out_dim];
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double* wo = &dw2.data[o * in];
            const double go = gi[o];
            for (std::size_t k = 0; k < in; ++k) gxi[k] += go * wo[k];
          }
        }
      }
      if (t->requires_grad(w)) {
        Tensor& gw = t->grad(w);
        const Tensor& dx2 = t->data(x);
        for (std::size_t i = 0; i < n; ++i) {
          const double* xi = &dx2.data[i * in];
          const double* gi = &g.data[i * out_dim];
          for (std::size_t o = 0; o < out_dim; ++o) {
            double* gwo = &gw.data[o * in];
            const double go = gi[o];
            for (std::size_t k = 0; k < in; ++k) gwo[k] += go * xi[k];
          }
        }
      }
      if (t->requires_grad(b)) {
        Tensor& gb = t->grad(b);
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = &g.data[i * out_dim];
          for (std::size_t o = 0; o < out_dim; ++o) gb.data[o] += gi[o];
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// Per-row L2 normalization, y_i = x_i / sqrt(|x_i|^2 + eps^2).
inline Value l2_normalize_rows(Value x, double eps = 1e-12) {
  Tape* t = detail::tape_of(x);
  const Tensor& dx = t->data(x);
  const std::size_t n = dx.rows(), k = dx.cols();
  Tensor out = dx;
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += dx(i, j) * dx(i, j);
    norms[i] = std::sqrt(s + eps * eps);
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= norms[i];
  }
  const bool rg = t->requires_grad(x);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, x, norms = std::move(norms), n, k, oi] {
      const Tensor& g = t->grad_at(oi);
      const Tensor& dx2 = t->data(x);
      Tensor& gx = t->grad(x);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = norms[i];
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += g(i, j) * dx2(i, j);
        for (std::size_t j = 0; j < k; ++j) {
          gx(i, j) += g(i, j) / r - dx2(i, j) * dot / (r * r * r);
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// Mean squared error over all elements.
inline Value mse(Value a, Value b) {
  Tape* t = detail::tape_of(a, b);
  require(t->data(a).same_shape(t->data(b)), "mse: shape mismatch");
  const Tensor& da = t->data(a);
  const Tensor& db = t->data(b);
  const double m = static_cast<double>(da.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = da.data[i] - db.data[i];
    acc += d * d;
  }
  const bool rg = t->requires_grad(a) || t->requires_grad(b);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, b, m, oi] {
      const double g = t->grad_at(oi).data[0];
      const Tensor& da2 = t->data(a);
      const Tensor& db2 = t->data(b);
      if (t->requires_grad(a)) {
        Tensor& ga = t->grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) {
          ga.data[i] += g * 2.0 * (da2.data[i] - db2.data[i]) / m;
        }
      }
      if (t->requires_grad(b)) {
        Tensor& gb = t->grad(b);
        for (std::size_t i = 0; i < gb.size(); ++i) {
          gb.data[i] -= g * 2.0 * (da2.data[i] - db2.data[i]) / m;
        }
      }
    };
  }
  return t->push(Tensor::scalar(acc / m), rg, std::move(bw));
}

/// Sum of absolute differences over all elements (subgradient 0 at ties).
inline Value l1_sum(Value a, Value b) {
  Tape* t = detail::tape_of(a, b);
  require(t->data(a).same_shape(t->data(b)), "l1_sum: shape mismatch");
  const Tensor& da = t->data(a);
  const Tensor& db = t->data(b);
  double acc = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    acc += std::abs(da.data[i] - db.data[i]);
  }
  const bool rg = t->requires_grad(a) || t->requires_grad(b);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, b, oi] {
      const double g = t->grad_at(oi).data[0];
      const Tensor& da2 = t->data(a);
      const Tensor& db2 = t->data(b);
      for (std::size_t i = 0; i < da2.size(); ++i) {
        const double d = da2.data[i] - db2.data[i];
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (t->requires_grad(a)) t->grad(a).data[i] += g * s;
        if (t->requires_grad(b)) t->grad(b).data[i] -= g * s;
      }
    };
  }
  return t->push(Tensor::scalar(acc), rg, std::move(bw));
}

namespace detail {
inline void log_softmax_row(const double* z, std::size_t k, double* out) {
  double mx = z[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
  double denom = 0.0;
  for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - mx);
  const double lse = mx + std::log(denom);
  for (std::size_t j = 0; j < k; ++j) out[j] = z[j] - lse;
}
}  // namespace detail

/// Sum over rows of D_KL(softmax(teacher_row) || softmax(student_row)).
/// Gradients flow to the student only; the teacher side is a target.
inline Value kl_rows_sum(Value teacher, Value student) {
  Tape* t = detail::tape_of(teacher, student);
  require(t->data(teacher).same_shape(t->data(student)),
          "kl_rows_sum: shape mismatch");
  require(!t->requires_grad(teacher),
          "kl_rows_sum: teacher side must be constant");
  const Tensor& dt = t->data(teacher);
  const Tensor& ds = t->data(student);
  const std::size_t n = dt.rows(), k = dt.cols();
  double acc = 0.0;
  std::vector<double> lq(k), lp(k);
  for (std::size_t i = 0; i < n; ++i) {
    detail::log_softmax_row(&dt.data[i * k], k, lq.data());
    detail::log_softmax_row(&ds.data[i * k], k, lp.data());
    for (std::size_t j = 0; j < k; ++j) {
      acc += std::exp(lq[j]) * (lq[j] - lp[j]);
    }
  }
  const bool rg = t->requires_grad(student);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, teacher, student, n, k, oi] {
      const double g = t->grad_at(oi).data[0];
      const Tensor& dt2 = t->data(teacher);
      const Tensor& ds2 = t->data(student);
      Tensor& gs = t->grad(student);
      std::vector<double> lq(k), lp(k);
      for (std::size_t i = 0; i < n; ++i) {
        detail::log_softmax_row(&dt2.data[i * k], k, lq.data());
        detail::log_softmax_row(&ds2.data[i * k], k, lp.data());
        for (std::size_t j = 0; j < k; ++j) {
          gs.data[i * k + j] += g * (std::exp(lp[j]) - std::exp(lq[j]));
        }
      }
    };
  }
  return t->push(Tensor::scalar(acc), rg, std::move(bw));
}

/// Mean over rows of -alpha * (1 - p_t)^gamma * log(p_t).
inline Value focal_mean(Value logits, std::vector<std::size_t> targets,
                        double alpha, double gamma) {
  Tape* t = detail::tape_of(logits);
  const Tensor& dz = t->data(logits);
  const std::size_t n = dz.rows(), k = dz.cols();
  require(targets.size() == n, "focal_mean: target count mismatch");
  for (const std::size_t c : targets) {
    require(c < k, "focal_mean: target class out of range");
  }
  std::vector<double> lp(k);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    detail::log_softmax_row(&dz.data[i * k], k, lp.data());
    const double log_pt = lp[targets[i]];
    const double pt = std::exp(log_pt);
    acc += -alpha * std::pow(1.0 - pt, gamma) * log_pt;
  }
  acc /= static_cast<double>(n);
  const bool rg = t->requires_grad(logits);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, logits, targets = std::move(targets), alpha, gamma, n, k, oi] {
      const double g = t->grad_at(oi).data[0] / static_cast<double>(n);
      const Tensor& dz2 = t->data(logits);
      Tensor& gz = t->grad(logits);
      std::vector<double> lp(k);
      for (std::size_t i = 0; i < n; ++i) {
        detail::log_softmax_row(&dz2.data[i * k], k, lp.data());
        const std::size_t target = targets[i];
        const double pt = std::max(std::exp(lp[target]), 1e-300);
        const double om = 1.0 - pt;
        // dL/dp_t, then chain through softmax: dp_t/dz_j = p_t(delta - p_j).
        double dldp = -alpha * std::pow(om, gamma) / pt;
        if (gamma > 0.0 && om > 0.0) {
          dldp += alpha * gamma * std::pow(om, gamma - 1.0) * lp[target];
        }
        for (std::size_t j = 0; j < k; ++j) {
          const double delta = (j == target) ? 1.0 : 0.0;
          gz.data[i * k + j] += g * dldp * pt * (delta - std::exp(lp[j]));
        }
      }
    };
  }
  return t->push(Tensor::scalar(acc), rg, std::move(bw));
}

/// Symmetric Chamfer distance with squared Euclidean distances and mean
/// reduction per direction, against a constant target set. The nearest
/// neighbor selections are fixed at forward time; gradients flow to pred
/// through both directions. Selected indices are exposed for stability
/// checks by finite-difference harnesses.
inline Value chamfer(Value pred, const Tensor& gt,
                     std::vector<std::size_t>* pred_to_gt = nullptr,
                     std::vector<std::size_t>* gt_to_pred = nullptr) {
  Tape* t = detail::tape_of(pred);
  const Tensor& dp = t->data(pred);
  const std::size_t n = dp.rows(), m = gt.rows();
  require(n >= 1 && m >= 1, "chamfer: point sets must be non-empty");
  require(dp.cols() == 3 && gt.cols() == 3, "chamfer: points must be n x 3");
  std::vector<Vec3> pv(n), gv(m);
  for (std::size_t i = 0; i < n; ++i) pv[i] = dp.row3(i);
  for (std::size_t j = 0; j < m; ++j) gv[j] = gt.row3(j);
  std::vector<std::size_t> a_idx = nearest_indices(pv, gv);
  std::vector<std::size_t> b_idx = nearest_indices(gv, pv);
  double fwd = 0.0, bwd_term = 0.0;
  for (std::size_t i = 0; i < n; ++i) fwd += squared_dist(pv[i], gv[a_idx[i]]);
  for (std::size_t j = 0; j < m; ++j) {
    bwd_term += squared_dist(gv[j], pv[b_idx[j]]);
  }
  const double value =
      fwd / static_cast<double>(n) + bwd_term / static_cast<double>(m);
  if (pred_to_gt) *pred_to_gt = a_idx;
  if (gt_to_pred) *gt_to_pred = b_idx;
  const bool rg = t->requires_grad(pred);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, pred, gt, a_idx = std::move(a_idx), b_idx = std::move(b_idx), n, m,
          oi] {
      const double g = t->grad_at(oi).data[0];
      const Tensor& dp2 = t->data(pred);
      Tensor& gp = t->grad(pred);
      const double cn = 2.0 * g / static_cast<double>(n);
      const double cm = 2.0 * g / static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        const Vec3 diff = dp2.row3(i) - gt.row3(a_idx[i]);
        gp(i, 0) += cn * diff.x;
        gp(i, 1) += cn * diff.y;
        gp(i, 2) += cn * diff.z;
      }
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t i = b_idx[j];
        const Vec3 diff = dp2.row3(i) - gt.row3(j);
        gp(i, 0) += cm * diff.x;
        gp(i, 1) += cm * diff.y;
        gp(i, 2) += cm * diff.z;
      }
    };
  }
  return t->push(Tensor::scalar(value), rg, std::move(bw));
}

inline Value reshape(Value x, std::vector<std::size_t> shape) {
  Tape* t = detail::tape_of(x);
  require(Tensor::numel(shape) == t->data(x).size(), "reshape: numel mismatch");
  Tensor out = t->data(x);
  out.shape = std::move(shape);
  const bool rg = t->requires_grad(x);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, x, oi] { detail::axpy(t->grad(x), 1.0, t->grad_at(oi)); };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

inline Value concat_cols(Value a, Value b) {
  Tape* t = detail::tape_of(a, b);
  const Tensor& da = t->data(a);
  const Tensor& db = t->data(b);
  require(da.rows() == db.rows(), "concat_cols: row count mismatch");
  const std::size_t n = da.rows(), ka = da.cols(), kb = db.cols();
  Tensor out{n, ka + kb};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ka; ++j) out(i, j) = da(i, j);
    for (std::size_t j = 0; j < kb; ++j) out(i, ka + j) = db(i, j);
  }
  const bool rg = t->requires_grad(a) || t->requires_grad(b);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, a, b, n, ka, kb, oi] {
      const Tensor& g = t->grad_at(oi);
      for (std::size_t i = 0; i < n; ++i) {
        if (t->requires_grad(a)) {
          for (std::size_t j = 0; j < ka; ++j) t->grad(a)(i, j) += g(i, j);
        }
        if (t->requires_grad(b)) {
          for (std::size_t j = 0; j < kb; ++j) t->grad(b)(i, j) += g(i, ka + j);
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

inline Value slice_cols(Value x, std::size_t j0, std::size_t j1) {
  Tape* t = detail::tape_of(x);
  const Tensor& dx = t->data(x);
  require(j0 < j1 && j1 <= dx.cols(), "slice_cols: bad column range");
  const std::size_t n = dx.rows(), k = j1 - j0;
  Tensor out{n, k};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out(i, j) = dx(i, j0 + j);
  }
  const bool rg = t->requires_grad(x);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, x, j0, n, k, oi] {
      const Tensor& g = t->grad_at(oi);
      Tensor& gx = t->grad(x);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) gx(i, j0 + j) += g(i, j);
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// Mean over groups of consecutive rows: (N*R) x k -> N x k.
inline Value group_mean_rows(Value x, std::size_t group) {
  Tape* t = detail::tape_of(x);
  const Tensor& dx = t->data(x);
  require(group >= 1 && dx.rows() % group == 0, "group_mean_rows: bad group");
  const std::size_t n = dx.rows() / group, k = dx.cols();
  Tensor out{n, k};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < group; ++r) {
      for (std::size_t j = 0; j < k; ++j) out(i, j) += dx(i * group + r, j);
    }
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= static_cast<double>(group);
  }
  const bool rg = t->requires_grad(x);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, x, group, n, k, oi] {
      const Tensor& g = t->grad_at(oi);
      Tensor& gx = t->grad(x);
      const double inv = 1.0 / static_cast<double>(group);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t r = 0; r < group; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            gx(i * group + r, j) += g(i, j) * inv;
          }
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// out[i*group + r] = x[i*group + r] + base[i]; broadcasts each base row
/// over its group of consecutive rows.
inline Value group_broadcast_add(Value x, Value base, std::size_t group) {
  Tape* t = detail::tape_of(x, base);
  const Tensor& dx = t->data(x);
  const Tensor& db = t->data(base);
  require(group >= 1 && dx.rows() == db.rows() * group && dx.cols() == db.cols(),
          "group_broadcast_add: shape mismatch");
  const std::size_t n = db.rows(), k = db.cols();
  Tensor out = dx;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < group; ++r) {
      for (std::size_t j = 0; j < k; ++j) out(i * group + r, j) += db(i, j);
    }
  }
  const bool rg = t->requires_grad(x) || t->requires_grad(base);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, x, base, group, n, k, oi] {
      const Tensor& g = t->grad_at(oi);
      if (t->requires_grad(x)) detail::axpy(t->grad(x), 1.0, g);
      if (t->requires_grad(base)) {
        Tensor& gb = t->grad(base);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t r = 0; r < group; ++r) {
            for (std::size_t j = 0; j < k; ++j) {
              gb(i, j) += g(i * group + r, j);
            }
          }
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// Weighted sum of scalar values. An empty list yields a constant 0.
inline Value weighted_sum(Tape& tape,
                          const std::vector<std::pair<double, Value>>& items) {
  double acc = 0.0;
  bool rg = false;
  for (const auto& [c, v] : items) {
    require(v.tape == &tape, "weighted_sum: value from different tape");
    require(tape.data(v).size() == 1, "weighted_sum: values must be scalar");
    acc += c * tape.data(v).data[0];
    rg = rg || tape.requires_grad(v);
  }
  std::function<void()> bw;
  if (rg) {
    Tape* t = &tape;
    const std::size_t oi = tape.node_count();
    bw = [t, items, oi] {
      const double g = t->grad_at(oi).data[0];
      for (const auto& [c, v] : items) {
        if (t->requires_grad(v)) t->grad(v).data[0] += g * c;
      }
    };
  }
  return tape.push(Tensor::scalar(acc), rg, std::move(bw));
}

constexpr double kMinCameraDepth = 1e-3;

/// Pinhole projection of world-space centers: rows (u, v, z). Rows behind
/// the camera or outside the image are flagged false in *in_view and emit
/// (0, 0, z). The view mask is a fixed selection, not differentiated.
inline Value project_points(Value centers, const Camera& cam, std::size_t img_w,
                            std::size_t img_h, std::vector<char>* in_view) {
  Tape* t = detail::tape_of(centers);
  const Tensor& dc = t->data(centers);
  require(dc.cols() == 3, "project_points: centers must be N x 3");
  const std::size_t n = dc.rows();
  Tensor out{n, 3};
  std::vector<char> mask(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 c = cam.world_to_camera(dc.row3(i));
    out(i, 2) = c.z;
    if (c.z > kMinCameraDepth) {
      const double u = cam.fx * c.x / c.z + cam.cx;
      const double v = cam.fy * c.y / c.z + cam.cy;
      if (u >= 0.0 && u < static_cast<double>(img_w) && v >= 0.0 &&
          v < static_cast<double>(img_h)) {
        out(i, 0) = u;
        out(i, 1) = v;
        mask[i] = 1;
      }
    }
  }
  if (in_view) *in_view = mask;
  const bool rg = t->requires_grad(centers);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, centers, cam, mask = std::move(mask), n, oi] {
      const Tensor& g = t->grad_at(oi);
      const Tensor& dc2 = t->data(centers);
      Tensor& gc = t->grad(centers);
      const double* r = cam.rotation.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double gz = g(i, 2);
        // z = third camera coordinate; dz/dp is the third camera axis.
        gc(i, 0) += gz * r[2];
        gc(i, 1) += gz * r[5];
        gc(i, 2) += gz * r[8];
        if (!mask[i]) continue;
        const Vec3 c = cam.world_to_camera(dc2.row3(i));
        const double gu = g(i, 0), gv = g(i, 1);
        const double inv_z = 1.0 / c.z;
        const double du_dx = cam.fx * inv_z, du_dz = -cam.fx * c.x * inv_z * inv_z;
        const double dv_dy = cam.fy * inv_z, dv_dz = -cam.fy * c.y * inv_z * inv_z;
        // Chain through the camera axes (columns of the c2w rotation).
        const double dcam_x[3] = {r[0], r[3], r[6]};
        const double dcam_y[3] = {r[1], r[4], r[7]};
        const double dcam_z[3] = {r[2], r[5], r[8]};
        for (int a = 0; a < 3; ++a) {
          gc(i, a) += gu * (du_dx * dcam_x[a] + du_dz * dcam_z[a]);
          gc(i, a) += gv * (dv_dy * dcam_y[a] + dv_dz * dcam_z[a]);
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

namespace detail {

struct BilinearCell {
  std::size_t x0 = 0, y0 = 0;
  double tx = 0.0, ty = 0.0;
  bool grad_x = false, grad_y = false;  // false when clamped at the border
};

/// Locates grid coords (gx, gy) in a wxh lattice with border clamping.
inline BilinearCell locate_bilinear(double gx, double gy, std::size_t w,
                                    std::size_t h) {
  BilinearCell cell;
  if (w >= 2) {
    double fx = std::floor(gx);
    fx = std::clamp(fx, 0.0, static_cast<double>(w) - 2.0);
    cell.x0 = static_cast<std::size_t>(fx);
    const double tx = gx - fx;
    cell.grad_x = tx > 0.0 && tx < 1.0;
    cell.tx = std::clamp(tx, 0.0, 1.0);
  }
  if (h >= 2) {
    double fy = std::floor(gy);
    fy = std::clamp(fy, 0.0, static_cast<double>(h) - 2.0);
    cell.y0 = static_cast<std::size_t>(fy);
    const double ty = gy - fy;
    cell.grad_y = ty > 0.0 && ty < 1.0;
    cell.ty = std::clamp(ty, 0.0, 1.0);
  }
  return cell;
}

}  // namespace detail

/// Bilinearly samples a (fh*fw) x C feature map at projected pixel
/// coordinates. In-view rows sample the lattice (cell centers aligned to
/// pixel-block centers); out-of-view rows return the learned boundary
/// feature instead.
inline Value sample_feature_rows(Value featmap, Value uvz, Value boundary,
                                 const std::vector<char>& in_view,
                                 std::size_t img_w, std::size_t img_h,
                                 std::size_t fw, std::size_t fh) {
  Tape* t = detail::tape_of(featmap, uvz);
  require(boundary.valid() && boundary.tape == t,
          "sample_feature_rows: boundary from different tape");
  const Tensor& fm = t->data(featmap);
  const Tensor& duvz = t->data(uvz);
  const std::size_t n = duvz.rows(), c = fm.cols();
  require(fm.rows() == fw * fh, "sample_feature_rows: feature map shape");
  require(t->data(boundary).size() == c, "sample_feature_rows: boundary dim");
  require(in_view.size() == n, "sample_feature_rows: mask size");
  const double sx = static_cast<double>(fw) / static_cast<double>(img_w);
  const double sy = static_cast<double>(fh) / static_cast<double>(img_h);
  std::vector<detail::BilinearCell> cells(n);
  Tensor out{n, c};
  const Tensor& bnd = t->data(boundary);
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_view[i]) {
      for (std::size_t j = 0; j < c; ++j) out(i, j) = bnd.data[j];
      continue;
    }
    const double gx = duvz(i, 0) * sx - 0.5;
    const double gy = duvz(i, 1) * sy - 0.5;
    const auto cell = detail::locate_bilinear(gx, gy, fw, fh);
    cells[i] = cell;
    const std::size_t r00 = cell.y0 * fw + cell.x0;
    const std::size_t r01 = r00 + (fw >= 2 ? 1 : 0);
    const std::size_t r10 = r00 + (fh >= 2 ? fw : 0);
    const std::size_t r11 = r10 + (fw >= 2 ? 1 : 0);
    const double w00 = (1 - cell.ty) * (1 - cell.tx), w01 = (1 - cell.ty) * cell.tx;
    const double w10 = cell.ty * (1 - cell.tx), w11 = cell.ty * cell.tx;
    for (std::size_t j = 0; j < c; ++j) {
      out(i, j) = w00 * fm(r00, j) + w01 * fm(r01, j) + w10 * fm(r10, j) +
                  w11 * fm(r11, j);
    }
  }
  const bool rg = t->requires_grad(featmap) || t->requires_grad(uvz) ||
                  t->requires_grad(boundary);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, featmap, uvz, boundary, in_view, cells = std::move(cells), n, c,
          fw, fh, sx, sy, oi] {
      const Tensor& g = t->grad_at(oi);
      const Tensor& fm2 = t->data(featmap);
      for (std::size_t i = 0; i < n; ++i) {
        if (!in_view[i]) {
          if (t->requires_grad(boundary)) {
            Tensor& gb = t->grad(boundary);
            for (std::size_t j = 0; j < c; ++j) gb.data[j] += g(i, j);
          }
          continue;
        }
        const auto& cell = cells[i];
        const std::size_t r00 = cell.y0 * fw + cell.x0;
        const std::size_t r01 = r00 + (fw >= 2 ? 1 : 0);
        const std::size_t r10 = r00 + (fh >= 2 ? fw : 0);
        const std::size_t r11 = r10 + (fw >= 2 ? 1 : 0);
        const double w00 = (1 - cell.ty) * (1 - cell.tx);
        const double w01 = (1 - cell.ty) * cell.tx;
        const double w10 = cell.ty * (1 - cell.tx), w11 = cell.ty * cell.tx;
        if (t->requires_grad(featmap)) {
          Tensor& gf = t->grad(featmap);
          for (std::size_t j = 0; j < c; ++j) {
            const double gij = g(i, j);
            gf(r00, j) += w00 * gij;
            gf(r01, j) += w01 * gij;
            gf(r10, j) += w10 * gij;
            gf(r11, j) += w11 * gij;
          }
        }
        if (t->requires_grad(uvz)) {
          Tensor& gu = t->grad(uvz);
          double dtx = 0.0, dty = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double gij = g(i, j);
            dtx += gij * ((1 - cell.ty) * (fm2(r01, j) - fm2(r00, j)) +
                          cell.ty * (fm2(r11, j) - fm2(r10, j)));
            dty += gij * ((1 - cell.tx) * (fm2(r10, j) - fm2(r00, j)) +
                          cell.tx * (fm2(r11, j) - fm2(r01, j)));
          }
          if (cell.grad_x) gu(i, 0) += dtx * sx;
          if (cell.grad_y) gu(i, 1) += dty * sy;
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// Bilinearly samples a constant H x W image at pixel coordinates (u, v)
/// taken from uvz rows; pixel (x, y) is centered at (x+0.5, y+0.5).
/// Out-of-view rows yield 0.
inline Value sample_image_rows(const Tensor& image, Value uvz,
                               const std::vector<char>& in_view) {
  Tape* t = detail::tape_of(uvz);
  const std::size_t h = image.rows(), w = image.cols();
  const Tensor& duvz = t->data(uvz);
  const std::size_t n = duvz.rows();
  require(in_view.size() == n, "sample_image_rows: mask size");
  Tensor out{n, 1};
  std::vector<detail::BilinearCell> cells(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_view[i]) continue;
    const auto cell =
        detail::locate_bilinear(duvz(i, 0) - 0.5, duvz(i, 1) - 0.5, w, h);
    cells[i] = cell;
    const std::size_t x1 = cell.x0 + (w >= 2 ? 1 : 0);
    const std::size_t y1 = cell.y0 + (h >= 2 ? 1 : 0);
    out(i, 0) = (1 - cell.ty) * ((1 - cell.tx) * image(cell.y0, cell.x0) +
                                 cell.tx * image(cell.y0, x1)) +
                cell.ty * ((1 - cell.tx) * image(y1, cell.x0) +
                           cell.tx * image(y1, x1));
  }
  const bool rg = t->requires_grad(uvz);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, uvz, image, in_view, cells = std::move(cells), n, w, h, oi] {
      const Tensor& g = t->grad_at(oi);
      Tensor& gu = t->grad(uvz);
      for (std::size_t i = 0; i < n; ++i) {
        if (!in_view[i]) continue;
        const auto& cell = cells[i];
        const std::size_t x1 = cell.x0 + (w >= 2 ? 1 : 0);
        const std::size_t y1 = cell.y0 + (h >= 2 ? 1 : 0);
        const double gi = g(i, 0);
        const double dtx =
            (1 - cell.ty) * (image(cell.y0, x1) - image(cell.y0, cell.x0)) +
            cell.ty * (image(y1, x1) - image(y1, cell.x0));
        const double dty =
            (1 - cell.tx) * (image(y1, cell.x0) - image(cell.y0, cell.x0)) +
            cell.tx * (image(y1, x1) - image(cell.y0, x1));
        if (cell.grad_x) gu(i, 0) += gi * dtx;
        if (cell.grad_y) gu(i, 1) += gi * dty;
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

/// Adds a bias row vector to the rows selected by the mask.
inline Value add_rows_where(Value x, Value bias, const std::vector<char>& mask) {
  Tape* t = detail::tape_of(x, bias);
  const Tensor& dx = t->data(x);
  const Tensor& db = t->data(bias);
  const std::size_t n = dx.rows(), k = dx.cols();
  require(db.size() == k, "add_rows_where: bias dim mismatch");
  require(mask.size() == n, "add_rows_where: mask size mismatch");
  Tensor out = dx;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < k; ++j) out(i, j) += db.data[j];
  }
  const bool rg = t->requires_grad(x) || t->requires_grad(bias);
  std::function<void()> bw;
  if (rg) {
    const std::size_t oi = t->node_count();
    bw = [t, x, bias, mask, n, k, oi] {
      const Tensor& g = t->grad_at(oi);
      if (t->requires_grad(x)) detail::axpy(t->grad(x), 1.0, g);
      if (t->requires_grad(bias)) {
        Tensor& gb = t->grad(bias);
        for (std::size_t i = 0; i < n; ++i) {
          if (!mask[i]) continue;
          for (std::size_t j = 0; j < k; ++j) gb.data[j] += g(i, j);
        }
      }
    };
  }
  return t->push(std::move(out), rg, std::move(bw));
}

}  // namespace discene::ad
