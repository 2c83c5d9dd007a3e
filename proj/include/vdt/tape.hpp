#pragma once

// Reverse-mode differentiation over DenseArray values.
//
// A Tape records every operation applied to its variables in execution order,
// so node indices are already a topological order: backward() walks them from
// the loss down to index 0 and visits each node once. A Tape constructed with
// record_gradients=false keeps forward values only (inference / benchmarking).

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vdt/dense_array.hpp"
#include "vdt/kernels.hpp"

namespace vdt {

template <typename T>
class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const DenseArray<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Array = DenseArray<T>;
  // Called during backward with the node's accumulated output gradient; must
  // add its contribution into the input gradients via grad_slot().
  using BackwardRule = std::function<void(Tape&, const Array&)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Trainable leaf. The array is referenced, not copied, and must outlive the tape.
  Var<T> parameter(const Array& value) {
    value.require_finite("parameter");
    Node node;
    node.op = "parameter";
    node.external = &value;
    node.needs_grad = recording_;
    return push(std::move(node));
  }

  // Non-trainable leaf (inputs, labels encoded as arrays, ...).
  Var<T> constant(Array value) {
    value.require_finite("constant");
    Node node;
    node.op = "constant";
    node.owned = std::move(value);
    return push(std::move(node));
  }

  // Appends the result of an operation. The value is checked for NaN/Inf here,
  // which is the single boundary every op passes through.
  Var<T> record(std::string op, Array value, std::initializer_list<Var<T>> inputs, BackwardRule rule) {
    value.require_finite(op);
    Node node;
    node.op = std::move(op);
    node.owned = std::move(value);
    if (recording_) {
      for (const Var<T>& in : inputs) {
        if (in.valid() && nodes_[in.id()].needs_grad) node.needs_grad = true;
      }
      if (node.needs_grad) node.rule = std::move(rule);
    }
    return push(std::move(node));
  }

  const Array& value(Var<T> v) const { return nodes_.at(v.id()).get(); }
  const std::string& op_name(Var<T> v) const { return nodes_.at(v.id()).op; }
  bool needs_grad(Var<T> v) const { return v.valid() && nodes_.at(v.id()).needs_grad; }

  // Gradient buffer of `v`, zero-initialized on first use; nullptr when `v`
  // does not lead to any trainable leaf.
  Array* grad_slot(Var<T> v) {
    if (!needs_grad(v)) return nullptr;
    Node& node = nodes_[v.id()];
    if (node.grad.empty()) node.grad = Array(node.get().shape());
    return &node.grad;
  }

  // Gradient of the last backward() root w.r.t. `v` (zeros if unreached).
  const Array& grad(Var<T> v) {
    Node& node = nodes_.at(v.id());
    if (node.grad.empty()) node.grad = Array(node.get().shape());
    return node.grad;
  }

  // Computes d(loss)/d(node) for every node leading to a trainable leaf.
  // Gradients are reset first, so repeated calls give the same result.
  void backward(Var<T> loss) {
    if (!recording_) throw ContractError("numkernel", "backward on a tape that does not record gradients");
    if (value(loss).size() != 1) {
      throw ContractError("numkernel", "backward root must be a scalar, got " + shape_string(value(loss).shape()));
    }
    for (Node& node : nodes_) node.grad = Array();
    if (!nodes_[loss.id()].needs_grad) return;
    nodes_[loss.id()].grad = Array(value(loss).shape(), T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.rule || node.grad.empty()) continue;
      node.rule(*this, node.grad);
    }
  }

 private:
  struct Node {
    std::string op;
    const Array* external = nullptr;
    Array owned;
    Array grad;
    BackwardRule rule;
    bool needs_grad = false;

    const Array& get() const { return external ? *external : owned; }
  };

  Var<T> push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  bool recording_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations.

namespace detail {

template <typename T>
void add_into(DenseArray<T>& dst, const DenseArray<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError("numkernel", std::string(op) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                                          shape_string(b.shape()));
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto out = kernels::matmul(a.value(), b.value());
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b](Tape<T>& tape, const DenseArray<T>& g) {
    if (auto* ga = tape.grad_slot(a)) detail::add_into(*ga, kernels::matmul_nt(g, b.value()));
    if (auto* gb = tape.grad_slot(b)) detail::add_into(*gb, kernels::matmul_tn(a.value(), g));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  DenseArray<T> out = a.value();
  detail::add_into(out, b.value());
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape<T>& tape, const DenseArray<T>& g) {
    if (auto* ga = tape.grad_slot(a)) detail::add_into(*ga, g);
    if (auto* gb = tape.grad_slot(b)) detail::add_into(*gb, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  DenseArray<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape<T>& tape, const DenseArray<T>& g) {
    if (auto* ga = tape.grad_slot(a)) detail::add_into(*ga, g);
    if (auto* gb = tape.grad_slot(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  DenseArray<T> out = x.value();
  for (T& v : out.values()) v *= factor;
  return x.tape().record("scale", std::move(out), {x}, [x, factor](Tape<T>& tape, const DenseArray<T>& g) {
    if (auto* gx = tape.grad_slot(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += factor * g[i];
    }
  });
}

// x[r×c] + bias[c] broadcast over rows.
template <typename T>
Var<T> add_row(Var<T> x, Var<T> bias) {
  const std::size_t c = x.value().cols();
  if (bias.value().size() != c) {
    throw DimensionError("numkernel", "add_row bias " + shape_string(bias.shape()) + " does not match " +
                                          shape_string(x.shape()));
  }
  DenseArray<T> out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < c; ++j) row[j] += bias.value()[j];
  }
  return x.tape().record("add_row", std::move(out), {x, bias}, [x, bias, c](Tape<T>& tape, const DenseArray<T>& g) {
    if (auto* gx = tape.grad_slot(x)) detail::add_into(*gx, g);
    if (auto* gb = tape.grad_slot(bias)) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += row[j];
      }
    }
  });
}

// x·W + b
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_row(matmul(x, weight), bias);
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total = 0;
  for (T v : x.value().values()) total += v;
  return x.tape().record("sum", DenseArray<T>({1}, total), {x}, [x](Tape<T>& tape, const DenseArray<T>& g) {
    if (auto* gx = tape.grad_slot(x)) {
      for (T& v : gx->values()) v += g[0];
    }
  });
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  if (a.value().size() != b.value().size()) {
    throw DimensionError("numkernel", "dot size mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  T total = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) total += a.value()[i] * b.value()[i];
  return a.tape().record("dot", DenseArray<T>({1}, total), {a, b}, [a, b](Tape<T>& tape, const DenseArray<T>& g) {
    // Read both values before touching either slot: a and b may be the same node.
    if (auto* ga = tape.grad_slot(a)) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * b.value()[i];
    }
    if (auto* gb = tape.grad_slot(b)) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[0] * a.value()[i];
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  DenseArray<T> out = x.value();
  for (T& v : out.values()) v = kernels::gelu(v);
  return x.tape().record("gelu", std::move(out), {x}, [x](Tape<T>& tape, const DenseArray<T>& g) {
    if (auto* gx = tape.grad_slot(x)) {
      const auto& in = x.value();
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * kernels::gelu_derivative(in[i]);
    }
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  auto probs = std::make_shared<DenseArray<T>>(kernels::softmax_rows(x.value()));
  return x.tape().record("softmax_rows", *probs, {x}, [x, probs](Tape<T>& tape, const DenseArray<T>& g) {
    auto* gx = tape.grad_slot(x);
    if (!gx) return;
    const auto& p = *probs;
    for (std::size_t r = 0; r < p.rows(); ++r) {
      auto pr = p.row(r);
      auto gr = g.row(r);
      T inner = 0;
      for (std::size_t c = 0; c < pr.size(); ++c) inner += pr[c] * gr[c];
      auto out = gx->row(r);
      for (std::size_t c = 0; c < pr.size(); ++c) out[c] += pr[c] * (gr[c] - inner);
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  auto cache = std::make_shared<kernels::LayerNormCache<T>>();
  Tape<T>& tape = x.tape();
  auto out = kernels::layer_norm(x.value(), gain.value(), bias.value(), eps, tape.recording() ? cache.get() : nullptr);
  return tape.record("layer_norm", std::move(out), {x, gain, bias},
                     [x, gain, bias, cache](Tape<T>& t, const DenseArray<T>& g) {
                       const auto& xhat = cache->normalized;
                       const std::size_t d = xhat.cols();
                       auto* gx = t.grad_slot(x);
                       auto* gg = t.grad_slot(gain);
                       auto* gb = t.grad_slot(bias);
                       const auto& gamma = gain.value();
                       std::vector<T> dxhat(d);
                       for (std::size_t r = 0; r < xhat.rows(); ++r) {
                         auto gr = g.row(r);
                         auto hr = xhat.row(r);
                         if (gg || gb) {
                           for (std::size_t c = 0; c < d; ++c) {
                             if (gg) (*gg)[c] += gr[c] * hr[c];
                             if (gb) (*gb)[c] += gr[c];
                           }
                         }
                         if (!gx) continue;
                         T mean_d = 0;
                         T mean_dh = 0;
                         for (std::size_t c = 0; c < d; ++c) {
                           dxhat[c] = gr[c] * gamma[c];
                           mean_d += dxhat[c];
                           mean_dh += dxhat[c] * hr[c];
                         }
                         mean_d /= static_cast<T>(d);
                         mean_dh /= static_cast<T>(d);
                         auto out = gx->row(r);
                         const T inv_std = cache->inv_std[r];
                         for (std::size_t c = 0; c < d; ++c) out[c] += inv_std * (dxhat[c] - mean_d - hr[c] * mean_dh);
                       }
                     });
}

// Multi-head scaled dot-product self-attention over a stacked batch.
//
// `qkv` is (batch·tokens)×(3·dim) holding [Q | K | V] per row. Attention is
// confined to the `tokens` rows of each sample, so samples never interact.
// Returns (batch·tokens)×dim. When `probs_out` is given it receives the
// attention weights laid out as batch×heads×tokens×tokens.
template <typename T>
Var<T> attention(Var<T> qkv, std::size_t batch, std::size_t tokens, std::size_t heads,
                 DenseArray<T>* probs_out = nullptr) {
  using Strided = Eigen::Map<const kernels::RowMatrix<T>, 0, Eigen::OuterStride<>>;
  using MutStrided = Eigen::Map<kernels::RowMatrix<T>, 0, Eigen::OuterStride<>>;
  using Eigen::Index;

  const auto& in = qkv.value();
  if (in.rank() != 2 || in.rows() != batch * tokens || in.cols() % (3 * heads) != 0) {
    throw DimensionError("numkernel", "attention input " + shape_string(in.shape()) + " incompatible with batch=" +
                                          std::to_string(batch) + " tokens=" + std::to_string(tokens) +
                                          " heads=" + std::to_string(heads));
  }
  const std::size_t dim = in.cols() / 3;
  const std::size_t head_dim = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  const Index t = static_cast<Index>(tokens);
  const Index hd = static_cast<Index>(head_dim);

  auto probs = std::make_shared<DenseArray<T>>(Shape{batch, heads, tokens, tokens});
  DenseArray<T> out({batch * tokens, dim});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* base = in.data() + b * tokens * 3 * dim + h * head_dim;
      Strided q(base, t, hd, Eigen::OuterStride<>(3 * dim));
      Strided k(base + dim, t, hd, Eigen::OuterStride<>(3 * dim));
      Strided v(base + 2 * dim, t, hd, Eigen::OuterStride<>(3 * dim));
      kernels::MatMap<T> p(probs->data() + (b * heads + h) * tokens * tokens, t, t);
      p.noalias() = (q * k.transpose()) * scale;
      for (std::size_t r = 0; r < tokens; ++r) {
        kernels::softmax_inplace(std::span<T>(p.data() + r * tokens, tokens));
      }
      MutStrided o(out.data() + b * tokens * dim + h * head_dim, t, hd, Eigen::OuterStride<>(dim));
      o.noalias() = p * v;
    }
  }
  if (probs_out) *probs_out = *probs;

  return qkv.tape().record(
      "attention", std::move(out), {qkv},
      [qkv, probs, batch, tokens, heads, dim, head_dim, scale, t, hd](Tape<T>& tape, const DenseArray<T>& g) {
        auto* gqkv = tape.grad_slot(qkv);
        if (!gqkv) return;
        const auto& in = qkv.value();
        kernels::RowMatrix<T> dp(t, t);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t offset = b * tokens * 3 * dim + h * head_dim;
            Strided q(in.data() + offset, t, hd, Eigen::OuterStride<>(3 * dim));
            Strided k(in.data() + offset + dim, t, hd, Eigen::OuterStride<>(3 * dim));
            Strided v(in.data() + offset + 2 * dim, t, hd, Eigen::OuterStride<>(3 * dim));
            MutStrided dq(gqkv->data() + offset, t, hd, Eigen::OuterStride<>(3 * dim));
            MutStrided dk(gqkv->data() + offset + dim, t, hd, Eigen::OuterStride<>(3 * dim));
            MutStrided dv(gqkv->data() + offset + 2 * dim, t, hd, Eigen::OuterStride<>(3 * dim));
            Strided dout(g.data() + b * tokens * dim + h * head_dim, t, hd, Eigen::OuterStride<>(dim));
            kernels::ConstMatMap<T> p(probs->data() + (b * heads + h) * tokens * tokens, t, t);

            dv.noalias() += p.transpose() * dout;
            dp.noalias() = dout * v.transpose();
            // softmax backward, then the 1/sqrt(head_dim) scaling
            for (Index r = 0; r < t; ++r) {
              T inner = 0;
              for (Index c = 0; c < t; ++c) inner += dp(r, c) * p(r, c);
              for (Index c = 0; c < t; ++c) dp(r, c) = p(r, c) * (dp(r, c) - inner) * scale;
            }
            dq.noalias() += dp * k;
            dk.noalias() += dp.transpose() * q;
          }
        }
      });
}

// Row selection with a fixed stride: rows {offset, offset+stride, ...}, one per
// sample. Used to pull meta/view tokens out of the stacked token matrix.
template <typename T>
Var<T> take_rows(Var<T> x, std::size_t stride, std::size_t offset) {
  const auto& in = x.value();
  const std::size_t count = in.rows() / stride;
  const std::size_t d = in.cols();
  DenseArray<T> out({count, d});
  for (std::size_t i = 0; i < count; ++i) {
    std::copy_n(in.row(i * stride + offset).data(), d, out.row(i).data());
  }
  return x.tape().record("take_rows", std::move(out), {x},
                         [x, stride, offset, count, d](Tape<T>& tape, const DenseArray<T>& g) {
                           auto* gx = tape.grad_slot(x);
                           if (!gx) return;
                           for (std::size_t i = 0; i < count; ++i) {
                             auto dst = gx->row(i * stride + offset);
                             auto src = g.row(i);
                             for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                           }
                         });
}

}  // namespace vdt
