#pragma once

// Training objectives: identity cross-entropy, batch-hard triplet, view
// cross-entropy, orthogonality between meta and view tokens, and their
// weighted sum  total = id_ce + id_triplet + lambda * (view_ce + orthogonal).

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <vector>

#include "vdt/tape.hpp"

namespace vdt {

enum class TripletMode { kSoft, kHardMargin };

struct LossConfig {
  double lambda = 1.0;
  TripletMode triplet_mode = TripletMode::kSoft;
  double margin = 0.3;  // alpha, hard_margin mode only
  bool orthogonal_enabled = true;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("objectives", "lambda must be a finite value >= 0");
  }
};

struct LossBreakdown {
  double id_ce = 0.0;
  double id_triplet = 0.0;
  double view_ce = 0.0;
  double orthogonal = 0.0;
  double total = 0.0;
};

// Mean over rows of -log softmax(logits)[label].
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels, const char* component = "objectives") {
  const auto& z = logits.value();
  const std::size_t n = z.rows();
  const std::size_t classes = z.cols();
  if (labels.size() != n) {
    throw InputError(component, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(n) + " rows");
  }
  for (std::size_t l : labels) {
    if (l >= classes) {
      throw InputError(component, "label " + std::to_string(l) + " out of range for " + std::to_string(classes) +
                                      " classes");
    }
  }
  auto probs = std::make_shared<DenseArray<T>>(kernels::softmax_rows(z));
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = z.row(i);
    T peak = row[0];
    for (T v : row) peak = std::max(peak, v);
    T sum_exp = 0;
    for (T v : row) sum_exp += std::exp(v - peak);
    total += std::log(sum_exp) + peak - row[labels[i]];
  }
  const T mean = total / static_cast<T>(n);
  return logits.tape().record("cross_entropy", DenseArray<T>({1}, mean), {logits},
                              [logits, probs, labels, n](Tape<T>& tape, const DenseArray<T>& g) {
                                auto* gz = tape.grad_slot(logits);
                                if (!gz) return;
                                const T s = g[0] / static_cast<T>(n);
                                for (std::size_t i = 0; i < n; ++i) {
                                  auto pr = probs->row(i);
                                  auto out = gz->row(i);
                                  for (std::size_t c = 0; c < pr.size(); ++c) {
                                    out[c] += s * (pr[c] - (c == labels[i] ? T(1) : T(0)));
                                  }
                                }
                              });
}

template <typename T>
Var<T> identity_ce(Var<T> logits, const std::vector<std::size_t>& labels) {
  return cross_entropy(logits, labels);
}

// Views are 0 = ground, 1 = aerial.
template <typename T>
Var<T> view_ce(Var<T> view_logits, const std::vector<std::size_t>& views) {
  if (view_logits.value().cols() != 2) {
    throw InputError("objectives", "view_ce expects two logits per row, got " + shape_string(view_logits.shape()));
  }
  for (std::size_t v : views) {
    if (v > 1) throw InputError("objectives", "view label " + std::to_string(v) + " is not ground(0)/aerial(1)");
  }
  return cross_entropy(view_logits, views);
}

// Hardest positive / negative per anchor under squared L2 distance.
// Ties go to the lowest sample index.
struct HardMining {
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
};

template <typename T>
DenseArray<T> squared_distances(const DenseArray<T>& f) {
  const std::size_t n = f.rows();
  DenseArray<T> d({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      auto a = f.row(i);
      auto b = f.row(j);
      for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
      d(i, j) = acc;
    }
  }
  return d;
}

template <typename Id>
void check_triplet_batch(const std::vector<Id>& ids) {
  std::map<Id, std::size_t> counts;
  for (const Id& id : ids) ++counts[id];
  if (counts.size() < 2) throw ContractError("objectives", "batch-hard triplet needs at least two identities");
  for (const auto& [id, n] : counts) {
    if (n < 2) {
      throw ContractError("objectives", "identity " + std::to_string(id) + " has a single sample in the batch");
    }
  }
}

template <typename T, typename Id>
HardMining mine_hard(const DenseArray<T>& dist, const std::vector<Id>& ids) {
  const std::size_t n = ids.size();
  HardMining m;
  m.positive.assign(n, 0);
  m.negative.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    T best_pos = -std::numeric_limits<T>::infinity();
    T best_neg = std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const T dij = dist(i, j);
      if (ids[j] == ids[i]) {
        if (dij > best_pos) {
          best_pos = dij;
          m.positive[i] = j;
        }
      } else if (dij < best_neg) {
        best_neg = dij;
        m.negative[i] = j;
      }
    }
  }
  return m;
}

// Batch-hard triplet on squared L2 distances.
//   soft:        mean ln(1 + exp(d_ap - d_an))
//   hard_margin: mean max(d_ap - d_an + alpha, 0)
template <typename T, typename Id>
Var<T> batch_hard_triplet(Var<T> features, const std::vector<Id>& ids, const LossConfig& config) {
  const auto& f = features.value();
  const std::size_t n = f.rows();
  if (ids.size() != n) throw InputError("objectives", "triplet: id count does not match feature rows");
  check_triplet_batch(ids);
  const auto dist = squared_distances(f);
  const HardMining mined = mine_hard(dist, ids);
  const bool soft = config.triplet_mode == TripletMode::kSoft;
  const T margin = static_cast<T>(config.margin);

  auto slope = std::make_shared<std::vector<T>>(n);  // d loss_i / d z_i
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = dist(i, mined.positive[i]) - dist(i, mined.negative[i]);
    if (soft) {
      // ln(1 + e^z) evaluated without overflow
      total += z > T(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      (*slope)[i] = T(1) / (T(1) + std::exp(-z));
    } else {
      const T hinge = z + margin;
      total += hinge > T(0) ? hinge : T(0);
      (*slope)[i] = hinge > T(0) ? T(1) : T(0);
    }
  }
  const T mean = total / static_cast<T>(n);
  return features.tape().record(
      "batch_hard_triplet", DenseArray<T>({1}, mean), {features},
      [features, mined, slope, n](Tape<T>& tape, const DenseArray<T>& g) {
        auto* gf = tape.grad_slot(features);
        if (!gf) return;
        const auto& f = features.value();
        const std::size_t d = f.cols();
        for (std::size_t i = 0; i < n; ++i) {
          const T w = g[0] * (*slope)[i] / static_cast<T>(n);
          if (w == T(0)) continue;
          const std::size_t p = mined.positive[i];
          const std::size_t q = mined.negative[i];
          auto fi = f.row(i);
          auto fp = f.row(p);
          auto fq = f.row(q);
          auto gi = gf->row(i);
          auto gp = gf->row(p);
          auto gq = gf->row(q);
          for (std::size_t k = 0; k < d; ++k) {
            const T dp = T(2) * (fi[k] - fp[k]);
            const T dn = T(2) * (fi[k] - fq[k]);
            gi[k] += w * (dp - dn);
            gp[k] -= w * dp;
            gq[k] += w * dn;
          }
        }
      });
}

inline constexpr double kOrthogonalEps = 1e-12;

// Mean over rows of |<m, v>| / (|m| |v| + eps).
template <typename T>
Var<T> orthogonal_loss(Var<T> meta, Var<T> view) {
  const auto& m = meta.value();
  const auto& v = view.value();
  if (m.shape() != v.shape()) {
    throw DimensionError("objectives", "orthogonal_loss shape mismatch: " + shape_string(m.shape()) + " vs " +
                                           shape_string(v.shape()));
  }
  const std::size_t n = m.rows();
  const T eps = static_cast<T>(kOrthogonalEps);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T dot = 0, mm = 0, vv = 0;
    auto mr = m.row(i);
    auto vr = v.row(i);
    for (std::size_t k = 0; k < mr.size(); ++k) {
      dot += mr[k] * vr[k];
      mm += mr[k] * mr[k];
      vv += vr[k] * vr[k];
    }
    // Cauchy-Schwarz holds only up to rounding; keep the value in [0, 1].
    total += std::min(T(1), std::abs(dot) / (std::sqrt(mm) * std::sqrt(vv) + eps));
  }
  const T mean = total / static_cast<T>(n);
  return meta.tape().record("orthogonal_loss", DenseArray<T>({1}, mean), {meta, view},
                            [meta, view, n, eps](Tape<T>& tape, const DenseArray<T>& g) {
                              auto* gm = tape.grad_slot(meta);
                              auto* gv = tape.grad_slot(view);
                              const auto& m = meta.value();
                              const auto& v = view.value();
                              for (std::size_t i = 0; i < n; ++i) {
                                auto mr = m.row(i);
                                auto vr = v.row(i);
                                T dot = 0, mm = 0, vv = 0;
                                for (std::size_t k = 0; k < mr.size(); ++k) {
                                  dot += mr[k] * vr[k];
                                  mm += mr[k] * mr[k];
                                  vv += vr[k] * vr[k];
                                }
                                const T nm = std::sqrt(mm);
                                const T nv = std::sqrt(vv);
                                const T denom = nm * nv + eps;
                                const T sign = dot > T(0) ? T(1) : (dot < T(0) ? T(-1) : T(0));
                                const T w = g[0] / static_cast<T>(n);
                                const T ratio = std::abs(dot) / (denom * denom);
                                // d/dm [ |dot| / (|m||v| + eps) ]
                                for (std::size_t k = 0; k < mr.size(); ++k) {
                                  if (gm) {
                                    const T dnorm = nm > T(0) ? nv * mr[k] / nm : T(0);
                                    (*gm)(i, k) += w * (sign * vr[k] / denom - ratio * dnorm);
                                  }
                                  if (gv) {
                                    const T dnorm = nv > T(0) ? nm * vr[k] / nv : T(0);
                                    (*gv)(i, k) += w * (sign * mr[k] / denom - ratio * dnorm);
                                  }
                                }
                              }
                            });
}

template <typename T>
struct LossTerms {
  Var<T> id_ce;
  Var<T> id_triplet;
  Var<T> view_ce;      // invalid when there is no view token
  Var<T> orthogonal;   // invalid when there is no view token
  Var<T> total;
  double lambda = 0.0;
  bool orthogonal_in_total = true;

  LossBreakdown breakdown() const {
    auto scalar = [](const Var<T>& v) { return v.valid() ? static_cast<double>(v.value()[0]) : 0.0; };
    return {scalar(id_ce), scalar(id_triplet), scalar(view_ce), scalar(orthogonal), scalar(total)};
  }
};

// total = id_ce + id_triplet + lambda * (view_ce + orthogonal). The view terms
// are omitted when absent; the orthogonal term is still computed (and
// reported) but left out of the total when config.orthogonal_enabled is false.
template <typename T>
LossTerms<T> total_loss(Var<T> id_ce, Var<T> id_triplet, Var<T> view_ce, Var<T> orthogonal, const LossConfig& config) {
  config.validate();
  LossTerms<T> terms{id_ce, id_triplet, view_ce, orthogonal, {}, config.lambda, config.orthogonal_enabled};
  const T lambda = static_cast<T>(config.lambda);
  const bool use_view = view_ce.valid();
  const bool use_orth = orthogonal.valid() && config.orthogonal_enabled;
  T view_part = 0;
  if (use_view) view_part += view_ce.value()[0];
  if (use_orth) view_part += orthogonal.value()[0];
  const T total = id_ce.value()[0] + id_triplet.value()[0] + lambda * view_part;
  terms.total = id_ce.tape().record(
      "total_loss", DenseArray<T>({1}, total), {id_ce, id_triplet, view_ce, use_orth ? orthogonal : Var<T>()},
      [=](Tape<T>& tape, const DenseArray<T>& g) {
        if (auto* s = tape.grad_slot(id_ce)) (*s)[0] += g[0];
        if (auto* s = tape.grad_slot(id_triplet)) (*s)[0] += g[0];
        if (use_view) {
          if (auto* s = tape.grad_slot(view_ce)) (*s)[0] += lambda * g[0];
        }
        if (use_orth) {
          if (auto* s = tape.grad_slot(orthogonal)) (*s)[0] += lambda * g[0];
        }
      });
  return terms;
}

// All four terms from a forward pass output. `labels` are identity class
// indices (also used for triplet mining), `views` 0/1.
template <typename T, typename FwdOut>
LossTerms<T> compute_losses(const FwdOut& out, const std::vector<std::size_t>& labels,
                            const std::vector<std::size_t>& views, const LossConfig& config) {
  auto ce = identity_ce(out.id_logits, labels);
  auto tri = batch_hard_triplet(out.meta, labels, config);
  Var<T> vce;
  Var<T> orth;
  if (out.view.valid()) {
    vce = view_ce(out.view_logits, views);
    orth = orthogonal_loss(out.meta, out.view);
  }
  return total_loss(ce, tri, vce, orth, config);
}

}  // namespace vdt
