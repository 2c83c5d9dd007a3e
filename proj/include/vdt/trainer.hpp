#pragma once

// SGD training loop, evaluation helpers and the lambda sweep.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "vdt/checkpoint.hpp"
#include "vdt/config.hpp"
#include "vdt/evaluator.hpp"
#include "vdt/image.hpp"
#include "vdt/model.hpp"
#include "vdt/objectives.hpp"
#include "vdt/tape.hpp"
#include "vdt/toydata.hpp"

namespace vdt {

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_initial, double lr_final) {
  if (total_steps == 0 || step > total_steps) {
    throw ContractError("trainer", "cosine_lr step " + std::to_string(step) + " outside [0, " +
                                       std::to_string(total_steps) + "]");
  }
  if (step == 0) return lr_initial;
  if (step == total_steps) return lr_final;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + std::cos(phase));
}

inline std::size_t steps_per_epoch(const TrainConfig& t, std::size_t num_ids) {
  if (t.steps_per_epoch > 0) return t.steps_per_epoch;
  return std::max<std::size_t>(1, num_ids / t.P);
}

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  LossBreakdown loss;
  double wall_ms = 0;  // kept out of the TSV so logs stay reproducible
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<std::pair<std::size_t, EvalReport>> evals;  // (epoch, report)

  static constexpr const char* kTsvHeader = "step\tepoch\tlr\tid_ce\tid_triplet\tview_ce\torthogonal\ttotal";

  static std::string tsv_row(const StepRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%zu\t%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g", r.step, r.epoch, r.lr, r.loss.id_ce,
                  r.loss.id_triplet, r.loss.view_ce, r.loss.orthogonal, r.loss.total);
    return buf;
  }
};

template <typename T>
struct TrainHooks {
  std::ostream* tsv = nullptr;  // receives the header, then one row per step as it completes
  std::function<void(const StepRecord&)> on_step;
  // Called after every `eval_every` epochs (0 disables).
  std::size_t eval_every = 0;
  std::function<EvalReport(const ModelParams<T>&)> eval;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  TrainLog log;
};

// Flags the first non-finite loss term by name.
inline void check_loss_terms(const LossBreakdown& b, std::size_t step) {
  const std::pair<const char*, double> terms[] = {
      {"id_ce", b.id_ce}, {"id_triplet", b.id_triplet}, {"view_ce", b.view_ce}, {"orthogonal", b.orthogonal},
      {"total", b.total}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw NumericError("trainer", "step " + std::to_string(step) + ": loss term " + name + " is " + std::to_string(v));
    }
  }
}

// Runs epochs x steps_per_epoch SGD-with-momentum steps:
//   v <- momentum * v + grad;  p <- p - lr * v.
template <typename T>
TrainResult<T> train(const ModelConfig& model, const TrainConfig& cfg, const Dataset& data,
                     const TrainHooks<T>& hooks = {}) {
  model.validate();
  cfg.validate();
  const auto ids = data.identities();
  if (ids.size() != model.num_identities) {
    throw ConfigError("trainer", "model has " + std::to_string(model.num_identities) + " identity classes, dataset has " +
                                     std::to_string(ids.size()) + " identities");
  }
  if (ids.size() < cfg.P) {
    throw ContractError("trainer", "dataset has " + std::to_string(ids.size()) + " identities, P=" + std::to_string(cfg.P));
  }
  const std::vector<std::size_t> class_of = data.class_labels();
  const LossConfig loss_cfg = cfg.loss();
  const std::size_t spe = steps_per_epoch(cfg, ids.size());
  const std::size_t total_steps = cfg.epochs * spe;

  TrainResult<T> result;
  result.params = init_params<T>(model, cfg.seed);
  ModelParams<T> velocity = allocate_params<T>(model);
  std::vector<DenseArray<T>*> params, vel;
  result.params.for_each([&](const std::string&, DenseArray<T>& a) { params.push_back(&a); });
  velocity.for_each([&](const std::string&, DenseArray<T>& a) { vel.push_back(&a); });
  std::vector<std::string> names;
  result.params.for_each([&](const std::string& n, const DenseArray<T>&) { names.push_back(n); });

  AugmentConfig aug;
  aug.pad = cfg.pad;
  aug.erase_prob = cfg.erase_prob;
  if (hooks.tsv) *hooks.tsv << TrainLog::kTsvHeader << "\n";

  for (std::size_t step = 0; step < total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const Batch batch = augment(pk_sample(data, cfg.P, cfg.K, cfg.seed, step), true, cfg.seed, step, aug);
    std::vector<std::size_t> labels, views;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      labels.push_back(class_of[batch.indices[i]]);
      views.push_back(static_cast<std::size_t>(batch.views[i]));
    }
    const double lr = cosine_lr(step, total_steps, cfg.lr_initial, cfg.lr_final);

    Tape<T> tape;
    const BoundParams<T> bound = bind(tape, result.params);
    LossTerms<T> terms;
    const char* stage = "forward";
    try {
      const auto out = forward(tape, bound, model, to_tensor<T>(batch.images));
      stage = "identity_ce";
      auto ce = identity_ce(out.id_logits, labels);
      stage = "id_triplet";
      auto tri = batch_hard_triplet(out.meta, labels, loss_cfg);
      Var<T> vce, orth;
      if (out.view.valid()) {
        stage = "view_ce";
        vce = view_ce(out.view_logits, views);
        stage = "orthogonal";
        orth = orthogonal_loss(out.meta, out.view);
      }
      stage = "total";
      terms = total_loss(ce, tri, vce, orth, loss_cfg);
    } catch (const NumericError& e) {
      throw NumericError("trainer", "step " + std::to_string(step) + ", " + stage + ": " + e.what());
    }
    StepRecord rec;
    rec.step = step;
    rec.epoch = step / spe;
    rec.lr = lr;
    rec.loss = terms.breakdown();
    check_loss_terms(rec.loss, step);

    tape.backward(terms.total);
    std::size_t i = 0;
    bound.for_each([&](const std::string&, const Var<T>& v) {
      const DenseArray<T>& g = tape.grad(v);
      if (!g.all_finite()) {
        throw NumericError("trainer", "step " + std::to_string(step) + ": non-finite gradient for " + names[i]);
      }
      T* p = params[i]->data();
      T* m = vel[i]->data();
      const T mu = static_cast<T>(cfg.momentum), rate = static_cast<T>(lr);
      for (std::size_t k = 0; k < g.size(); ++k) {
        m[k] = mu * m[k] + g[k];
        p[k] -= rate * m[k];
      }
      ++i;
    });

    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.tsv) *hooks.tsv << TrainLog::tsv_row(rec) << "\n" << std::flush;
    if (hooks.on_step) hooks.on_step(rec);
    result.log.steps.push_back(rec);

    const bool epoch_end = (step + 1) % spe == 0;
    if (epoch_end && hooks.eval_every > 0 && hooks.eval && (rec.epoch + 1) % hooks.eval_every == 0) {
      result.log.evals.emplace_back(rec.epoch, hooks.eval(result.params));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

// Final meta-token features of every dataset image, in dataset order.
template <typename T>
DenseArray<T> embed_dataset(const ModelParams<T>& params, const ModelConfig& model, const Dataset& data,
                            std::size_t batch_size = 64) {
  if (data.empty()) throw InputError("evaluator", "cannot embed an empty dataset");
  DenseArray<T> out({data.size(), model.embed_dim});
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<Image> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(data.image(i));
    const Embeddings<T> e = embed(params, model, to_tensor<T>(imgs));
    std::copy(e.meta.data(), e.meta.data() + e.meta.size(), out.data() + start * model.embed_dim);
  }
  return out;
}

// Every test image is both a query and a gallery item; same-id same-camera
// pairs (including each query itself) are excluded by the protocol mask.
template <typename T>
std::vector<EvalReport> evaluate_model(const ModelParams<T>& params, const ModelConfig& model, const Dataset& test,
                                       const std::vector<Protocol>& protocols, Metric metric = Metric::kL2) {
  const DenseArray<T> feats = embed_dataset(params, model, test);
  const DenseArray<double> dist = distance_matrix(feats, feats, metric);
  std::vector<EvalReport> out;
  for (Protocol p : protocols) out.push_back(evaluate_distances(dist, test.samples(), test.samples(), p));
  return out;
}

// ---------------------------------------------------------------------------
// Lambda sweep

struct SweepRow {
  double lambda = 0;
  std::vector<EvalReport> reports;  // one per protocol, in request order
};

struct SweepResult {
  std::vector<Protocol> protocols;
  std::vector<SweepRow> rows;
  std::vector<std::string> warnings;

  // Tab-separated: lambda, then rank1/mAP/mINP per protocol.
  std::string table() const {
    std::string s = "lambda";
    for (Protocol p : protocols) {
      const std::string n = protocol_name(p);
      s += "\t" + n + "_rank1\t" + n + "_mAP\t" + n + "_mINP";
    }
    s += "\n";
    char buf[64];
    for (const SweepRow& r : rows) {
      std::snprintf(buf, sizeof(buf), "%g", r.lambda);
      s += buf;
      for (const EvalReport& e : r.reports) {
        std::snprintf(buf, sizeof(buf), "\t%.4f\t%.4f\t%.4f", e.rank1, e.mAP, e.mINP);
        s += buf;
      }
      s += "\n";
    }
    return s;
  }
};

// Repeated values are dropped (first occurrence kept) with a warning.
inline std::vector<double> dedupe_lambdas(const std::vector<double>& values, std::vector<std::string>* warnings) {
  std::vector<double> out;
  for (double v : values) {
    if (std::find(out.begin(), out.end(), v) != out.end()) {
      if (warnings) warnings->push_back("duplicate lambda " + detail::format_value(v) + " ignored");
      continue;
    }
    out.push_back(v);
  }
  return out;
}

// Trains one model per lambda with the shared seed and evaluates each on
// `test` under every requested protocol.
template <typename T>
SweepResult sweep_lambda(const std::vector<double>& values, const ModelConfig& model, const TrainConfig& base,
                         const Dataset& train_set, const Dataset& test, const std::vector<Protocol>& protocols,
                         const std::function<void(double, const TrainResult<T>&)>& on_trained = {}) {
  SweepResult res;
  res.protocols = protocols;
  const std::vector<double> lambdas = dedupe_lambdas(values, &res.warnings);
  if (lambdas.size() < 2) throw ContractError("trainer", "a lambda sweep needs at least two distinct values");
  if (protocols.empty()) throw ContractError("trainer", "a lambda sweep needs at least one protocol");
  for (double lambda : lambdas) {
    TrainConfig t = base;
    t.lambda = lambda;
    TrainResult<T> trained = train<T>(model, t, train_set);
    if (on_trained) on_trained(lambda, trained);
    res.rows.push_back({lambda, evaluate_model(trained.params, model, test, protocols)});
  }
  return res;
}

}  // namespace vdt
