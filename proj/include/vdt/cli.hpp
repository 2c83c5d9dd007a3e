#pragma once

// The `vdt` command line: gen-data, train, eval, gradcheck, bench,
// sweep-lambda and export-embeddings. run() takes the argument list and
// output streams so tests can drive it in-process.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vdt/checkpoint.hpp"
#include "vdt/config.hpp"
#include "vdt/evaluator.hpp"
#include "vdt/grad_check.hpp"
#include "vdt/rng.hpp"
#include "vdt/toydata.hpp"
#include "vdt/trainer.hpp"

namespace vdt::cli {

namespace fs = std::filesystem;

inline const std::vector<double> kSweepLambdas = {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};

// Config file plus the flags that override it. Flags are bound to
// default-valued variables so --help shows defaults; only flags the user
// actually passed are applied on top of the file.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  ModelConfig model;
  TrainConfig train;
  std::string mode = "vdt";
  std::string ablate = "none";
  std::string precision = "float";
  CLI::Option* seed = nullptr;
  CLI::Option* lambda = nullptr;
  CLI::Option* mode_opt = nullptr;
  CLI::Option* ablate_opt = nullptr;
  CLI::Option* epochs = nullptr;
  CLI::Option* precision_opt = nullptr;

  void add(CLI::App* app, bool training) {
    app->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override one config key, KEY=VALUE (repeatable)");
    seed = app->add_option("--seed", train.seed, "seed for every random stream");
    mode_opt = app->add_option("--mode", mode, "architecture")->check(CLI::IsMember({"vdt", "baseline"}));
    ablate_opt = app->add_option("--ablate", ablate, "ablation to apply")
                     ->check(CLI::IsMember({"none", "subtraction", "orthogonal", "both"}));
    if (training) {
      lambda = app->add_option("--lambda", train.lambda, "weight of the view terms");
      epochs = app->add_option("--epochs", train.epochs, "training epochs");
      precision_opt =
          app->add_option("--precision", precision, "scalar type")->check(CLI::IsMember({"float", "double"}));
    }
  }

  // Resolved configs: defaults, then the file, then --set, then named flags.
  std::pair<ModelConfig, TrainConfig> resolve() const {
    ModelConfig m;
    TrainConfig t;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw IoError("cli", "cannot read " + config_path);
      std::stringstream ss;
      ss << in.rdbuf();
      apply_config_text(ss.str(), m, t);
    }
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("cli", "--set expects KEY=VALUE, got '" + s + "'");
      set_config_value(m, t, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
    if (seed && seed->count()) t.seed = train.seed;
    if (lambda && lambda->count()) t.lambda = train.lambda;
    if (epochs && epochs->count()) t.epochs = train.epochs;
    if (precision_opt && precision_opt->count()) t.precision = detail::parse_value<Precision>(precision);
    if (mode_opt && mode_opt->count()) m.mode = detail::parse_value<Mode>(mode);
    if (ablate_opt && ablate_opt->count()) {
      if (ablate == "subtraction" || ablate == "both") m.disable_subtraction = true;
      if (ablate == "orthogonal" || ablate == "both") t.disable_orthogonal = true;
    }
    return {m, t};
  }
};

inline fs::path manifest_path(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.tsv" : p; }

inline Dataset load_data(const std::string& p) { return load_manifest(manifest_path(p)); }

inline std::vector<Protocol> protocols_from(const std::vector<std::string>& names) {
  if (names.empty()) return {kAllProtocols.begin(), kAllProtocols.end()};
  std::vector<Protocol> out;
  for (const auto& n : names) out.push_back(parse_protocol(n));
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cli", "cannot write " + path.string());
  out << text;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
  std::string out;
  GenConfig gen;
};

inline int gen_data(const GenDataArgs& a, std::ostream& out) {
  GenConfig g = a.gen;
  g.id_offset = 0;
  const Dataset train = generate(g, fs::path(a.out) / "train");
  g.id_offset = a.gen.num_ids;
  const Dataset test = generate(g, fs::path(a.out) / "test");
  out << "train: " << train.size() << " images, ids 0.." << a.gen.num_ids - 1 << " -> " << (fs::path(a.out) / "train").string()
      << "\n";
  out << "test: " << test.size() << " images, ids " << a.gen.num_ids << ".." << 2 * a.gen.num_ids - 1 << " -> "
      << (fs::path(a.out) / "test").string() << "\n";
  return 0;
}

struct TrainArgs {
  ConfigFlags cfg;
  std::string data;
  std::string test;
  std::string out;
  std::size_t eval_every = 0;
};

template <typename T>
int train_as(const ModelConfig& m, const TrainConfig& t, const TrainArgs& a, std::ostream& out) {
  const Dataset data = load_data(a.data);
  std::optional<Dataset> test;
  if (!a.test.empty()) test = load_data(a.test);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.txt", config_text(m, t));

  std::ofstream tsv(fs::path(a.out) / "train_log.tsv", std::ios::binary);
  if (!tsv) throw IoError("cli", "cannot write " + (fs::path(a.out) / "train_log.tsv").string());
  TrainHooks<T> hooks;
  hooks.tsv = &tsv;
  const std::size_t spe = steps_per_epoch(t, data.identities().size());
  double epoch_sum = 0;
  hooks.on_step = [&](const StepRecord& r) {
    epoch_sum += r.loss.total;
    if ((r.step + 1) % spe == 0) {
      out << "epoch " << r.epoch + 1 << "/" << t.epochs << "  lr " << r.lr << "  mean loss " << epoch_sum / spe << "\n";
      epoch_sum = 0;
    }
  };
  std::ofstream evals;
  if (test && a.eval_every > 0) {
    evals.open(fs::path(a.out) / "eval_log.jsonl", std::ios::binary);
    hooks.eval_every = a.eval_every;
    hooks.eval = [&](const ModelParams<T>& p) {
      const EvalReport r = evaluate_model(p, m, *test, {Protocol::kAG})[0];
      out << "  AG rank1 " << r.rank1 << "  mAP " << r.mAP << "\n";
      return r;
    };
  }
  const TrainResult<T> res = train<T>(m, t, data, hooks);
  for (const auto& [epoch, report] : res.log.evals) {
    nlohmann::json j = to_json(report);
    j["epoch"] = epoch + 1;
    evals << j.dump() << "\n";
  }
  save_checkpoint(res.params, m, fs::path(a.out) / "checkpoint.vdt");
  out << "wrote " << (fs::path(a.out) / "checkpoint.vdt").string() << "\n";
  if (test) {
    for (const EvalReport& r : evaluate_model(res.params, m, *test, {Protocol::kAll, Protocol::kAG})) {
      out << protocol_name(r.protocol) << ": rank1 " << r.rank1 << "  mAP " << r.mAP << "  mINP " << r.mINP << "\n";
    }
  }
  return 0;
}

inline int train_cmd(const TrainArgs& a, std::ostream& out) {
  auto [m, t] = a.cfg.resolve();
  const Dataset data = load_data(a.data);
  // The classifier width always follows the training identities.
  m.num_identities = data.identities().size();
  return t.precision == Precision::kDouble ? train_as<double>(m, t, a, out) : train_as<float>(m, t, a, out);
}

struct EvalArgs {
  ConfigFlags cfg;
  std::string checkpoint;
  std::string data;
  std::vector<std::string> protocols;
  std::string metric = "l2";
  std::string out;
};

template <typename T>
nlohmann::json eval_as(const ModelParams<T>& p, const ModelConfig& m, const EvalArgs& a) {
  const Dataset data = load_data(a.data);
  const Metric metric = a.metric == "cosine" ? Metric::kCosine : Metric::kL2;
  nlohmann::json j = nlohmann::json::object();
  for (const EvalReport& r : evaluate_model(p, m, data, protocols_from(a.protocols), metric)) {
    j[protocol_name(r.protocol)] = to_json(r);
  }
  return j;
}

inline int eval_cmd(const EvalArgs& a, std::ostream& out) {
  nlohmann::json j;
  if (a.checkpoint.empty()) {
    // Untrained weights drawn from --seed.
    const auto [m, t] = a.cfg.resolve();
    j = eval_as(init_params<float>(m, t.seed), m, a);
  } else if (checkpoint_scalar_bytes(a.checkpoint) == 8) {
    const auto ck = load_checkpoint<double>(a.checkpoint);
    j = eval_as(ck.params, ck.config, a);
  } else {
    const auto ck = load_checkpoint<float>(a.checkpoint);
    j = eval_as(ck.params, ck.config, a);
  }
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) {
    out << text;
  } else {
    write_text(a.out, text);
  }
  return 0;
}

struct GradCheckArgs {
  ConfigFlags cfg;
  double h = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_entries = 16;
  std::size_t ids = 2;
  std::size_t per_id = 4;
};

struct GradCheckReport {
  GradCheckResult result;
  std::string worst_name;
  double min_scale = 0;  // gradient magnitudes below this are compared against it
};

// Full-loss finite-difference check on a seeded random micro-batch in double
// precision. Gradients too small for central differences to resolve at `tol`
// are compared against that resolution instead of their own magnitude.
inline GradCheckReport run_gradcheck(const ModelConfig& m, const TrainConfig& t, std::size_t ids, std::size_t per_id,
                                     double h, std::size_t max_entries, double tol) {
  m.validate();
  ModelParams<double> p = init_params<double>(m, t.seed);
  const std::size_t batch = ids * per_id;
  DenseArray<double> images({batch, m.image_height, m.image_width, m.channels});
  Rng rng = make_rng(Stream::kProbeInput, {t.seed, 0});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : images.values()) v = u(rng);
  std::vector<std::size_t> labels, views;
  for (std::size_t i = 0; i < batch; ++i) {
    labels.push_back(i / per_id);
    views.push_back(i % 2);
  }
  std::vector<DenseArray<double>*> ptrs;
  std::vector<std::string> names;
  p.for_each([&](const std::string& n, DenseArray<double>& a) {
    ptrs.push_back(&a);
    names.push_back(n);
  });
  const LossConfig lc = t.loss();
  LossBuilder<double> f = [&](Tape<double>& tape, const std::vector<Var<double>>& vars) {
    BoundParams<double> w = map_weights<Var<double>>(
        p, [&, i = std::size_t{0}](const std::string&, const DenseArray<double>&) mutable { return vars[i++]; });
    return compute_losses<double>(forward(tape, w, m, images), labels, views, lc).total;
  };
  GradCheckReport r;
  {
    Tape<double> tape(false);
    std::vector<Var<double>> vars;
    for (auto* a : ptrs) vars.push_back(tape.parameter(*a));
    r.min_scale = fd_resolution_scale<double>(f(tape, vars).value()[0], h, tol);
  }
  r.result = grad_check_detailed<double>(f, ptrs, h, max_entries, r.min_scale);
  r.worst_name = names[r.result.worst_param];
  return r;
}

inline int gradcheck_cmd(const GradCheckArgs& a, std::ostream& out) {
  const auto [m, t] = a.cfg.resolve();
  const GradCheckReport r = run_gradcheck(m, t, a.ids, a.per_id, a.h, a.max_entries, a.tolerance);
  out << "loss: " << r.result.loss << "\n";
  out << "entries checked: " << r.result.entries_checked << "\n";
  out << "resolution floor: " << r.min_scale << "\n";
  out << "worst entry: " << r.worst_name << "[" << r.result.worst_entry << "] analytic " << r.result.analytic
      << " numeric " << r.result.numeric << "\n";
  out << "max relative error: " << r.result.max_rel_err << "\n";
  const bool ok = r.result.max_rel_err <= a.tolerance;
  out << (ok ? "ok" : "FAILED") << " (tolerance " << a.tolerance << ")\n";
  return ok ? 0 : 1;
}

struct BenchArgs {
  std::string scale = "full";
  std::size_t reps = 7;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
};

struct BenchReport {
  double vdt_ms = 0;       // median per-image forward latency
  double baseline_ms = 0;
  double ratio = 0;
  std::size_t param_delta = 0;
};

// Forward-only float latency of vdt and baseline at the same shapes. The two
// modes alternate within each repetition so drift affects both equally.
inline BenchReport run_bench(const ModelConfig& shape, std::size_t reps, std::size_t batch, std::uint64_t seed) {
  ModelConfig v = shape, b = shape;
  v.mode = Mode::kVdt;
  b.mode = Mode::kBaselineVit;
  const auto pv = init_params<float>(v, seed);
  const auto pb = init_params<float>(b, seed);
  DenseArray<float> images({batch, shape.image_height, shape.image_width, shape.channels});
  Rng rng = make_rng(Stream::kProbeInput, {seed, 1});
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (float& x : images.values()) x = u(rng);

  auto time_ms = [&](const ModelParams<float>& p, const ModelConfig& c) {
    const auto t0 = std::chrono::steady_clock::now();
    const Embeddings<float> e = embed(p, c, images);
    const auto t1 = std::chrono::steady_clock::now();
    if (e.meta.size() == 0) throw NumericError("bench", "empty forward output");
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(batch);
  };
  time_ms(pv, v);  // warm-up
  time_ms(pb, b);
  std::vector<double> tv, tb;
  for (std::size_t r = 0; r < reps; ++r) {
    if (r % 2 == 0) {
      tv.push_back(time_ms(pv, v));
      tb.push_back(time_ms(pb, b));
    } else {
      tb.push_back(time_ms(pb, b));
      tv.push_back(time_ms(pv, v));
    }
  }
  BenchReport rep;
  rep.vdt_ms = median(tv);
  rep.baseline_ms = median(tb);
  rep.ratio = rep.vdt_ms / rep.baseline_ms;
  rep.param_delta = param_delta(shape);
  return rep;
}

inline int bench_cmd(const BenchArgs& a, std::ostream& out) {
  const ModelConfig shape = a.scale == "full" ? ModelConfig::full_scale() : ModelConfig{};
  const BenchReport r = run_bench(shape, a.reps, a.batch, a.seed);
  out << "shape: N=" << shape.num_blocks << " d=" << shape.embed_dim << " M=" << shape.num_patches()
      << " batch=" << a.batch << " reps=" << a.reps << "\n";
  out << "vdt median ms/image: " << r.vdt_ms << "\n";
  out << "baseline median ms/image: " << r.baseline_ms << "\n";
  out << "ratio vdt/baseline: " << r.ratio << "\n";
  out << "param_delta: " << r.param_delta << " (vdt " << param_count(shape) << ")\n";
  return 0;
}

struct SweepArgs {
  ConfigFlags cfg;
  std::string train_dir;
  std::string test_dir;
  std::vector<double> values = kSweepLambdas;
  std::vector<std::string> protocols;
  std::string out;
};

inline int sweep_cmd(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  auto [m, t] = a.cfg.resolve();
  const Dataset train_set = load_data(a.train_dir);
  const Dataset test = load_data(a.test_dir);
  m.num_identities = train_set.identities().size();
  const auto protocols = protocols_from(a.protocols);
  auto progress = [&](double lambda, const auto&) { err << "trained lambda " << lambda << "\n"; };
  const SweepResult res =
      t.precision == Precision::kDouble
          ? sweep_lambda<double>(a.values, m, t, train_set, test, protocols, progress)
          : sweep_lambda<float>(a.values, m, t, train_set, test, protocols, progress);
  for (const std::string& w : res.warnings) err << "warning: " << w << "\n";
  if (a.out.empty()) {
    out << res.table();
  } else {
    write_text(a.out, res.table());
    out << "wrote " << a.out << "\n";
  }
  return 0;
}

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
};

inline int export_cmd(const ExportArgs& a, std::ostream& out) {
  const Dataset data = load_data(a.data);
  DenseArray<float> feats;
  if (checkpoint_scalar_bytes(a.checkpoint) == 8) {
    const auto ck = load_checkpoint<double>(a.checkpoint);
    feats = embed_dataset(ck.params, ck.config, data).template cast<float>();
  } else {
    const auto ck = load_checkpoint<float>(a.checkpoint);
    feats = embed_dataset(ck.params, ck.config, data);
  }
  write_embeddings(a.out, feats, data.samples());
  out << "wrote " << feats.rows() << " x " << feats.cols() << " embeddings to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Aerial and ground person re-identification with view-decoupled tokens", "vdt"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "render the toy train/test datasets");
  c_gen->add_option("--out", gen.out, "output directory (gets train/ and test/)")->required();
  c_gen->add_option("--seed", gen.gen.seed, "generator seed");
  c_gen->add_option("--num-ids", gen.gen.num_ids, "identities per split");
  c_gen->add_option("--images-per-id", gen.gen.images_per_id_per_view, "images per identity per view");
  c_gen->add_option("--cameras-per-view", gen.gen.cameras_per_view, "cameras per view");
  c_gen->add_option("--view-bias", gen.gen.view_bias_strength, "aerial appearance shift, 0..1");
  c_gen->add_option("--occlusion", gen.gen.occlusion_prob, "occluder probability");
  c_gen->add_option("--height", gen.gen.image_height, "image height");
  c_gen->add_option("--width", gen.gen.image_width, "image width");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model, write checkpoint and TSV log");
  tr.cfg.add(c_train, true);
  c_train->add_option("--data", tr.data, "training dataset directory or manifest")->required();
  c_train->add_option("--out", tr.out, "output directory")->required();
  c_train->add_option("--test", tr.test, "test dataset for evaluation during and after training");
  c_train->add_option("--eval-every", tr.eval_every, "evaluate AG every N epochs (needs --test; 0 = off)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint (or seeded random weights) as JSON");
  ev.cfg.add(c_eval, false);
  c_eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file; omitted = untrained weights from --seed");
  c_eval->add_option("--data", ev.data, "dataset directory or manifest")->required();
  c_eval->add_option("--protocol", ev.protocols, "ALL, AA, GG, AG, A2G or G2A (repeatable; default all)")
      ->check(CLI::IsMember({"ALL", "AA", "GG", "AG", "A2G", "G2A"}));
  c_eval->add_option("--metric", ev.metric, "distance")->check(CLI::IsMember({"l2", "cosine"}));
  c_eval->add_option("--out", ev.out, "JSON output file (default stdout)");

  GradCheckArgs gc;
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
  gc.cfg.add(c_grad, true);
  c_grad->add_option("--fd-step", gc.h, "central difference step");
  c_grad->add_option("--tolerance", gc.tolerance, "maximum relative error for exit code 0");
  c_grad->add_option("--max-entries", gc.max_entries, "entries checked per parameter tensor (0 = all)");
  c_grad->add_option("--ids", gc.ids, "identities in the micro-batch");
  c_grad->add_option("--per-id", gc.per_id, "images per identity");

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench", "forward latency of vdt vs baseline");
  c_bench->add_option("--scale", bn.scale, "model shapes: full (N=12, d=768, 256x128 input) or desk")
      ->check(CLI::IsMember({"full", "desk"}));
  c_bench->add_option("--reps", bn.reps, "timed repetitions per mode")->check(CLI::PositiveNumber);
  c_bench->add_option("--batch", bn.batch, "images per forward pass")->check(CLI::PositiveNumber);
  c_bench->add_option("--seed", bn.seed, "seed for weights and inputs");

  SweepArgs sw;
  auto* c_sweep = app.add_subcommand("sweep-lambda", "train one model per lambda and tabulate results");
  sw.cfg.add(c_sweep, true);
  c_sweep->add_option("--train", sw.train_dir, "training dataset")->required();
  c_sweep->add_option("--test", sw.test_dir, "test dataset")->required();
  c_sweep->add_option("--values", sw.values, "lambda values")->delimiter(',');
  c_sweep->add_option("--protocol", sw.protocols, "protocols to tabulate (repeatable; default all)")
      ->check(CLI::IsMember({"ALL", "AA", "GG", "AG", "A2G", "G2A"}));
  c_sweep->add_option("--out", sw.out, "table output file (default stdout)");

  ExportArgs ex;
  auto* c_export = app.add_subcommand("export-embeddings", "write meta-token features as EMB1 + TSV sidecar");
  c_export->add_option("--checkpoint", ex.checkpoint, "checkpoint file")->required();
  c_export->add_option("--data", ex.data, "dataset directory or manifest")->required();
  c_export->add_option("--out", ex.out, "output .emb path")->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());  // CLI11 consumes a reversed vector
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*c_gen) return gen_data(gen, out);
    if (*c_train) return train_cmd(tr, out);
    if (*c_eval) return eval_cmd(ev, out);
    if (*c_grad) return gradcheck_cmd(gc, out);
    if (*c_bench) return bench_cmd(bn, out);
    if (*c_sweep) return sweep_cmd(sw, out, err);
    if (*c_export) return export_cmd(ex, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace vdt::cli
