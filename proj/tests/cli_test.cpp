#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vdt/cli.hpp"

namespace vdt {
namespace {

using testing::TempDir;

struct CliRun {
  int code;
  std::string out, err;
};

CliRun vdt(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Line of `help` describing `flag`, or "" when absent.
std::string help_line(const std::string& help, const std::string& flag) {
  std::istringstream in(help);
  std::string line;
  while (std::getline(in, line)) {
    const auto pos = line.find(flag + " ");
    if (pos != std::string::npos && line.find_first_not_of(' ') == pos) return line;
  }
  return "";
}

TEST(Cli, HelpListsEveryFlagWithDefaults) {
  using Flags = std::vector<std::pair<std::string, std::string>>;  // flag, shown default ("" = none)
  const std::vector<std::pair<std::string, Flags>> commands = {
      {"gen-data",
       {{"--out", ""}, {"--seed", "[0]"}, {"--num-ids", "[64]"}, {"--images-per-id", "[4]"},
        {"--cameras-per-view", "[2]"}, {"--view-bias", "[0.8]"}, {"--occlusion", "[0.2]"}, {"--height", "[32]"},
        {"--width", "[16]"}}},
      {"train",
       {{"--config", ""}, {"--set", ""}, {"--seed", "[0]"}, {"--mode", "[vdt]"}, {"--ablate", "[none]"},
        {"--lambda", "[1]"}, {"--epochs", "[30]"}, {"--precision", "[float]"}, {"--data", ""}, {"--out", ""},
        {"--test", ""}, {"--eval-every", "[0]"}}},
      {"eval",
       {{"--checkpoint", ""}, {"--data", ""}, {"--protocol", ""}, {"--metric", "[l2]"}, {"--seed", "[0]"},
        {"--mode", "[vdt]"}, {"--out", ""}}},
      {"gradcheck",
       {{"--fd-step", "[1e-05]"}, {"--tolerance", "[0.0001]"}, {"--max-entries", "[16]"}, {"--ids", "[2]"},
        {"--per-id", "[4]"}, {"--lambda", "[1]"}}},
      {"bench", {{"--scale", "[full]"}, {"--reps", "[7]"}, {"--batch", "[1]"}, {"--seed", "[0]"}}},
      {"sweep-lambda",
       {{"--train", ""}, {"--test", ""}, {"--values", "[[0.0001,0.001,0.01,0.1,1,10]]"}, {"--protocol", ""},
        {"--epochs", "[30]"}, {"--out", ""}}},
      {"export-embeddings", {{"--checkpoint", ""}, {"--data", ""}, {"--out", ""}}},
  };
  for (const auto& [cmd, flags] : commands) {
    const CliRun r = vdt({cmd, "--help"});
    EXPECT_EQ(r.code, 0) << cmd;
    for (const auto& [flag, def] : flags) {
      const std::string line = help_line(r.out, flag);
      EXPECT_FALSE(line.empty()) << cmd << " help lacks " << flag << "\n" << r.out;
      EXPECT_NE(line.find(def), std::string::npos) << cmd << " " << flag << " default " << def << ": " << line;
    }
  }
  EXPECT_EQ(vdt({"--help"}).code, 0);
}

TEST(Cli, UsageErrorsExitNonzero) {
  EXPECT_NE(vdt({}).code, 0);
  EXPECT_NE(vdt({"frobnicate"}).code, 0);
  EXPECT_NE(vdt({"eval", "--data", "x", "--bogus"}).code, 0);
  EXPECT_NE(vdt({"eval", "--data", "x", "--protocol", "XY"}).code, 0);
  EXPECT_NE(vdt({"train", "--out", "x"}).code, 0);
}

TEST(Cli, DownstreamErrorsNameTheComponent) {
  TempDir dir("cli");
  const CliRun r = vdt({"train", "--data", (dir / "missing").string(), "--out", (dir / "run").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("manifest: cannot open"), std::string::npos) << r.err;

  const CliRun bad = vdt({"gradcheck", "--set", "no_such_key=1"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("config: unknown key 'no_such_key'"), std::string::npos) << bad.err;
}

TEST(Cli, FlagsOverrideConfigFile) {
  TempDir dir("cli");
  std::ofstream(dir / "c.txt") << "epochs = 7\nlambda = 0.25\nembed_dim = 32\n";
  const auto& cfg_path = (dir / "c.txt").string();
  cli::ConfigFlags flags;
  CLI::App app;
  flags.add(&app, true);
  app.parse(std::vector<std::string>{"2", "--epochs", cfg_path, "--config", "both", "--ablate", "lambda=0.5", "--set"});
  const auto [m, t] = flags.resolve();
  EXPECT_EQ(t.epochs, 2u);
  EXPECT_DOUBLE_EQ(t.lambda, 0.5);
  EXPECT_EQ(m.embed_dim, 32u);
  EXPECT_TRUE(m.disable_subtraction);
  EXPECT_TRUE(t.disable_orthogonal);
  EXPECT_EQ(t.seed, 0u);
}

TEST(Cli, GenDataIsByteReproducible) {
  TempDir a("cli"), b("cli");
  for (const TempDir* d : {&a, &b}) {
    ASSERT_EQ(vdt({"gen-data", "--num-ids", "3", "--seed", "5", "--out", d->path().string()}).code, 0);
  }
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), a.path());
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2u * (3 * 8 + 2));
  const Dataset test = load_manifest(a / "test/manifest.tsv");
  EXPECT_EQ(test.identities(), (std::vector<std::size_t>{3, 4, 5}));
}

// Chance-level mAP under random rankings, estimated by simulation with an
// independent implementation of the gallery rules.
std::pair<double, double> chance_map(const std::vector<Sample>& s, std::size_t sims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> maps;
  for (std::size_t it = 0; it < sims; ++it) {
    double sum = 0;
    std::size_t n = 0;
    for (const Sample& q : s) {
      std::vector<int> rel;
      for (const Sample& g : s) {
        if (g.person_id == q.person_id && g.camera_id == q.camera_id) continue;
        rel.push_back(g.person_id == q.person_id);
      }
      if (std::count(rel.begin(), rel.end(), 1) == 0) continue;
      std::shuffle(rel.begin(), rel.end(), rng);
      double hits = 0, ap = 0;
      for (std::size_t r = 0; r < rel.size(); ++r) {
        if (rel[r]) ap += ++hits / static_cast<double>(r + 1);
      }
      sum += ap / hits;
      ++n;
    }
    maps.push_back(sum / static_cast<double>(n));
  }
  double mean = 0, var = 0;
  for (double m : maps) mean += m / static_cast<double>(sims);
  for (double m : maps) var += (m - mean) * (m - mean) / static_cast<double>(sims - 1);
  return {mean, std::sqrt(var)};
}

TEST(Cli, UntrainedEvalOnUninformativeLabelsIsAtChance) {
  TempDir dir("cli");
  ASSERT_EQ(vdt({"gen-data", "--num-ids", "16", "--out", dir.path().string()}).code, 0);
  // Shuffle identity labels across images so features carry no label signal.
  const Dataset test = load_manifest(dir / "test/manifest.tsv");
  std::vector<std::size_t> ids;
  for (const Sample& s : test.samples()) ids.push_back(s.person_id);
  std::shuffle(ids.begin(), ids.end(), std::mt19937_64(3));
  std::ofstream m(dir / "test/shuffled.tsv");
  m << kManifestHeader << "\n";
  std::vector<Sample> shuffled = test.samples();
  for (std::size_t i = 0; i < shuffled.size(); ++i) {
    shuffled[i].person_id = ids[i];
    m << shuffled[i].image_path << "\t" << ids[i] << "\t" << shuffled[i].camera_id << "\t"
      << static_cast<int>(shuffled[i].view) << "\n";
  }
  m.close();

  const CliRun r = vdt({"eval", "--data", (dir / "test/shuffled.tsv").string(), "--protocol", "ALL", "--seed", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const double got = nlohmann::json::parse(r.out)["ALL"]["mAP"].get<double>();
  const auto [mean, sd] = chance_map(shuffled, 200, 9);
  EXPECT_NEAR(got, mean, 5 * sd) << "chance " << mean << " sd " << sd;
}

TEST(Cli, TrainEvalExportRoundTrip) {
  TempDir dir("cli");
  const std::string data = (dir / "data").string(), run = (dir / "run").string();
  ASSERT_EQ(vdt({"gen-data", "--num-ids", "4", "--images-per-id", "2", "--out", data}).code, 0);
  const CliRun t = vdt({"train", "--data", data + "/train", "--out", run, "--epochs", "2", "--set", "P=2",
                     "--set", "embed_dim=16", "--set", "num_heads=2", "--set", "num_blocks=1"});
  ASSERT_EQ(t.code, 0) << t.err;
  const std::string cfg = slurp(dir / "run/config.txt");
  EXPECT_NE(cfg.find("num_identities = 4"), std::string::npos);
  EXPECT_NE(cfg.find("epochs = 2"), std::string::npos);
  const std::string log = slurp(dir / "run/train_log.tsv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 1 + 2 * 2);

  const CliRun e = vdt({"eval", "--checkpoint", run + "/checkpoint.vdt", "--data", data + "/test", "--out", run + "/r.json"});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto report = nlohmann::json::parse(slurp(dir / "run/r.json"));
  EXPECT_EQ(report.size(), 6u);
  for (const char* p : {"ALL", "AA", "GG", "AG", "A2G", "G2A"}) EXPECT_TRUE(report.contains(p)) << p;

  const CliRun x = vdt({"export-embeddings", "--checkpoint", run + "/checkpoint.vdt", "--data", data + "/test", "--out",
                     run + "/f.emb"});
  ASSERT_EQ(x.code, 0) << x.err;
  const auto feats = read_embeddings(dir / "run/f.emb");
  EXPECT_EQ(feats.rows(), 16u);
  EXPECT_EQ(feats.cols(), 16u);
}

TEST(Cli, GradcheckPassesOnSmallModel) {
  const CliRun r = vdt({"gradcheck", "--set", "embed_dim=16", "--set", "num_heads=2", "--set", "num_blocks=2"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("max relative error"), std::string::npos);
}

}  // namespace
}  // namespace vdt
