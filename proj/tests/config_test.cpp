#include <gtest/gtest.h>

#include "vdt/config.hpp"

namespace vdt {
namespace {

TEST(Config, ParsesKeysCommentsAndBlankLines) {
  ModelConfig m;
  TrainConfig t;
  apply_config_text(
      "# desk run\n"
      "\n"
      "embed_dim = 32\n"
      "  num_blocks=2  \n"
      "mode = baseline\n"
      "lambda = 0.001\n"
      "triplet_mode = hard_margin\n"
      "disable_orthogonal = true\n"
      "precision = double\n"
      "seed = 17\n",
      m, t);
  EXPECT_EQ(m.embed_dim, 32u);
  EXPECT_EQ(m.num_blocks, 2u);
  EXPECT_EQ(m.mode, Mode::kBaselineVit);
  EXPECT_DOUBLE_EQ(t.lambda, 0.001);
  EXPECT_EQ(t.triplet_mode, TripletMode::kHardMargin);
  EXPECT_TRUE(t.disable_orthogonal);
  EXPECT_EQ(t.precision, Precision::kDouble);
  EXPECT_EQ(t.seed, 17u);
}

TEST(Config, UnknownKeyReportsLine) {
  ModelConfig m;
  TrainConfig t;
  try {
    apply_config_text("epochs = 3\n# note\nlearning_rate = 0.1\n", m, t);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST(Config, BadValuesReportLine) {
  ModelConfig m;
  TrainConfig t;
  const char* bad[] = {"epochs = -1\n", "epochs = 3x\n", "lambda = abc\n", "mode = hybrid\n",
                       "disable_orthogonal = maybe\n", "lambda 0.5\n", " = 4\n"};
  for (const char* text : bad) {
    try {
      apply_config_text(std::string("seed = 1\n") + text, m, t);
      FAIL() << "accepted: " << text;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), 2u) << text;
    }
  }
}

TEST(Config, FlagOverridesRaiseConfigError) {
  ModelConfig m;
  TrainConfig t;
  EXPECT_THROW(set_config_value(m, t, "nope", "1"), ConfigError);
  EXPECT_THROW(set_config_value(m, t, "epochs", "x"), ConfigError);
  set_config_value(m, t, "epochs", "5");
  EXPECT_EQ(t.epochs, 5u);
}

TEST(Config, TextRoundTripsEveryKey) {
  ModelConfig m;
  m.embed_dim = 48;
  m.num_heads = 6;
  m.mode = Mode::kBaselineVit;
  m.disable_subtraction = true;
  m.layer_norm_eps = 1e-5;
  TrainConfig t;
  t.lr_initial = 0.0123456789012345;
  t.margin = 0.25;
  t.P = 16;
  t.precision = Precision::kDouble;

  ModelConfig m2;
  TrainConfig t2;
  apply_config_text(config_text(m, t), m2, t2);
  EXPECT_EQ(config_text(m2, t2), config_text(m, t));
  EXPECT_EQ(t2.lr_initial, t.lr_initial);
  EXPECT_EQ(m2.layer_norm_eps, m.layer_norm_eps);

  const std::string model_only = config_text(m, t, true);
  EXPECT_NE(model_only.find("embed_dim"), std::string::npos);
  EXPECT_EQ(model_only.find("lr_initial"), std::string::npos);
  EXPECT_EQ(config_key_names().size(), 27u);
}

TEST(Config, TrainValidation) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  auto expect_bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](TrainConfig& c) { c.epochs = 0; });
  expect_bad([](TrainConfig& c) { c.P = 1; });
  expect_bad([](TrainConfig& c) { c.K = 1; });
  expect_bad([](TrainConfig& c) { c.lr_final = 1.0; });
  expect_bad([](TrainConfig& c) { c.momentum = 1.0; });
  expect_bad([](TrainConfig& c) { c.erase_prob = 1.5; });
  expect_bad([](TrainConfig& c) { c.lambda = -1.0; });
}

}  // namespace
}  // namespace vdt
