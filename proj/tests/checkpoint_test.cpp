#include <cstring>
#include <fstream>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vdt/checkpoint.hpp"

namespace vdt {
namespace {

using testing::TempDir;

ModelConfig small_model() {
  ModelConfig c;
  c.num_blocks = 2;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.num_identities = 5;
  return c;
}

template <typename T>
void expect_bit_identical(const ModelParams<T>& a, const ModelParams<T>& b) {
  std::vector<const DenseArray<T>*> lhs, rhs;
  a.for_each([&](const std::string&, const DenseArray<T>& x) { lhs.push_back(&x); });
  b.for_each([&](const std::string&, const DenseArray<T>& x) { rhs.push_back(&x); });
  ASSERT_EQ(lhs.size(), rhs.size());
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    ASSERT_EQ(lhs[i]->shape(), rhs[i]->shape());
    EXPECT_EQ(std::memcmp(lhs[i]->data(), rhs[i]->data(), lhs[i]->size() * sizeof(T)), 0);
  }
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointError::Kind load_failure(const std::filesystem::path& p, const std::optional<ModelConfig>& expected = {}) {
  try {
    load_checkpoint<float>(p, expected);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "load succeeded";
  return CheckpointError::Kind::kUnsupported;
}

TEST(Checkpoint, FloatRoundTripIsBitExact) {
  TempDir dir("ckpt");
  const ModelConfig c = small_model();
  const auto params = init_params<float>(c, 3);
  save_checkpoint(params, c, dir / "m.vdt");
  const auto loaded = load_checkpoint<float>(dir / "m.vdt");
  EXPECT_EQ(loaded.stored_scalar_bytes, 4u);
  EXPECT_EQ(config_text(loaded.config, {}, true), config_text(c, {}, true));
  expect_bit_identical(params, loaded.params);
  EXPECT_EQ(checkpoint_scalar_bytes(dir / "m.vdt"), 4u);
}

TEST(Checkpoint, DoubleRoundTripIsBitExact) {
  TempDir dir("ckpt");
  ModelConfig c = small_model();
  c.mode = Mode::kBaselineVit;
  const auto params = init_params<double>(c, 4);
  save_checkpoint(params, c, dir / "m.vdt");
  const auto loaded = load_checkpoint<double>(dir / "m.vdt", c);
  EXPECT_EQ(loaded.config.mode, Mode::kBaselineVit);
  expect_bit_identical(params, loaded.params);
  EXPECT_EQ(checkpoint_scalar_bytes(dir / "m.vdt"), 8u);
}

TEST(Checkpoint, LoadsAcrossPrecisions) {
  TempDir dir("ckpt");
  const ModelConfig c = small_model();
  const auto params = init_params<float>(c, 5);
  save_checkpoint(params, c, dir / "m.vdt");
  const auto wide = load_checkpoint<double>(dir / "m.vdt");
  EXPECT_EQ(wide.stored_scalar_bytes, 4u);
  const auto narrow = map_weights<DenseArray<float>>(
      wide.params, [](const std::string&, const DenseArray<double>& a) { return a.template cast<float>(); });
  expect_bit_identical(params, narrow);
}

TEST(Checkpoint, RejectsWrongMagic) {
  TempDir dir("ckpt");
  save_checkpoint(init_params<float>(small_model(), 0), small_model(), dir / "m.vdt");
  auto bytes = slurp(dir / "m.vdt");
  bytes[3] = '2';
  spit(dir / "bad.vdt", bytes);
  EXPECT_EQ(load_failure(dir / "bad.vdt"), CheckpointError::Kind::kMagicMismatch);
  spit(dir / "tiny.vdt", {'V', 'D'});
  EXPECT_EQ(load_failure(dir / "tiny.vdt"), CheckpointError::Kind::kTruncated);
}

TEST(Checkpoint, RejectsEveryTruncation) {
  TempDir dir("ckpt");
  save_checkpoint(init_params<float>(small_model(), 0), small_model(), dir / "m.vdt");
  const auto bytes = slurp(dir / "m.vdt");
  for (std::size_t cut : {std::size_t{4}, std::size_t{10}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    spit(dir / "cut.vdt", std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
    EXPECT_EQ(load_failure(dir / "cut.vdt"), CheckpointError::Kind::kTruncated) << cut;
  }
  auto longer = bytes;
  longer.push_back(0);
  spit(dir / "long.vdt", longer);
  EXPECT_EQ(load_failure(dir / "long.vdt"), CheckpointError::Kind::kUnsupported);
}

TEST(Checkpoint, RejectsShapeMismatch) {
  TempDir dir("ckpt");
  const ModelConfig c = small_model();
  save_checkpoint(init_params<float>(c, 0), c, dir / "m.vdt");

  ModelConfig wider = c;
  wider.embed_dim = 32;
  EXPECT_EQ(load_failure(dir / "m.vdt", wider), CheckpointError::Kind::kShapeMismatch);
  ModelConfig deeper = c;
  deeper.num_blocks = 3;
  EXPECT_EQ(load_failure(dir / "m.vdt", deeper), CheckpointError::Kind::kShapeMismatch);
  ModelConfig baseline = c;
  baseline.mode = Mode::kBaselineVit;
  EXPECT_EQ(load_failure(dir / "m.vdt", baseline), CheckpointError::Kind::kShapeMismatch);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/m.vdt"), IoError);
}

}  // namespace
}  // namespace vdt
