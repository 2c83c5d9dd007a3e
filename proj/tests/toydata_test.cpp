#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "vdt/toydata.hpp"

namespace vdt {
namespace {

using testing::TempDir;
namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

GenConfig small_config(std::size_t ids = 4) {
  GenConfig g;
  g.num_ids = ids;
  g.images_per_id_per_view = 2;
  g.seed = 11;
  return g;
}

// ppm ----------------------------------------------------------------------

TEST(Ppm, RoundTripIsExact) {
  TempDir dir("ppm");
  Image img(5, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 37);
  write_ppm((dir / "a.ppm").string(), img);
  EXPECT_EQ(read_ppm((dir / "a.ppm").string()), img);
}

TEST(Ppm, TruncatedOrWrongMagicIsIoError) {
  TempDir dir("ppm_bad");
  write_text(dir / "short.ppm", "P6\n2 2\n255\nabc");
  write_text(dir / "p3.ppm", "P3\n1 1\n255\n0 0 0\n");
  EXPECT_THROW(read_ppm((dir / "short.ppm").string()), IoError);
  EXPECT_THROW(read_ppm((dir / "p3.ppm").string()), IoError);
  EXPECT_THROW(read_ppm((dir / "absent.ppm").string()), IoError);
}

TEST(Ppm, ToTensorMapsBytesToUnitInterval) {
  Image img(1, 2);
  img.pixels = {0, 255, 51, 102, 153, 204};
  auto t = to_tensor<double>({img});
  EXPECT_EQ(t.shape(), (Shape{1, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(t[0], -1.0);
  EXPECT_DOUBLE_EQ(t[1], 1.0);
  EXPECT_NEAR(t[2], 51 / 127.5 - 1, 1e-15);
}

// generate -----------------------------------------------------------------

TEST(Generate, DefaultShapeGives512ImagesAndRows) {
  TempDir dir("gen512");
  GenConfig g;
  g.num_ids = 64;
  g.images_per_id_per_view = 4;
  Dataset d = generate(g, dir.path());
  EXPECT_EQ(d.size(), 512u);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "images")) files += e.path().extension() == ".ppm";
  EXPECT_EQ(files, 512u);

  Dataset loaded = load_manifest(dir / "manifest.tsv");
  ASSERT_EQ(loaded.size(), 512u);
  // Recount the identity and view histogram from the loaded rows.
  std::map<std::size_t, std::array<std::size_t, 2>> hist;
  for (const Sample& s : loaded.samples()) {
    ++hist[s.person_id][static_cast<int>(s.view)];
    EXPECT_EQ(s.camera_id / g.cameras_per_view, static_cast<std::size_t>(s.view));
  }
  ASSERT_EQ(hist.size(), 64u);
  for (const auto& [id, counts] : hist) {
    EXPECT_LT(id, 64u);
    EXPECT_EQ(counts[0], 4u);
    EXPECT_EQ(counts[1], 4u);
  }
  EXPECT_EQ(loaded.samples(), d.samples());
  EXPECT_EQ(loaded.image(17), read_ppm((dir.path() / d[17].image_path).string()));
}

TEST(Generate, ZeroBiasRendersViewsIdentically) {
  GenConfig g = small_config(6);
  g.view_bias_strength = 0.0;
  g.occlusion_prob = 0.5;
  for (std::size_t id = 0; id < g.num_ids; ++id) {
    for (std::size_t k = 0; k < g.images_per_id_per_view; ++k) {
      EXPECT_EQ(render(g, id, k, View::kGround), render(g, id, k, View::kAerial)) << id << "/" << k;
    }
  }
}

TEST(Generate, SameSeedGivesByteIdenticalFiles) {
  TempDir a("gen_a"), b("gen_b");
  GenConfig g = small_config();
  generate(g, a.path());
  generate(g, b.path());
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.path());
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++compared;
  }
  EXPECT_EQ(compared, g.num_images() + 2);
}

TEST(Generate, DifferentSeedsDiffer) {
  GenConfig g = small_config();
  GenConfig h = g;
  h.seed = g.seed + 1;
  EXPECT_NE(render(g, 0, 0, View::kGround), render(h, 0, 0, View::kGround));
}

TEST(Generate, UnwritableDirectoryIsIoError) {
  TempDir dir("gen_ro");
  write_text(dir / "file", "x");
  EXPECT_THROW(generate(small_config(), dir / "file" / "sub"), IoError);
}

TEST(Generate, InvalidConfigIsConfigError) {
  GenConfig g = small_config(1);
  EXPECT_THROW(g.validate(), ConfigError);
  g = small_config();
  g.image_height = 30;
  EXPECT_THROW(g.validate(), ConfigError);
  g = small_config();
  g.view_bias_strength = 1.5;
  EXPECT_THROW(g.validate(), ConfigError);
}

double mean_view_gap(double strength) {
  GenConfig g = small_config(16);
  g.view_bias_strength = strength;
  g.occlusion_prob = 0.0;
  double total = 0;
  std::size_t n = 0;
  for (std::size_t id = 0; id < g.num_ids; ++id) {
    for (std::size_t k = 0; k < g.images_per_id_per_view; ++k) {
      Image a = render(g, id, k, View::kAerial), b = render(g, id, k, View::kGround);
      double ss = 0;
      for (std::size_t i = 0; i < a.pixels.size(); ++i) ss += std::pow(double(a.pixels[i]) - double(b.pixels[i]), 2);
      total += std::sqrt(ss);
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

TEST(Generate, ViewGapGrowsWithBiasStrength) {
  const double g0 = mean_view_gap(0.0), g3 = mean_view_gap(0.3), g8 = mean_view_gap(0.8);
  EXPECT_EQ(g0, 0.0);
  EXPECT_GT(g3, g0);
  EXPECT_GT(g8, g0);
  EXPECT_GT(g8, g3);
}

// load_manifest ------------------------------------------------------------

class ManifestTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Image img(32, 16, 7);
    write_ppm((dir_ / "x.ppm").string(), img);
  }
  Dataset load(const std::string& text) {
    write_text(dir_ / "manifest.tsv", text);
    return load_manifest(dir_ / "manifest.tsv");
  }
  std::size_t error_line(const std::string& text) {
    try {
      load(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  }
  TempDir dir_{"manifest"};
  const std::string header_ = std::string(kManifestHeader) + "\n";
};

TEST_F(ManifestTest, EmptyManifestIsEmptyDataset) {
  EXPECT_TRUE(load(header_).empty());
  EXPECT_TRUE(load("").empty());
}

TEST_F(ManifestTest, ViewTwoIsParseErrorWithLine) {
  EXPECT_EQ(error_line(header_ + "x.ppm\t1\t0\t0\nx.ppm\t1\t3\t2\n"), 3u);
}

TEST_F(ManifestTest, MalformedRowsReportTheirLine) {
  EXPECT_EQ(error_line(header_ + "x.ppm\t1\t0\n"), 2u);
  EXPECT_EQ(error_line(header_ + "x.ppm\t1\t0\t0\nx.ppm\tbob\t0\t0\n"), 3u);
  EXPECT_EQ(error_line(header_ + "x.ppm\t-1\t0\t0\n"), 2u);
  EXPECT_EQ(error_line("path\tid\tcam\tview\n"), 1u);
}

TEST_F(ManifestTest, CameraWithTwoViewsIsParseError) {
  EXPECT_EQ(error_line(header_ + "x.ppm\t1\t4\t0\nx.ppm\t2\t4\t1\n"), 3u);
}

TEST_F(ManifestTest, MissingImageIsIoError) {
  EXPECT_THROW(load(header_ + "nope.ppm\t1\t0\t0\n"), IoError);
}

TEST_F(ManifestTest, ParsesFieldsAndClassLabels) {
  Dataset d = load(header_ + "x.ppm\t9\t0\t0\nx.ppm\t3\t2\t1\nx.ppm\t9\t2\t1\n");
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d[1].person_id, 3u);
  EXPECT_EQ(d[1].camera_id, 2u);
  EXPECT_EQ(d[1].view, View::kAerial);
  EXPECT_EQ(d.identities(), (std::vector<std::size_t>{3, 9}));
  EXPECT_EQ(d.class_labels(), (std::vector<std::size_t>{1, 0, 1}));
  EXPECT_EQ(d.image(0).height, 32u);
}

// pk_sample ----------------------------------------------------------------

Dataset synthetic(const std::vector<std::size_t>& images_per_id) {
  std::vector<Sample> samples;
  for (std::size_t id = 0; id < images_per_id.size(); ++id) {
    for (std::size_t k = 0; k < images_per_id[id]; ++k) {
      samples.push_back({"unused", id, k % 2, k % 2 ? View::kAerial : View::kGround});
    }
  }
  return Dataset("/nonexistent", samples);
}

void expect_pk(const Dataset& d, const std::vector<std::size_t>& idx, std::size_t P, std::size_t K) {
  ASSERT_EQ(idx.size(), P * K);
  std::set<std::size_t> ids;
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t id = d[idx[p * K]].person_id;
    EXPECT_TRUE(ids.insert(id).second);
    for (std::size_t k = 0; k < K; ++k) EXPECT_EQ(d[idx[p * K + k]].person_id, id);
  }
}

TEST(PkSample, BatchSizes) {
  Dataset d = synthetic(std::vector<std::size_t>(64, 8));
  expect_pk(d, pk_indices(d, 32, 4, 1, 0), 32, 4);
  EXPECT_EQ(pk_indices(d, 32, 4, 1, 0).size(), 128u);
  expect_pk(d, pk_indices(d, 2, 2, 1, 0), 2, 2);
}

TEST(PkSample, SingleImageIdentityIsRepeated) {
  Dataset d = synthetic({1});
  EXPECT_EQ(pk_indices(d, 1, 4, 3, 0), (std::vector<std::size_t>{0, 0, 0, 0}));
}

TEST(PkSample, TooFewIdentitiesIsContractError) {
  Dataset d = synthetic({4, 4, 4});
  EXPECT_THROW(pk_indices(d, 4, 2, 0, 0), ContractError);
}

TEST(PkSample, InvariantAndDeterminismOverManySteps) {
  Dataset d = synthetic({8, 3, 5, 1, 8, 8, 2, 6, 4, 7});
  std::set<std::vector<std::size_t>> distinct;
  for (std::uint64_t step = 0; step < 200; ++step) {
    auto idx = pk_indices(d, 4, 4, 42, step);
    expect_pk(d, idx, 4, 4);
    EXPECT_EQ(idx, pk_indices(d, 4, 4, 42, step));
    // Identities with at least K images never repeat an image.
    for (std::size_t p = 0; p < 4; ++p) {
      std::set<std::size_t> imgs(idx.begin() + p * 4, idx.begin() + p * 4 + 4);
      std::size_t pool = 0;
      for (const Sample& s : d.samples()) pool += s.person_id == d[idx[p * 4]].person_id;
      if (pool >= 4) {
        EXPECT_EQ(imgs.size(), 4u);
      }
    }
    distinct.insert(idx);
  }
  EXPECT_GT(distinct.size(), 150u);
}

// augment ------------------------------------------------------------------

Batch random_batch(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    Image img(32, 16);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(1 + rng() % 255);  // never zero
    b.images.push_back(img);
    b.person_ids.push_back(i);
    b.views.push_back(View::kGround);
    b.indices.push_back(i);
  }
  return b;
}

TEST(Augment, InferenceIsIdentity) {
  Batch b = random_batch(5, 1);
  Batch out = augment(b, false, 99, 3);
  ASSERT_EQ(out.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(out.images[i].pixels, b.images[i].pixels);
}

TEST(Augment, ForcedEraseZeroesExactlyTheRecordedRectangle) {
  Batch b = random_batch(40, 2);
  AugmentConfig cfg;
  cfg.erase_prob = 1.0;
  std::vector<AugmentRecord> rec;
  Batch out = augment(b, true, 5, 0, cfg, &rec);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const AugmentRecord& r = rec[i];
    ASSERT_TRUE(r.erased);
    EXPECT_LE(r.crop_y, 2 * cfg.pad);
    EXPECT_LE(r.crop_x, 2 * cfg.pad);
    // Replay: rebuild the output from the record alone.
    const Image& src = b.images[i];
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        const bool in_rect = y >= r.erase_y && y < r.erase_y + r.erase_h && x >= r.erase_x && x < r.erase_x + r.erase_w;
        const long sy = long(y + r.crop_y) - 2, sx = long(x + r.crop_x) - 2;
        for (std::size_t c = 0; c < 3; ++c) {
          std::uint8_t want = 0;
          if (!in_rect && sy >= 0 && sx >= 0 && sy < 32 && sx < 16) want = src.at(sy, sx, c);
          ASSERT_EQ(out.images[i].at(y, x, c), want) << i << " " << y << " " << x;
        }
      }
    }
  }
}

TEST(Augment, SeededRunsReplayIdentically) {
  Batch b = random_batch(16, 3);
  std::vector<AugmentRecord> r1, r2, r3;
  augment(b, true, 7, 4, {}, &r1);
  augment(b, true, 7, 4, {}, &r2);
  augment(b, true, 7, 5, {}, &r3);
  EXPECT_EQ(r1, r2);
  EXPECT_NE(r1, r3);
  std::size_t erased = 0;
  for (const auto& r : r1) erased += r.erased;
  EXPECT_GT(erased, 0u);
  EXPECT_LT(erased, 16u);
}

}  // namespace
}  // namespace vdt
