#pragma once

// Synthetic aerial/ground pedestrian dataset.
//
// Each identity is a procedural sprite (head, striped shirt, trousers,
// optional bag) whose colours and proportions come from (seed, person_id).
// Image k of an identity uses the same pose jitter in both views, so the
// only systematic difference between its ground and aerial images is the
// aerial transform, which scales with view_bias_strength and vanishes at 0.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vdt/error.hpp"
#include "vdt/image.hpp"
#include "vdt/rng.hpp"

namespace vdt {

enum class View : std::uint8_t { kGround = 0, kAerial = 1 };

inline const char* view_name(View v) { return v == View::kGround ? "ground" : "aerial"; }

struct Sample {
  std::string image_path;  // relative to the dataset root
  std::size_t person_id = 0;
  std::size_t camera_id = 0;
  View view = View::kGround;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct GenConfig {
  std::size_t num_ids = 64;
  std::size_t id_offset = 0;
  std::size_t images_per_id_per_view = 4;
  std::size_t image_height = 32;
  std::size_t image_width = 16;
  std::size_t cameras_per_view = 2;
  std::uint64_t seed = 0;
  double view_bias_strength = 0.8;
  double occlusion_prob = 0.2;

  void validate(std::size_t patch_size = 8) const {
    auto fail = [](const std::string& msg) { throw ConfigError("toydata", msg); };
    if (num_ids < 2) fail("num_ids must be at least 2");
    if (images_per_id_per_view == 0) fail("images_per_id_per_view must be positive");
    if (cameras_per_view == 0) fail("cameras_per_view must be positive");
    if (image_height < 8 || image_width < 4) fail("images must be at least 8x4");
    if (patch_size == 0 || image_height % patch_size != 0 || image_width % patch_size != 0) {
      fail("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
           " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (!(view_bias_strength >= 0.0 && view_bias_strength <= 1.0)) fail("view_bias_strength must lie in [0, 1]");
    if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) fail("occlusion_prob must lie in [0, 1]");
  }

  std::size_t num_images() const { return num_ids * images_per_id_per_view * 2; }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "num_ids = " << num_ids << "\n"
       << "id_offset = " << id_offset << "\n"
       << "images_per_id_per_view = " << images_per_id_per_view << "\n"
       << "image_height = " << image_height << "\n"
       << "image_width = " << image_width << "\n"
       << "cameras_per_view = " << cameras_per_view << "\n"
       << "seed = " << seed << "\n"
       << "view_bias_strength = " << view_bias_strength << "\n"
       << "occlusion_prob = " << occlusion_prob << "\n";
    return os.str();
  }
};

// Ground cameras are 0..c-1, aerial cameras c..2c-1.
inline std::size_t camera_for(const GenConfig& g, View view, std::size_t k) {
  return static_cast<std::size_t>(view) * g.cameras_per_view + k % g.cameras_per_view;
}

// ---------------------------------------------------------------------------
// Rendering

namespace toy {

using Rgb = std::array<float, 3>;

inline Rgb lerp(const Rgb& a, const Rgb& b, float t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

struct Appearance {
  Rgb skin, hair, shirt, stripe, pants, shoes, bag;
  int stripe_dir = 0;  // 0 plain, 1 horizontal, 2 vertical
  float stripe_period = 3;
  float body_half_width = 0.3f;  // fraction of image width
  float leg_top = 0.58f;         // fraction of image height
  bool has_bag = false;
  bool bag_left = false;
  bool long_sleeves = false;
};

inline Rgb random_color(Rng& rng) {
  return {static_cast<float>(uniform(rng, 0.05, 0.95)), static_cast<float>(uniform(rng, 0.05, 0.95)),
          static_cast<float>(uniform(rng, 0.05, 0.95))};
}

inline Appearance appearance(std::uint64_t seed, std::size_t person_id) {
  Rng rng = make_rng(Stream::kAppearance, {seed, person_id});
  static constexpr std::array<Rgb, 5> kSkin{{{0.96f, 0.80f, 0.69f},
                                              {0.87f, 0.67f, 0.52f},
                                              {0.72f, 0.52f, 0.38f},
                                              {0.55f, 0.38f, 0.26f},
                                              {0.36f, 0.24f, 0.16f}}};
  Appearance a;
  a.skin = kSkin[uniform_index(rng, kSkin.size())];
  const float h = static_cast<float>(uniform(rng, 0.02, 0.45));
  a.hair = {h, h * 0.8f, h * 0.6f};
  a.shirt = random_color(rng);
  a.stripe = random_color(rng);
  a.pants = random_color(rng);
  a.shoes = lerp(random_color(rng), {0, 0, 0}, 0.7f);
  a.bag = random_color(rng);
  a.stripe_dir = static_cast<int>(uniform_index(rng, 3));
  a.stripe_period = static_cast<float>(2 + uniform_index(rng, 4));
  a.body_half_width = static_cast<float>(uniform(rng, 0.24, 0.36));
  a.leg_top = static_cast<float>(uniform(rng, 0.54, 0.64));
  a.has_bag = uniform(rng, 0, 1) < 0.4;
  a.bag_left = uniform(rng, 0, 1) < 0.5;
  a.long_sleeves = uniform(rng, 0, 1) < 0.5;
  return a;
}

// Per-image nuisance shared by the ground and aerial image with the same k.
struct Jitter {
  float dx = 0, dy = 0, scale = 1;
  float brightness = 1;
  Rgb wall, floor;
  float tilt_sign = 1, tilt_mag = 1;
  std::uint64_t noise_key = 0;
  bool occluded = false;
  float occ_x0 = 0, occ_y0 = 0, occ_w = 0, occ_h = 0;  // pixels
  Rgb occ_color{};
};

inline Jitter jitter(const GenConfig& g, std::size_t person_id, std::size_t k) {
  Rng rng = make_rng(Stream::kRender, {g.seed, person_id, k});
  Jitter j;
  j.dx = static_cast<float>(uniform(rng, -1.5, 1.5));
  j.dy = static_cast<float>(uniform(rng, -1.5, 1.5));
  j.scale = static_cast<float>(uniform(rng, 0.92, 1.06));
  j.brightness = static_cast<float>(uniform(rng, 0.85, 1.15));
  j.wall = lerp(random_color(rng), {0.5f, 0.5f, 0.5f}, 0.6f);
  j.floor = lerp(random_color(rng), {0.4f, 0.4f, 0.4f}, 0.7f);
  j.tilt_sign = uniform(rng, 0, 1) < 0.5 ? -1.0f : 1.0f;
  j.tilt_mag = static_cast<float>(uniform(rng, 0.6, 1.0));
  j.noise_key = rng();

  Rng occ = make_rng(Stream::kOcclusion, {g.seed, person_id, k});
  j.occluded = uniform(occ, 0, 1) < g.occlusion_prob;
  const double area = static_cast<double>(g.image_height * g.image_width);
  // Rectangle covers 10%..50% of the image.
  const double frac = uniform(occ, 0.1, 0.5);
  const double aspect = std::exp(uniform(occ, std::log(0.5), std::log(2.0)));
  double w = std::min<double>(g.image_width, std::sqrt(area * frac * aspect));
  double hh = std::min<double>(g.image_height, area * frac / w);
  j.occ_w = static_cast<float>(w);
  j.occ_h = static_cast<float>(hh);
  j.occ_x0 = static_cast<float>(uniform(occ, 0, g.image_width - w));
  j.occ_y0 = static_cast<float>(uniform(occ, 0, g.image_height - hh));
  j.occ_color = lerp(random_color(occ), {0.3f, 0.3f, 0.3f}, 0.5f);
  return j;
}

// Colour of the person sprite at canonical coordinates (u across, v down,
// both in [0,1]), or nothing where the background shows.
inline std::optional<Rgb> sprite(const Appearance& a, float u, float v, float px_w, float px_h) {
  const float x = u - 0.5f;
  // Head.
  const float hx = x / 0.17f, hy = (v - 0.13f) / 0.085f;
  if (hx * hx + hy * hy <= 1.0f) return v < 0.10f ? a.hair : a.skin;
  if (v < 0.21f) {
    if (std::abs(x) < 0.06f && v > 0.2f) return a.skin;
    return std::nullopt;
  }
  const float bw = a.body_half_width;
  // Bag hangs beside the torso.
  if (a.has_bag) {
    const float bx = a.bag_left ? -bw - 0.08f : bw + 0.08f;
    if (std::abs(x - bx) < 0.1f && v > 0.38f && v < 0.56f) return a.bag;
  }
  if (v < a.leg_top) {
    if (std::abs(x) <= bw) {
      if (a.stripe_dir == 0) return a.shirt;
      const float coord = a.stripe_dir == 1 ? v / px_h : u / px_w;
      return std::fmod(coord, a.stripe_period) < a.stripe_period * 0.5f ? a.stripe : a.shirt;
    }
    // Arms.
    if (std::abs(x) <= bw + 0.11f && v < a.leg_top - 0.02f) {
      return (a.long_sleeves || v < 0.34f) ? a.shirt : a.skin;
    }
    return std::nullopt;
  }
  if (v < 0.96f) {
    const float leg_w = bw * 0.45f;
    const float gap = 0.03f;
    const float ax = std::abs(x);
    if (ax >= gap && ax <= gap + leg_w * 1.6f) return v > 0.91f ? a.shoes : a.pants;
  }
  return std::nullopt;
}

// Box-filter downscale to (h2, w2) followed by bilinear upscale back.
inline void blur_resample(std::vector<Rgb>& img, std::size_t h, std::size_t w, std::size_t h2, std::size_t w2) {
  std::vector<Rgb> small(h2 * w2, Rgb{});
  std::vector<float> weight(h2 * w2, 0.0f);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = std::min(h2 - 1, y * h2 / h);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = std::min(w2 - 1, x * w2 / w);
      for (int c = 0; c < 3; ++c) small[sy * w2 + sx][c] += img[y * w + x][c];
      weight[sy * w2 + sx] += 1.0f;
    }
  }
  for (std::size_t i = 0; i < small.size(); ++i) {
    for (int c = 0; c < 3; ++c) small[i][c] /= std::max(weight[i], 1.0f);
  }
  for (std::size_t y = 0; y < h; ++y) {
    const float fy = std::clamp((static_cast<float>(y) + 0.5f) * h2 / h - 0.5f, 0.0f, static_cast<float>(h2 - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(h2 - 1, y0 + 1);
    const float ty = fy - y0;
    for (std::size_t x = 0; x < w; ++x) {
      const float fx = std::clamp((static_cast<float>(x) + 0.5f) * w2 / w - 0.5f, 0.0f, static_cast<float>(w2 - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(w2 - 1, x0 + 1);
      const float tx = fx - x0;
      const Rgb top = lerp(small[y0 * w2 + x0], small[y0 * w2 + x1], tx);
      const Rgb bottom = lerp(small[y1 * w2 + x0], small[y1 * w2 + x1], tx);
      img[y * w + x] = lerp(top, bottom, ty);
    }
  }
}

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace toy

// Renders image k of `person_id` as seen from `view`.
//
// Aerial images get, in proportion to view_bias_strength s: vertical squash
// (foreshortening), in-plane rotation, downscale-upscale blur, an overhead
// pavement background and atmospheric haze. At s = 0 every one of these is
// the identity, so both views render identically.
inline Image render(const GenConfig& g, std::size_t person_id, std::size_t k, View view) {
  using toy::Rgb;
  const toy::Appearance a = toy::appearance(g.seed, person_id);
  const toy::Jitter j = toy::jitter(g, person_id, k);
  const float s = view == View::kAerial ? static_cast<float>(g.view_bias_strength) : 0.0f;
  const std::size_t h = g.image_height, w = g.image_width;
  const float fh = static_cast<float>(h), fw = static_cast<float>(w);

  const float squash = 1.0f - 0.45f * s;
  const float angle = s * j.tilt_sign * j.tilt_mag * 25.0f * std::numbers::pi_v<float> / 180.0f;
  const float ca = std::cos(angle), sa = std::sin(angle);
  static constexpr Rgb kPavement{0.55f, 0.56f, 0.52f};
  static constexpr Rgb kHaze{0.70f, 0.76f, 0.84f};

  std::vector<Rgb> buf(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          // Pixel-space offset from the image centre.
          float px = static_cast<float>(x) + 0.25f + 0.5f * sx - fw * 0.5f;
          float py = static_cast<float>(y) + 0.25f + 0.5f * sy - fh * 0.5f;
          // Undo rotation and squash to reach the upright sprite frame.
          const float rx = ca * px + sa * py;
          const float ry = -sa * px + ca * py;
          const float qx = (rx - j.dx) / j.scale;
          const float qy = (ry / squash - j.dy) / j.scale;
          const float u = qx / fw + 0.5f, v = qy / fh + 0.5f;
          Rgb c;
          if (auto body = toy::sprite(a, u, v, 1.0f / fw, 1.0f / fh)) {
            c = *body;
          } else {
            const float vy = (py + fh * 0.5f) / fh;
            Rgb ground_bg = vy < 0.7f ? j.wall : j.floor;
            // Overhead background: pavement with a faint tile grid.
            Rgb overhead = kPavement;
            const float gx = std::fmod(std::abs(px + 40.0f), 6.0f), gy = std::fmod(std::abs(py + 40.0f), 6.0f);
            if (gx < 0.6f || gy < 0.6f) overhead = toy::lerp(overhead, {0.3f, 0.3f, 0.3f}, 0.5f);
            c = toy::lerp(ground_bg, overhead, s);
          }
          for (int ch = 0; ch < 3; ++ch) acc[ch] += c[ch] * 0.25f;
        }
      }
      buf[y * w + x] = acc;
    }
  }

  if (j.occluded) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const float cx = static_cast<float>(x) + 0.5f, cy = static_cast<float>(y) + 0.5f;
        if (cx >= j.occ_x0 && cx < j.occ_x0 + j.occ_w && cy >= j.occ_y0 && cy < j.occ_y0 + j.occ_h) {
          buf[y * w + x] = j.occ_color;
        }
      }
    }
  }

  if (s > 0.0f) {
    const float factor = 1.0f + 2.0f * s;
    const std::size_t h2 = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fh / factor)));
    const std::size_t w2 = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fw / factor)));
    toy::blur_resample(buf, h, w, h2, w2);
    for (Rgb& c : buf) c = toy::lerp(c, kHaze, 0.35f * s);
  }

  Rng noise = detail::seeded({j.noise_key});
  std::normal_distribution<float> n01(0.0f, 0.02f);
  Image img(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (int ch = 0; ch < 3; ++ch) img.pixels[i * 3 + ch] = toy::quantize(buf[i][ch] * j.brightness + n01(noise));
  }
  return img;
}

// ---------------------------------------------------------------------------
// Dataset on disk

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::filesystem::path root, std::vector<Sample> samples) : root_(std::move(root)), samples_(std::move(samples)) {
    cache_.resize(samples_.size());
  }

  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const std::vector<Sample>& samples() const noexcept { return samples_; }
  const Sample& operator[](std::size_t i) const { return samples_.at(i); }
  const std::filesystem::path& root() const noexcept { return root_; }

  // Loaded on first access and cached.
  const Image& image(std::size_t i) const {
    if (!cache_.at(i)) cache_[i] = read_ppm((root_ / samples_[i].image_path).string());
    return *cache_[i];
  }

  // Sorted distinct person ids.
  std::vector<std::size_t> identities() const {
    std::set<std::size_t> ids;
    for (const Sample& s : samples_) ids.insert(s.person_id);
    return {ids.begin(), ids.end()};
  }

  // Dense class index of each sample in [0, identities().size()).
  std::vector<std::size_t> class_labels() const {
    const auto ids = identities();
    std::vector<std::size_t> out;
    out.reserve(samples_.size());
    for (const Sample& s : samples_) {
      out.push_back(static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), s.person_id) - ids.begin()));
    }
    return out;
  }

 private:
  std::filesystem::path root_;
  std::vector<Sample> samples_;
  mutable std::vector<std::optional<Image>> cache_;
};

inline constexpr const char* kManifestHeader = "image_path\tperson_id\tcamera_id\tview";

// Writes images/, manifest.tsv and gen_config.txt under out_dir.
inline Dataset generate(const GenConfig& g, const std::filesystem::path& out_dir) {
  g.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("toydata", "cannot create " + (out_dir / "images").string() + ": " + ec.message());

  std::vector<Sample> samples;
  samples.reserve(g.num_images());
  for (std::size_t i = 0; i < g.num_ids; ++i) {
    const std::size_t pid = g.id_offset + i;
    for (View view : {View::kGround, View::kAerial}) {
      for (std::size_t k = 0; k < g.images_per_id_per_view; ++k) {
        Sample s;
        s.person_id = pid;
        s.camera_id = camera_for(g, view, k);
        s.view = view;
        char name[64];
        std::snprintf(name, sizeof(name), "images/%05zu_c%zu_%s_%03zu.ppm", pid, s.camera_id,
                      view == View::kGround ? "g" : "a", k);
        s.image_path = name;
        write_ppm((out_dir / s.image_path).string(), render(g, pid, k, view));
        samples.push_back(std::move(s));
      }
    }
  }

  std::ofstream manifest(out_dir / "manifest.tsv", std::ios::binary);
  if (!manifest) throw IoError("toydata", "cannot write " + (out_dir / "manifest.tsv").string());
  manifest << kManifestHeader << "\n";
  for (const Sample& s : samples) {
    manifest << s.image_path << '\t' << s.person_id << '\t' << s.camera_id << '\t' << static_cast<int>(s.view) << "\n";
  }
  std::ofstream cfg(out_dir / "gen_config.txt", std::ios::binary);
  if (!cfg) throw IoError("toydata", "cannot write " + (out_dir / "gen_config.txt").string());
  cfg << g.to_text();
  if (!manifest || !cfg) throw IoError("toydata", "write failed under " + out_dir.string());
  return Dataset(out_dir, std::move(samples));
}

namespace detail {

inline std::size_t parse_count(const std::string& field, const char* what, std::size_t line) {
  std::size_t v = 0;
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (field.empty() || ec != std::errc() || ptr != end) {
    throw ParseError("manifest", std::string(what) + " '" + field + "' is not a nonnegative integer", line);
  }
  return v;
}

}  // namespace detail

// Reads a manifest.tsv; image paths resolve against the manifest's directory.
inline Dataset load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("manifest", "cannot open " + path.string());
  const std::filesystem::path root = path.parent_path();
  std::vector<Sample> samples;
  std::map<std::size_t, View> camera_view;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kManifestHeader) {
        throw ParseError("manifest", "expected header 'image_path<TAB>person_id<TAB>camera_id<TAB>view'", lineno);
      }
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (fields.size() != 4) {
      throw ParseError("manifest", "expected 4 tab-separated fields, got " + std::to_string(fields.size()), lineno);
    }
    if (fields[0].empty()) throw ParseError("manifest", "empty image path", lineno);
    Sample s;
    s.image_path = fields[0];
    s.person_id = detail::parse_count(fields[1], "person_id", lineno);
    s.camera_id = detail::parse_count(fields[2], "camera_id", lineno);
    const std::size_t v = detail::parse_count(fields[3], "view", lineno);
    if (v > 1) throw ParseError("manifest", "view must be 0 (ground) or 1 (aerial), got " + fields[3], lineno);
    s.view = static_cast<View>(v);
    auto [it, inserted] = camera_view.emplace(s.camera_id, s.view);
    if (!inserted && it->second != s.view) {
      throw ParseError("manifest",
                       "camera " + std::to_string(s.camera_id) + " appears as both ground and aerial", lineno);
    }
    if (!std::filesystem::exists(root / s.image_path)) {
      throw IoError("manifest", "line " + std::to_string(lineno) + ": missing image " + (root / s.image_path).string());
    }
    samples.push_back(std::move(s));
  }
  return Dataset(root, std::move(samples));
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::vector<Image> images;
  std::vector<std::size_t> person_ids;
  std::vector<View> views;
  std::vector<std::size_t> indices;  // into the source dataset

  std::size_t size() const noexcept { return images.size(); }
};

inline Batch gather(const Dataset& d, const std::vector<std::size_t>& indices) {
  Batch b;
  for (std::size_t i : indices) {
    b.images.push_back(d.image(i));
    b.person_ids.push_back(d[i].person_id);
    b.views.push_back(d[i].view);
    b.indices.push_back(i);
  }
  return b;
}

// P distinct identities, K images each, identity-major order. Identities with
// fewer than K images are sampled with replacement.
inline std::vector<std::size_t> pk_indices(const Dataset& d, std::size_t P, std::size_t K, std::uint64_t seed,
                                           std::uint64_t step) {
  if (P == 0 || K == 0) throw ContractError("sampler", "P and K must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < d.size(); ++i) by_id[d[i].person_id].push_back(i);
  if (by_id.size() < P) {
    throw ContractError("sampler", "need at least P=" + std::to_string(P) + " identities, dataset has " +
                                       std::to_string(by_id.size()));
  }
  std::vector<const std::vector<std::size_t>*> pools;
  for (const auto& [id, idx] : by_id) pools.push_back(&idx);

  Rng rng = make_rng(Stream::kSampler, {seed, step});
  // Partial Fisher-Yates over identities.
  for (std::size_t i = 0; i < P; ++i) std::swap(pools[i], pools[i + uniform_index(rng, pools.size() - i)]);

  std::vector<std::size_t> out;
  out.reserve(P * K);
  for (std::size_t i = 0; i < P; ++i) {
    std::vector<std::size_t> pool = *pools[i];
    if (pool.size() >= K) {
      for (std::size_t k = 0; k < K; ++k) {
        std::swap(pool[k], pool[k + uniform_index(rng, pool.size() - k)]);
        out.push_back(pool[k]);
      }
    } else {
      for (std::size_t k = 0; k < K; ++k) out.push_back(pool[uniform_index(rng, pool.size())]);
    }
  }
  return out;
}

inline Batch pk_sample(const Dataset& d, std::size_t P, std::size_t K, std::uint64_t seed, std::uint64_t step) {
  return gather(d, pk_indices(d, P, K, seed, step));
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  std::size_t pad = 2;
  double erase_prob = 0.5;
  double erase_min_area = 0.02;
  double erase_max_area = 0.4;
};

// Where each image was cropped from and which rectangle, if any, was erased.
struct AugmentRecord {
  std::size_t crop_y = 0, crop_x = 0;  // top-left in the padded image
  bool erased = false;
  std::size_t erase_y = 0, erase_x = 0, erase_h = 0, erase_w = 0;

  friend bool operator==(const AugmentRecord&, const AugmentRecord&) = default;
};

inline Image augment_image(const Image& src, Rng& rng, const AugmentConfig& cfg, AugmentRecord* rec = nullptr) {
  AugmentRecord r;
  const std::size_t h = src.height, w = src.width, p = cfg.pad;
  r.crop_y = uniform_index(rng, 2 * p + 1);
  r.crop_x = uniform_index(rng, 2 * p + 1);
  Image out(h, w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Source pixel in the zero-padded frame.
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + r.crop_y) - static_cast<std::ptrdiff_t>(p);
      const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + r.crop_x) - static_cast<std::ptrdiff_t>(p);
      if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(h) || sx >= static_cast<std::ptrdiff_t>(w)) continue;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = src.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
    }
  }
  if (uniform(rng, 0, 1) < cfg.erase_prob) {
    const double area = static_cast<double>(h * w) * uniform(rng, cfg.erase_min_area, cfg.erase_max_area);
    const double aspect = std::exp(uniform(rng, std::log(0.3), std::log(1 / 0.3)));
    r.erase_h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area * aspect))), 1, h);
    r.erase_w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area / aspect))), 1, w);
    r.erase_y = uniform_index(rng, h - r.erase_h + 1);
    r.erase_x = uniform_index(rng, w - r.erase_w + 1);
    r.erased = true;
    for (std::size_t y = r.erase_y; y < r.erase_y + r.erase_h; ++y) {
      for (std::size_t x = r.erase_x; x < r.erase_x + r.erase_w; ++x) {
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0;
      }
    }
  }
  if (rec) *rec = r;
  return out;
}

// Training: pad-and-crop plus random erasing. Inference: unchanged copy.
inline Batch augment(const Batch& batch, bool train, std::uint64_t seed, std::uint64_t step = 0,
                     const AugmentConfig& cfg = {}, std::vector<AugmentRecord>* records = nullptr) {
  Batch out = batch;
  if (records) records->assign(batch.size(), AugmentRecord{});
  if (!train) return out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Rng rng = make_rng(Stream::kAugment, {seed, step, i});
    out.images[i] = augment_image(batch.images[i], rng, cfg, records ? &(*records)[i] : nullptr);
  }
  return out;
}

}  // namespace vdt
