#pragma once

// The view-decoupled transformer.
//
// Token layout per image: row 0 is the meta token, rows 1..M the patch
// tokens in row-major patch-grid order, row M+1 the view token (absent in
// baseline mode). A batch is processed as one stacked (batch*tokens) x d
// matrix; attention never mixes rows of different samples.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vdt/dense_array.hpp"
#include "vdt/rng.hpp"
#include "vdt/tape.hpp"

namespace vdt {

enum class Mode { kVdt, kBaselineVit };

inline const char* mode_name(Mode m) { return m == Mode::kVdt ? "vdt" : "baseline"; }

struct ModelConfig {
  std::size_t image_height = 32;
  std::size_t image_width = 16;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t num_blocks = 4;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  double mlp_ratio = 4.0;
  Mode mode = Mode::kVdt;
  bool disable_subtraction = false;
  std::size_t num_identities = 64;
  double layer_norm_eps = 1e-6;

  // 256x128 input, 16x16 patches, 12 blocks of width 768 (ViT-Base).
  static ModelConfig full_scale() {
    ModelConfig c;
    c.image_height = 256;
    c.image_width = 128;
    c.patch_size = 16;
    c.num_blocks = 12;
    c.embed_dim = 768;
    c.num_heads = 12;
    return c;
  }

  bool has_view_token() const noexcept { return mode == Mode::kVdt; }
  std::size_t grid_rows() const noexcept { return image_height / patch_size; }
  std::size_t grid_cols() const noexcept { return image_width / patch_size; }
  std::size_t num_patches() const noexcept { return grid_rows() * grid_cols(); }
  std::size_t num_tokens() const noexcept { return num_patches() + (has_view_token() ? 2 : 1); }
  std::size_t patch_dim() const noexcept { return patch_size * patch_size * channels; }
  std::size_t mlp_hidden() const noexcept {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
  }
  std::size_t head_dim() const noexcept { return embed_dim / num_heads; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model", msg); };
    if (patch_size == 0 || image_height == 0 || image_width == 0 || channels == 0) fail("image and patch sizes must be positive");
    if (image_height % patch_size != 0 || image_width % patch_size != 0) {
      fail("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
           " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (embed_dim == 0 || num_heads == 0) fail("embed_dim and num_heads must be positive");
    if (embed_dim % num_heads != 0) {
      fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) fail("mlp_ratio must give a positive hidden width");
    if (num_identities == 0) fail("num_identities must be positive");
    if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Parameter containers. `A` is DenseArray<T> for stored weights, Var<T> for
// weights bound to a tape, or Shape for layout queries.

inline bool is_present(const Shape& s) { return !s.empty(); }
template <typename T>
bool is_present(const DenseArray<T>& a) { return !a.empty(); }
template <typename T>
bool is_present(const Var<T>& v) { return v.valid(); }

template <typename A>
struct BlockWeights {
  A norm1_gain, norm1_bias;
  A qkv_weight, qkv_bias;
  A proj_weight, proj_bias;
  A norm2_gain, norm2_bias;
  A fc1_weight, fc1_bias;
  A fc2_weight, fc2_bias;

  template <typename Self, typename F>
  static void visit_all(Self& self, const std::string& prefix, F& f) {
    f(prefix + "norm1.gain", self.norm1_gain);
    f(prefix + "norm1.bias", self.norm1_bias);
    f(prefix + "attn.qkv.weight", self.qkv_weight);
    f(prefix + "attn.qkv.bias", self.qkv_bias);
    f(prefix + "attn.proj.weight", self.proj_weight);
    f(prefix + "attn.proj.bias", self.proj_bias);
    f(prefix + "norm2.gain", self.norm2_gain);
    f(prefix + "norm2.bias", self.norm2_bias);
    f(prefix + "mlp.fc1.weight", self.fc1_weight);
    f(prefix + "mlp.fc1.bias", self.fc1_bias);
    f(prefix + "mlp.fc2.weight", self.fc2_weight);
    f(prefix + "mlp.fc2.bias", self.fc2_bias);
  }
};

template <typename A>
struct Weights {
  A patch_weight, patch_bias;
  A meta_token;
  A view_token;  // absent in baseline mode
  A pos_embed;
  std::vector<BlockWeights<A>> blocks;
  A id_head_weight, id_head_bias;
  A view_head_weight, view_head_bias;  // absent in baseline mode

  // Visits every slot, present or not, in the canonical (serialization) order.
  template <typename Self, typename F>
  static void visit_all(Self& self, F&& f) {
    f(std::string("patch_embed.weight"), self.patch_weight);
    f(std::string("patch_embed.bias"), self.patch_bias);
    f(std::string("meta_token"), self.meta_token);
    f(std::string("view_token"), self.view_token);
    f(std::string("pos_embed"), self.pos_embed);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      BlockWeights<A>::visit_all(self.blocks[i], "blocks." + std::to_string(i) + ".", f);
    }
    f(std::string("id_head.weight"), self.id_head_weight);
    f(std::string("id_head.bias"), self.id_head_bias);
    f(std::string("view_head.weight"), self.view_head_weight);
    f(std::string("view_head.bias"), self.view_head_bias);
  }

  // Visits present slots only.
  template <typename F>
  void for_each(F&& f) {
    visit_all(*this, [&](const std::string& name, A& a) {
      if (is_present(a)) f(name, a);
    });
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_all(*this, [&](const std::string& name, const A& a) {
      if (is_present(a)) f(name, a);
    });
  }
};

// Same layout as `src`, each present slot replaced by fn(name, slot).
template <typename B, typename A, typename F>
Weights<B> map_weights(const Weights<A>& src, F&& fn) {
  Weights<B> out;
  out.blocks.resize(src.blocks.size());
  std::vector<std::pair<std::string, const A*>> from;
  Weights<A>::visit_all(src, [&](const std::string& name, const A& a) { from.emplace_back(name, &a); });
  std::size_t i = 0;
  Weights<B>::visit_all(out, [&](const std::string&, B& b) {
    const auto& [name, a] = from[i++];
    if (is_present(*a)) b = fn(name, *a);
  });
  return out;
}

template <typename T>
using ModelParams = Weights<DenseArray<T>>;
template <typename T>
using BoundParams = Weights<Var<T>>;

// Parameter layout implied by a configuration.
inline Weights<Shape> param_shapes(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.embed_dim;
  const std::size_t h = c.mlp_hidden();
  Weights<Shape> s;
  s.patch_weight = {c.patch_dim(), d};
  s.patch_bias = {d};
  s.meta_token = {1, d};
  if (c.has_view_token()) s.view_token = {1, d};
  s.pos_embed = {c.num_tokens(), d};
  s.blocks.resize(c.num_blocks);
  for (auto& b : s.blocks) {
    b.norm1_gain = b.norm1_bias = {d};
    b.qkv_weight = {d, 3 * d};
    b.qkv_bias = {3 * d};
    b.proj_weight = {d, d};
    b.proj_bias = {d};
    b.norm2_gain = b.norm2_bias = {d};
    b.fc1_weight = {d, h};
    b.fc1_bias = {h};
    b.fc2_weight = {h, d};
    b.fc2_bias = {d};
  }
  s.id_head_weight = {d, c.num_identities};
  s.id_head_bias = {c.num_identities};
  if (c.has_view_token()) {
    s.view_head_weight = {d, 2};
    s.view_head_bias = {2};
  }
  return s;
}

// Closed-form parameter count.
inline std::size_t param_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.embed_dim;
  const std::size_t h = c.mlp_hidden();
  const std::size_t per_block = 4 * d        // two layer norms
                                + 3 * d * d + 3 * d  // qkv
                                + d * d + d          // output projection
                                + d * h + h + h * d + d;  // mlp
  std::size_t n = c.patch_dim() * d + d  // patch projection
                  + d                    // meta token
                  + c.num_tokens() * d   // positional embedding
                  + c.num_blocks * per_block + d * c.num_identities + c.num_identities;
  if (c.has_view_token()) n += d + 2 * d + 2;  // view token and view head
  return n;
}

// Extra parameters of vdt mode over baseline mode at the same config: the
// view token, its positional row and the two-way view head.
inline std::size_t param_delta(ModelConfig c) {
  c.mode = Mode::kVdt;
  const std::size_t with_view = param_count(c);
  c.mode = Mode::kBaselineVit;
  return with_view - param_count(c);
}

template <typename T>
ModelParams<T> allocate_params(const ModelConfig& c) {
  return map_weights<DenseArray<T>>(param_shapes(c), [](const std::string&, const Shape& s) { return DenseArray<T>(s); });
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Layer-norm gains 1, biases 0, everything else truncated normal (sigma 0.02).
template <typename T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams<T> p = allocate_params<T>(c);
  Rng rng = make_rng(Stream::kInit, {seed});
  p.for_each([&](const std::string& name, DenseArray<T>& a) {
    if (ends_with(name, ".gain")) {
      a.fill(T(1));
    } else if (ends_with(name, ".bias")) {
      a.fill(T(0));
    } else {
      for (T& v : a.values()) v = static_cast<T>(truncated_normal(rng, 0.02));
    }
  });
  return p;
}

template <typename T>
std::size_t count_entries(const ModelParams<T>& p) {
  std::size_t n = 0;
  p.for_each([&](const std::string&, const DenseArray<T>& a) { n += a.size(); });
  return n;
}

template <typename T>
BoundParams<T> bind(Tape<T>& tape, const ModelParams<T>& p) {
  return map_weights<Var<T>>(p, [&](const std::string&, const DenseArray<T>& a) { return tape.parameter(a); });
}

// ---------------------------------------------------------------------------
// Forward pass pieces.

// images: batch x H x W x C. Returns (batch*M) x (p*p*C); patches in
// row-major grid order, each flattened as (row, col, channel).
template <typename T>
DenseArray<T> patchify(const DenseArray<T>& images, const ModelConfig& c) {
  c.validate();
  if (images.rank() != 4 || images.dim(1) != c.image_height || images.dim(2) != c.image_width ||
      images.dim(3) != c.channels) {
    throw InputError("model", "images " + shape_string(images.shape()) + " do not match configured " +
                                  std::to_string(c.image_height) + "x" + std::to_string(c.image_width) + "x" +
                                  std::to_string(c.channels));
  }
  const std::size_t batch = images.dim(0);
  const std::size_t p = c.patch_size;
  const std::size_t w = c.image_width;
  const std::size_t ch = c.channels;
  DenseArray<T> out({batch * c.num_patches(), c.patch_dim()});
  T* dst = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* img = images.data() + b * c.image_height * w * ch;
    for (std::size_t gy = 0; gy < c.grid_rows(); ++gy) {
      for (std::size_t gx = 0; gx < c.grid_cols(); ++gx) {
        for (std::size_t py = 0; py < p; ++py) {
          const T* src = img + ((gy * p + py) * w + gx * p) * ch;
          dst = std::copy_n(src, p * ch, dst);
        }
      }
    }
  }
  return out;
}

// concat(meta, patches, view) + pos_embed, per sample. `view` may be an
// invalid Var (baseline mode).
template <typename T>
Var<T> serialize(Var<T> patch_tokens, Var<T> meta, Var<T> view, Var<T> pos_embed, std::size_t batch) {
  const bool has_view = view.valid();
  const std::size_t d = patch_tokens.value().cols();
  const std::size_t patches = patch_tokens.value().rows() / batch;
  const std::size_t tokens = patches + (has_view ? 2 : 1);
  if (pos_embed.value().rows() != tokens || pos_embed.value().cols() != d || meta.value().size() != d ||
      (has_view && view.value().size() != d) || patch_tokens.value().rows() != batch * patches) {
    throw DimensionError("model", "serialize: positional embedding " + shape_string(pos_embed.shape()) +
                                      " does not fit " + std::to_string(tokens) + " tokens of width " +
                                      std::to_string(d));
  }
  const auto& pos = pos_embed.value();
  const auto& pt = patch_tokens.value();
  DenseArray<T> out({batch * tokens, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < tokens; ++t) {
      const T* src;
      if (t == 0) {
        src = meta.value().data();
      } else if (t <= patches) {
        src = pt.row(b * patches + t - 1).data();
      } else {
        src = view.value().data();
      }
      auto dst = out.row(b * tokens + t);
      auto pr = pos.row(t);
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] + pr[j];
    }
  }
  return patch_tokens.tape().record(
      "serialize", std::move(out), {patch_tokens, meta, view, pos_embed},
      [=](Tape<T>& tape, const DenseArray<T>& g) {
        auto* gp = tape.grad_slot(patch_tokens);
        auto* gm = tape.grad_slot(meta);
        auto* gv = has_view ? tape.grad_slot(view) : nullptr;
        auto* ge = tape.grad_slot(pos_embed);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < tokens; ++t) {
            auto gr = g.row(b * tokens + t);
            T* dst = nullptr;
            if (t == 0) {
              if (gm) dst = gm->data();
            } else if (t <= patches) {
              if (gp) dst = gp->row(b * patches + t - 1).data();
            } else if (gv) {
              dst = gv->data();
            }
            if (dst) {
              for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j];
            }
            if (ge) {
              auto er = ge->row(t);
              for (std::size_t j = 0; j < d; ++j) er[j] += gr[j];
            }
          }
        }
      });
}

// Overwrites each sample's meta row with (meta - view); all other rows pass
// through unchanged.
template <typename T>
Var<T> subtract_view_from_meta(Var<T> x, std::size_t batch, std::size_t tokens) {
  DenseArray<T> out = x.value();
  const std::size_t d = out.cols();
  for (std::size_t b = 0; b < batch; ++b) {
    auto meta = out.row(b * tokens);
    auto view = x.value().row(b * tokens + tokens - 1);
    for (std::size_t j = 0; j < d; ++j) meta[j] = meta[j] - view[j];
  }
  return x.tape().record("subtract_view_from_meta", std::move(out), {x},
                         [x, batch, tokens, d](Tape<T>& tape, const DenseArray<T>& g) {
                           auto* gx = tape.grad_slot(x);
                           if (!gx) return;
                           detail::add_into(*gx, g);
                           for (std::size_t b = 0; b < batch; ++b) {
                             auto gm = g.row(b * tokens);
                             auto gv = gx->row(b * tokens + tokens - 1);
                             for (std::size_t j = 0; j < d; ++j) gv[j] -= gm[j];
                           }
                         });
}

// Pre-norm transformer encoder layer:
//   h = x + Proj(MHSA(LN1(x)));  y = h + FC2(GELU(FC1(LN2(h))))
template <typename T>
Var<T> encoder_layer(Var<T> x, const BlockWeights<Var<T>>& w, const ModelConfig& c, std::size_t batch,
                     std::size_t tokens, DenseArray<T>* attention_probs = nullptr) {
  const T eps = static_cast<T>(c.layer_norm_eps);
  auto normed = layer_norm(x, w.norm1_gain, w.norm1_bias, eps);
  auto qkv = linear(normed, w.qkv_weight, w.qkv_bias);
  auto attended = attention(qkv, batch, tokens, c.num_heads, attention_probs);
  auto h = add(x, linear(attended, w.proj_weight, w.proj_bias));
  auto hidden = gelu(linear(layer_norm(h, w.norm2_gain, w.norm2_bias, eps), w.fc1_weight, w.fc1_bias));
  return add(h, linear(hidden, w.fc2_weight, w.fc2_bias));
}

template <typename T>
struct BlockTrace {
  Var<T> encoded;  // after the encoder layer, before subtraction
  Var<T> output;   // block output (meta row replaced unless disabled/baseline)
};

template <typename T>
BlockTrace<T> vdt_block(Var<T> x, const BlockWeights<Var<T>>& w, const ModelConfig& c, std::size_t batch,
                        DenseArray<T>* attention_probs = nullptr) {
  const std::size_t tokens = c.num_tokens();
  BlockTrace<T> trace;
  trace.encoded = encoder_layer(x, w, c, batch, tokens, attention_probs);
  trace.output = (c.has_view_token() && !c.disable_subtraction)
                     ? subtract_view_from_meta(trace.encoded, batch, tokens)
                     : trace.encoded;
  return trace;
}

template <typename T>
struct ForwardOptions {
  // Receives each block's attention weights (batch x heads x tokens x tokens).
  std::function<void(std::size_t block, const DenseArray<T>& probs)> attention_hook;
  std::vector<BlockTrace<T>>* traces = nullptr;
};

template <typename T>
struct ForwardOutput {
  Var<T> tokens;       // serialized input tokens
  Var<T> meta;         // batch x d, final meta tokens
  Var<T> view;         // batch x d, final view tokens (invalid in baseline mode)
  Var<T> id_logits;    // batch x num_identities
  Var<T> view_logits;  // batch x 2 (invalid in baseline mode)
};

template <typename T>
ForwardOutput<T> forward(Tape<T>& tape, const BoundParams<T>& w, const ModelConfig& c, const DenseArray<T>& images,
                         const ForwardOptions<T>& options = {}) {
  auto patches = tape.constant(patchify(images, c));
  const std::size_t batch = images.dim(0);
  const std::size_t tokens = c.num_tokens();
  if (w.blocks.size() != c.num_blocks) throw DimensionError("model", "parameter block count does not match config");

  ForwardOutput<T> out;
  auto patch_tokens = linear(patches, w.patch_weight, w.patch_bias);
  out.tokens = serialize(patch_tokens, w.meta_token, c.has_view_token() ? w.view_token : Var<T>(), w.pos_embed, batch);
  Var<T> x = out.tokens;
  DenseArray<T> probs;
  for (std::size_t i = 0; i < c.num_blocks; ++i) {
    auto trace = vdt_block(x, w.blocks[i], c, batch, options.attention_hook ? &probs : nullptr);
    if (options.attention_hook) options.attention_hook(i, probs);
    if (options.traces) options.traces->push_back(trace);
    x = trace.output;
  }
  out.meta = take_rows(x, tokens, 0);
  out.id_logits = linear(out.meta, w.id_head_weight, w.id_head_bias);
  if (c.has_view_token()) {
    out.view = take_rows(x, tokens, tokens - 1);
    out.view_logits = linear(out.view, w.view_head_weight, w.view_head_bias);
  }
  return out;
}

template <typename T>
struct Embeddings {
  DenseArray<T> meta;
  DenseArray<T> view;  // empty in baseline mode
};

// Inference-only forward returning the final meta (and view) tokens.
template <typename T>
Embeddings<T> embed(const ModelParams<T>& params, const ModelConfig& c, const DenseArray<T>& images) {
  Tape<T> tape(false);
  auto out = forward(tape, bind(tape, params), c, images);
  Embeddings<T> e;
  e.meta = out.meta.value();
  if (out.view.valid()) e.view = out.view.value();
  return e;
}

}  // namespace vdt
