#pragma once

// VDT1 checkpoints, little-endian:
//   "VDT1" u32 version u32 scalar_bytes
//   u32 len, model config as `key = value` text
//   u32 block_count, then per block:
//     u32 name_len, name, u32 rank, rank x u32 dims, values (scalar_bytes each)

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "vdt/config.hpp"
#include "vdt/error.hpp"
#include "vdt/model.hpp"

namespace vdt {

inline constexpr char kCheckpointMagic[4] = {'V', 'D', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { le(v); }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> buf) : buf_(std::move(buf)) {}
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::kTruncated,
                            "file ends at byte " + std::to_string(buf_.size()) + ", needed " + std::to_string(n) +
                                " more from offset " + std::to_string(pos_));
    }
  }
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

template <typename T>
void put_scalar(ByteWriter& w, T v) {
  if constexpr (sizeof(T) == 4) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    w.le(bits);
  } else {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    w.le(bits);
  }
}

template <typename S>
S get_scalar(ByteReader& r) {
  if constexpr (sizeof(S) == 4) {
    const auto bits = r.le<std::uint32_t>();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  } else {
    const auto bits = r.le<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const ModelConfig& config, const std::filesystem::path& path) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(sizeof(T));
  w.str(config_text(config, TrainConfig{}, /*model_only=*/true));
  std::uint32_t blocks = 0;
  params.for_each([&](const std::string&, const DenseArray<T>&) { ++blocks; });
  w.u32(blocks);
  params.for_each([&](const std::string& name, const DenseArray<T>& a) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : a.values()) detail::put_scalar(w, v);
  });
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint", "cannot write " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw IoError("checkpoint", "write failed for " + path.string());
}

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
  std::size_t stored_scalar_bytes = sizeof(T);
};

namespace detail {

inline std::vector<char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint", "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

template <typename S, typename T>
void read_values(ByteReader& r, DenseArray<T>& a) {
  for (T& v : a.values()) v = static_cast<T>(get_scalar<S>(r));
}

}  // namespace detail

// Scalar width (4 or 8) a checkpoint was written with.
inline std::size_t checkpoint_scalar_bytes(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_all(path));
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::kMagicMismatch, path.string() + " is not a VDT1 checkpoint");
  }
  r.u32();
  return r.u32();
}

// Loads a checkpoint, converting values to T if stored at another width.
// With `expected`, every parameter shape must match that configuration.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = {}) {
  using Kind = CheckpointError::Kind;
  detail::ByteReader r(detail::read_all(path));
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(Kind::kMagicMismatch, path.string() + " is not a VDT1 checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kUnsupported, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint<T> ck;
  ck.stored_scalar_bytes = r.u32();
  if (ck.stored_scalar_bytes != 4 && ck.stored_scalar_bytes != 8) {
    throw CheckpointError(Kind::kUnsupported, "unsupported scalar width " + std::to_string(ck.stored_scalar_bytes));
  }
  TrainConfig ignored;
  try {
    apply_config_text(r.str(), ck.config, ignored);
    ck.config.validate();
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(Kind::kUnsupported, std::string("bad config header: ") + e.what());
  }

  ck.params = allocate_params<T>(expected.value_or(ck.config));
  std::vector<std::pair<std::string, DenseArray<T>*>> slots;
  ck.params.for_each([&](const std::string& name, DenseArray<T>& a) { slots.emplace_back(name, &a); });

  const std::uint32_t blocks = r.u32();
  if (blocks != slots.size()) {
    throw CheckpointError(Kind::kShapeMismatch, "checkpoint has " + std::to_string(blocks) +
                                                    " parameter blocks, configuration expects " +
                                                    std::to_string(slots.size()));
  }
  for (auto& [name, slot] : slots) {
    const std::string got = r.str();
    if (got != name) throw CheckpointError(Kind::kShapeMismatch, "expected parameter " + name + ", found " + got);
    Shape shape(r.u32());
    for (std::size_t& d : shape) d = r.u32();
    if (shape != slot->shape()) {
      throw CheckpointError(Kind::kShapeMismatch, name + " has shape " + shape_string(shape) + ", configuration expects " +
                                                      shape_string(slot->shape()));
    }
    if (ck.stored_scalar_bytes == 4) {
      detail::read_values<float>(r, *slot);
    } else {
      detail::read_values<double>(r, *slot);
    }
  }
  if (!r.at_end()) throw CheckpointError(Kind::kUnsupported, "trailing bytes after the last parameter block");
  if (expected) ck.config = *expected;
  return ck;
}

}  // namespace vdt
