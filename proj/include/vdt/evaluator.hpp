#pragma once

// Retrieval evaluation: distances, protocol filtering, CMC, mAP and mINP.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vdt/dense_array.hpp"
#include "vdt/error.hpp"
#include "vdt/toydata.hpp"

namespace vdt {

enum class Protocol { kAll, kAA, kGG, kAG, kA2G, kG2A };

inline constexpr std::array<Protocol, 6> kAllProtocols{Protocol::kAll, Protocol::kAA,  Protocol::kGG,
                                                       Protocol::kAG,  Protocol::kA2G, Protocol::kG2A};

inline const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::kAll: return "ALL";
    case Protocol::kAA: return "AA";
    case Protocol::kGG: return "GG";
    case Protocol::kAG: return "AG";
    case Protocol::kA2G: return "A2G";
    case Protocol::kG2A: return "G2A";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  for (Protocol p : kAllProtocols) {
    if (s == protocol_name(p)) return p;
  }
  throw InputError("evaluator", "unknown protocol '" + s + "' (expected ALL, AA, GG, AG, A2G or G2A)");
}

enum class Metric { kL2, kCosine };

// Q x G distances. L2 by default; cosine gives 1 - cos(q, g).
template <typename T>
DenseArray<double> distance_matrix(const DenseArray<T>& query, const DenseArray<T>& gallery, Metric metric = Metric::kL2) {
  if (query.rank() != 2 || gallery.rank() != 2 || query.cols() != gallery.cols()) {
    throw InputError("evaluator", "feature dimension mismatch: query " + shape_string(query.shape()) + " vs gallery " +
                                      shape_string(gallery.shape()));
  }
  const std::size_t q = query.rows(), g = gallery.rows(), d = query.cols();
  DenseArray<double> out({q, g});
  auto norm = [d](const T* row) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(row[k]) * static_cast<double>(row[k]);
    return std::sqrt(s);
  };
  for (std::size_t i = 0; i < q; ++i) {
    const T* a = query.data() + i * d;
    const double na = metric == Metric::kCosine ? norm(a) : 0.0;
    for (std::size_t j = 0; j < g; ++j) {
      const T* b = gallery.data() + j * d;
      double acc = 0;
      if (metric == Metric::kL2) {
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
          acc += diff * diff;
        }
        out(i, j) = std::sqrt(acc);
      } else {
        for (std::size_t k = 0; k < d; ++k) acc += static_cast<double>(a[k]) * static_cast<double>(b[k]);
        const double denom = na * norm(b);
        out(i, j) = 1.0 - (denom > 0 ? acc / denom : 0.0);
      }
    }
  }
  return out;
}

// Whether a query of this view takes part in the protocol at all.
inline bool query_in_protocol(const Sample& q, Protocol p) {
  switch (p) {
    case Protocol::kAA:
    case Protocol::kA2G: return q.view == View::kAerial;
    case Protocol::kGG:
    case Protocol::kG2A: return q.view == View::kGround;
    default: return true;
  }
}

inline bool gallery_view_allowed(View query_view, View gallery_view, Protocol p) {
  switch (p) {
    case Protocol::kAll: return true;
    case Protocol::kAA: return gallery_view == View::kAerial;
    case Protocol::kGG: return gallery_view == View::kGround;
    case Protocol::kAG: return gallery_view != query_view;
    case Protocol::kA2G: return gallery_view == View::kGround;
    case Protocol::kG2A: return gallery_view == View::kAerial;
  }
  return false;
}

// All false when the query has no role under the protocol.
inline std::vector<bool> valid_gallery_mask(const Sample& query, const std::vector<Sample>& gallery, Protocol p) {
  std::vector<bool> mask(gallery.size(), false);
  if (!query_in_protocol(query, p)) return mask;
  for (std::size_t j = 0; j < gallery.size(); ++j) {
    const Sample& g = gallery[j];
    const bool same_shot = g.person_id == query.person_id && g.camera_id == query.camera_id;
    mask[j] = !same_shot && gallery_view_allowed(query.view, g.view, p);
  }
  return mask;
}

struct QueryResult {
  std::size_t query_index = 0;
  double ap = 0;
  double inp = 0;
  std::size_t first_hit_rank = 0;  // 1-based
};

struct EvalReport {
  Protocol protocol = Protocol::kAll;
  double rank1 = 0, rank5 = 0, rank10 = 0;
  double mAP = 0, mINP = 0;
  std::vector<QueryResult> per_query;
  std::size_t num_queries = 0;  // queries that entered the averages
  std::size_t num_gallery = 0;
  std::size_t skipped_no_role = 0;
  std::size_t skipped_no_positive = 0;
};

// AP, INP and first-hit rank of one query given its ranked relevance list.
inline QueryResult score_ranking(const std::vector<bool>& relevant_in_rank_order) {
  QueryResult r;
  std::size_t hits = 0, last = 0;
  double ap = 0;
  for (std::size_t i = 0; i < relevant_in_rank_order.size(); ++i) {
    if (!relevant_in_rank_order[i]) continue;
    ++hits;
    if (hits == 1) r.first_hit_rank = i + 1;
    ap += static_cast<double>(hits) / static_cast<double>(i + 1);
    last = i + 1;
  }
  if (hits > 0) {
    r.ap = ap / static_cast<double>(hits);
    r.inp = static_cast<double>(hits) / static_cast<double>(last);
  }
  return r;
}

// Metrics from a precomputed Q x G distance matrix.
inline EvalReport evaluate_distances(const DenseArray<double>& dist, const std::vector<Sample>& query,
                                     const std::vector<Sample>& gallery, Protocol p) {
  if (dist.rank() != 2 || dist.rows() != query.size() || dist.cols() != gallery.size()) {
    throw InputError("evaluator", "distance matrix " + shape_string(dist.shape()) + " does not match " +
                                      std::to_string(query.size()) + " queries x " + std::to_string(gallery.size()) +
                                      " gallery items");
  }
  EvalReport rep;
  rep.protocol = p;
  rep.num_gallery = gallery.size();
  std::size_t top1 = 0, top5 = 0, top10 = 0;
  std::vector<std::size_t> order;
  for (std::size_t qi = 0; qi < query.size(); ++qi) {
    if (!query_in_protocol(query[qi], p)) {
      ++rep.skipped_no_role;
      continue;
    }
    const std::vector<bool> mask = valid_gallery_mask(query[qi], gallery, p);
    order.clear();
    bool any_positive = false;
    for (std::size_t j = 0; j < gallery.size(); ++j) {
      if (!mask[j]) continue;
      order.push_back(j);
      any_positive |= gallery[j].person_id == query[qi].person_id;
    }
    if (!any_positive) {
      ++rep.skipped_no_positive;
      continue;
    }
    const double* row = dist.data() + qi * gallery.size();
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    std::vector<bool> relevant(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) relevant[i] = gallery[order[i]].person_id == query[qi].person_id;
    QueryResult r = score_ranking(relevant);
    r.query_index = qi;
    top1 += r.first_hit_rank <= 1;
    top5 += r.first_hit_rank <= 5;
    top10 += r.first_hit_rank <= 10;
    rep.per_query.push_back(r);
  }
  if (rep.per_query.empty()) {
    throw ContractError("evaluator", std::string("no query has a valid positive under protocol ") + protocol_name(p));
  }
  rep.num_queries = rep.per_query.size();
  const double n = static_cast<double>(rep.num_queries);
  double ap_sum = 0, inp_sum = 0;
  for (const QueryResult& r : rep.per_query) {
    ap_sum += r.ap;
    inp_sum += r.inp;
  }
  rep.mAP = ap_sum / n;
  rep.mINP = inp_sum / n;
  rep.rank1 = static_cast<double>(top1) / n;
  rep.rank5 = static_cast<double>(top5) / n;
  rep.rank10 = static_cast<double>(top10) / n;
  return rep;
}

template <typename T>
EvalReport evaluate(const std::vector<Sample>& query, const std::vector<Sample>& gallery,
                    const DenseArray<T>& query_feats, const DenseArray<T>& gallery_feats, Protocol p,
                    Metric metric = Metric::kL2) {
  return evaluate_distances(distance_matrix(query_feats, gallery_feats, metric), query, gallery, p);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const QueryResult& q : r.per_query) {
    per.push_back({{"query", q.query_index}, {"ap", q.ap}, {"inp", q.inp}, {"first_hit_rank", q.first_hit_rank}});
  }
  return {{"protocol", protocol_name(r.protocol)},
          {"rank1", r.rank1},
          {"rank5", r.rank5},
          {"rank10", r.rank10},
          {"mAP", r.mAP},
          {"mINP", r.mINP},
          {"num_queries", r.num_queries},
          {"num_gallery", r.num_gallery},
          {"skipped_no_role", r.skipped_no_role},
          {"skipped_no_positive", r.skipped_no_positive},
          {"per_query", per}};
}

// ---------------------------------------------------------------------------
// EMB1 embedding blocks: "EMB1", u32 count, u32 dim, count*dim little-endian
// float32 values, row-major. A sidecar TSV in manifest format names the rows.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace detail

template <typename T>
void write_embeddings(const std::filesystem::path& path, const DenseArray<T>& feats,
                      const std::vector<Sample>& samples) {
  if (feats.rank() != 2 || feats.rows() != samples.size()) {
    throw InputError("embeddings", "have " + shape_string(feats.shape()) + " features for " +
                                       std::to_string(samples.size()) + " samples");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("embeddings", "cannot write " + path.string());
  out.write("EMB1", 4);
  detail::put_u32(out, static_cast<std::uint32_t>(feats.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(feats.cols()));
  for (T v : feats.values()) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  std::filesystem::path side = path;
  side += ".tsv";
  std::ofstream tsv(side, std::ios::binary);
  if (!tsv) throw IoError("embeddings", "cannot write " + side.string());
  tsv << kManifestHeader << "\n";
  for (const Sample& s : samples) {
    tsv << s.image_path << '\t' << s.person_id << '\t' << s.camera_id << '\t' << static_cast<int>(s.view) << "\n";
  }
  if (!out || !tsv) throw IoError("embeddings", "write failed for " + path.string());
}

inline DenseArray<float> read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("embeddings", "cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "EMB1", 4) != 0) throw IoError("embeddings", path.string() + ": bad magic");
  std::uint32_t n = 0, d = 0;
  if (!detail::get_u32(in, n) || !detail::get_u32(in, d) || n == 0 || d == 0) {
    throw IoError("embeddings", path.string() + ": bad header");
  }
  DenseArray<float> out({n, d});
  for (float& v : out.values()) {
    std::uint32_t bits;
    if (!detail::get_u32(in, bits)) throw IoError("embeddings", path.string() + ": truncated");
    std::memcpy(&v, &bits, 4);
  }
  return out;
}

}  // namespace vdt
