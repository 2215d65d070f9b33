#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "noseprint/checkpoint.hpp"
#include "noseprint/errors.hpp"
#include "noseprint/image.hpp"
#include "noseprint/manifest.hpp"

namespace noseprint {

struct EmbeddingRecord {
  std::string id;
  std::vector<float> vector;
  bool operator==(const EmbeddingRecord&) const = default;
};

enum class Metric { euclidean, cosine };

inline Metric parse_metric(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "cosine") return Metric::cosine;
  throw ConfigError("unknown metric '" + s + "' (expected euclidean|cosine)");
}

inline std::string to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

/// Records with one shared dimension; lookup by id.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(std::vector<EmbeddingRecord> records) {
    for (auto& r : records) add(std::move(r));
  }

  void add(EmbeddingRecord r) {
    if (records_.empty() && dim_ == 0) dim_ = r.vector.size();
    if (r.vector.size() != dim_) {
      throw ShapeError("embedding '" + r.id + "' has dim " + std::to_string(r.vector.size()) + ", store dim is " +
                       std::to_string(dim_));
    }
    if (index_.count(r.id)) throw FormatError("duplicate embedding id '" + r.id + "'");
    index_.emplace(r.id, records_.size());
    records_.push_back(std::move(r));
  }

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<EmbeddingRecord>& records() const { return records_; }
  void set_dim(std::size_t d) {
    if (!records_.empty() && d != dim_) throw ShapeError("cannot change the dim of a non-empty store");
    dim_ = d;
  }

  const EmbeddingRecord* find(const std::string& id) const {
    const auto it = index_.find(id);
    return it == index_.end() ? nullptr : &records_[it->second];
  }
  const EmbeddingRecord& at(const std::string& id) const {
    const auto* r = find(id);
    if (!r) throw ArgumentError("embedding id '" + id + "' not found in store");
    return *r;
  }

  bool operator==(const EmbeddingStore& o) const { return dim_ == o.dim_ && records_ == o.records_; }

 private:
  std::size_t dim_ = 0;
  std::vector<EmbeddingRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::uint32_t kEmbeddingVersion = 1;

/// "PREM" | u32 version=1 | u32 dim | u32 count | count x { u16 id_len | id | f32 x dim }
inline std::vector<unsigned char> encode_embeddings(const EmbeddingStore& store) {
  std::vector<unsigned char> out = {'P', 'R', 'E', 'M'};
  detail::put_u32(out, kEmbeddingVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(store.dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& r : store.records()) {
    if (r.id.size() > 0xFFFF) throw ArgumentError("embedding id too long");
    detail::put_u16(out, static_cast<std::uint16_t>(r.id.size()));
    out.insert(out.end(), r.id.begin(), r.id.end());
    for (float v : r.vector) detail::put_f32(out, v);
  }
  return out;
}

inline EmbeddingStore decode_embeddings(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes, "embeddings");
  if (in.str(4, "magic") != "PREM") throw FormatError("embeddings: bad magic (expected PREM)", 0);
  const std::size_t version_at = in.pos();
  const std::uint32_t version = in.u32("version");
  if (version != kEmbeddingVersion) throw FormatError("embeddings: unsupported version " + std::to_string(version), version_at);
  const std::uint32_t dim = in.u32("dim");
  const std::uint32_t count = in.u32("count");
  EmbeddingStore store;
  store.set_dim(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    EmbeddingRecord r;
    const std::size_t at = in.pos();
    r.id = in.str(in.u16("id length"), "id");
    in.need(std::size_t(dim) * 4, "vector");
    r.vector.resize(dim);
    for (auto& v : r.vector) v = in.f32("vector");
    if (store.find(r.id)) throw FormatError("embeddings: duplicate id '" + r.id + "'", at);
    store.add(std::move(r));
  }
  if (!in.done()) throw FormatError("embeddings: trailing bytes after last record", in.pos());
  return store;
}

inline void save_embeddings(const EmbeddingStore& store, const std::filesystem::path& path) {
  write_file_bytes(path, encode_embeddings(store));
}

inline EmbeddingStore load_embeddings(const std::filesystem::path& path) {
  try {
    return decode_embeddings(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.message(), e.offset());
  }
}

inline double l2_norm(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

inline void l2_normalize(std::vector<float>& v) {
  const double n = l2_norm(v);
  if (n == 0.0) throw DomainError("cannot L2-normalize a zero vector");
  for (auto& x : v) x = static_cast<float>(x / n);
}

/// Euclidean: ||a - b||; cosine: 1 - a.b / (||a|| ||b||).
inline double distance(std::span<const float> a, std::span<const float> b, Metric metric) {
  if (a.size() != b.size()) throw ShapeError("distance: dimension mismatch");
  if (metric == Metric::euclidean) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = double(a[i]) - b[i];
      s += d * d;
    }
    return std::sqrt(s);
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine distance is undefined for a zero vector");
  return 1.0 - dot / std::sqrt(na * nb);
}

struct QEConfig {
  int m = 3;
  Metric metric = Metric::cosine;
  // Optional minimum similarity (negated distance) for a neighbor to count.
  std::optional<double> min_similarity;
};

/// Mean of the query and its top-m gallery neighbors (renormalized under the
/// cosine metric). Ties in similarity go to the lexicographically smaller id.
/// `exclude` ids are skipped; m larger than the gallery uses all of it.
inline std::vector<float> query_expand(const EmbeddingRecord& query, const EmbeddingStore& gallery, const QEConfig& cfg,
                                       const std::set<std::string>& exclude = {}) {
  if (cfg.m < 0) throw ArgumentError("query_expand: m must be >= 0");
  if (cfg.m == 0) return query.vector;
  struct Cand {
    double sim;
    const EmbeddingRecord* rec;
  };
  std::vector<Cand> cands;
  for (const auto& r : gallery.records()) {
    if (exclude.count(r.id)) continue;
    const double sim = -distance(query.vector, r.vector, cfg.metric);
    if (cfg.min_similarity && sim < *cfg.min_similarity) continue;
    cands.push_back({sim, &r});
  }
  const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(cfg.m), cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.rec->id < b.rec->id;
  });
  if (take == 0) return query.vector;
  std::vector<double> acc(query.vector.begin(), query.vector.end());
  for (std::size_t k = 0; k < take; ++k)
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += cands[k].rec->vector[d];
  std::vector<float> out(acc.size());
  for (std::size_t d = 0; d < acc.size(); ++d) out[d] = static_cast<float>(acc[d] / double(take + 1));
  if (cfg.metric == Metric::cosine) l2_normalize(out);
  return out;
}

enum class FuseMode { concat, average };

/// Per id: normalize each source, combine in store order (concatenate or, for
/// equal dims, average), normalize the result. Ids follow the first store's order.
inline EmbeddingStore fuse_embeddings(const std::vector<const EmbeddingStore*>& stores, FuseMode mode = FuseMode::concat) {
  if (stores.empty()) throw ArgumentError("fuse_embeddings: no stores given");
  const EmbeddingStore& first = *stores.front();
  for (std::size_t s = 1; s < stores.size(); ++s) {
    std::vector<std::string> diff;
    for (const auto& r : first.records())
      if (!stores[s]->find(r.id)) diff.push_back(r.id);
    for (const auto& r : stores[s]->records())
      if (!first.find(r.id)) diff.push_back(r.id);
    if (!diff.empty()) {
      std::sort(diff.begin(), diff.end());
      std::string msg = "fuse_embeddings: id sets differ between store 1 and store " + std::to_string(s + 1) + " (" +
                        std::to_string(diff.size()) + " ids):";
      for (std::size_t i = 0; i < std::min<std::size_t>(10, diff.size()); ++i) msg += " " + diff[i];
      throw ArgumentError(msg);
    }
    if (mode == FuseMode::average && stores[s]->dim() != first.dim()) {
      throw ShapeError("fuse_embeddings: average mode needs equal dims");
    }
  }
  EmbeddingStore fused;
  for (const auto& r : first.records()) {
    std::vector<float> out;
    std::vector<double> avg;
    for (const auto* st : stores) {
      std::vector<float> v = st->at(r.id).vector;
      l2_normalize(v);
      if (mode == FuseMode::concat) {
        out.insert(out.end(), v.begin(), v.end());
      } else {
        avg.resize(v.size(), 0.0);
        for (std::size_t d = 0; d < v.size(); ++d) avg[d] += v[d];
      }
    }
    if (mode == FuseMode::average) out.assign(avg.begin(), avg.end());
    l2_normalize(out);
    fused.add({r.id, std::move(out)});
  }
  if (fused.empty()) {
    std::size_t d = 0;
    for (const auto* st : stores) d += st->dim();
    fused.set_dim(mode == FuseMode::concat ? d : first.dim());
  }
  return fused;
}

struct VerificationPair {
  std::string a, b;
  int label = 0;  // 1 = same identity
};

struct ScoredPair {
  VerificationPair pair;
  double score = 0.0;
};

/// score = -distance. With QE, each side is expanded against the store with
/// both pair members removed.
inline std::vector<ScoredPair> score_pairs(const std::vector<VerificationPair>& pairs, const EmbeddingStore& store,
                                           Metric metric, const std::optional<QEConfig>& qe = std::nullopt) {
  std::vector<ScoredPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto* ra = store.find(p.a);
    if (!ra) throw ArgumentError("score_pairs: id '" + p.a + "' not in embedding store");
    const auto* rb = store.find(p.b);
    if (!rb) throw ArgumentError("score_pairs: id '" + p.b + "' not in embedding store");
    double d;
    if (qe && qe->m > 0) {
      QEConfig cfg = *qe;
      cfg.metric = metric;
      const std::set<std::string> exclude = {p.a, p.b};
      d = distance(query_expand(*ra, store, cfg, exclude), query_expand(*rb, store, cfg, exclude), metric);
    } else {
      d = distance(ra->vector, rb->vector, metric);
    }
    out.push_back({p, -d});
  }
  return out;
}

struct RocPoint {
  double threshold;  // scores >= threshold are called positive
  double fpr;
  double tpr;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

/// Threshold sweep over distinct scores (descending) from (0,0) to (1,1).
/// AUC is the Mann-Whitney statistic with ties counted one half, computed from
/// integer counts of the sweep so it equals the curve's trapezoidal area.
inline RocCurve roc_auc(std::vector<std::pair<double, int>> scored) {
  std::size_t P = 0, N = 0;
  for (const auto& [s, l] : scored) {
    if (l != 0 && l != 1) throw ArgumentError("roc_auc: labels must be 0 or 1");
    if (std::isnan(s)) throw DomainError("roc_auc: NaN score");
    (l == 1 ? P : N)++;
  }
  if (P == 0 || N == 0) throw DomainError("roc_auc: need at least one positive and one negative");
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::uint64_t tp = 0, fp = 0;
  // twice the area in units of (1/N)(1/P): sum over steps of dfp * (tp_prev + tp_new)
  std::uint64_t area2 = 0;
  for (std::size_t i = 0; i < scored.size();) {
    std::size_t j = i;
    std::uint64_t dtp = 0, dfp = 0;
    while (j < scored.size() && scored[j].first == scored[i].first) {
      (scored[j].second == 1 ? dtp : dfp)++;
      ++j;
    }
    area2 += dfp * (2 * tp + dtp);
    tp += dtp;
    fp += dfp;
    curve.points.push_back({scored[i].first, double(fp) / N, double(tp) / P});
    i = j;
  }
  curve.auc = static_cast<double>(area2) / (2.0 * double(P) * double(N));
  return curve;
}

inline double trapezoid_area(const RocCurve& c) {
  double a = 0;
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    a += (c.points[i].fpr - c.points[i - 1].fpr) * (c.points[i].tpr + c.points[i - 1].tpr) / 2.0;
  }
  return a;
}

// ---- CSV files -------------------------------------------------------------

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path, const std::vector<std::string>& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file", 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (split_csv_line(line) != header) {
    std::string want;
    for (std::size_t i = 0; i < header.size(); ++i) want += (i ? "," : "") + header[i];
    throw FormatError(path.string() + ": header must be '" + want + "'", 0);
  }
  std::vector<std::vector<std::string>> rows;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      auto f = split_csv_line(line);
      if (f.size() != header.size()) throw FormatError(path.string() + ": wrong field count", offset);
      rows.push_back(std::move(f));
    }
    offset += line.size() + 1;
  }
  return rows;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline int parse_label(const std::string& s, const std::filesystem::path& path) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw FormatError(path.string() + ": label must be 0 or 1, got '" + s + "'");
}

}  // namespace detail

inline std::vector<VerificationPair> read_pairs(const std::filesystem::path& path) {
  std::vector<VerificationPair> out;
  for (const auto& f : detail::read_csv(path, {"a", "b", "label"})) out.push_back({f[0], f[1], detail::parse_label(f[2], path)});
  return out;
}

inline void write_pairs(const std::vector<VerificationPair>& pairs, const std::filesystem::path& path) {
  std::string s = "a,b,label\n";
  for (const auto& p : pairs) s += p.a + "," + p.b + "," + std::to_string(p.label) + "\n";
  detail::write_text(path, s);
}

inline void write_scores(const std::vector<ScoredPair>& scores, const std::filesystem::path& path) {
  std::string s = "a,b,label,score\n";
  for (const auto& p : scores) s += p.pair.a + "," + p.pair.b + "," + std::to_string(p.pair.label) + "," + format_double(p.score) + "\n";
  detail::write_text(path, s);
}

inline std::vector<ScoredPair> read_scores(const std::filesystem::path& path) {
  std::vector<ScoredPair> out;
  for (const auto& f : detail::read_csv(path, {"a", "b", "label", "score"})) {
    double score;
    try {
      std::size_t used = 0;
      score = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad score '" + f[3] + "'");
    }
    out.push_back({{f[0], f[1], detail::parse_label(f[2], path)}, score});
  }
  return out;
}

inline void write_roc(const RocCurve& curve, const std::filesystem::path& path) {
  std::string s = "threshold,fpr,tpr\n";
  for (const auto& p : curve.points) s += format_double(p.threshold) + "," + format_double(p.fpr) + "," + format_double(p.tpr) + "\n";
  s += "auc," + format_double(curve.auc) + "\n";
  detail::write_text(path, s);
}

/// All within-identity pairs plus all cross-identity pairs, in manifest order.
inline std::vector<VerificationPair> all_pairs(const Manifest& m) {
  std::vector<VerificationPair> out;
  for (std::size_t i = 0; i < m.rows.size(); ++i)
    for (std::size_t j = i + 1; j < m.rows.size(); ++j) {
      if (!m.rows[i].error.empty() || !m.rows[j].error.empty()) continue;
      out.push_back({m.rows[i].path, m.rows[j].path, m.rows[i].identity == m.rows[j].identity ? 1 : 0});
    }
  return out;
}

inline RocCurve evaluate(const std::vector<ScoredPair>& scores) {
  std::vector<std::pair<double, int>> v;
  v.reserve(scores.size());
  for (const auto& s : scores) v.emplace_back(s.score, s.pair.label);
  return roc_auc(std::move(v));
}

}  // namespace noseprint
