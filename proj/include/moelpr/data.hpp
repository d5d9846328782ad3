// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "moelpr/errors.hpp"

namespace moelpr {

/// Role of a document's language in the current run: `original` languages are
/// the ones the base model already handles, `expanded` languages are the ones
/// being taught.
enum class LangRole : uint8_t { original = 0, expanded = 1 };

inline const char* to_string(LangRole r) {
  return r == LangRole::original ? "original" : "expanded";
}

inline LangRole lang_role_from_string(const std::string& s) {
  if (s == "original") return LangRole::original;
  if (s == "expanded") return LangRole::expanded;
  throw DataError("unknown role '" + s + "' (expected 'original' or 'expanded')");
}

struct Document {
  std::string text;
  std::string lang;
  LangRole role = LangRole::original;
};

/// Result of corpus ingestion: accepted documents plus one message per
/// rejected line (with its 1-based line number).
struct DocumentSet {
  std::vector<Document> docs;
  std::vector<std::string> line_errors;
};

/// Reads a newline-delimited corpus where each line is a JSON record with
/// string fields "text", "lang" and "role". Malformed lines are reported, the
/// rest are kept. An empty file is an error.
inline DocumentSet ingest_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  DocumentSet out;
  std::string line;
  int64_t lineno = 0;
  bool any_content = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    any_content = true;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded()) {
      out.line_errors.push_back("line " + std::to_string(lineno) + ": invalid JSON");
      continue;
    }
    const char* missing = nullptr;
    for (const char* field : {"text", "lang", "role"}) {
      if (!rec.contains(field) || !rec[field].is_string()) {
        missing = field;
        break;
      }
    }
    if (missing) {
      out.line_errors.push_back("line " + std::to_string(lineno) + ": missing field '" +
                                missing + "'");
      continue;
    }
    Document d;
    d.text = rec["text"].get<std::string>();
    d.lang = rec["lang"].get<std::string>();
    try {
      d.role = lang_role_from_string(rec["role"].get<std::string>());
    } catch (const DataError& e) {
      out.line_errors.push_back("line " + std::to_string(lineno) + ": " + e.what());
      continue;
    }
    if (d.lang.empty()) {
      out.line_errors.push_back("line " + std::to_string(lineno) + ": empty lang");
      continue;
    }
    out.docs.push_back(std::move(d));
  }
  if (!any_content) throw DataError("empty corpus file: " + path);
  return out;
}

inline void write_corpus(const std::string& path, const std::vector<Document>& docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file: " + path);
  for (const Document& d : docs) {
    nlohmann::json rec{{"text", d.text}, {"lang", d.lang}, {"role", to_string(d.role)}};
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by the pad and
/// end-of-document specials. Round-trips any byte string.
struct ByteTokenizer {
  static constexpr int32_t kPad = 256;
  static constexpr int32_t kEod = 257;
  static constexpr int32_t kVocabMin = 258;  // smallest usable model vocab

  static std::vector<int32_t> encode(std::string_view text) {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char b : text) ids.push_back(static_cast<int32_t>(b));
    return ids;
  }

  static std::string decode(const std::vector<int32_t>& ids) {
    std::string text;
    text.reserve(ids.size());
    for (int32_t id : ids)
      if (id >= 0 && id < 256) text.push_back(static_cast<char>(id));
    return text;
  }
};

/// A B x T slab of token ids with per-token role tags and a pad mask.
/// Tags propagate each token's source-document role; pad positions carry no
/// role and are excluded from every loss.
struct TaggedBatch {
  int64_t rows = 0;  // sequences in this batch (<= configured batch size at epoch tail)
  int64_t seq = 0;
  std::vector<int32_t> tokens;
  std::vector<uint8_t> original;  // 1 = token from an original-role document
  std::vector<uint8_t> pad;       // 1 = padding

  int64_t valid_tokens() const {
    int64_t n = 0;
    for (uint8_t p : pad) n += (p == 0);
    return n;
  }
  int64_t original_tokens() const {
    int64_t n = 0;
    for (size_t i = 0; i < pad.size(); ++i) n += (pad[i] == 0 && original[i] != 0);
    return n;
  }
};

namespace detail {

/// Deterministic Fisher-Yates; avoids std::shuffle so streams are pinned to
/// the seed, not to a library implementation.
inline void deterministic_shuffle(std::vector<size_t>& v, uint64_t seed) {
  uint64_t s = seed ? seed : 0x9e3779b97f4a7c15ULL;
  auto next = [&s]() {
    s ^= s << 13;
    s ^= s >> 7;
    s ^= s << 17;
    return s;
  };
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[next() % i]);
}

}  // namespace detail

/// Packs documents (in the given order) into fixed-length sequences grouped
/// into batches. Documents are concatenated with an end-of-document token;
/// tags switch at the boundary; only the stream tail is padded.
inline std::vector<TaggedBatch> build_batches(const std::vector<Document>& docs,
                                              int64_t seq_len, int64_t batch_size,
                                              uint64_t seed, bool shuffle = true) {
  if (seq_len < 1 || batch_size < 1)
    throw ConfigError("build_batches: seq_len and batch_size must be >= 1");
  if (docs.empty()) throw DataError("build_batches: no documents");
  std::vector<size_t> order(docs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) detail::deterministic_shuffle(order, seed);

  std::vector<int32_t> stream;
  std::vector<uint8_t> orig;
  for (size_t i : order) {
    const Document& d = docs[i];
    const uint8_t tag = d.role == LangRole::original ? 1 : 0;
    for (int32_t id : ByteTokenizer::encode(d.text)) {
      stream.push_back(id);
      orig.push_back(tag);
    }
    stream.push_back(ByteTokenizer::kEod);
    orig.push_back(tag);
  }

  const int64_t total = static_cast<int64_t>(stream.size());
  const int64_t n_seq = (total + seq_len - 1) / seq_len;
  std::vector<TaggedBatch> batches;
  for (int64_t s0 = 0; s0 < n_seq; s0 += batch_size) {
    const int64_t rows = std::min(batch_size, n_seq - s0);
    TaggedBatch b;
    b.rows = rows;
    b.seq = seq_len;
    b.tokens.assign(static_cast<size_t>(rows * seq_len), ByteTokenizer::kPad);
    b.original.assign(static_cast<size_t>(rows * seq_len), 0);
    b.pad.assign(static_cast<size_t>(rows * seq_len), 1);
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t base = (s0 + r) * seq_len;
      for (int64_t j = 0; j < seq_len && base + j < total; ++j) {
        b.tokens[static_cast<size_t>(r * seq_len + j)] = stream[static_cast<size_t>(base + j)];
        b.original[static_cast<size_t>(r * seq_len + j)] = orig[static_cast<size_t>(base + j)];
        b.pad[static_cast<size_t>(r * seq_len + j)] = 0;
      }
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

/// Endless deterministic batch source: each epoch reshuffles with a seed derived
/// from (seed, epoch) and re-packs. Tracks consumed non-pad tokens by role so
/// the review-stage replay budget can be audited.
class BatchStream {
 public:
  BatchStream(std::vector<Document> docs, int64_t seq_len, int64_t batch_size, uint64_t seed,
              bool shuffle = true)
      : docs_(std::move(docs)),
        seq_len_(seq_len),
        batch_size_(batch_size),
        seed_(seed),
        shuffle_(shuffle) {
    if (docs_.empty()) throw DataError("BatchStream: no documents");
    start_epoch();
  }

  TaggedBatch next() {
    if (cursor_ >= current_.size()) start_epoch();
    TaggedBatch b = current_[cursor_++];
    consumed_total_ += b.valid_tokens();
    consumed_original_ += b.original_tokens();
    return b;
  }

  int64_t consumed_tokens() const { return consumed_total_; }
  int64_t consumed_original() const { return consumed_original_; }
  int64_t consumed_expanded() const { return consumed_total_ - consumed_original_; }

 private:
  void start_epoch() {
    current_ = build_batches(docs_, seq_len_, batch_size_,
                             seed_ + 0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(epoch_),
                             shuffle_);
    cursor_ = 0;
    ++epoch_;
  }

  std::vector<Document> docs_;
  int64_t seq_len_;
  int64_t batch_size_;
  uint64_t seed_;
  bool shuffle_;
  int64_t epoch_ = 0;
  size_t cursor_ = 0;
  std::vector<TaggedBatch> current_;
  int64_t consumed_total_ = 0;
  int64_t consumed_original_ = 0;
};

/// Interleaves two pools at an original:expanded document ratio. The pattern
/// spreads originals evenly so every ratio window is exact to within one
/// document. total_docs=0 consumes as many complete windows as the pools
/// allow; an explicit total that exceeds a pool is an error naming the
/// shortfall. Deterministic under seed.
inline std::vector<Document> mix_corpora(const std::vector<Document>& original_docs,
                                         const std::vector<Document>& expanded_docs,
                                         int64_t ratio_original, int64_t ratio_expanded,
                                         int64_t total_docs, uint64_t seed) {
  if (ratio_original < 0 || ratio_expanded < 0 || ratio_original + ratio_expanded == 0)
    throw ConfigError("mix_corpora: ratio must have a positive part");
  if (ratio_original > 0 && original_docs.empty())
    throw DataError("mix_corpora: ratio requires original documents, none available");
  if (ratio_expanded > 0 && expanded_docs.empty())
    throw DataError("mix_corpora: ratio requires expanded documents, none available");

  const int64_t window = ratio_original + ratio_expanded;
  if (total_docs == 0) {
    int64_t windows = INT64_MAX;
    if (ratio_original > 0)
      windows = std::min(windows, static_cast<int64_t>(original_docs.size()) / ratio_original);
    if (ratio_expanded > 0)
      windows = std::min(windows, static_cast<int64_t>(expanded_docs.size()) / ratio_expanded);
    total_docs = windows * window;
  }

  // Bresenham-style spread: position p emits an original document when the
  // cumulative original quota advances.
  auto orig_quota = [&](int64_t p) { return p * ratio_original / window; };
  int64_t need_orig = orig_quota(total_docs);
  int64_t need_exp = total_docs - need_orig;
  if (need_orig > static_cast<int64_t>(original_docs.size()))
    throw DataError("mix_corpora: ratio " + std::to_string(ratio_original) + ":" +
                    std::to_string(ratio_expanded) + " over " + std::to_string(total_docs) +
                    " documents needs " + std::to_string(need_orig) + " original, have " +
                    std::to_string(original_docs.size()) + " (shortfall " +
                    std::to_string(need_orig - static_cast<int64_t>(original_docs.size())) + ")");
  if (need_exp > static_cast<int64_t>(expanded_docs.size()))
    throw DataError("mix_corpora: ratio " + std::to_string(ratio_original) + ":" +
                    std::to_string(ratio_expanded) + " over " + std::to_string(total_docs) +
                    " documents needs " + std::to_string(need_exp) + " expanded, have " +
                    std::to_string(expanded_docs.size()) + " (shortfall " +
                    std::to_string(need_exp - static_cast<int64_t>(expanded_docs.size())) + ")");

  std::vector<size_t> oidx(original_docs.size()), eidx(expanded_docs.size());
  for (size_t i = 0; i < oidx.size(); ++i) oidx[i] = i;
  for (size_t i = 0; i < eidx.size(); ++i) eidx[i] = i;
  detail::deterministic_shuffle(oidx, seed * 2 + 1);
  detail::deterministic_shuffle(eidx, seed * 2 + 2);

  std::vector<Document> mixed;
  mixed.reserve(static_cast<size_t>(total_docs));
  size_t o = 0, e = 0;
  for (int64_t p = 0; p < total_docs; ++p) {
    if (orig_quota(p + 1) > orig_quota(p))
      mixed.push_back(original_docs[oidx[o++]]);
    else
      mixed.push_back(expanded_docs[eidx[e++]]);
  }
  return mixed;
}

}  // namespace moelpr
