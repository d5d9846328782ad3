// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "moelpr/data.hpp"
#include "moelpr/errors.hpp"

namespace moelpr {

/// A synthetic language: a byte alphabet plus a seeded bigram chain over it.
/// Two languages built on disjoint byte ranges produce disjoint token-id
/// ranges, which keeps routing behavior cleanly separable.
struct SynthLanguage {
  std::string lang;
  LangRole role = LangRole::original;
  uint8_t byte_lo = 'a';
  uint8_t byte_hi = 'm';
  double concentration = 2.0;  // sharpness of the bigram rows
  uint64_t seed = 1;
};

inline SynthLanguage synth_original_language(uint64_t seed = 11) {
  return SynthLanguage{"orig", LangRole::original, 'a', 'm', 2.0, seed};
}

/// The expanded language runs on a 64-symbol alphabet ('!' through '`',
/// disjoint from the original's 'a'..'m') so that learning it is genuinely
/// budget-limited at desk scale rather than saturating within a short run.
inline SynthLanguage synth_expanded_language(uint64_t seed = 23) {
  return SynthLanguage{"expd", LangRole::expanded, '!', '`', 2.0, seed};
}

/// Samples documents from the language's bigram chain. Lengths are uniform in
/// [min_len, max_len]. Deterministic for a fixed (language seed, doc_seed).
inline std::vector<Document> gen_bigram_corpus(const SynthLanguage& spec, int64_t n_docs,
                                               int64_t min_len, int64_t max_len,
                                               uint64_t doc_seed) {
  if (spec.byte_hi < spec.byte_lo) throw ConfigError("gen_bigram_corpus: empty alphabet");
  if (min_len < 1 || max_len < min_len)
    throw ConfigError("gen_bigram_corpus: bad length range");
  const int a = spec.byte_hi - spec.byte_lo + 1;

  // Bigram transition rows: softmax of N(0, concentration) logits.
  std::mt19937_64 lang_rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.concentration);
  std::vector<double> trans(static_cast<size_t>(a) * a);
  for (int i = 0; i < a; ++i) {
    double mx = -1e300;
    double* row = trans.data() + static_cast<size_t>(i) * a;
    for (int j = 0; j < a; ++j) {
      row[j] = noise(lang_rng);
      mx = std::max(mx, row[j]);
    }
    double denom = 0.0;
    for (int j = 0; j < a; ++j) {
      row[j] = std::exp(row[j] - mx);
      denom += row[j];
    }
    for (int j = 0; j < a; ++j) row[j] /= denom;
  }

  std::mt19937_64 rng(doc_seed ^ (spec.seed * 0x9e3779b97f4a7c15ULL));
  std::uniform_int_distribution<int64_t> len_dist(min_len, max_len);
  std::uniform_int_distribution<int> start_dist(0, a - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  std::vector<Document> docs;
  docs.reserve(static_cast<size_t>(n_docs));
  for (int64_t d = 0; d < n_docs; ++d) {
    const int64_t len = len_dist(rng);
    std::string text;
    text.reserve(static_cast<size_t>(len));
    int cur = start_dist(rng);
    text.push_back(static_cast<char>(spec.byte_lo + cur));
    for (int64_t i = 1; i < len; ++i) {
      const double* row = trans.data() + static_cast<size_t>(cur) * a;
      double r = u(rng);
      int nxt = a - 1;
      for (int j = 0; j < a; ++j) {
        r -= row[j];
        if (r <= 0.0) {
          nxt = j;
          break;
        }
      }
      cur = nxt;
      text.push_back(static_cast<char>(spec.byte_lo + cur));
    }
    docs.push_back(Document{std::move(text), spec.lang, spec.role});
  }
  return docs;
}

}  // namespace moelpr
