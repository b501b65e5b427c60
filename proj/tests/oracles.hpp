// Copyright 2026 The mhred Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Slow, independently written reference implementations of the sentence metrics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mhred/metrics.hpp"

namespace mhred::oracle {

/// Occurrences of ngram `g` in `s` by direct scanning.
inline std::size_t occurrences(const Tokens& s, const Tokens& g) {
  std::size_t c = 0;
  for (std::size_t i = 0; i + g.size() <= s.size(); ++i)
    c += std::equal(g.begin(), g.end(), s.begin() + static_cast<std::ptrdiff_t>(i));
  return c;
}

inline double bleu4(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  double product = 1.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    // Each hypothesis position contributes one clipped credit: the k-th occurrence of an
    // n-gram counts only while k does not exceed its reference count.
    std::size_t matched = 0, total = 0;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
      Tokens g(hyp.begin() + static_cast<std::ptrdiff_t>(i),
               hyp.begin() + static_cast<std::ptrdiff_t>(i + n));
      Tokens prefix(hyp.begin(), hyp.begin() + static_cast<std::ptrdiff_t>(i + n));
      const std::size_t k = occurrences(prefix, g);
      matched += k <= occurrences(ref, g);
      ++total;
    }
    if (n == 1 && matched == 0) return 0.0;
    product *= n == 1 ? double(matched) / double(total)
                      : (double(matched) + 1.0) / (double(total) + 1.0);
  }
  const double bp =
      hyp.size() >= ref.size() ? 1.0 : std::exp(1.0 - double(ref.size()) / double(hyp.size()));
  return bp * std::pow(product, 0.25);
}

/// LCS by enumerating every subsequence of `a` (|a| <= 20).
inline std::size_t lcs_brute(const Tokens& a, const Tokens& b) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
    const std::size_t bits = static_cast<std::size_t>(__builtin_popcount(mask));
    if (bits <= best) continue;
    std::size_t j = 0;
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      if (!(mask >> i & 1u)) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else ++j;
    }
    if (ok) best = bits;
  }
  return best;
}

inline double rouge_l(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const double l = double(lcs_brute(hyp, ref));
  if (l == 0) return 0.0;
  const double p = l / double(hyp.size()), r = l / double(ref.size());
  return (1.0 + 1.44) * p * r / (r + 1.44 * p);
}

/// Exhaustive METEOR-lite: enumerates every one-to-one matching of matchable pairs.
inline double meteor_lite(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  struct Score {
    std::size_t exact = 0, stemmed = 0, chunks = 0;
  };
  Score best;
  bool have = false;
  std::vector<int> to(hyp.size(), -1);
  std::vector<bool> used(ref.size(), false);
  auto consider = [&] {
    Score s;
    for (std::size_t i = 0; i < hyp.size(); ++i) {
      if (to[i] < 0) continue;
      (hyp[i] == ref[std::size_t(to[i])] ? s.exact : s.stemmed)++;
      const bool continues = i > 0 && to[i - 1] >= 0 && to[i - 1] + 1 == to[i];
      s.chunks += !continues;
    }
    auto key = [](const Score& x) {
      return std::tuple(x.exact, x.stemmed, -static_cast<long>(x.chunks));
    };
    if (!have || key(s) > key(best)) best = s;
    have = true;
  };
  auto rec = [&](auto&& self, std::size_t i) -> void {
    if (i == hyp.size()) return consider();
    self(self, i + 1);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (used[j] || (hyp[i] != ref[j] && stem(hyp[i]) != stem(ref[j]))) continue;
      used[j] = true;
      to[i] = int(j);
      self(self, i + 1);
      to[i] = -1;
      used[j] = false;
    }
  };
  rec(rec, 0);
  const double m = double(best.exact + best.stemmed);
  if (m == 0) return 0.0;
  const double p = m / double(hyp.size()), r = m / double(ref.size());
  const double frag = double(best.chunks) / m;
  return 10.0 * p * r / (r + 9.0 * p) * (1.0 - 0.5 * std::pow(frag, 3));
}

/// Paired bootstrap written from the resampling description. `index_map` relabels each
/// drawn index before lookup, so a permuted corpus can replay the original draws.
inline std::pair<std::size_t, std::size_t> bootstrap_wins(const std::vector<double>& a,
                                                          const std::vector<double>& b,
                                                          std::size_t resamples, std::uint64_t seed,
                                                          const std::vector<std::size_t>& index_map) {
  std::size_t wa = 0, wb = 0;
  const std::size_t n = a.size();
  for (std::size_t r = 0; r < resamples; ++r) {
    std::seed_seq seq{std::uint32_t(seed & 0xffffffffu), std::uint32_t(seed >> 32), std::uint32_t(r)};
    std::mt19937_64 eng(seq);
    double sa = 0, sb = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = index_map[eng() % n];
      sa += a[idx];
      sb += b[idx];
    }
    wa += sa > sb;
    wb += sb > sa;
  }
  return {wa, wb};
}

/// Random token list over the first `alphabet` letters of "abcdefgh".
inline Tokens random_tokens(std::mt19937_64& rng, std::size_t alphabet, std::size_t max_len) {
  static const char* words[] = {"a", "b", "c", "d", "e", "f", "g", "h"};
  std::uniform_int_distribution<std::size_t> len(0, max_len), w(0, alphabet - 1);
  Tokens t(len(rng));
  for (auto& x : t) x = words[w(rng)];
  return t;
}

}  // namespace mhred::oracle
