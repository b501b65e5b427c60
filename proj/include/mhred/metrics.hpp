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

// Sentence-level BLEU-4, METEOR-lite and ROUGE-L, corpus means, and paired
// bootstrap resampling.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhred/error.hpp"

namespace mhred {

using Tokens = std::vector<std::string>;

namespace detail {

inline std::map<Tokens, std::size_t> ngram_counts(const Tokens& s, std::size_t n) {
  std::map<Tokens, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    ++out[Tokens(s.begin() + static_cast<std::ptrdiff_t>(i),
                 s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

}  // namespace detail

/// Sentence BLEU-4: geometric mean of clipped n-gram precisions for n = 1..4 times the
/// brevity penalty. Precisions for n >= 2 are add-one smoothed, (m + 1) / (c + 1);
/// the unigram precision is not, so a hypothesis without any matching word scores 0.
inline double bleu4_sentence(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = detail::ngram_counts(hyp, n);
    const auto r = detail::ngram_counts(ref, n);
    std::size_t matched = 0, total = 0;
    for (const auto& [gram, count] : h) {
      total += count;
      auto it = r.find(gram);
      if (it != r.end()) matched += std::min(count, it->second);
    }
    double p;
    if (n == 1) {
      if (matched == 0) return 0.0;
      p = double(matched) / double(total);
    } else {
      p = (double(matched) + 1.0) / (double(total) + 1.0);
    }
    log_sum += std::log(p);
  }
  const double hl = double(hyp.size()), rl = double(ref.size());
  const double bp = hl < rl ? std::exp(1.0 - rl / hl) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

/// Suffix-stripping stemmer used by METEOR-lite. Rules, first match wins:
/// "ies" -> "y" (len > 4), "ing" (len > 5), "ed" (len > 4), "ly" (len > 4),
/// "es" after s/x/z/ch/sh (len > 4), "s" not after "s" (len > 3).
inline std::string stem(const std::string& w) {
  auto ends = [&w](const char* suf) {
    const std::size_t n = std::char_traits<char>::length(suf);
    return w.size() >= n && w.compare(w.size() - n, n, suf) == 0;
  };
  const std::size_t n = w.size();
  if (n > 4 && ends("ies")) return w.substr(0, n - 3) + "y";
  if (n > 5 && ends("ing")) return w.substr(0, n - 3);
  if (n > 4 && ends("ed")) return w.substr(0, n - 2);
  if (n > 4 && ends("ly")) return w.substr(0, n - 2);
  if (n > 4 && (ends("ses") || ends("xes") || ends("zes") || ends("ches") || ends("shes")))
    return w.substr(0, n - 2);
  if (n > 3 && ends("s") && !ends("ss")) return w.substr(0, n - 1);
  return w;
}

struct MeteorAlignment {
  std::size_t exact = 0;
  std::size_t stemmed = 0;
  std::size_t chunks = 0;
  std::size_t matches() const { return exact + stemmed; }
};

/// Best one-to-one unigram alignment, ranked by (most exact matches, then most stem
/// matches, then fewest chunks). A chunk is a maximal run of matches adjacent in both
/// hypothesis and reference.
inline MeteorAlignment meteor_align(const Tokens& hyp, const Tokens& ref) {
  if (ref.size() > 63) throw ContractError("meteor_lite: references longer than 63 tokens");
  std::vector<std::string> hs(hyp.size()), rs(ref.size());
  for (std::size_t i = 0; i < hyp.size(); ++i) hs[i] = stem(hyp[i]);
  for (std::size_t j = 0; j < ref.size(); ++j) rs[j] = stem(ref[j]);
  // match[i][j]: 0 none, 1 stem, 2 exact
  std::vector<std::vector<int>> match(hyp.size(), std::vector<int>(ref.size(), 0));
  for (std::size_t i = 0; i < hyp.size(); ++i)
    for (std::size_t j = 0; j < ref.size(); ++j)
      match[i][j] = hyp[i] == ref[j] ? 2 : (hs[i] == rs[j] ? 1 : 0);

  // Value of the suffix starting at hyp position i, given the used reference set and the
  // reference position matched by hyp i-1 (ref.size() when unmatched).
  using Key = std::tuple<std::size_t, std::uint64_t, std::size_t>;
  std::map<Key, MeteorAlignment> memo;
  auto better = [](const MeteorAlignment& a, const MeteorAlignment& b) {
    if (a.exact != b.exact) return a.exact > b.exact;
    if (a.stemmed != b.stemmed) return a.stemmed > b.stemmed;
    return a.chunks < b.chunks;
  };
  const std::size_t none = ref.size();
  auto solve = [&](auto&& self, std::size_t i, std::uint64_t used,
                   std::size_t last) -> MeteorAlignment {
    if (i == hyp.size()) return {};
    Key key{i, used, last};
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    MeteorAlignment best = self(self, i + 1, used, none);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!match[i][j] || (used >> j & 1u)) continue;
      MeteorAlignment cand = self(self, i + 1, used | (std::uint64_t{1} << j), j);
      if (match[i][j] == 2)
        ++cand.exact;
      else
        ++cand.stemmed;
      if (!(last != none && last + 1 == j)) ++cand.chunks;
      if (better(cand, best)) best = cand;
    }
    memo[key] = best;
    return best;
  };
  return solve(solve, 0, 0, none);
}

/// METEOR without synonym or paraphrase modules: exact then stem matches,
/// F_mean = 10PR / (R + 9P), penalty 0.5 * (chunks / matches)^3.
inline double meteor_lite(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const MeteorAlignment a = meteor_align(hyp, ref);
  const std::size_t m = a.matches();
  if (m == 0) return 0.0;
  const double p = double(m) / double(hyp.size());
  const double r = double(m) / double(ref.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = double(a.chunks) / double(m);
  return fmean * (1.0 - 0.5 * frag * frag * frag);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

/// ROUGE-L F-measure with beta = 1.2.
inline double rouge_l(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() || ref.empty()) return 0.0;
  const std::size_t l = lcs_length(hyp, ref);
  if (l == 0) return 0.0;
  const double p = double(l) / double(hyp.size());
  const double r = double(l) / double(ref.size());
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

enum class Metric { bleu4, meteor_lite, rouge_l };
inline constexpr std::array<Metric, 3> kMetrics{Metric::bleu4, Metric::meteor_lite,
                                                 Metric::rouge_l};

inline std::string metric_name(Metric m) {
  switch (m) {
    case Metric::bleu4: return "bleu4";
    case Metric::meteor_lite: return "meteor-lite";
    case Metric::rouge_l: return "rouge-l";
  }
  return "?";
}

inline double score(Metric m, const Tokens& hyp, const Tokens& ref) {
  switch (m) {
    case Metric::bleu4: return bleu4_sentence(hyp, ref);
    case Metric::meteor_lite: return meteor_lite(hyp, ref);
    case Metric::rouge_l: return rouge_l(hyp, ref);
  }
  return 0.0;
}

struct EvalReport {
  // sentence[m][i] is the score of pair i under kMetrics[m].
  std::array<std::vector<double>, 3> sentence;
  std::array<double, 3> mean{};
  std::size_t size() const { return sentence[0].size(); }
};

inline EvalReport corpus_eval(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  if (hyps.size() != refs.size())
    throw ContractError("corpus_eval: " + std::to_string(hyps.size()) + " hypotheses for " +
                        std::to_string(refs.size()) + " references");
  if (hyps.empty()) throw ContractError("corpus_eval: no sentence pairs");
  EvalReport rep;
  for (std::size_t m = 0; m < kMetrics.size(); ++m) {
    double total = 0.0;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      const double s = score(kMetrics[m], hyps[i], refs[i]);
      rep.sentence[m].push_back(s);
      total += s;
    }
    rep.mean[m] = total / double(hyps.size());
  }
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r, bool per_sentence = true) {
  nlohmann::json j;
  for (std::size_t m = 0; m < kMetrics.size(); ++m) {
    j["corpus"][metric_name(kMetrics[m])] = r.mean[m];
    if (per_sentence) j["sentences"][metric_name(kMetrics[m])] = r.sentence[m];
  }
  j["count"] = r.size();
  return j;
}

struct BootstrapVerdict {
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::size_t n_resamples = 0;
  std::size_t wins_a = 0;  // resamples where A's mean strictly exceeds B's
  std::size_t wins_b = 0;
  double win_fraction_a() const { return double(wins_a) / double(n_resamples); }
  double win_fraction_b() const { return double(wins_b) / double(n_resamples); }
  bool a_significant() const { return win_fraction_a() >= 0.95; }
  bool b_significant() const { return win_fraction_b() >= 0.95; }
  bool significant() const { return a_significant() || b_significant(); }
};

/// Generator for resample `r`: mt19937_64 seeded with seed_seq{seed low, seed high, r}.
/// Indices are drawn as engine() % n.
inline std::mt19937_64 resample_engine(std::uint64_t seed, std::size_t r) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(r)};
  return std::mt19937_64(seq);
}

/// Paired bootstrap resampling over per-sentence scores.
inline BootstrapVerdict bootstrap_compare(const std::vector<double>& a,
                                          const std::vector<double>& b,
                                          std::size_t n_resamples, std::uint64_t seed) {
  if (a.size() != b.size())
    throw ContractError("bootstrap_compare: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + " scores");
  if (a.empty()) throw ContractError("bootstrap_compare: no scores");
  if (n_resamples < 100) throw ContractError("bootstrap_compare: need at least 100 resamples");
  BootstrapVerdict v;
  v.n_resamples = n_resamples;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    v.mean_a += a[i];
    v.mean_b += b[i];
  }
  v.mean_a /= double(n);
  v.mean_b /= double(n);
  for (std::size_t r = 0; r < n_resamples; ++r) {
    auto eng = resample_engine(seed, r);
    double sa = 0.0, sb = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = static_cast<std::size_t>(eng() % n);
      sa += a[idx];
      sb += b[idx];
    }
    if (sa > sb) ++v.wins_a;
    if (sb > sa) ++v.wins_b;
  }
  return v;
}

inline nlohmann::json to_json(const BootstrapVerdict& v) {
  return {{"mean_a", v.mean_a},
          {"mean_b", v.mean_b},
          {"n_resamples", v.n_resamples},
          {"win_fraction_a", v.win_fraction_a()},
          {"win_fraction_b", v.win_fraction_b()},
          {"significant", v.significant()},
          {"better", v.a_significant() ? "A" : (v.b_significant() ? "B" : "none")}};
}

}  // namespace mhred
