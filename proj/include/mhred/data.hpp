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

// Transcripts, context/response extraction, vocabulary, image features and batching.

#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhred/error.hpp"
#include "mhred/model.hpp"

namespace mhred {

// ---------------------------------------------------------------------------
// Tokenization

/// Lowercases ASCII letters, splits on whitespace and emits every ASCII
/// punctuation character as its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Transcripts

enum class Speaker { user, agent };

struct Turn {
  Speaker speaker = Speaker::user;
  std::string text;
  std::vector<std::string> image_ids;
};

struct DialogueTranscript {
  std::string session_id;
  std::vector<Turn> turns;
};

inline void validate_transcript(const DialogueTranscript& t) {
  if (t.turns.empty()) throw ParseError("session " + t.session_id + ": no turns");
  for (std::size_t i = 0; i < t.turns.size(); ++i)
    for (const auto& id : t.turns[i].image_ids)
      if (id.empty())
        throw ParseError("session " + t.session_id + ", turn " + std::to_string(i) +
                         ": empty image id");
}

inline nlohmann::json transcript_to_json(const DialogueTranscript& t) {
  nlohmann::json turns = nlohmann::json::array();
  for (const Turn& turn : t.turns)
    turns.push_back({{"speaker", turn.speaker == Speaker::user ? "user" : "agent"},
                     {"text", turn.text},
                     {"image_ids", turn.image_ids}});
  return {{"session_id", t.session_id}, {"turns", std::move(turns)}};
}

inline DialogueTranscript transcript_from_json(const nlohmann::json& j) {
  DialogueTranscript t;
  if (!j.is_object() || !j.contains("session_id") || !j["session_id"].is_string())
    throw ParseError("record has no string session_id");
  t.session_id = j["session_id"].get<std::string>();
  if (!j.contains("turns") || !j["turns"].is_array())
    throw ParseError("session " + t.session_id + ": turns must be an array");
  std::size_t index = 0;
  for (const auto& jt : j["turns"]) {
    auto fail = [&](const std::string& what) {
      return ParseError("session " + t.session_id + ", turn " + std::to_string(index) + ": " +
                        what);
    };
    if (!jt.is_object()) throw fail("turn must be an object");
    Turn turn;
    const std::string speaker = jt.value("speaker", std::string());
    if (speaker == "user")
      turn.speaker = Speaker::user;
    else if (speaker == "agent")
      turn.speaker = Speaker::agent;
    else
      throw fail("speaker must be \"user\" or \"agent\", got \"" + speaker + "\"");
    if (jt.contains("text") && !jt["text"].is_null()) {
      if (!jt["text"].is_string()) throw fail("text must be a string");
      turn.text = jt["text"].get<std::string>();
    }
    if (jt.contains("image_ids") && !jt["image_ids"].is_null()) {
      if (!jt["image_ids"].is_array()) throw fail("image_ids must be an array");
      for (const auto& id : jt["image_ids"]) {
        if (!id.is_string() || id.get<std::string>().empty())
          throw fail("image ids must be nonempty strings");
        turn.image_ids.push_back(id.get<std::string>());
      }
    }
    t.turns.push_back(std::move(turn));
    ++index;
  }
  validate_transcript(t);
  return t;
}

/// Reads one JSON transcript per line; blank lines are skipped.
inline std::vector<DialogueTranscript> read_transcripts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open transcripts file " + path.string());
  std::vector<DialogueTranscript> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(transcript_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_transcripts(const std::filesystem::path& path,
                              const std::vector<DialogueTranscript>& transcripts) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write transcripts file " + path.string());
  for (const auto& t : transcripts) out << transcript_to_json(t).dump() << '\n';
}

/// Adapts one raw MMD dialogue (a JSON array of {"speaker": "user"|"system",
/// "utterance": {"nlg": ..., "images": [...]}}) to a transcript. Consecutive turns of
/// the same speaker are merged so that a response's text and its images form one turn.
inline DialogueTranscript convert_mmd_dialogue(const nlohmann::json& dialogue,
                                               const std::string& session_id) {
  DialogueTranscript t{session_id, {}};
  if (!dialogue.is_array()) throw ParseError("session " + session_id + ": expected a JSON array");
  std::size_t index = 0;
  for (const auto& raw : dialogue) {
    const std::string who = raw.value("speaker", std::string());
    Speaker speaker;
    if (who == "user")
      speaker = Speaker::user;
    else if (who == "system" || who == "agent")
      speaker = Speaker::agent;
    else
      throw ParseError("session " + session_id + ", turn " + std::to_string(index) +
                       ": unknown speaker \"" + who + "\"");
    std::string text;
    std::vector<std::string> images;
    if (raw.contains("utterance") && raw["utterance"].is_object()) {
      const auto& u = raw["utterance"];
      if (u.contains("nlg") && u["nlg"].is_string()) text = u["nlg"].get<std::string>();
      if (u.contains("images") && u["images"].is_array())
        for (const auto& im : u["images"])
          if (im.is_string() && !im.get<std::string>().empty()) images.push_back(im);
    }
    if (!t.turns.empty() && t.turns.back().speaker == speaker) {
      Turn& last = t.turns.back();
      if (!text.empty()) last.text += (last.text.empty() ? "" : " ") + text;
      last.image_ids.insert(last.image_ids.end(), images.begin(), images.end());
    } else {
      t.turns.push_back({speaker, std::move(text), std::move(images)});
    }
    ++index;
  }
  validate_transcript(t);
  return t;
}

// ---------------------------------------------------------------------------
// Context/response extraction

enum class ExtractionMode { aggregated, unrolled };

inline std::string to_string(ExtractionMode m) {
  return m == ExtractionMode::aggregated ? "aggregated" : "unrolled";
}

inline ExtractionMode parse_extraction_mode(const std::string& s) {
  if (s == "aggregated") return ExtractionMode::aggregated;
  if (s == "unrolled") return ExtractionMode::unrolled;
  throw ConfigError("unknown extraction mode \"" + s + "\"");
}

struct ContextTurn {
  std::vector<std::string> tokens;
  std::vector<std::string> image_ids;
  bool operator==(const ContextTurn&) const = default;
};

struct TrainingExample {
  std::string session_id;
  std::size_t target_turn = 0;
  std::vector<ContextTurn> context;  // oldest first, exactly context_size
  std::vector<std::string> target;
  bool operator==(const TrainingExample&) const = default;
};

/// One example per agent turn with nonempty text, built from the turns before it.
///
/// aggregated: each earlier turn is one context element holding its text and all its
/// images. unrolled: every earlier image becomes its own element with empty text, so
/// only the most recent images survive the window. Both left-pad with empty elements.
inline std::vector<TrainingExample> extract_examples(const DialogueTranscript& t,
                                                     std::size_t context_size,
                                                     ExtractionMode mode) {
  if (context_size == 0) throw ContractError("extract_examples: context size must be >= 1");
  validate_transcript(t);
  std::vector<TrainingExample> out;
  std::vector<ContextTurn> history;
  for (std::size_t i = 0; i < t.turns.size(); ++i) {
    const Turn& turn = t.turns[i];
    auto tokens = tokenize(turn.text);
    if (turn.speaker == Speaker::agent && !tokens.empty()) {
      TrainingExample ex;
      ex.session_id = t.session_id;
      ex.target_turn = i;
      ex.target = tokens;
      const std::size_t have = std::min(history.size(), context_size);
      ex.context.assign(context_size - have, ContextTurn{});
      ex.context.insert(ex.context.end(), history.end() - static_cast<std::ptrdiff_t>(have),
                        history.end());
      out.push_back(std::move(ex));
    }
    if (mode == ExtractionMode::aggregated) {
      history.push_back({std::move(tokens), turn.image_ids});
    } else {
      for (const auto& id : turn.image_ids) history.push_back({{}, {id}});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr const char* kReservedTokens[tok::kReserved] = {"<pad>", "<bos>", "<eos>",
                                                                  "<unk>"};

  Vocabulary() {
    for (std::size_t i = 0; i < tok::kReserved; ++i) append(kReservedTokens[i], 0);
  }

  /// Tokens seen at least `min_count` times, ordered by (count desc, token asc) after
  /// the reserved ids.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_count) {
    if (corpus.empty()) throw ContractError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus)
      for (auto& token : tokenize(text)) ++counts[token];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [token, n] : counts)
      if (n >= min_count) kept.emplace_back(token, n);
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (auto& [token, n] : kept) v.append(token, n);
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  std::size_t id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? tok::kUnk : it->second;
  }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw IndexError("vocabulary id " + std::to_string(id));
    return tokens_[id];
  }

  std::size_t count(std::size_t id) const { return counts_.at(id); }

  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  /// Stops at EOS and drops PAD/BOS.
  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const {
    std::vector<std::string> out;
    for (std::size_t i : ids) {
      if (i == tok::kEos) break;
      if (i == tok::kPad || i == tok::kBos) continue;
      out.push_back(token(i));
    }
    return out;
  }

  /// FNV-1a over the token list; checkpoints record it to detect mismatched datasets.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) h = (h ^ c) * 1099511628211ull;
      h = (h ^ 0xffu) * 1099511628211ull;
    }
    return h;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write vocabulary " + path.string());
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      out << tokens_[i] << '\t' << i << '\t' << counts_[i] << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open vocabulary " + path.string());
    Vocabulary v;
    v.tokens_.clear();
    v.counts_.clear();
    v.ids_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::string token;
      std::size_t id = 0, n = 0;
      if (!std::getline(fields, token, '\t') || !(fields >> id >> n) || id != v.tokens_.size())
        throw ParseError(path.string() + ":" + std::to_string(lineno) +
                         ": expected <token>\\t<id>\\t<count> with consecutive ids");
      v.append(token, n);
    }
    for (std::size_t i = 0; i < tok::kReserved; ++i)
      if (v.tokens_.size() <= i || v.tokens_[i] != kReservedTokens[i])
        throw ParseError(path.string() + ": reserved ids 0-3 must be <pad> <bos> <eos> <unk>");
    return v;
  }

  bool operator==(const Vocabulary& o) const {
    return tokens_ == o.tokens_ && counts_ == o.counts_;
  }

 private:
  void append(const std::string& token, std::size_t n) {
    if (!ids_.emplace(token, tokens_.size()).second)
      throw ParseError("duplicate vocabulary token \"" + token + "\"");
    tokens_.push_back(token);
    counts_.push_back(n);
  }

  std::vector<std::string> tokens_;
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, std::size_t> ids_;
};

inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_count) {
  return Vocabulary::build(corpus, min_count);
}

// ---------------------------------------------------------------------------
// Image features

/// Precomputed per-image feature vectors. Binary layout (little-endian):
///   "MHFEAT01" | u64 count | u64 img_dim | u64 id_width |
///   count x ( id padded with NUL to id_width bytes | img_dim x f32 )
class FeatureStore {
 public:
  static constexpr char kMagic[8] = {'M', 'H', 'F', 'E', 'A', 'T', '0', '1'};

  explicit FeatureStore(std::size_t img_dim = 4096) : img_dim_(img_dim) {}

  FeatureStore(const FeatureStore& o) : img_dim_(o.img_dim_), vectors_(o.vectors_) {}
  FeatureStore& operator=(const FeatureStore& o) {
    img_dim_ = o.img_dim_;
    vectors_ = o.vectors_;
    return *this;
  }

  std::size_t img_dim() const { return img_dim_; }
  std::size_t size() const { return vectors_.size(); }

  void add(const std::string& id, std::vector<double> v) {
    if (id.empty()) throw ContractError("feature store: empty image id");
    if (v.size() != img_dim_)
      throw DimensionError("feature store: vector for " + id + " has length " +
                           std::to_string(v.size()) + ", expected " + std::to_string(img_dim_));
    vectors_[id] = std::move(v);
  }

  const std::vector<double>* find(const std::string& id) const {
    auto it = vectors_.find(id);
    return it == vectors_.end() ? nullptr : &it->second;
  }

  /// The stored vector, or zeros (with a one-time warning per id) when absent.
  std::vector<double> lookup(const std::string& id) const {
    if (const auto* v = find(id)) return *v;
    std::lock_guard lock(warn_mutex_);
    if (warned_.insert(id).second)
      std::clog << "warning: no features for image " << id << ", using zeros\n";
    return std::vector<double>(img_dim_, 0.0);
  }

  std::size_t missing_count() const {
    std::lock_guard lock(warn_mutex_);
    return warned_.size();
  }

  void save(const std::filesystem::path& path) const {
    static_assert(std::endian::native == std::endian::little, "feature files are little-endian");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write features " + path.string());
    std::uint64_t width = 1;
    for (const auto& [id, v] : vectors_) width = std::max<std::uint64_t>(width, id.size());
    const std::uint64_t header[3] = {vectors_.size(), img_dim_, width};
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(header), sizeof header);
    std::vector<char> idbuf(width);
    std::vector<float> vals(img_dim_);
    for (const auto& [id, v] : vectors_) {
      std::fill(idbuf.begin(), idbuf.end(), '\0');
      std::memcpy(idbuf.data(), id.data(), id.size());
      out.write(idbuf.data(), static_cast<std::streamsize>(width));
      for (std::size_t i = 0; i < img_dim_; ++i) vals[i] = static_cast<float>(v[i]);
      out.write(reinterpret_cast<const char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(float)));
    }
    if (!out) throw LoadError("short write to " + path.string());
  }

  static FeatureStore load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open features " + path.string());
    char magic[8];
    std::uint64_t header[3];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
      throw LoadError(path.string() + ": not a feature file");
    if (!in.read(reinterpret_cast<char*>(header), sizeof header) || header[1] == 0 ||
        header[2] == 0)
      throw LoadError(path.string() + ": bad feature header");
    FeatureStore fs(header[1]);
    std::vector<char> idbuf(header[2]);
    std::vector<float> vals(header[1]);
    for (std::uint64_t r = 0; r < header[0]; ++r) {
      if (!in.read(idbuf.data(), static_cast<std::streamsize>(idbuf.size())) ||
          !in.read(reinterpret_cast<char*>(vals.data()),
                   static_cast<std::streamsize>(vals.size() * sizeof(float))))
        throw LoadError(path.string() + ": truncated at record " + std::to_string(r));
      std::string id(idbuf.data(), strnlen(idbuf.data(), idbuf.size()));
      fs.add(id, std::vector<double>(vals.begin(), vals.end()));
    }
    return fs;
  }

 private:
  std::size_t img_dim_;
  std::map<std::string, std::vector<double>> vectors_;
  mutable std::mutex warn_mutex_;
  mutable std::set<std::string> warned_;
};

// ---------------------------------------------------------------------------
// Example files

inline nlohmann::json example_to_json(const TrainingExample& e) {
  nlohmann::json ctx = nlohmann::json::array();
  for (const auto& c : e.context)
    ctx.push_back({{"text", join_tokens(c.tokens)}, {"image_ids", c.image_ids}});
  return {{"session_id", e.session_id},
          {"target_turn", e.target_turn},
          {"context", std::move(ctx)},
          {"target", join_tokens(e.target)}};
}

inline TrainingExample example_from_json(const nlohmann::json& j) {
  TrainingExample e;
  e.session_id = j.at("session_id").get<std::string>();
  e.target_turn = j.at("target_turn").get<std::size_t>();
  for (const auto& c : j.at("context"))
    e.context.push_back({tokenize(c.at("text").get<std::string>()),
                         c.at("image_ids").get<std::vector<std::string>>()});
  e.target = tokenize(j.at("target").get<std::string>());
  return e;
}

/// Three-line human-readable view of an example, turns separated by " | ":
///   text: <turn text> | <turn text>
///   images: <group> | <group>
///   target: <tokens>
/// Aggregated groups print as "[id, id]", and image-less turns as K zeros. Unrolled
/// elements print their single id bare.
inline std::string render_example(const TrainingExample& e, ExtractionMode mode,
                                  std::size_t image_slots) {
  std::string text, images;
  for (std::size_t n = 0; n < e.context.size(); ++n) {
    const ContextTurn& c = e.context[n];
    if (n) {
      text += " | ";
      images += " | ";
    }
    text += join_tokens(c.tokens);
    if (mode == ExtractionMode::unrolled) {
      if (!c.image_ids.empty()) images += c.image_ids.front();
      continue;
    }
    images += '[';
    const std::size_t shown = c.image_ids.empty() ? image_slots : c.image_ids.size();
    for (std::size_t k = 0; k < shown; ++k) {
      if (k) images += ", ";
      images += c.image_ids.empty() ? "0" : c.image_ids[k];
    }
    images += ']';
  }
  return "text: " + text + "\nimages: " + images + "\ntarget: " + join_tokens(e.target) + "\n";
}

struct ExampleFile {
  static constexpr int kVersion = 1;
  std::size_t context_size = 0;
  ExtractionMode mode = ExtractionMode::aggregated;
  std::vector<TrainingExample> examples;
};

/// JSON lines: a header record then one example per line.
inline void write_examples(const std::filesystem::path& path, const ExampleFile& f) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write examples " + path.string());
  out << nlohmann::json{{"format", "mhred-examples"},
                        {"version", ExampleFile::kVersion},
                        {"context_size", f.context_size},
                        {"mode", to_string(f.mode)},
                        {"count", f.examples.size()}}
             .dump()
      << '\n';
  for (const auto& e : f.examples) out << example_to_json(e).dump() << '\n';
}

inline ExampleFile read_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open examples " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty examples file");
  ExampleFile f;
  std::size_t lineno = 1;
  try {
    auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "mhred-examples")
      throw ParseError(path.string() + ": not an examples file");
    if (header.value("version", 0) != ExampleFile::kVersion)
      throw ParseError(path.string() + ": unsupported examples version");
    f.context_size = header.at("context_size").get<std::size_t>();
    f.mode = parse_extraction_mode(header.at("mode").get<std::string>());
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      f.examples.push_back(example_from_json(nlohmann::json::parse(line)));
      if (f.examples.back().context.size() != f.context_size)
        throw ParseError("context length differs from header");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
  }
  return f;
}

// ---------------------------------------------------------------------------
// Encoding and batching

struct EncodedExample {
  std::vector<std::vector<std::size_t>> turn_tokens;  // per context turn, may be empty
  std::vector<std::vector<std::string>> turn_images;
  std::vector<std::size_t> target;  // BOS w1 .. wn EOS
};

inline EncodedExample encode_example(const TrainingExample& e, const Vocabulary& vocab) {
  EncodedExample out;
  for (const auto& c : e.context) {
    out.turn_tokens.push_back(vocab.encode(c.tokens));
    out.turn_images.push_back(c.image_ids);
  }
  out.target.push_back(tok::kBos);
  for (std::size_t id : vocab.encode(e.target)) out.target.push_back(id);
  out.target.push_back(tok::kEos);
  return out;
}

inline std::vector<EncodedExample> encode_examples(const std::vector<TrainingExample>& examples,
                                                   const Vocabulary& vocab) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(encode_example(e, vocab));
  return out;
}

/// Right-pads every turn and the target to the batch maximum; empty turns become a single
/// PAD with mask 0. Image rows are slot-padded to K and only built in multimodal mode.
inline Batch make_batch(const std::vector<const EncodedExample*>& rows,
                        const FeatureStore& features, const ModelConfig& cfg) {
  if (rows.empty()) throw ContractError("make_batch: no examples");
  if (cfg.multimodal && features.img_dim() != cfg.img_dim)
    throw ConfigError("feature dimension " + std::to_string(features.img_dim()) +
                      " does not match model img_dim " + std::to_string(cfg.img_dim));
  Batch batch;
  batch.size = rows.size();
  for (std::size_t n = 0; n < cfg.context_size; ++n) {
    TurnBatch turn;
    std::size_t len = 1;
    for (const auto* r : rows) {
      if (r->turn_tokens.size() != cfg.context_size)
        throw ContractError("make_batch: example has " + std::to_string(r->turn_tokens.size()) +
                            " context turns, model expects " + std::to_string(cfg.context_size));
      len = std::max(len, r->turn_tokens[n].size());
    }
    turn.length = len;
    turn.tokens.assign(rows.size() * len, tok::kPad);
    std::vector<double> mask(rows.size() * len, 0.0);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const auto& ids = rows[b]->turn_tokens[n];
      for (std::size_t t = 0; t < ids.size(); ++t) {
        turn.tokens[b * len + t] = ids[t];
        mask[b * len + t] = 1.0;
      }
    }
    turn.mask = Tensor::from({rows.size(), len}, std::move(mask));
    if (cfg.multimodal) {
      const std::size_t width = cfg.image_slots * cfg.img_dim;
      std::vector<double> packed(rows.size() * width, 0.0);
      for (std::size_t b = 0; b < rows.size(); ++b) {
        const auto& ids = rows[b]->turn_images[n];
        std::vector<std::vector<double>> feats;
        for (std::size_t k = 0; k < std::min(ids.size(), cfg.image_slots); ++k)
          feats.push_back(features.lookup(ids[k]));
        auto [row, truncated] = pack_image_slots(feats, cfg.image_slots, cfg.img_dim);
        std::copy(row.begin(), row.end(), packed.begin() + b * width);
      }
      turn.images = Tensor::from({rows.size(), width}, std::move(packed));
    }
    batch.turns.push_back(std::move(turn));
  }
  std::size_t tlen = 0;
  for (const auto* r : rows) tlen = std::max(tlen, r->target.size());
  batch.target_len = tlen;
  batch.target.assign(rows.size() * tlen, tok::kPad);
  batch.target_mask.assign(rows.size() * tlen, 0.0);
  for (std::size_t b = 0; b < rows.size(); ++b)
    for (std::size_t t = 0; t < rows[b]->target.size(); ++t) {
      batch.target[b * tlen + t] = rows[b]->target[t];
      batch.target_mask[b * tlen + t] = 1.0;
    }
  return batch;
}

inline Batch make_batch(const std::vector<EncodedExample>& examples,
                        const std::vector<std::size_t>& indices, const FeatureStore& features,
                        const ModelConfig& cfg) {
  std::vector<const EncodedExample*> rows;
  for (std::size_t i : indices) rows.push_back(&examples.at(i));
  return make_batch(rows, features, cfg);
}

// ---------------------------------------------------------------------------
// Corpus statistics

struct CorpusStats {
  std::size_t sessions = 0;
  std::size_t turns = 0;
  std::size_t agent_text_turns = 0;
  std::size_t images = 0;
  std::size_t pairs = 0;
  double mean_turns_per_session = 0.0;
  double mean_target_tokens = 0.0;
};

inline CorpusStats corpus_stats(const std::vector<DialogueTranscript>& transcripts,
                                const std::vector<TrainingExample>& examples) {
  CorpusStats s;
  s.sessions = transcripts.size();
  for (const auto& t : transcripts) {
    s.turns += t.turns.size();
    for (const auto& turn : t.turns) {
      s.images += turn.image_ids.size();
      if (turn.speaker == Speaker::agent && !tokenize(turn.text).empty()) ++s.agent_text_turns;
    }
  }
  s.pairs = examples.size();
  if (s.sessions) s.mean_turns_per_session = double(s.turns) / double(s.sessions);
  std::size_t tokens = 0;
  for (const auto& e : examples) tokens += e.target.size();
  if (s.pairs) s.mean_target_tokens = double(tokens) / double(s.pairs);
  return s;
}

inline nlohmann::json to_json(const CorpusStats& s) {
  return {{"sessions", s.sessions},
          {"turns", s.turns},
          {"agent_text_turns", s.agent_text_turns},
          {"images", s.images},
          {"pairs", s.pairs},
          {"mean_turns_per_session", s.mean_turns_per_session},
          {"mean_target_tokens", s.mean_target_tokens}};
}

}  // namespace mhred
