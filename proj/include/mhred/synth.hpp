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

// Templated shopping dialogues with controllable information sources.
//
//   text_driven   the agent reply is a function of the last user utterance.
//   image_driven  the user asks about the n-th shown image; the reply names that
//                 image's colour, which only its feature vector encodes.
//   long_context  the reply repeats a request made four turns before the question.
//
// Image features are a per-colour prototype plus small Gaussian noise.

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mhred/data.hpp"
#include "mhred/error.hpp"

namespace mhred {

enum class SynthStyle { text_driven, image_driven, long_context };

inline std::string to_string(SynthStyle s) {
  switch (s) {
    case SynthStyle::text_driven: return "text_driven";
    case SynthStyle::image_driven: return "image_driven";
    case SynthStyle::long_context: return "long_context";
  }
  return "?";
}

inline SynthStyle parse_synth_style(const std::string& s) {
  if (s == "text_driven") return SynthStyle::text_driven;
  if (s == "image_driven") return SynthStyle::image_driven;
  if (s == "long_context") return SynthStyle::long_context;
  throw ConfigError("unknown corpus style \"" + s + "\"");
}

namespace synth {

inline const std::vector<std::string>& colors() {
  static const std::vector<std::string> v{"red", "blue", "green", "black"};
  return v;
}
inline const std::vector<std::string>& items() {
  static const std::vector<std::string> v{"shirt", "shoes", "jacket", "dress", "bag", "hat"};
  return v;
}
inline const std::vector<std::string>& materials() {
  static const std::vector<std::string> v{"cotton", "wool", "leather", "silk"};
  return v;
}
inline const std::vector<std::string>& ordinals() {
  static const std::vector<std::string> v{"1st", "2nd", "3rd"};
  return v;
}
inline const std::vector<std::string>& greetings() {
  static const std::vector<std::string> v{"hi", "hello there", "good morning"};
  return v;
}
inline const std::vector<std::string>& fillers() {
  static const std::vector<std::string> v{"let me think about it", "hmm not sure yet",
                                          "these look nice", "ok show me more"};
  return v;
}

/// A text_driven exchange: {color}, {item}, {material} are filled from the slot lists;
/// {match_color} and {match_item} are the next colour and item in list order.
struct Template {
  std::string query;
  std::string response;
};

inline const std::vector<Template>& text_templates() {
  static const std::vector<Template> v{
      {"show me some {color} {item}", "here are some {color} {item} for you"},
      {"do you have {item} in {material}", "yes we have {material} {item} in stock"},
      {"i need a {material} {item} in {color}", "sure , this {color} {material} {item} is popular"},
      {"what goes well with {color} {item}", "a {match_color} {match_item} would match nicely"},
  };
  return v;
}

inline std::string fill(std::string s, std::size_t color, std::size_t item, std::size_t material) {
  auto replace = [&s](const std::string& key, const std::string& value) {
    for (std::size_t pos; (pos = s.find(key)) != std::string::npos;) s.replace(pos, key.size(), value);
  };
  replace("{match_color}", colors()[(color + 1) % colors().size()]);
  replace("{match_item}", items()[(item + 1) % items().size()]);
  replace("{color}", colors()[color]);
  replace("{item}", items()[item]);
  replace("{material}", materials()[material]);
  return s;
}

constexpr std::size_t kShownImages = 3;
constexpr double kFeatureNoise = 0.1;

}  // namespace synth

struct SyntheticCorpus {
  std::vector<DialogueTranscript> transcripts;
  FeatureStore features;
};

inline SyntheticCorpus synthesize_corpus(std::uint64_t seed, std::size_t n_sessions,
                                         SynthStyle style, std::size_t img_dim = 16) {
  if (n_sessions == 0) throw ContractError("synthesize_corpus: need at least one session");
  if (img_dim == 0) throw ContractError("synthesize_corpus: img_dim must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto pick = [&rng](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };

  std::vector<std::vector<double>> prototypes(synth::colors().size());
  for (auto& p : prototypes) {
    p.resize(img_dim);
    for (double& x : p) x = gauss(rng);
  }

  SyntheticCorpus out{{}, FeatureStore(img_dim)};
  std::size_t image_counter = 0;
  // Adds one image of the given colour and returns its id.
  auto image = [&](const std::string& session, std::size_t color) {
    std::string id = session + "/img" + std::to_string(image_counter++);
    std::vector<double> v = prototypes[color];
    for (double& x : v) x += synth::kFeatureNoise * gauss(rng);
    out.features.add(id, std::move(v));
    return id;
  };
  auto random_images = [&](const std::string& session, std::size_t count) {
    std::vector<std::string> ids;
    for (std::size_t k = 0; k < count; ++k) ids.push_back(image(session, pick(synth::colors().size())));
    return ids;
  };

  for (std::size_t s = 0; s < n_sessions; ++s) {
    DialogueTranscript t;
    t.session_id = to_string(style) + "-" + std::to_string(seed) + "-" + std::to_string(s);
    const std::string& sid = t.session_id;
    const std::size_t color = pick(synth::colors().size());
    const std::size_t item = pick(synth::items().size());
    const std::size_t material = pick(synth::materials().size());
    switch (style) {
      case SynthStyle::text_driven: {
        if (pick(2) == 1) {
          t.turns.push_back({Speaker::user, synth::greetings()[pick(synth::greetings().size())], {}});
          t.turns.push_back({Speaker::agent, "", random_images(sid, 1 + pick(2))});
        }
        const auto& tpl = synth::text_templates()[pick(synth::text_templates().size())];
        t.turns.push_back({Speaker::user, synth::fill(tpl.query, color, item, material),
                           random_images(sid, pick(2))});
        t.turns.push_back({Speaker::agent, synth::fill(tpl.response, color, item, material),
                           random_images(sid, 1 + pick(2))});
        break;
      }
      case SynthStyle::image_driven: {
        std::vector<std::size_t> shown(synth::kShownImages);
        std::vector<std::string> ids;
        for (auto& c : shown) {
          c = pick(synth::colors().size());
          ids.push_back(image(sid, c));
        }
        const std::size_t which = pick(synth::kShownImages);
        t.turns.push_back({Speaker::user, "show me some " + synth::items()[item], {}});
        t.turns.push_back({Speaker::agent, "", ids});
        t.turns.push_back({Speaker::user,
                           "what color is the " + synth::ordinals()[which] + " " + synth::items()[item],
                           {}});
        t.turns.push_back({Speaker::agent,
                           "the " + synth::ordinals()[which] + " " + synth::items()[item] + " is " +
                               synth::colors()[shown[which]] + " and looks great",
                           {}});
        break;
      }
      case SynthStyle::long_context: {
        t.turns.push_back({Speaker::user,
                           "i am looking for " + synth::colors()[color] + " " + synth::items()[item],
                           {}});
        t.turns.push_back({Speaker::agent, "", random_images(sid, 2)});
        t.turns.push_back({Speaker::user, synth::fillers()[pick(synth::fillers().size())], {}});
        t.turns.push_back({Speaker::agent, "", random_images(sid, 2)});
        t.turns.push_back({Speaker::user, "can you remind me what i asked for", {}});
        t.turns.push_back({Speaker::agent,
                           "you asked for " + synth::colors()[color] + " " + synth::items()[item],
                           {}});
        break;
      }
    }
    out.transcripts.push_back(std::move(t));
  }
  return out;
}

}  // namespace mhred
