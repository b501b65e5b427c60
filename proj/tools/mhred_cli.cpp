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

// mhred: synth, prepare, train, generate, evaluate and compare.
//
// Every command writes a manifest (resolved options, seeds, paths, timings) next to its
// outputs. Passing that manifest back with --config replays the run. Logs go to stderr.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mhred/mhred.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

std::ostream& log() { return std::clog << "[mhred] "; }

// Reads JSON configuration. A manifest ({"command": c, "config": {...}}) configures
// command c; otherwise each top-level object is a section named after a command.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override {
    throw CLI::ConfigError("writing configuration files is not supported; use the run manifest");
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw CLI::ConfigError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConfigError("config file must hold a JSON object");
    json sections = j;
    if (j.contains("command") && j.contains("config"))
      sections = json{{j["command"].get<std::string>(), j["config"]}};
    std::vector<CLI::ConfigItem> items;
    for (const auto& [section, body] : sections.items()) {
      if (!body.is_object()) throw CLI::ConfigError("config section " + section + " must be an object");
      for (const auto& [key, value] : body.items()) {
        CLI::ConfigItem item;
        item.parents = {section};
        item.name = key;
        if (value.is_string())
          item.inputs = {value.get<std::string>()};
        else if (value.is_boolean())
          item.inputs = {value.get<bool>() ? "true" : "false"};
        else if (value.is_null())
          continue;
        else
          item.inputs = {value.dump()};
        items.push_back(std::move(item));
      }
    }
    return items;
  }
};

// Resolved option values of a subcommand, keyed by long name, for the manifest.
json resolved_options(const CLI::App& sub) {
  json out = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name.empty()) continue;
    const bool is_flag = opt->get_expected_min() == 0;
    std::string text;
    if (opt->count() > 0)
      text = is_flag ? (opt->as<bool>() ? "true" : "false") : opt->as<std::string>();
    else
      text = opt->get_default_str();
    if (text.empty()) continue;
    json parsed = json::parse(text, nullptr, false);
    out[name] = parsed.is_discarded() || parsed.is_object() || parsed.is_array() ? json(text) : parsed;
  }
  return out;
}

class Manifest {
 public:
  Manifest(const CLI::App& sub) : sub_(sub), start_(std::chrono::steady_clock::now()) {
    j_["command"] = sub.get_name();
    j_["version"] = kVersion;
    j_["inputs"] = json::object();
    j_["outputs"] = json::array();
    j_["seeds"] = json::object();
  }
  void input(const std::string& key, const fs::path& p) { j_["inputs"][key] = p.string(); }
  void output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void seed(const std::string& key, std::uint64_t s) { j_["seeds"][key] = s; }
  void info(const std::string& key, json v) { j_["info"][key] = std::move(v); }

  void write(const fs::path& path) {
    j_["config"] = resolved_options(sub_);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    j_["timings"] = {{"wall_seconds", secs}};
    std::ofstream out(path);
    out << j_.dump(2) << "\n";
    if (!out) throw mhred::LoadError("cannot write manifest " + path.string());
  }

 private:
  const CLI::App& sub_;
  std::chrono::steady_clock::time_point start_;
  json j_;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw mhred::LoadError("cannot write " + path.string());
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw mhred::ParseError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<mhred::Tokens> tokenize_lines(const std::vector<std::string>& lines) {
  std::vector<mhred::Tokens> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(mhred::tokenize(l));
  return out;
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

// Writes files into a staging directory and moves them into place only on commit, so a
// failed command leaves no partial outputs.
class Staging {
 public:
  explicit Staging(fs::path out) : out_(std::move(out)) {
    stage_ = out_.parent_path() / ("." + out_.filename().string() + ".staging");
    fs::remove_all(stage_);
    fs::create_directories(stage_);
  }
  ~Staging() {
    std::error_code ec;
    fs::remove_all(stage_, ec);
  }
  fs::path file(const std::string& name) const { return stage_ / name; }
  void commit() {
    fs::create_directories(out_);
    for (const auto& entry : fs::directory_iterator(stage_))
      fs::rename(entry.path(), out_ / entry.path().filename());
  }

 private:
  fs::path out_, stage_;
};

fs::path normalized_dir(const std::string& s) {
  fs::path p = fs::absolute(s).lexically_normal();
  if (!p.has_filename()) p = p.parent_path();
  return p;
}

// ---------------------------------------------------------------------------------------

struct SynthArgs {
  std::string style = "text_driven";
  std::size_t sessions = 100;
  std::uint64_t seed = 1;
  std::size_t img_dim = 16;
  std::string out;
};

void run_synth(const SynthArgs& a, const CLI::App& sub) {
  Manifest m(sub);
  const auto style = mhred::parse_synth_style(a.style);
  auto corpus = mhred::synthesize_corpus(a.seed, a.sessions, style, a.img_dim);
  Staging stage(normalized_dir(a.out));
  mhred::write_transcripts(stage.file("transcripts.jsonl"), corpus.transcripts);
  corpus.features.save(stage.file("features.bin"));
  m.seed("corpus", a.seed);
  m.output(fs::path(a.out) / "transcripts.jsonl");
  m.output(fs::path(a.out) / "features.bin");
  m.write(stage.file("manifest.json"));
  stage.commit();
  log() << "wrote " << corpus.transcripts.size() << " " << a.style << " sessions and "
        << corpus.features.size() << " image vectors to " << a.out << "\n";
}

// ---------------------------------------------------------------------------------------

struct PrepareArgs {
  std::string transcripts;
  std::string mmd;
  std::string features;
  std::size_t img_dim = 4096;
  std::string mode = "aggregated";
  std::size_t context_size = 2;
  std::size_t min_count = 1;
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 1;
  std::string out;
};

std::vector<mhred::DialogueTranscript> read_mmd_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw mhred::ParseError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<mhred::DialogueTranscript> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw mhred::ParseError(f.string() + ": " + e.what());
    }
    out.push_back(mhred::convert_mmd_dialogue(j, f.stem().string()));
  }
  return out;
}

// Splits sessions after a seeded shuffle: the first block is validation, the next test.
std::array<std::vector<std::size_t>, 3> split_sessions(std::size_t n, double valid, double test,
                                                       std::uint64_t seed) {
  if (valid < 0 || test < 0 || valid + test >= 1.0)
    throw mhred::ConfigError("split fractions must be >= 0 and leave room for training data");
  auto count = [n](double f) {
    std::size_t k = static_cast<std::size_t>(std::llround(f * double(n)));
    return f > 0 && k == 0 && n >= 3 ? std::size_t{1} : k;
  };
  const std::size_t nv = count(valid), nt = count(test);
  if (nv + nt >= n) throw mhred::ConfigError("too few sessions (" + std::to_string(n) + ") to split");
  std::vector<std::size_t> order = mhred::iota_indices(n);
  std::mt19937_64 rng(seed);
  mhred::seeded_shuffle(order, rng);
  std::array<std::vector<std::size_t>, 3> parts;  // train, valid, test
  for (std::size_t i = 0; i < n; ++i) parts[i < nv ? 1 : i < nv + nt ? 2 : 0].push_back(order[i]);
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

void run_prepare(const PrepareArgs& a, const CLI::App& sub) {
  Manifest m(sub);
  if (a.transcripts.empty() == a.mmd.empty())
    throw mhred::ConfigError("give exactly one of --transcripts or --mmd");
  const auto mode = mhred::parse_extraction_mode(a.mode);
  if (a.context_size == 0) throw mhred::ConfigError("context size must be positive");
  std::vector<mhred::DialogueTranscript> transcripts;
  if (!a.transcripts.empty()) {
    transcripts = mhred::read_transcripts(a.transcripts);
    m.input("transcripts", a.transcripts);
  } else {
    transcripts = read_mmd_dir(a.mmd);
    m.input("mmd", a.mmd);
  }
  if (transcripts.empty()) throw mhred::ParseError("no sessions found in the input");

  mhred::FeatureStore source(a.img_dim);
  if (!a.features.empty()) {
    source = mhred::FeatureStore::load(a.features);
    m.input("features", a.features);
  } else {
    log() << "no --features given; every image maps to a zero vector of length " << a.img_dim << "\n";
  }

  const auto parts = split_sessions(transcripts.size(), a.valid_fraction, a.test_fraction, a.seed);
  m.seed("split", a.seed);
  static const char* kSplitNames[] = {"train", "valid", "test"};
  std::array<std::vector<mhred::TrainingExample>, 3> examples;
  std::vector<mhred::TrainingExample> all;
  std::vector<std::string> train_texts;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t idx : parts[s]) {
      for (auto& e : mhred::extract_examples(transcripts[idx], a.context_size, mode)) {
        all.push_back(e);
        examples[s].push_back(std::move(e));
      }
      if (s == 0)
        for (const auto& turn : transcripts[idx].turns) train_texts.push_back(turn.text);
    }
  if (examples[0].empty()) throw mhred::ParseError("the training split has no agent text turns");
  const mhred::Vocabulary vocab = mhred::build_vocab(train_texts, a.min_count);

  mhred::FeatureStore kept(source.img_dim());
  std::size_t missing = 0;
  std::set<std::string> referenced;
  for (const auto& t : transcripts)
    for (const auto& turn : t.turns)
      for (const auto& id : turn.image_ids) referenced.insert(id);
  for (const auto& id : referenced) {
    if (const auto* v = source.find(id))
      kept.add(id, *v);
    else
      ++missing;
  }
  if (missing && !a.features.empty())
    log() << "warning: " << missing << " referenced images have no feature vector; they map to zeros\n";

  Staging stage(normalized_dir(a.out));
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string name = kSplitNames[s];
    mhred::write_examples(stage.file(name + ".jsonl"), {a.context_size, mode, examples[s]});
    std::ofstream refs(stage.file(name + ".refs.txt"));
    for (const auto& e : examples[s]) refs << mhred::join_tokens(e.target) << "\n";
    m.output(fs::path(a.out) / (name + ".jsonl"));
    m.output(fs::path(a.out) / (name + ".refs.txt"));
  }
  vocab.save(stage.file("vocab.tsv"));
  kept.save(stage.file("features.bin"));
  json stats = mhred::to_json(mhred::corpus_stats(transcripts, all));
  for (std::size_t s = 0; s < 3; ++s) {
    stats["splits"][kSplitNames[s]] = {{"sessions", parts[s].size()}, {"pairs", examples[s].size()}};
  }
  stats["vocab_size"] = vocab.size();
  stats["vocab_fingerprint"] = hex(vocab.fingerprint());
  stats["missing_images"] = missing;
  write_json(stage.file("stats.json"), stats);
  for (const char* f : {"vocab.tsv", "features.bin", "stats.json"}) m.output(fs::path(a.out) / f);
  m.info("stats", stats);
  m.write(stage.file("manifest.json"));
  stage.commit();
  log() << "prepared " << all.size() << " pairs from " << transcripts.size() << " sessions ("
        << examples[0].size() << " train, " << examples[1].size() << " valid, "
        << examples[2].size() << " test); vocabulary " << vocab.size() << "\n";
}

// ---------------------------------------------------------------------------------------

struct Dataset {
  mhred::ExampleFile train, valid, test;
  mhred::Vocabulary vocab;
  mhred::FeatureStore features;

  const mhred::ExampleFile& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "valid") return valid;
    if (name == "test") return test;
    throw mhred::ConfigError("unknown split '" + name + "' (expected train, valid or test)");
  }
};

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw mhred::ConfigError("dataset directory not found: " + dir.string());
  Dataset d;
  d.train = mhred::read_examples(dir / "train.jsonl");
  d.valid = mhred::read_examples(dir / "valid.jsonl");
  d.test = mhred::read_examples(dir / "test.jsonl");
  d.vocab = mhred::Vocabulary::load(dir / "vocab.tsv");
  d.features = mhred::FeatureStore::load(dir / "features.bin");
  return d;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string variant;
  bool multimodal = true;
  bool attention = true;
  std::size_t context_size = 0;
  std::size_t img_dim = 0;
  std::size_t emb_dim = 512;
  std::size_t hid_dim = 512;
  std::size_t image_slots = 5;
  std::size_t max_decode_len = 30;
  bool bidirectional = true;
  double init_scale = 0.08;
  mhred::TrainConfig tc;
};

void apply_variant(TrainArgs& a) {
  if (a.variant.empty()) return;
  if (a.variant == "T-HRED") a.multimodal = false, a.attention = false;
  else if (a.variant == "T-HRED-attn") a.multimodal = false, a.attention = true;
  else if (a.variant == "M-HRED") a.multimodal = true, a.attention = false;
  else if (a.variant == "M-HRED-attn") a.multimodal = true, a.attention = true;
  else throw mhred::ConfigError("unknown variant '" + a.variant + "' (T-HRED, T-HRED-attn, M-HRED, M-HRED-attn)");
}

void run_train(TrainArgs a, const CLI::App& sub) {
  Manifest m(sub);
  apply_variant(a);
  const Dataset d = load_dataset(a.data);
  m.input("data", a.data);
  if (d.valid.examples.empty())
    throw mhred::ConfigError("dataset has no validation examples; prepare it with --valid-fraction > 0");
  if (a.context_size && a.context_size != d.train.context_size)
    throw mhred::ConfigError("--context-size " + std::to_string(a.context_size) +
                             " does not match the dataset's context size " +
                             std::to_string(d.train.context_size));
  if (a.img_dim && a.img_dim != d.features.img_dim())
    throw mhred::ConfigError("--img-dim " + std::to_string(a.img_dim) +
                             " does not match the dataset's feature length " +
                             std::to_string(d.features.img_dim()));

  mhred::ModelConfig cfg;
  cfg.vocab_size = d.vocab.size();
  cfg.emb_dim = a.emb_dim;
  cfg.hid_dim = a.hid_dim;
  cfg.img_dim = d.features.img_dim();
  cfg.image_slots = a.image_slots;
  cfg.context_size = d.train.context_size;
  cfg.multimodal = a.multimodal;
  cfg.use_attention = a.attention;
  cfg.bidirectional_encoder = a.bidirectional;
  cfg.max_decode_len = a.max_decode_len;
  cfg.validate();
  a.tc.validate();

  const auto train = mhred::encode_examples(d.train.examples, d.vocab);
  const auto valid = mhred::encode_examples(d.valid.examples, d.vocab);
  mhred::ModelParams params = mhred::ModelParams::init(cfg, a.tc.seed, a.init_scale);
  m.seed("init", a.tc.seed);
  m.seed("shuffle", a.tc.seed);
  log() << "training " << cfg.variant_name() << " cxt=" << cfg.context_size << " on "
        << train.size() << " pairs (" << valid.size() << " valid)\n";

  Staging stage(normalized_dir(a.out));
  std::ofstream history(stage.file("history.jsonl"));
  auto result = mhred::fit(params, cfg, train, valid, d.features, a.tc, [&](const mhred::EpochRecord& r) {
    history << mhred::to_json(r).dump() << "\n";
    history.flush();
    log() << "epoch " << r.epoch << " train " << std::fixed << std::setprecision(4) << r.train_loss
          << " valid " << r.valid_loss << " clipped " << r.clipped_fraction << std::defaultfloat
          << "\n";
  });
  history.close();
  const json meta = {{"vocab_fingerprint", hex(d.vocab.fingerprint())},
                     {"extraction_mode", mhred::to_string(d.train.mode)},
                     {"best_epoch", result.best_epoch},
                     {"best_valid_loss", result.best_valid_loss},
                     {"steps", result.steps},
                     {"early_stopped", result.early_stopped},
                     {"train", json(a.tc)}};
  mhred::save_checkpoint(stage.file("model.ckpt"), cfg, params, meta);
  m.output(fs::path(a.out) / "model.ckpt");
  m.output(fs::path(a.out) / "history.jsonl");
  m.info("model", cfg);
  m.info("result", meta);
  m.write(stage.file("manifest.json"));
  stage.commit();
  log() << "best epoch " << result.best_epoch << " valid loss " << result.best_valid_loss
        << (result.early_stopped ? " (early stop)" : "") << "\n";
}

// ---------------------------------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string out;
  std::size_t beam_width = 1;
  std::size_t max_decode_len = 0;
  std::size_t batch_size = 32;
};

void run_generate(const GenerateArgs& a, const CLI::App& sub) {
  Manifest m(sub);
  mhred::Checkpoint ck = mhred::load_checkpoint(a.checkpoint);
  const Dataset d = load_dataset(a.data);
  m.input("checkpoint", a.checkpoint);
  m.input("data", a.data);
  const std::string want = ck.meta.value("vocab_fingerprint", std::string());
  if (want != hex(d.vocab.fingerprint()))
    throw mhred::ConfigError("vocabulary mismatch: checkpoint was trained with vocabulary " + want +
                             ", dataset has " + hex(d.vocab.fingerprint()));
  const mhred::ExampleFile& split = d.split(a.split);
  if (split.context_size != ck.config.context_size)
    throw mhred::ConfigError("dataset context size " + std::to_string(split.context_size) +
                             " does not match the checkpoint's " +
                             std::to_string(ck.config.context_size));
  if (ck.config.multimodal && d.features.img_dim() != ck.config.img_dim)
    throw mhred::ConfigError("dataset feature length does not match the checkpoint");
  if (a.max_decode_len) ck.config.max_decode_len = a.max_decode_len;
  if (a.beam_width == 0) throw mhred::ConfigError("beam width must be positive");
  mhred::GenerateOptions opts;
  opts.mode = a.beam_width > 1 ? mhred::DecodeMode::beam : mhred::DecodeMode::greedy;
  opts.beam_width = a.beam_width;

  const auto encoded = mhred::encode_examples(split.examples, d.vocab);
  const auto outputs =
      mhred::generate_responses(ck.params, ck.config, encoded, d.features, opts, a.batch_size);
  const fs::path out = fs::absolute(a.out);
  const fs::path tmp = out.string() + ".tmp";
  {
    std::ofstream f(tmp);
    for (const auto& ids : outputs) f << mhred::join_tokens(d.vocab.decode(ids)) << "\n";
    if (!f) throw mhred::LoadError("cannot write " + out.string());
  }
  fs::rename(tmp, out);
  m.output(a.out);
  m.info("model", ck.config);
  m.info("examples", outputs.size());
  m.write(out.string() + ".manifest.json");
  log() << "generated " << outputs.size() << " responses with " << ck.config.variant_name()
        << " to " << a.out << "\n";
}

// ---------------------------------------------------------------------------------------

// "M-HRED-attn  5" when the hypotheses came from generate, else the file name.
std::string system_label(const fs::path& hyps) {
  std::ifstream in(hyps.string() + ".manifest.json");
  if (in) {
    json j = json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.contains("info") && j["info"].contains("model")) {
      auto cfg = j["info"]["model"].get<mhred::ModelConfig>();
      return cfg.variant_name() + " " + std::to_string(cfg.context_size);
    }
  }
  return hyps.filename().string();
}

struct EvaluateArgs {
  std::string hyps;
  std::string refs;
  std::string out;
  bool per_sentence = false;
};

void run_evaluate(const EvaluateArgs& a, const CLI::App& sub) {
  Manifest m(sub);
  const auto hyps = read_lines(a.hyps), refs = read_lines(a.refs);
  if (hyps.size() != refs.size())
    throw mhred::ContractError(a.hyps + " has " + std::to_string(hyps.size()) + " lines but " +
                               a.refs + " has " + std::to_string(refs.size()));
  const auto report = mhred::corpus_eval(tokenize_lines(hyps), tokenize_lines(refs));
  json j = mhred::to_json(report, a.per_sentence);
  j["system"] = system_label(a.hyps);
  write_json(a.out, j);
  m.input("hyps", a.hyps);
  m.input("refs", a.refs);
  m.output(a.out);
  m.write(a.out + ".manifest.json");
  std::printf("%-20s %8s %8s %8s\n", "system", "BLEU-4", "METEOR", "ROUGE-L");
  std::printf("%-20s %8.4f %8.4f %8.4f\n", j["system"].get<std::string>().c_str(), report.mean[0],
              report.mean[1], report.mean[2]);
}

struct CompareArgs {
  std::string hyps_a;
  std::string hyps_b;
  std::string refs;
  std::string out;
  std::size_t resamples = 1000;
  std::uint64_t seed = 1;
};

void run_compare(const CompareArgs& a, const CLI::App& sub) {
  Manifest m(sub);
  const auto ha = read_lines(a.hyps_a), hb = read_lines(a.hyps_b), refs = read_lines(a.refs);
  if (ha.size() != refs.size() || hb.size() != refs.size())
    throw mhred::ContractError("line counts differ: " + std::to_string(ha.size()) + " / " +
                               std::to_string(hb.size()) + " hypotheses for " +
                               std::to_string(refs.size()) + " references");
  const auto ref_tokens = tokenize_lines(refs);
  const auto ra = mhred::corpus_eval(tokenize_lines(ha), ref_tokens);
  const auto rb = mhred::corpus_eval(tokenize_lines(hb), ref_tokens);
  json j = {{"system_a", system_label(a.hyps_a)}, {"system_b", system_label(a.hyps_b)},
            {"resamples", a.resamples},           {"seed", a.seed}};
  std::printf("%-12s %8s %8s %8s %8s  %s\n", "metric", "A", "B", "win(A)", "win(B)", "verdict");
  for (std::size_t k = 0; k < mhred::kMetrics.size(); ++k) {
    const auto v = mhred::bootstrap_compare(ra.sentence[k], rb.sentence[k], a.resamples, a.seed);
    const std::string name = mhred::metric_name(mhred::kMetrics[k]);
    j["metrics"][name] = mhred::to_json(v);
    const char* verdict = v.a_significant() ? "A better (95%)" : v.b_significant() ? "B better (95%)" : "not significant";
    std::printf("%-12s %8.4f %8.4f %8.3f %8.3f  %s\n", name.c_str(), v.mean_a, v.mean_b,
                v.win_fraction_a(), v.win_fraction_b(), verdict);
  }
  write_json(a.out, j);
  m.input("hyps_a", a.hyps_a);
  m.input("hyps_b", a.hyps_b);
  m.input("refs", a.refs);
  m.seed("bootstrap", a.seed);
  m.output(a.out);
  m.write(a.out + ".manifest.json");
}

// Lets --config appear after the subcommand name as well as before it.
std::vector<std::string> hoist_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc), front, rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      front = {args[i], args[i + 1]};
      ++i;
    } else if (args[i].rfind("--config=", 0) == 0) {
      front = {args[i]};
    } else {
      rest.push_back(args[i]);
    }
  }
  front.insert(front.end(), rest.begin(), rest.end());
  std::reverse(front.begin(), front.end());  // CLI11 consumes a reversed vector
  return front;
}

// Boolean flag whose default is recorded for the manifest.
CLI::Option* add_bool_flag(CLI::App* app, const std::string& names, bool& value,
                           const std::string& desc) {
  return app->add_flag(names, value, desc)->default_str(value ? "true" : "false");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Multimodal hierarchical encoder-decoder for dialogue response generation", "mhred");
  app.set_version_flag("--version", kVersion);
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON configuration or a run manifest to replay");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus and its image features");
  synth->add_option("--style", sy.style, "text_driven, image_driven or long_context")
      ->check(CLI::IsMember({"text_driven", "image_driven", "long_context"}));
  synth->add_option("--sessions", sy.sessions, "Number of sessions")->check(CLI::PositiveNumber);
  synth->add_option("--seed", sy.seed, "Generator seed");
  synth->add_option("--img-dim", sy.img_dim, "Feature vector length")->check(CLI::PositiveNumber);
  synth->add_option("--out", sy.out, "Output directory")->required()->envname("MHRED_SYNTH_OUT");

  PrepareArgs pr;
  auto* prepare = app.add_subcommand("prepare", "Extract training examples, splits and vocabulary");
  auto* tr_opt = prepare->add_option("--transcripts", pr.transcripts, "Transcript JSONL file")
                     ->envname("MHRED_TRANSCRIPTS");
  prepare->add_option("--mmd", pr.mmd, "Directory of MMD dialogue JSON files")->excludes(tr_opt);
  prepare->add_option("--features", pr.features, "Image feature file")->envname("MHRED_FEATURES");
  prepare->add_option("--img-dim", pr.img_dim, "Feature length when no feature file is given")
      ->check(CLI::PositiveNumber);
  prepare->add_option("--mode", pr.mode, "aggregated or unrolled")
      ->check(CLI::IsMember({"aggregated", "unrolled"}));
  prepare->add_option("--context-size", pr.context_size, "Context turns per example")
      ->check(CLI::PositiveNumber);
  prepare->add_option("--min-count", pr.min_count, "Minimum token count for the vocabulary")
      ->check(CLI::PositiveNumber);
  prepare->add_option("--valid-fraction", pr.valid_fraction, "Fraction of sessions for validation");
  prepare->add_option("--test-fraction", pr.test_fraction, "Fraction of sessions for test");
  prepare->add_option("--seed", pr.seed, "Session split seed");
  prepare->add_option("--out", pr.out, "Dataset directory")->required()->envname("MHRED_DATA");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a prepared dataset");
  train->add_option("--data", ta.data, "Dataset directory")->required()->envname("MHRED_DATA");
  train->add_option("--out", ta.out, "Run directory")->required()->envname("MHRED_RUN");
  train->add_option("--variant", ta.variant, "T-HRED, T-HRED-attn, M-HRED or M-HRED-attn");
  add_bool_flag(train, "--multimodal,!--text-only", ta.multimodal, "Use image features (M-HRED)");
  add_bool_flag(train, "--attention,!--no-attention", ta.attention, "Decoder attention");
  add_bool_flag(train, "--bidirectional,!--unidirectional", ta.bidirectional, "Bidirectional utterance encoder");
  train->add_option("--context-size", ta.context_size, "Must match the dataset (0: take it from the dataset)");
  train->add_option("--img-dim", ta.img_dim, "Must match the features (0: take it from the dataset)");
  train->add_option("--emb-dim", ta.emb_dim)->check(CLI::PositiveNumber);
  train->add_option("--hid-dim", ta.hid_dim)->check(CLI::PositiveNumber);
  train->add_option("--image-slots", ta.image_slots, "Images kept per turn")->check(CLI::PositiveNumber);
  train->add_option("--max-decode-len", ta.max_decode_len, "Output limit, EOS included")
      ->check(CLI::PositiveNumber);
  train->add_option("--init-scale", ta.init_scale, "Uniform initialization half-width");
  train->add_option("--lr", ta.tc.learning_rate, "Adam learning rate");
  train->add_option("--clip-norm", ta.tc.clip_norm, "Global gradient norm limit");
  train->add_option("--batch-size", ta.tc.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--max-epochs", ta.tc.max_epochs)->check(CLI::PositiveNumber);
  train->add_option("--patience", ta.tc.patience, "Epochs without improvement before stopping")
      ->check(CLI::PositiveNumber);
  train->add_option("--max-steps", ta.tc.max_steps, "Optimizer step budget (0: unlimited)");
  train->add_option("--seed", ta.tc.seed, "Initialization and shuffling seed");

  GenerateArgs ga;
  auto* generate = app.add_subcommand("generate", "Generate responses for a dataset split");
  generate->add_option("--checkpoint", ga.checkpoint)->required()->envname("MHRED_CHECKPOINT");
  generate->add_option("--data", ga.data, "Dataset directory")->required()->envname("MHRED_DATA");
  generate->add_option("--split", ga.split)->check(CLI::IsMember({"train", "valid", "test"}));
  generate->add_option("--out", ga.out, "Responses file, one per line")->required();
  generate->add_option("--beam-width", ga.beam_width, "1 decodes greedily")->check(CLI::PositiveNumber);
  generate->add_option("--max-decode-len", ga.max_decode_len, "Override the checkpoint's limit (0: keep)");
  generate->add_option("--batch-size", ga.batch_size)->check(CLI::PositiveNumber);

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Score responses against references");
  evaluate->add_option("--hyps", ea.hyps)->required();
  evaluate->add_option("--refs", ea.refs)->required();
  evaluate->add_option("--out", ea.out, "JSON report")->required();
  add_bool_flag(evaluate, "--per-sentence", ea.per_sentence, "Include sentence-level scores");

  CompareArgs ca;
  auto* compare = app.add_subcommand("compare", "Paired bootstrap comparison of two systems");
  compare->add_option("--hyps-a", ca.hyps_a)->required();
  compare->add_option("--hyps-b", ca.hyps_b)->required();
  compare->add_option("--refs", ca.refs)->required();
  compare->add_option("--out", ca.out, "JSON report")->required();
  compare->add_option("--resamples", ca.resamples)->check(CLI::Range(100, 10000000));
  compare->add_option("--seed", ca.seed, "Bootstrap seed");

  try {
    app.parse(hoist_config(argc, argv));
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) run_synth(sy, *synth);
    else if (*prepare) run_prepare(pr, *prepare);
    else if (*train) run_train(ta, *train);
    else if (*generate) run_generate(ga, *generate);
    else if (*evaluate) run_evaluate(ea, *evaluate);
    else if (*compare) run_compare(ca, *compare);
  } catch (const std::exception& e) {
    std::cerr << "mhred: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
