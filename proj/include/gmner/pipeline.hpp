#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gmner/core.hpp"
#include "gmner/crf.hpp"
#include "gmner/embedding.hpp"
#include "gmner/error.hpp"
#include "gmner/eval.hpp"
#include "gmner/hash.hpp"
#include "gmner/icl_selector.hpp"
#include "gmner/llm_gateway.hpp"
#include "gmner/prompts.hpp"
#include "gmner/refine_ground.hpp"
#include "gmner/synthesis.hpp"
#include "gmner/uncertainty.hpp"

namespace gmner {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

inline constexpr int kConfigVersion = 1;

/// The complete config document with every default spelled out. User
/// documents are validated against its shape: unknown fields are errors.
inline json default_config_document() {
  return json::parse(R"({
    "config_version": 1,
    "schema": null,
    "seed": 13,
    "paths": {
      "train": null,
      "test": null,
      "work_dir": "work",
      "prompts": "prompts",
      "transcripts": "transcripts.jsonl",
      "images": ".",
      "token_store": null,
      "sentence_store": null,
      "entity_store": null,
      "image_store": null
    },
    "stages": {"stage1": true, "stage2": true, "stage3": true, "example_selection": "dynamic"},
    "router": {"beta": 0.8},
    "selector": {"delta": 0.6, "lambda": [0.6, 0.4, 0.2], "k": 3},
    "train": {"epochs": 10, "batch_size": 32, "lr_emission": 0.001, "lr_crf": 0.05, "weight_decay": 0.01},
    "synthesis": {"strategies": ["substitution", "paraphrase"], "count_per_seed": 2, "neg_cap": 10, "min_yield": 0.5},
    "refine": {"allow_add": true},
    "gateway": {
      "mode": "replay",
      "endpoint": "",
      "llm_model": "qwen-max",
      "mllm_model": "qwen2.5-vl-72b-instruct",
      "max_in_flight": 4,
      "timeout_s": 120.0,
      "max_retries": 3,
      "api_key_env": "GMNER_API_KEY"
    },
    "eval": {"f1_gate": 0.0}
  })");
}

struct PipelinePaths {
  fs::path train, test, work_dir, prompts, transcripts, images;
  fs::path token_store, sentence_store, entity_store, image_store;
};

struct StageSwitches {
  bool stage1 = true;
  bool stage2 = true;
  bool stage3 = true;
  bool dynamic_examples = true;

  /// Ablation label; "full" when everything is on.
  std::string variant() const {
    std::vector<std::string> off;
    if (!stage1) off.push_back("stage1");
    if (!stage2) off.push_back("stage2");
    if (!stage3) off.push_back("stage3");
    if (stage3 && !dynamic_examples) off.push_back("mes");
    if (off.empty()) return "full";
    std::string out = "w/o";
    for (const auto& o : off) out += " " + o;
    return out;
  }
};

struct SynthesisSettings {
  std::vector<SynthesisStrategy> strategies{SynthesisStrategy::kSubstitution, SynthesisStrategy::kParaphrase};
  std::size_t count_per_seed = 2;
  std::size_t neg_cap = 10;
  double min_yield = 0.5;
};

struct GatewaySettings {
  GatewayMode mode = GatewayMode::kReplay;
  std::string endpoint;
  std::string llm_model;
  std::string mllm_model;
  int max_in_flight = 4;
  double timeout_s = 120.0;
  int max_retries = 3;
  std::string api_key_env;
};

struct PipelineConfig {
  json document;  // effective document, defaults filled
  fs::path base_dir;
  Schema schema;
  std::map<std::string, std::string> descriptions;
  std::uint64_t seed = 13;
  PipelinePaths paths;
  StageSwitches stages;
  RouterConfig router;
  SelectorConfig selector;
  TrainConfig train;
  SynthesisSettings synthesis;
  RefineOptions refine;
  GatewaySettings gateway;
  double f1_gate = 0.0;
  std::string hash;
};

namespace detail {

[[noreturn]] inline void config_fail(const std::string& field, const std::string& what) {
  throw Error(ErrorKind::kConfig, "config: " + field + ": " + what);
}

inline void check_known_fields(const json& user, const json& defaults, const std::string& prefix) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const auto field = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) config_fail(field, "unknown field");
    const auto& d = defaults[it.key()];
    if (d.is_object()) {
      if (!it.value().is_object()) config_fail(field, "expected object");
      check_known_fields(it.value(), d, field);
    }
  }
}

inline const json& at_path(const json& doc, const std::string& dotted) {
  const json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const auto key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object() || !cur->contains(key)) config_fail(dotted, "missing");
    cur = &(*cur)[key];
    if (dot == std::string::npos) return *cur;
    start = dot + 1;
  }
}

inline double get_number(const json& doc, const std::string& field) {
  const auto& v = at_path(doc, field);
  if (!v.is_number()) config_fail(field, "expected number");
  return v.get<double>();
}

inline std::int64_t get_int(const json& doc, const std::string& field) {
  const auto& v = at_path(doc, field);
  if (!v.is_number_integer()) config_fail(field, "expected integer");
  return v.get<std::int64_t>();
}

inline bool get_bool(const json& doc, const std::string& field) {
  const auto& v = at_path(doc, field);
  if (!v.is_boolean()) config_fail(field, "expected boolean");
  return v.get<bool>();
}

inline std::string get_string(const json& doc, const std::string& field) {
  const auto& v = at_path(doc, field);
  if (!v.is_string()) config_fail(field, "expected string");
  return v.get<std::string>();
}

inline fs::path get_path(const json& doc, const std::string& field, const fs::path& base) {
  const auto& v = at_path(doc, field);
  if (v.is_null()) config_fail(field, "required");
  if (!v.is_string() || v.get<std::string>().empty()) config_fail(field, "expected non-empty path string");
  const fs::path p(v.get<std::string>());
  return p.is_relative() ? base / p : p;
}

/// Parses "a.b.c=value"; the value is JSON when it parses as JSON, else a string.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::kConfig, "override '" + assignment + "' must look like field.path=value");
  }
  const auto field = assignment.substr(0, eq);
  const auto raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  std::string pointer;
  std::size_t start = 0;
  while (true) {
    const auto dot = field.find('.', start);
    pointer += "/" + field.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  doc[json::json_pointer(pointer)] = value;
}

}  // namespace detail

/// Validates and resolves a config document. Relative paths resolve
/// against `base_dir`.
inline PipelineConfig parse_config(const json& user, const fs::path& base_dir,
                                   const std::vector<std::string>& overrides = {}) {
  using namespace detail;
  if (!user.is_object()) throw Error(ErrorKind::kConfig, "config: top level must be an object");
  json doc = default_config_document();
  json patched = user;
  for (const auto& o : overrides) apply_override(patched, o);
  check_known_fields(patched, doc, "");
  doc.merge_patch(patched);

  PipelineConfig c;
  c.base_dir = base_dir;
  if (get_int(doc, "config_version") != kConfigVersion) {
    config_fail("config_version", "unsupported (expected " + std::to_string(kConfigVersion) + ")");
  }

  const auto& schema = doc["schema"];
  if (!schema.is_array() || schema.empty()) config_fail("schema", "expected non-empty array of entity types");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto field = "schema[" + std::to_string(i) + "]";
    if (schema[i].is_string()) {
      names.push_back(schema[i].get<std::string>());
    } else if (schema[i].is_object() && schema[i].contains("type") && schema[i]["type"].is_string()) {
      names.push_back(schema[i]["type"].get<std::string>());
      if (schema[i].contains("description")) {
        if (!schema[i]["description"].is_string()) config_fail(field + ".description", "expected string");
        c.descriptions[names.back()] = schema[i]["description"].get<std::string>();
      }
    } else {
      config_fail(field, "expected type name or {\"type\", \"description\"}");
    }
  }
  try {
    c.schema = Schema(names);
  } catch (const Error& e) {
    config_fail("schema", e.what());
  }

  const auto seed = get_int(doc, "seed");
  if (seed < 0) config_fail("seed", "must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);

  c.paths.train = get_path(doc, "paths.train", base_dir);
  c.paths.test = get_path(doc, "paths.test", base_dir);
  c.paths.work_dir = get_path(doc, "paths.work_dir", base_dir);
  c.paths.prompts = get_path(doc, "paths.prompts", base_dir);
  c.paths.transcripts = get_path(doc, "paths.transcripts", base_dir);
  c.paths.images = get_path(doc, "paths.images", base_dir);
  c.paths.token_store = get_path(doc, "paths.token_store", base_dir);
  c.paths.sentence_store = get_path(doc, "paths.sentence_store", base_dir);
  c.paths.entity_store = get_path(doc, "paths.entity_store", base_dir);
  c.paths.image_store = get_path(doc, "paths.image_store", base_dir);

  c.stages.stage1 = get_bool(doc, "stages.stage1");
  c.stages.stage2 = get_bool(doc, "stages.stage2");
  c.stages.stage3 = get_bool(doc, "stages.stage3");
  const auto selection = get_string(doc, "stages.example_selection");
  if (selection != "dynamic" && selection != "fixed") {
    config_fail("stages.example_selection", "expected \"dynamic\" or \"fixed\"");
  }
  c.stages.dynamic_examples = selection == "dynamic";

  c.router.beta = get_number(doc, "router.beta");
  try {
    c.router.validate();
  } catch (const Error& e) {
    config_fail("router.beta", e.what());
  }

  c.selector.delta = get_number(doc, "selector.delta");
  const auto& lambda = doc["selector"]["lambda"];
  if (!lambda.is_array() || lambda.size() != 3 ||
      !std::all_of(lambda.begin(), lambda.end(), [](const json& v) { return v.is_number(); })) {
    config_fail("selector.lambda", "expected three numbers [entity, sentence, image]");
  }
  c.selector.lambda_entity = lambda[0].get<double>();
  c.selector.lambda_sentence = lambda[1].get<double>();
  c.selector.lambda_image = lambda[2].get<double>();
  const auto k = get_int(doc, "selector.k");
  if (k < 1) config_fail("selector.k", "must be >= 1");
  c.selector.k = static_cast<std::size_t>(k);
  try {
    c.selector.validate();
  } catch (const Error& e) {
    config_fail("selector", e.what());
  }

  c.train.epochs = static_cast<int>(get_int(doc, "train.epochs"));
  const auto batch = get_int(doc, "train.batch_size");
  if (batch < 1) config_fail("train.batch_size", "must be >= 1");
  c.train.batch_size = static_cast<std::size_t>(batch);
  c.train.lr_emission = get_number(doc, "train.lr_emission");
  c.train.lr_crf = get_number(doc, "train.lr_crf");
  c.train.weight_decay = get_number(doc, "train.weight_decay");
  c.train.seed = c.seed;
  if (c.train.epochs < 0) config_fail("train.epochs", "must be >= 0");
  if (c.train.lr_emission < 0 || c.train.lr_crf < 0) config_fail("train", "learning rates must be >= 0");
  if (c.train.weight_decay < 0) config_fail("train.weight_decay", "must be >= 0");

  const auto& strategies = doc["synthesis"]["strategies"];
  if (!strategies.is_array()) config_fail("synthesis.strategies", "expected array");
  c.synthesis.strategies.clear();
  for (const auto& s : strategies) {
    if (!s.is_string()) config_fail("synthesis.strategies", "expected strategy names");
    try {
      c.synthesis.strategies.push_back(synthesis_strategy_from_string(s.get<std::string>()));
    } catch (const Error& e) {
      config_fail("synthesis.strategies", e.what());
    }
  }
  const auto count = get_int(doc, "synthesis.count_per_seed");
  if (count < 1) config_fail("synthesis.count_per_seed", "must be >= 1");
  c.synthesis.count_per_seed = static_cast<std::size_t>(count);
  const auto cap = get_int(doc, "synthesis.neg_cap");
  if (cap < 0) config_fail("synthesis.neg_cap", "must be >= 0");
  c.synthesis.neg_cap = static_cast<std::size_t>(cap);
  c.synthesis.min_yield = get_number(doc, "synthesis.min_yield");

  c.refine.allow_add = get_bool(doc, "refine.allow_add");

  try {
    c.gateway.mode = gateway_mode_from_string(get_string(doc, "gateway.mode"));
  } catch (const Error& e) {
    config_fail("gateway.mode", e.what());
  }
  c.gateway.endpoint = get_string(doc, "gateway.endpoint");
  c.gateway.llm_model = get_string(doc, "gateway.llm_model");
  c.gateway.mllm_model = get_string(doc, "gateway.mllm_model");
  c.gateway.max_in_flight = static_cast<int>(get_int(doc, "gateway.max_in_flight"));
  if (c.gateway.max_in_flight < 1 || c.gateway.max_in_flight > 64) {
    config_fail("gateway.max_in_flight", "must be in [1, 64]");
  }
  c.gateway.timeout_s = get_number(doc, "gateway.timeout_s");
  if (c.gateway.timeout_s <= 0) config_fail("gateway.timeout_s", "must be > 0");
  c.gateway.max_retries = static_cast<int>(get_int(doc, "gateway.max_retries"));
  if (c.gateway.max_retries < 0) config_fail("gateway.max_retries", "must be >= 0");
  c.gateway.api_key_env = get_string(doc, "gateway.api_key_env");

  c.f1_gate = get_number(doc, "eval.f1_gate");
  if (c.f1_gate < 0 || c.f1_gate > 1) config_fail("eval.f1_gate", "must be in [0, 1]");

  // Runtime-only settings do not change outputs and stay out of the hash.
  json hashed = doc;
  hashed["paths"].erase("work_dir");
  for (const char* f : {"mode", "endpoint", "max_in_flight", "timeout_s", "max_retries", "api_key_env"}) {
    hashed["gateway"].erase(f);
  }
  hashed.erase("eval");
  c.hash = sha256_hex(hashed.dump());
  c.document = std::move(doc);
  return c;
}

inline PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kConfig, "config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc, path.parent_path().empty() ? fs::path(".") : path.parent_path(), overrides);
}

// ---------------------------------------------------------------------------
// Artifacts

/// Stage that produces each artifact, for dependency messages.
inline std::string producer_of(const std::string& artifact) {
  static const std::map<std::string, std::string> producers{
      {"guideline.json", "synthesize"},  {"synthesized.jsonl", "synthesize"}, {"synthesis_report.json", "synthesize"},
      {"crf.bin", "train"},              {"crf.json", "train"},               {"supervised.jsonl", "infer"},
      {"routing.jsonl", "refine"},       {"refined.jsonl", "refine"},         {"selection.jsonl", "select"},
      {"predictions.jsonl", "ground"},   {"report.json", "eval"},             {"report.txt", "eval"}};
  auto it = producers.find(artifact);
  return it == producers.end() ? "?" : it->second;
}

class ArtifactStore {
 public:
  ArtifactStore(fs::path dir, std::string config_hash, std::uint64_t seed, std::string variant)
      : dir_(std::move(dir)), hash_(std::move(config_hash)), seed_(seed), variant_(std::move(variant)) {}

  fs::path path(const std::string& name) const { return dir_ / name; }

  json meta(const std::string& name) const {
    return json{{"artifact", name}, {"config_hash", hash_}, {"seed", seed_}, {"variant", variant_}};
  }

  /// Writes via a temporary file and rename so a crash never leaves a
  /// half-written artifact behind.
  void write_text(const std::string& name, const std::string& text) const {
    fs::create_directories(dir_);
    const auto tmp = path(name + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw Error(ErrorKind::kIo, "cannot write '" + tmp.string() + "'");
      out << text;
      if (!out) throw Error(ErrorKind::kIo, "write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path(name));
  }

  void write_json(const std::string& name, json body) const {
    body["_meta"] = meta(name);
    write_text(name, body.dump(2) + "\n");
  }

  void write_jsonl(const std::string& name, const std::vector<json>& records) const {
    std::string text = json{{"_meta", meta(name)}}.dump() + "\n";
    for (const auto& r : records) text += r.dump() + "\n";
    write_text(name, text);
  }

  void require(const std::string& name) const {
    if (!fs::exists(path(name))) {
      throw Error(ErrorKind::kDependency, "missing artifact '" + path(name).string() + "'; run '" + producer_of(name) +
                                              "' first");
    }
  }

  json read_json(const std::string& name) const {
    require(name);
    std::ifstream in(path(name));
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::kFormat, path(name).string() + ": " + e.what());
    }
    check_meta(name, j.is_object() && j.contains("_meta") ? j["_meta"] : json());
    return j;
  }

  std::vector<json> read_jsonl(const std::string& name) const {
    require(name);
    std::ifstream in(path(name));
    std::vector<json> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw Error(ErrorKind::kFormat, path(name).string() + ": " + e.what());
      }
      if (first) {
        check_meta(name, j.is_object() && j.contains("_meta") ? j["_meta"] : json());
        first = false;
        continue;
      }
      out.push_back(std::move(j));
    }
    if (first) check_meta(name, json());
    return out;
  }

  const fs::path& dir() const { return dir_; }

 private:
  void check_meta(const std::string& name, const json& meta) const {
    if (!meta.is_object() || !meta.contains("config_hash")) {
      throw Error(ErrorKind::kProvenance, "'" + path(name).string() + "' carries no provenance header");
    }
    const auto theirs = meta["config_hash"].get<std::string>();
    if (theirs != hash_) {
      throw Error(ErrorKind::kProvenance, "'" + path(name).string() + "' was produced under config " +
                                              theirs.substr(0, 12) + ", current config is " + hash_.substr(0, 12) +
                                              "; rerun '" + producer_of(name) + "'");
    }
  }

  fs::path dir_;
  std::string hash_;
  std::uint64_t seed_;
  std::string variant_;
};

// ---------------------------------------------------------------------------
// Record helpers

inline json mention_to_json(const Sentence& sentence, const MentionSpan& m) {
  const auto [cs, ce] = char_range(sentence, m);
  return json{{"token_start", m.token_start}, {"token_end", m.token_end}, {"char_start", cs},
              {"char_end", ce},             {"surface", m.surface},       {"type", m.etype.name}};
}

inline MentionSpan mention_from_json(const json& j, const Sentence& sentence, const Schema& schema) {
  try {
    const auto m = make_mention(sentence, j.at("token_start").get<std::size_t>(), j.at("token_end").get<std::size_t>(),
                                schema.at(j.at("type").get<std::string>()));
    if (j.contains("surface") && j["surface"].get<std::string>() != m.surface) {
      throw Error(ErrorKind::kFormat, "surface '" + j["surface"].get<std::string>() + "' does not match span text '" +
                                          m.surface + "' in sentence '" + sentence.id + "'");
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "bad mention record in sentence '" + sentence.id + "': " + e.what());
  }
}

namespace detail {

/// Runs fn(i) for i in [0, n) with at most `width` calls in flight;
/// results come back in index order.
template <typename Fn>
auto ordered_parallel(std::size_t n, std::size_t width, Fn fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<R> out;
  out.reserve(n);
  width = std::max<std::size_t>(width, 1);
  for (std::size_t start = 0; start < n; start += width) {
    std::vector<std::future<R>> batch;
    for (std::size_t i = start; i < std::min(n, start + width); ++i) batch.push_back(std::async(std::launch::async, fn, i));
    for (auto& f : batch) out.push_back(f.get());
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Orchestrator

inline const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> cmds{"synthesize", "train", "infer", "refine", "select", "ground", "eval",
                                             "run-all"};
  return cmds;
}

/// Wires the stages together. Each command reads its inputs from and
/// writes its outputs to the work directory. The transport is only used in
/// LIVE and RECORD modes.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config, std::shared_ptr<ChatTransport> transport = nullptr,
                    std::ostream* log = nullptr)
      : config_(std::move(config)),
        transport_(std::move(transport)),
        log_(log),
        artifacts_(config_.paths.work_dir, config_.hash, config_.seed, config_.stages.variant()) {}

  const PipelineConfig& config() const { return config_; }
  const ArtifactStore& artifacts() const { return artifacts_; }

  /// Runs one command. Returns 0, or 3 when eval falls below the F1 gate.
  int run(const std::string& command) {
    if (command == "synthesize") {
      synthesize();
    } else if (command == "train") {
      train();
    } else if (command == "infer") {
      infer();
    } else if (command == "refine") {
      refine();
    } else if (command == "select") {
      select();
    } else if (command == "ground") {
      ground();
    } else if (command == "eval") {
      return gate(evaluate());
    } else if (command == "run-all") {
      return gate(run_all());
    } else {
      throw Error(ErrorKind::kInvalidArgument, "unknown command '" + command + "'");
    }
    return 0;
  }

  EvalReport run_all() {
    synthesize();
    train();
    infer();
    refine();
    select();
    ground();
    return evaluate();
  }

  // -- Stage 1: guideline traversal and data synthesis -----------------------
  void synthesize() {
    const auto& D = train_set();
    auto table = GuidelineTable::initial(config_.schema, config_.descriptions);
    json updates = json::array();
    json rejections = json::array();
    std::vector<json> records;
    std::size_t generated = 0;
    json warnings = json::array();

    if (config_.stages.stage1) {
      for (const auto& sample : D) {
        auto upd = update_guideline(table, sample, llm(), GuidelineOptions{config_.synthesis.neg_cap});
        json errs = json::array();
        for (const auto& e : upd.errors) errs.push_back(e.describe());
        updates.push_back(json{{"sample", sample.sentence.id}, {"accepted", upd.accepted}, {"errors", errs}});
        if (upd.accepted) table = std::move(upd.table);
      }
      std::unordered_set<std::string> existing;
      for (const auto& s : D) existing.insert(s.sentence.text);
      for (auto strategy : config_.synthesis.strategies) {
        auto res = gmner::synthesize(D, table, strategy, config_.synthesis.count_per_seed, config_.schema, llm(),
                                     existing, SynthesisOptions{config_.synthesis.min_yield});
        generated += res.generated;
        for (const auto& w : res.warnings) {
          warnings.push_back(std::string(to_string(strategy)) + ": " + w);
          say("warning: " + std::string(to_string(strategy)) + ": " + w);
        }
        for (const auto& r : res.rejected) {
          rejections.push_back(json{{"source_id", r.source_id}, {"index", r.index}, {"strategy", to_string(strategy)},
                                    {"reason", r.reason}, {"text", r.text}});
        }
        for (const auto& s : res.accepted) {
          existing.insert(s.sentence.text);
          auto rec = record_to_json(to_annotated(s));
          rec["provenance"] = to_string(s.provenance);
          rec["source_id"] = s.source_id;
          records.push_back(std::move(rec));
        }
      }
    }
    artifacts_.write_json("guideline.json", table.to_json());
    artifacts_.write_jsonl("synthesized.jsonl", records);
    artifacts_.write_json("synthesis_report.json", json{{"generated", generated},
                                                        {"accepted", records.size()},
                                                        {"rejected", rejections},
                                                        {"guideline_updates", updates},
                                                        {"warnings", warnings}});
    say("synthesize: guideline v" + std::to_string(table.version) + ", " + std::to_string(records.size()) + "/" +
        std::to_string(generated) + " generations accepted");
  }

  // -- CRF training ----------------------------------------------------------
  void train() {
    std::vector<AnnotatedSample> data = train_set();
    std::size_t synthesized = 0;
    if (config_.stages.stage1) {
      for (const auto& s : load_synthesized()) {
        data.push_back(s);
        ++synthesized;
      }
    }
    const auto& tokens = store(config_.paths.token_store, StoreKind::kToken, token_store_);
    std::vector<TrainingExample> examples;
    for (const auto& s : data) {
      examples.push_back(TrainingExample{token_features(s.sentence, tokens), bio_encode(s, config_.schema)});
    }
    const auto result = gmner::train(examples, config_.schema.label_count(), config_.train);
    fs::create_directories(artifacts_.dir());
    const auto tmp = artifacts_.path("crf.bin.tmp");
    save_checkpoint(result.model, tmp);
    fs::rename(tmp, artifacts_.path("crf.bin"));
    artifacts_.write_json("crf.json", json{{"labels", config_.schema.label_names()},
                                           {"dim", result.model.dim},
                                           {"train", to_json(config_.train)},
                                           {"examples", examples.size()},
                                           {"synthesized_examples", synthesized},
                                           {"initial_nll", result.initial_nll},
                                           {"final_nll", result.final_nll},
                                           {"epoch_nll", result.epoch_nll},
                                           {"best_epoch", result.best_epoch},
                                           {"checkpoint_sha256", sha256_hex(detail::read_file(artifacts_.path("crf.bin")))}});
    say("train: " + std::to_string(examples.size()) + " sentences (" + std::to_string(synthesized) +
        " synthesized), NLL " + std::to_string(result.initial_nll) + " -> " + std::to_string(result.final_nll));
  }

  // -- Supervised inference --------------------------------------------------
  void infer() {
    const auto model = load_model();
    const auto& tokens = store(config_.paths.token_store, StoreKind::kToken, token_store_);
    if (tokens.dim() != model.dim) {
      throw Error(ErrorKind::kDimMismatch, "token store dim " + std::to_string(tokens.dim()) +
                                               " does not match checkpoint dim " + std::to_string(model.dim));
    }
    std::vector<json> records;
    std::size_t mentions = 0;
    for (const auto& s : test_set()) {
      const auto features = token_features(s.sentence, tokens);
      const auto path = viterbi(model, features);
      const auto table = marginals(model, features);
      json ms = json::array();
      for (const auto& m : bio_decode(path.labels, s.sentence, config_.schema)) {
        auto j = mention_to_json(s.sentence, m);
        j["uncertainty"] = entity_uncertainty(m, table, config_.router.log_base);
        ms.push_back(std::move(j));
        ++mentions;
      }
      json rows = json::array();
      for (std::size_t i = 0; i < table.rows; ++i) {
        const auto r = table.row(i);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
      }
      records.push_back(json{{"id", s.sentence.id}, {"mentions", ms}, {"marginals", rows}});
    }
    artifacts_.write_jsonl("supervised.jsonl", records);
    say("infer: " + std::to_string(mentions) + " mentions over " + std::to_string(records.size()) + " sentences");
  }

  // -- Stage 2: uncertainty routing and MLLM refinement ----------------------
  void refine() {
    const auto supervised = artifacts_.read_jsonl("supervised.jsonl");
    const auto& test = test_set();
    const auto by_id = index_of(test);

    std::vector<std::vector<MentionSpan>> predicted(test.size());
    std::map<std::string, MarginalTable> tables;
    std::vector<bool> seen(test.size(), false);
    for (const auto& rec : supervised) {
      const auto idx = lookup(by_id, rec.at("id").get<std::string>(), "supervised.jsonl");
      seen[idx] = true;
      const auto& sent = test[idx].sentence;
      for (const auto& m : rec.at("mentions")) predicted[idx].push_back(mention_from_json(m, sent, config_.schema));
      const auto& rows = rec.at("marginals");
      MarginalTable t(rows.size(), rows.empty() ? 0 : rows[0].size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t c = 0; c < rows[i].size(); ++c) t(i, c) = rows[i][c].get<double>();
      }
      tables.emplace(sent.id, std::move(t));
    }
    require_all(seen, test, "supervised.jsonl");

    std::vector<json> records(test.size());
    if (!config_.stages.stage2) {
      for (std::size_t i = 0; i < test.size(); ++i) {
        records[i] = json{{"id", test[i].sentence.id}, {"mentions", mentions_json(test[i].sentence, predicted[i])}};
      }
      artifacts_.write_jsonl("refined.jsonl", records);
      say("refine: stage 2 disabled, supervised predictions passed through");
      return;
    }

    std::vector<MentionSpan> all;
    for (const auto& p : predicted) all.insert(all.end(), p.begin(), p.end());
    const auto routing = route(all, tables, config_.router);
    std::vector<json> decisions;
    for (const auto& d : routing.decisions) decisions.push_back(to_json(d));
    artifacts_.write_jsonl("routing.jsonl", decisions);

    std::vector<std::vector<MentionSpan>> keep(test.size()), uncertain(test.size());
    for (const auto& m : routing.keep) keep[by_id.at(m.sentence_id)].push_back(m);
    for (const auto& m : routing.refine) uncertain[by_id.at(m.sentence_id)].push_back(m);

    const auto guideline = load_guideline().render();
    const auto& ctx = mllm();
    const auto reports = detail::ordered_parallel(test.size(), width(), [&](std::size_t i) {
      if (uncertain[i].empty()) return RefineReport{};
      return gmner::refine(uncertain[i], test[i].sentence, image_of(test[i]), config_.schema, ctx, guideline,
                           config_.refine);
    });

    std::size_t failures = 0, refined = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& sent = test[i].sentence;
      const auto merged = merge(keep[i], reports[i].outcomes);
      json outcomes = json::array();
      for (const auto& o : reports[i].outcomes) {
        json mj = json::array();
        for (const auto& m : o.mentions) mj.push_back(mention_to_json(sent, m));
        outcomes.push_back(json{{"original", o.original ? mention_to_json(sent, *o.original) : json()},
                                {"verdict", to_string(o.verdict)},
                                {"mentions", mj}});
      }
      json rec{{"id", sent.id}, {"mentions", mentions_json(sent, merged)}};
      if (!uncertain[i].empty()) {
        rec["outcomes"] = outcomes;
        rec["rationale"] = reports[i].outcomes.empty() ? "" : reports[i].outcomes.front().rationale;
        rec["warnings"] = reports[i].warnings;
        ++refined;
      }
      for (const auto& w : reports[i].warnings) say("warning: " + w);
      failures += reports[i].parse_failures;
      records[i] = std::move(rec);
    }
    artifacts_.write_jsonl("refined.jsonl", records);
    say("refine: " + std::to_string(routing.refine.size()) + "/" + std::to_string(all.size()) +
        " mentions routed to the MLLM across " + std::to_string(refined) + " sentences, " +
        std::to_string(failures) + " unparseable replies");
  }

  // -- Stage 3a: in-context example selection --------------------------------
  void select() {
    const auto refined = load_refined();
    const auto& test = test_set();
    const auto& pool = train_set();
    std::vector<json> records;
    const std::string mode = !config_.stages.stage3 ? "none" : config_.stages.dynamic_examples ? "dynamic" : "fixed";

    std::vector<IclExample> candidates;
    if (mode == "dynamic") {
      for (const auto& s : pool) candidates.push_back(IclExample::from_sample(s));
    }
    for (std::size_t i = 0; i < test.size(); ++i) {
      json rec{{"id", test[i].sentence.id}, {"mode", mode}};
      std::vector<std::size_t> chosen;
      if (mode == "fixed") {
        for (std::size_t k = 0; k < std::min(config_.selector.k, pool.size()); ++k) chosen.push_back(k);
      } else if (mode == "dynamic") {
        const auto& sentences = store(config_.paths.sentence_store, StoreKind::kSentence, sentence_store_);
        const auto& entities = store(config_.paths.entity_store, StoreKind::kEntity, entity_store_);
        const auto& images = store(config_.paths.image_store, StoreKind::kImage, image_store_);
        SelectorQuery q;
        q.id = test[i].sentence.id;
        for (const auto& m : refined[i]) {
          const auto v = entities.get(entity_key(m.surface));
          q.entities.push_back(QueryEntity{m.etype, EmbeddingVector(v.begin(), v.end())});
        }
        const auto sv = sentences.get(sentence_key(q.id));
        q.sentence.assign(sv.begin(), sv.end());
        if (test[i].has_image()) {
          const auto iv = images.get(image_key(test[i].image_path));
          q.image = EmbeddingVector(iv.begin(), iv.end());
        }
        SelectorConfig sc = config_.selector;
        sc.k = std::min(sc.k, candidates.size());
        const auto sel = select_topk(q, candidates, SelectorStores{sentences, entities, images}, sc);
        chosen = sel.chosen;
        rec["scores"] = to_json(sel)["scores"];
      }
      json ids = json::array();
      for (auto c : chosen) ids.push_back(pool[c].sentence.id);
      rec["chosen"] = chosen;
      rec["chosen_ids"] = ids;
      records.push_back(std::move(rec));
    }
    artifacts_.write_jsonl("selection.jsonl", records);
    say("select: " + mode + " examples for " + std::to_string(records.size()) + " sentences");
  }

  // -- Stage 3b: few-shot grounding ------------------------------------------
  void ground() {
    const auto refined = load_refined();
    const auto selection = artifacts_.read_jsonl("selection.jsonl");
    const auto& test = test_set();
    const auto& pool = train_set();
    const auto by_id = index_of(test);

    std::vector<IclExample> pool_examples;
    for (const auto& s : pool) pool_examples.push_back(IclExample::from_sample(s));
    std::vector<std::vector<const IclExample*>> examples(test.size());
    std::vector<bool> seen(test.size(), false);
    for (const auto& rec : selection) {
      const auto idx = lookup(by_id, rec.at("id").get<std::string>(), "selection.jsonl");
      seen[idx] = true;
      for (const auto& c : rec.at("chosen")) {
        const auto k = c.get<std::size_t>();
        if (k >= pool_examples.size()) {
          throw Error(ErrorKind::kFormat, "selection.jsonl: example index " + std::to_string(k) + " out of range");
        }
        examples[idx].push_back(&pool_examples[k]);
      }
    }
    require_all(seen, test, "selection.jsonl");

    const auto& ctx = mllm();
    const auto reports = detail::ordered_parallel(test.size(), width(), [&](std::size_t i) {
      if (refined[i].empty() || !test[i].has_image()) {
        GroundingReport r;
        for (const auto& m : refined[i]) r.results.push_back({m, std::nullopt, ""});
        return r;
      }
      return gmner::ground(refined[i], test[i].sentence, image_of(test[i]), examples[i], ctx);
    });

    std::vector<json> records;
    std::size_t boxed = 0, total = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& sent = test[i].sentence;
      json triplets = json::array();
      for (const auto& g : reports[i].results) {
        auto j = mention_to_json(sent, g.mention);
        j["box"] = box_to_json(g.region);
        triplets.push_back(std::move(j));
        ++total;
        if (g.region) ++boxed;
      }
      json rec{{"id", sent.id}, {"triplets", triplets}};
      if (!reports[i].warnings.empty()) rec["warnings"] = reports[i].warnings;
      for (const auto& w : reports[i].warnings) say("warning: " + w);
      records.push_back(std::move(rec));
    }
    artifacts_.write_jsonl("predictions.jsonl", records);
    say("ground: " + std::to_string(boxed) + "/" + std::to_string(total) + " entities grounded to a region");
  }

  // -- Evaluation ------------------------------------------------------------
  EvalReport evaluate() {
    const auto predictions = artifacts_.read_jsonl("predictions.jsonl");
    const auto& test = test_set();
    const auto pred = read_predictions(predictions, test, config_.schema);
    std::vector<GmnerTriplet> gold;
    for (const auto& s : test) gold.insert(gold.end(), s.triplets.begin(), s.triplets.end());
    const auto report = score(pred, gold);
    auto body = to_json(report);
    body["variant"] = config_.stages.variant();
    artifacts_.write_json("report.json", body);
    artifacts_.write_text("report.txt", "# variant: " + config_.stages.variant() + "  config: " +
                                            config_.hash.substr(0, 12) + "  seed: " + std::to_string(config_.seed) +
                                            "\n" + format_table(report));
    say("eval: GMNER F1 " + std::to_string(report.gmner.f1()) + ", NER F1 " + std::to_string(report.ner.f1()));
    return report;
  }

  /// Parses predictions.jsonl records against the test set. Every test
  /// sentence must appear exactly once.
  static std::vector<GmnerTriplet> read_predictions(const std::vector<json>& records,
                                                    const std::vector<AnnotatedSample>& test, const Schema& schema) {
    const auto by_id = index_of(test);
    std::vector<bool> seen(test.size(), false);
    std::vector<GmnerTriplet> out;
    for (const auto& rec : records) {
      const auto idx = lookup(by_id, rec.at("id").get<std::string>(), "predictions");
      if (seen[idx]) throw Error(ErrorKind::kFormat, "predictions: sentence '" + test[idx].sentence.id + "' repeated");
      seen[idx] = true;
      for (const auto& t : rec.at("triplets")) {
        GmnerTriplet trip{mention_from_json(t, test[idx].sentence, schema), std::nullopt};
        if (t.contains("box") && !t["box"].is_null()) trip.region = parse_box(t["box"], 0, test[idx].sentence.id, "box");
        out.push_back(std::move(trip));
      }
    }
    require_all(seen, test, "predictions");
    return out;
  }

  const GatewayMetrics* metrics() const { return gateway_ ? &gateway_->metrics() : nullptr; }

 private:
  int gate(const EvalReport& r) const {
    if (r.gmner.f1() < config_.f1_gate) {
      say("eval: F1 " + std::to_string(r.gmner.f1()) + " is below the gate " + std::to_string(config_.f1_gate));
      return 3;
    }
    return 0;
  }

  void say(const std::string& msg) const {
    if (log_) *log_ << msg << '\n';
  }

  std::size_t width() const { return static_cast<std::size_t>(config_.gateway.max_in_flight); }

  static std::map<std::string, std::size_t> index_of(const std::vector<AnnotatedSample>& samples) {
    std::map<std::string, std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) out.emplace(samples[i].sentence.id, i);
    return out;
  }

  static std::size_t lookup(const std::map<std::string, std::size_t>& index, const std::string& id,
                            const std::string& source) {
    auto it = index.find(id);
    if (it == index.end()) throw Error(ErrorKind::kFormat, source + ": sentence '" + id + "' is not in the test set");
    return it->second;
  }

  static void require_all(const std::vector<bool>& seen, const std::vector<AnnotatedSample>& test,
                          const std::string& source) {
    for (std::size_t i = 0; i < seen.size(); ++i) {
      if (!seen[i]) throw Error(ErrorKind::kFormat, source + ": no record for sentence '" + test[i].sentence.id + "'");
    }
  }

  static json mentions_json(const Sentence& sentence, const std::vector<MentionSpan>& ms) {
    json out = json::array();
    for (const auto& m : ms) out.push_back(mention_to_json(sentence, m));
    return out;
  }

  const std::vector<AnnotatedSample>& train_set() {
    if (!train_) train_ = load_dataset(config_.paths.train, config_.schema);
    return *train_;
  }

  const std::vector<AnnotatedSample>& test_set() {
    if (!test_) test_ = load_dataset(config_.paths.test, config_.schema);
    return *test_;
  }

  const EmbeddingStore& store(const fs::path& path, StoreKind kind, std::optional<EmbeddingStore>& slot) {
    if (!slot) slot = load_store(path, kind);
    return *slot;
  }

  std::vector<AnnotatedSample> load_synthesized() {
    std::vector<AnnotatedSample> out;
    std::size_t line = 1;
    for (const auto& rec : artifacts_.read_jsonl("synthesized.jsonl")) {
      out.push_back(parse_record(rec, ++line, config_.schema, LoadOptions{true}));
    }
    return out;
  }

  GuidelineTable load_guideline() {
    const auto j = artifacts_.read_json("guideline.json");
    return GuidelineTable::from_json(j, config_.schema);
  }

  CrfModel load_model() {
    const auto sidecar = artifacts_.read_json("crf.json");
    artifacts_.require("crf.bin");
    if (sidecar.value("checkpoint_sha256", "") != sha256_hex(detail::read_file(artifacts_.path("crf.bin")))) {
      throw Error(ErrorKind::kProvenance, "crf.bin does not match the checksum recorded in crf.json; rerun 'train'");
    }
    auto model = load_checkpoint(artifacts_.path("crf.bin"));
    if (model.label_count != config_.schema.label_count()) {
      throw Error(ErrorKind::kSchemaViolation, "checkpoint has " + std::to_string(model.label_count) +
                                                   " labels, schema needs " +
                                                   std::to_string(config_.schema.label_count()));
    }
    return model;
  }

  std::vector<std::vector<MentionSpan>> load_refined() {
    const auto records = artifacts_.read_jsonl("refined.jsonl");
    const auto& test = test_set();
    const auto by_id = index_of(test);
    std::vector<std::vector<MentionSpan>> out(test.size());
    std::vector<bool> seen(test.size(), false);
    for (const auto& rec : records) {
      const auto idx = lookup(by_id, rec.at("id").get<std::string>(), "refined.jsonl");
      seen[idx] = true;
      for (const auto& m : rec.at("mentions")) out[idx].push_back(mention_from_json(m, test[idx].sentence, config_.schema));
    }
    require_all(seen, test, "refined.jsonl");
    return out;
  }

  LlmGateway& gateway() {
    if (!gateway_) {
      GatewayConfig gc;
      gc.mode = config_.gateway.mode;
      gc.max_in_flight = config_.gateway.max_in_flight;
      gc.max_retries = config_.gateway.max_retries;
      gc.timeout_s = config_.gateway.timeout_s;
      gc.image_root = config_.paths.images;
      auto cache = std::make_shared<TranscriptCache>(config_.paths.transcripts);
      gateway_ = std::make_unique<LlmGateway>(gc, cache, transport_);
    }
    return *gateway_;
  }

  PromptTemplates& templates() {
    if (!templates_) templates_.emplace(config_.paths.prompts);
    return *templates_;
  }

  const LlmContext& llm() {
    if (!llm_) llm_.emplace(LlmContext{gateway(), templates(), config_.gateway.llm_model, 0.0});
    return *llm_;
  }

  const LlmContext& mllm() {
    if (!mllm_) mllm_.emplace(LlmContext{gateway(), templates(), config_.gateway.mllm_model, 0.0});
    return *mllm_;
  }

  PipelineConfig config_;
  std::shared_ptr<ChatTransport> transport_;
  std::ostream* log_;
  ArtifactStore artifacts_;
  std::optional<std::vector<AnnotatedSample>> train_, test_;
  std::optional<EmbeddingStore> token_store_, sentence_store_, entity_store_, image_store_;
  std::unique_ptr<LlmGateway> gateway_;
  std::optional<PromptTemplates> templates_;
  std::optional<LlmContext> llm_, mllm_;
};

}  // namespace gmner
