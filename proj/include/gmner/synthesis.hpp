#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gmner/core.hpp"
#include "gmner/error.hpp"
#include "gmner/llm_gateway.hpp"
#include "gmner/prompts.hpp"

namespace gmner {

// ---------------------------------------------------------------------------
// Guideline table

struct GuidelineRow {
  EntityType typ;
  std::string des;
  std::vector<std::string> neg;  // oldest first

  friend bool operator==(const GuidelineRow&, const GuidelineRow&) = default;
};

/// One row per schema type: description plus negative-sample notes.
struct GuidelineTable {
  std::vector<GuidelineRow> rows;
  std::uint64_t version = 0;

  static GuidelineTable initial(const Schema& schema, const std::map<std::string, std::string>& descriptions = {}) {
    GuidelineTable t;
    for (const auto& type : schema.types()) {
      auto it = descriptions.find(type.name);
      t.rows.push_back(GuidelineRow{type, it != descriptions.end() ? it->second : "Mentions of type " + type.name + ".", {}});
    }
    return t;
  }

  GuidelineRow* row(std::string_view type) {
    for (auto& r : rows) {
      if (r.typ.name == type) return &r;
    }
    return nullptr;
  }
  const GuidelineRow* row(std::string_view type) const { return const_cast<GuidelineTable*>(this)->row(type); }

  /// Plain-text form used inside prompts.
  std::string render() const {
    std::string out;
    for (const auto& r : rows) {
      out += "Type: " + r.typ.name + "\nDescription: " + r.des + "\n";
      if (!r.neg.empty()) {
        out += "Negative samples:\n";
        for (const auto& n : r.neg) out += "- " + n + "\n";
      }
      out += "\n";
    }
    return out;
  }

  json to_json() const {
    json rs = json::array();
    for (const auto& r : rows) rs.push_back(json{{"type", r.typ.name}, {"description", r.des}, {"negatives", r.neg}});
    return json{{"version", version}, {"rows", rs}};
  }

  static GuidelineTable from_json(const json& j, const Schema& schema) {
    GuidelineTable t;
    t.version = j.at("version").get<std::uint64_t>();
    std::set<std::string> seen;
    for (const auto& r : j.at("rows")) {
      const auto name = r.at("type").get<std::string>();
      if (!seen.insert(name).second) throw Error(ErrorKind::kSchemaViolation, "guideline row '" + name + "' repeated");
      t.rows.push_back(GuidelineRow{schema.at(name), r.at("description").get<std::string>(),
                                    r.value("negatives", std::vector<std::string>{})});
    }
    if (t.rows.size() != schema.size()) {
      throw Error(ErrorKind::kSchemaViolation, "guideline table must have one row per schema type");
    }
    return t;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
    out << to_json().dump(2) << '\n';
  }

  static GuidelineTable load(const std::filesystem::path& path, const Schema& schema) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
    try {
      return from_json(json::parse(in), schema);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::kFormat, path.string() + ": " + e.what());
    }
  }

  friend bool operator==(const GuidelineTable&, const GuidelineTable&) = default;
};

/// What a synthesis or guideline call needs to reach the model.
struct LlmContext {
  LlmGateway& gateway;
  const PromptTemplates& templates;
  std::string model;
  double temperature = 0.0;

  std::string ask(const std::string& prompt) const {
    return gateway.complete(ChatRequest::user_text(model, prompt, temperature));
  }
};

struct SurfaceMention {
  std::string mention;
  std::string type;

  friend auto operator<=>(const SurfaceMention&, const SurfaceMention&) = default;
};

inline json mentions_to_json(const std::vector<SurfaceMention>& ms) {
  json out = json::array();
  for (const auto& m : ms) out.push_back(json{{"mention", m.mention}, {"type", m.type}});
  return out;
}

inline std::vector<SurfaceMention> surface_mentions(const std::vector<MentionSpan>& spans) {
  std::vector<SurfaceMention> out;
  for (const auto& s : spans) out.push_back({s.surface, s.etype.name});
  return out;
}

/// Accepts `[{"mention","type"}...]` or `{"entities": [...]}`.
inline std::optional<std::vector<SurfaceMention>> parse_surface_mentions(const json& j) {
  const json* arr = &j;
  if (j.is_object() && j.contains("entities")) arr = &j["entities"];
  if (!arr->is_array()) return std::nullopt;
  std::vector<SurfaceMention> out;
  for (const auto& e : *arr) {
    if (!e.is_object() || !e.contains("mention") || !e.contains("type") || !e["mention"].is_string() ||
        !e["type"].is_string()) {
      return std::nullopt;
    }
    out.push_back({e["mention"].get<std::string>(), e["type"].get<std::string>()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Guideline update

struct TaggingError {
  enum class Kind { kBoundary, kType, kSpurious, kMissed };
  Kind kind;
  std::string predicted;
  std::string gold;
  std::string type;  // gold type when known, else predicted type

  std::string describe() const {
    switch (kind) {
      case Kind::kBoundary: return "boundary error: predicted \"" + predicted + "\" but the " + type + " mention is \"" + gold + "\"";
      case Kind::kType: return "type error: \"" + gold + "\" is " + type + ", predicted otherwise";
      case Kind::kSpurious: return "spurious mention: \"" + predicted + "\" (" + type + ") is not an entity";
      case Kind::kMissed: return "missed mention: \"" + gold + "\" (" + type + ")";
    }
    return {};
  }
};

/// Multiset diff of predicted against gold surface mentions.
inline std::vector<TaggingError> diff_mentions(const std::vector<SurfaceMention>& predicted,
                                               const std::vector<SurfaceMention>& gold) {
  std::multiset<SurfaceMention> gold_left(gold.begin(), gold.end());
  std::vector<SurfaceMention> unmatched;
  for (const auto& p : predicted) {
    auto it = gold_left.find(p);
    if (it != gold_left.end()) {
      gold_left.erase(it);
    } else {
      unmatched.push_back(p);
    }
  }
  std::vector<TaggingError> errors;
  for (const auto& p : unmatched) {
    auto same_surface = std::find_if(gold_left.begin(), gold_left.end(),
                                     [&](const SurfaceMention& g) { return g.mention == p.mention; });
    if (same_surface != gold_left.end()) {
      errors.push_back({TaggingError::Kind::kType, p.mention, same_surface->mention, same_surface->type});
      gold_left.erase(same_surface);
      continue;
    }
    auto nested = std::find_if(gold_left.begin(), gold_left.end(), [&](const SurfaceMention& g) {
      return g.type == p.type && (p.mention.find(g.mention) != std::string::npos ||
                                  g.mention.find(p.mention) != std::string::npos);
    });
    if (nested != gold_left.end()) {
      errors.push_back({TaggingError::Kind::kBoundary, p.mention, nested->mention, nested->type});
      gold_left.erase(nested);
      continue;
    }
    errors.push_back({TaggingError::Kind::kSpurious, p.mention, "", p.type});
  }
  for (const auto& g : gold_left) errors.push_back({TaggingError::Kind::kMissed, "", g.mention, g.type});
  return errors;
}

struct GuidelineOptions {
  std::size_t neg_cap = 10;
};

struct GuidelineUpdate {
  GuidelineTable table;
  bool accepted = false;
  std::vector<TaggingError> errors;
  std::vector<std::string> log;
};

/// One traversal step over an annotated sample: tag with the current
/// table, diff against gold, distill negative descriptions when the tags
/// were wrong, then refresh descriptions. Any malformed reply discards the
/// whole step. Gateway failures propagate and leave `table` untouched.
inline GuidelineUpdate update_guideline(const GuidelineTable& table, const AnnotatedSample& sample,
                                        const LlmContext& llm, const GuidelineOptions& options = {}) {
  GuidelineUpdate result{table, false, {}, {}};
  const auto gold = surface_mentions(sample.mentions());
  const auto gold_text = mentions_to_json(gold).dump();
  const auto guideline = table.render();

  const auto tag_reply = llm.ask(llm.templates.render(
      "guideline_tag", {{"guideline", guideline}, {"sentence", sample.sentence.text}}));
  const auto tag_json = extract_json(tag_reply);
  const auto predicted = tag_json ? parse_surface_mentions(*tag_json) : std::nullopt;
  if (!predicted) {
    result.log.push_back(sample.sentence.id + ": malformed tagging reply, table unchanged");
    return result;
  }

  GuidelineTable next = table;
  result.errors = diff_mentions(*predicted, gold);
  if (!result.errors.empty()) {
    std::string errors_text;
    for (const auto& e : result.errors) errors_text += "- " + e.describe() + "\n";
    const auto neg_reply = llm.ask(llm.templates.render("guideline_neg", {{"guideline", guideline},
                                                                           {"sentence", sample.sentence.text},
                                                                           {"entities", gold_text},
                                                                           {"predictions", mentions_to_json(*predicted).dump()},
                                                                           {"errors", errors_text}}));
    auto neg_json = extract_json(neg_reply);
    if (neg_json && neg_json->is_object() && neg_json->contains("negatives")) neg_json = (*neg_json)["negatives"];
    if (!neg_json || !neg_json->is_object()) {
      result.log.push_back(sample.sentence.id + ": malformed negative-update reply, table unchanged");
      return result;
    }
    for (const auto& [type, items] : neg_json->items()) {
      auto* row = next.row(type);
      if (!row) {
        result.log.push_back(sample.sentence.id + ": ignoring negatives for unknown type '" + type + "'");
        continue;
      }
      if (!items.is_array()) {
        result.log.push_back(sample.sentence.id + ": malformed negative-update reply, table unchanged");
        return result;
      }
      for (const auto& item : items) {
        if (!item.is_string() || item.get<std::string>().empty()) continue;
        const auto text = item.get<std::string>();
        if (std::find(row->neg.begin(), row->neg.end(), text) != row->neg.end()) continue;
        row->neg.push_back(text);
        while (row->neg.size() > options.neg_cap) row->neg.erase(row->neg.begin());
      }
    }
  }

  const auto des_reply = llm.ask(llm.templates.render(
      "guideline_des", {{"guideline", next.render()}, {"sentence", sample.sentence.text}, {"entities", gold_text}}));
  auto des_json = extract_json(des_reply);
  if (des_json && des_json->is_object() && des_json->contains("descriptions")) des_json = (*des_json)["descriptions"];
  if (!des_json || !des_json->is_object()) {
    result.log.push_back(sample.sentence.id + ": malformed description-update reply, table unchanged");
    return result;
  }
  for (const auto& [type, des] : des_json->items()) {
    auto* row = next.row(type);
    if (!row || !des.is_string() || des.get<std::string>().empty()) continue;
    row->des = des.get<std::string>();
  }
  next.version = table.version + 1;
  result.table = std::move(next);
  result.accepted = true;
  return result;
}

// ---------------------------------------------------------------------------
// Synthesis

enum class SynthesisStrategy { kSubstitution, kParaphrase };

inline std::string_view to_string(SynthesisStrategy s) {
  return s == SynthesisStrategy::kSubstitution ? "substitution" : "paraphrase";
}

inline SynthesisStrategy synthesis_strategy_from_string(std::string_view s) {
  if (s == "substitution") return SynthesisStrategy::kSubstitution;
  if (s == "paraphrase") return SynthesisStrategy::kParaphrase;
  throw Error(ErrorKind::kConfig, "unknown synthesis strategy '" + std::string(s) + "'");
}

struct SynthesizedSample {
  Sentence sentence;
  std::vector<MentionSpan> entities;
  SynthesisStrategy provenance = SynthesisStrategy::kSubstitution;
  std::string source_id;
};

struct Verdict {
  bool accepted = true;
  std::string reason;

  static Verdict accept() { return {}; }
  static Verdict reject(std::string why) { return {false, std::move(why)}; }
};

/// Structural hygiene for one synthesized sample.
inline Verdict validate_synthesized(const SynthesizedSample& sample, const Schema& schema) {
  if (sample.sentence.text.find_first_not_of(" \t\r\n") == std::string::npos) return Verdict::reject("empty sentence");
  try {
    if (tokenize(sample.sentence.text) != sample.sentence.tokens) return Verdict::reject("untokenizable");
  } catch (const Error&) {
    return Verdict::reject("untokenizable");
  }
  for (const auto& e : sample.entities) {
    const auto t = schema.find(e.etype.name);
    if (!t || *t != e.etype) return Verdict::reject("type not in schema");
  }
  for (const auto& e : sample.entities) {
    if (e.token_start >= e.token_end || e.token_end > sample.sentence.size() ||
        sample.sentence.span_text(e.token_start, e.token_end) != e.surface) {
      return Verdict::reject("surface mismatch");
    }
  }
  try {
    check_no_overlap(sample.entities);
  } catch (const Error&) {
    return Verdict::reject("overlapping spans");
  }
  return Verdict::accept();
}

/// Token-aligned occurrences of `surface` in the sentence, as token spans.
inline std::vector<std::pair<std::size_t, std::size_t>> find_token_spans(const Sentence& sentence, std::string_view surface) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (surface.empty()) return out;
  for (std::size_t b = 0; b < sentence.size(); ++b) {
    for (std::size_t e = b + 1; e <= sentence.size(); ++e) {
      const auto bytes = sentence.tokens[e - 1].byte_end - sentence.tokens[b].byte_start;
      if (bytes > surface.size()) break;
      if (bytes == surface.size() && sentence.span_text(b, e) == surface) out.emplace_back(b, e);
    }
  }
  return out;
}

/// Places claimed mentions into the sentence by string search, left to
/// right; repeated surfaces take successive occurrences. Returns nullopt
/// when a surface cannot be placed.
inline std::optional<std::vector<MentionSpan>> locate_mentions(const Sentence& sentence,
                                                               const std::vector<SurfaceMention>& claimed,
                                                               const Schema& schema) {
  std::vector<MentionSpan> out;
  std::map<std::string, std::size_t> used;
  for (const auto& c : claimed) {
    const auto spans = find_token_spans(sentence, c.mention);
    auto& k = used[c.mention];
    if (k >= spans.size()) return std::nullopt;
    const auto etype = schema.find(c.type).value_or(EntityType{c.type, -1});
    out.push_back(MentionSpan{sentence.id, spans[k].first, spans[k].second, c.mention, etype});
    ++k;
  }
  std::sort(out.begin(), out.end(), span_less);
  return out;
}

namespace detail {

/// Context token runs between mentions, used to check that substitution
/// left the sentence frame alone.
inline std::vector<std::vector<std::string>> context_segments(const Sentence& s, const std::vector<MentionSpan>& spans) {
  std::vector<std::vector<std::string>> segs(1);
  std::size_t i = 0;
  for (const auto& m : spans) {
    for (; i < m.token_start; ++i) segs.back().push_back(s.tokens[i].surface);
    segs.emplace_back();
    i = m.token_end;
  }
  for (; i < s.size(); ++i) segs.back().push_back(s.tokens[i].surface);
  return segs;
}

}  // namespace detail

struct Rejection {
  std::string source_id;
  std::size_t index = 0;
  std::string reason;
  std::string text;
};

struct SynthesisResult {
  std::vector<SynthesizedSample> accepted;
  std::vector<Rejection> rejected;
  std::size_t generated = 0;
  bool low_yield = false;  // fewer than half of the generations validated
  std::vector<std::string> warnings;
};

/// Strategy-aware checks for one generation, before structural validation.
inline Verdict check_generation(const SynthesizedSample& candidate, const std::vector<SurfaceMention>& claimed,
                                const AnnotatedSample& seed, SynthesisStrategy strategy) {
  if (strategy == SynthesisStrategy::kParaphrase) {
    std::multiset<SurfaceMention> want;
    for (const auto& m : surface_mentions(seed.mentions())) want.insert(m);
    std::multiset<SurfaceMention> got(claimed.begin(), claimed.end());
    if (want != got) return Verdict::reject("entity lost");
  } else {
    const auto seed_spans = seed.mentions();
    if (candidate.entities.size() != seed_spans.size()) return Verdict::reject("structure changed");
    for (std::size_t i = 0; i < seed_spans.size(); ++i) {
      if (candidate.entities[i].etype.name != seed_spans[i].etype.name) return Verdict::reject("structure changed");
    }
    if (detail::context_segments(candidate.sentence, candidate.entities) !=
        detail::context_segments(seed.sentence, seed_spans)) {
      return Verdict::reject("structure changed");
    }
  }
  return Verdict::accept();
}

struct SynthesisOptions {
  double min_yield = 0.5;
};

/// Generates `count_per_seed` variants per seed sample. Invalid generations
/// are dropped and reported, never repaired. `existing_texts` seeds the
/// duplicate filter (training sentences already on hand).
inline SynthesisResult synthesize(const std::vector<AnnotatedSample>& seeds, const GuidelineTable& table,
                                  SynthesisStrategy strategy, std::size_t count_per_seed, const Schema& schema,
                                  const LlmContext& llm, std::unordered_set<std::string> existing_texts = {},
                                  const SynthesisOptions& options = {}) {
  if (table.rows.empty()) throw Error(ErrorKind::kInvalidArgument, "guideline table is empty");
  if (count_per_seed < 1) throw Error(ErrorKind::kInvalidArgument, "count_per_seed must be >= 1");
  const auto guideline = table.render();
  const std::string tmpl = strategy == SynthesisStrategy::kSubstitution ? "synth_substitution" : "synth_paraphrase";

  std::vector<std::future<std::string>> replies;
  for (const auto& seed : seeds) {
    auto prompt = llm.templates.render(tmpl, {{"guideline", guideline},
                                             {"sentence", seed.sentence.text},
                                             {"entities", mentions_to_json(surface_mentions(seed.mentions())).dump()},
                                             {"count", std::to_string(count_per_seed)}});
    replies.push_back(std::async(std::launch::async, [&llm, p = std::move(prompt)] { return llm.ask(p); }));
  }

  for (const auto& seed : seeds) existing_texts.insert(seed.sentence.text);
  SynthesisResult result;
  const std::string tag = strategy == SynthesisStrategy::kSubstitution ? "sub" : "para";
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const auto& seed = seeds[s];
    const auto reply = replies[s].get();
    result.generated += count_per_seed;
    auto parsed = extract_json(reply);
    if (parsed && parsed->is_object() && parsed->contains("samples")) parsed = (*parsed)["samples"];
    if (!parsed || !parsed->is_array()) {
      for (std::size_t k = 0; k < count_per_seed; ++k) result.rejected.push_back({seed.sentence.id, k, "malformed reply", ""});
      continue;
    }
    for (std::size_t k = 0; k < count_per_seed; ++k) {
      if (k >= parsed->size()) {
        result.rejected.push_back({seed.sentence.id, k, "missing generation", ""});
        continue;
      }
      const auto& item = (*parsed)[k];
      if (!item.is_object() || !item.contains("sentence") || !item["sentence"].is_string()) {
        result.rejected.push_back({seed.sentence.id, k, "malformed reply", ""});
        continue;
      }
      const auto text = item["sentence"].get<std::string>();
      auto reject = [&](std::string why) { result.rejected.push_back({seed.sentence.id, k, std::move(why), text}); };
      const auto claimed = item.contains("entities") ? parse_surface_mentions(item["entities"]) : std::nullopt;
      if (!claimed) {
        reject("malformed reply");
        continue;
      }
      SynthesizedSample cand;
      cand.provenance = strategy;
      cand.source_id = seed.sentence.id;
      try {
        cand.sentence = Sentence::from_text(seed.sentence.id + "/" + tag + "-" + std::to_string(k), text);
      } catch (const Error&) {
        reject(text.find_first_not_of(" \t\r\n") == std::string::npos ? "empty sentence" : "untokenizable");
        continue;
      }
      const auto located = locate_mentions(cand.sentence, *claimed, schema);
      if (!located) {
        reject(strategy == SynthesisStrategy::kParaphrase ? "entity lost" : "surface mismatch");
        continue;
      }
      cand.entities = *located;
      if (auto v = validate_synthesized(cand, schema); !v.accepted) {
        reject(v.reason);
        continue;
      }
      if (auto v = check_generation(cand, *claimed, seed, strategy); !v.accepted) {
        reject(v.reason);
        continue;
      }
      if (!existing_texts.insert(text).second) {
        reject("duplicate");
        continue;
      }
      result.accepted.push_back(std::move(cand));
    }
  }
  if (result.generated > 0 &&
      static_cast<double>(result.accepted.size()) < options.min_yield * static_cast<double>(result.generated)) {
    result.low_yield = true;
    result.warnings.push_back("synthesis yield " + std::to_string(result.accepted.size()) + "/" +
                              std::to_string(result.generated) + " is below " + std::to_string(options.min_yield));
  }
  return result;
}

inline AnnotatedSample to_annotated(const SynthesizedSample& s) {
  AnnotatedSample a;
  a.sentence = s.sentence;
  for (const auto& e : s.entities) a.triplets.push_back(GmnerTriplet{e, std::nullopt});
  return a;
}

}  // namespace gmner
