#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gmner/core.hpp"
#include "gmner/error.hpp"
#include "gmner/icl_selector.hpp"
#include "gmner/llm_gateway.hpp"
#include "gmner/prompts.hpp"
#include "gmner/synthesis.hpp"

namespace gmner {

struct ImageRef {
  std::string path;
  int width = 0;
  int height = 0;
};

inline ImageRef image_of(const AnnotatedSample& s) { return {s.image_path, s.image_w, s.image_h}; }

/// Chat request with one text part followed by image parts in order.
inline ChatRequest multimodal_request(const LlmContext& llm, std::string text, const std::vector<std::string>& images) {
  ChatRequest r;
  r.model = llm.model;
  r.temperature = llm.temperature;
  ChatMessage m{"user", {ContentPart::of_text(std::move(text))}};
  for (const auto& path : images) m.parts.push_back(ContentPart::of_image_path(path));
  r.messages.push_back(std::move(m));
  return r;
}

// ---------------------------------------------------------------------------
// Refinement

enum class RefineVerdict { kConfirm, kCorrect, kDelete, kAdd };

inline std::string_view to_string(RefineVerdict v) {
  switch (v) {
    case RefineVerdict::kConfirm: return "CONFIRM";
    case RefineVerdict::kCorrect: return "CORRECT";
    case RefineVerdict::kDelete: return "DELETE";
    case RefineVerdict::kAdd: return "ADD";
  }
  return "?";
}

/// `original` is empty for ADD. `mentions` holds the replacement for
/// CORRECT and the new mention for ADD.
struct RefinementOutcome {
  std::optional<MentionSpan> original;
  RefineVerdict verdict = RefineVerdict::kConfirm;
  std::vector<MentionSpan> mentions;
  std::string rationale;
};

struct RefineOptions {
  bool allow_add = true;
};

struct RefineReport {
  std::vector<RefinementOutcome> outcomes;
  std::size_t parse_failures = 0;
  std::vector<std::string> warnings;
};

inline std::string numbered_mentions(const std::vector<MentionSpan>& ms) {
  std::string out;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    out += std::to_string(i) + ". \"" + ms[i].surface + "\" (" + ms[i].etype.name + ")\n";
  }
  return out;
}

/// Places `surface` in the sentence, preferring an occurrence that overlaps
/// `near`.
inline std::optional<MentionSpan> place_mention(const Sentence& sentence, const std::string& surface,
                                                const EntityType& etype, const MentionSpan* near = nullptr) {
  const auto spans = find_token_spans(sentence, surface);
  if (spans.empty()) return std::nullopt;
  auto pick = spans.front();
  if (near) {
    for (const auto& s : spans) {
      if (s.first < near->token_end && near->token_start < s.second) {
        pick = s;
        break;
      }
    }
  }
  return make_mention(sentence, pick.first, pick.second, etype);
}

/// Asks the MLLM, in one call per sentence, for a step-by-step verdict on
/// each uncertain mention. Replies that cannot be parsed leave every
/// mention CONFIRMed; individual verdicts that fail validation fall back to
/// CONFIRM with a warning.
inline RefineReport refine(const std::vector<MentionSpan>& uncertain, const Sentence& sentence, const ImageRef& image,
                           const Schema& schema, const LlmContext& llm, const std::string& guideline,
                           const RefineOptions& options = {}) {
  if (uncertain.empty()) throw Error(ErrorKind::kInvalidArgument, "refine called without uncertain mentions");
  RefineReport report;
  const auto prompt = llm.templates.render(
      "refine", {{"guideline", guideline},
                 {"types", [&] {
                    std::string s;
                    for (const auto& n : schema.names()) s += (s.empty() ? "" : ", ") + n;
                    return s;
                  }()},
                 {"sentence", sentence.text},
                 {"candidates", numbered_mentions(uncertain)}});
  std::vector<std::string> images;
  if (!image.path.empty()) images.push_back(image.path);
  const auto reply = llm.gateway.complete(multimodal_request(llm, prompt, images));

  auto confirm_all = [&] {
    for (const auto& m : uncertain) report.outcomes.push_back({m, RefineVerdict::kConfirm, {}, reply});
  };
  const auto parsed = extract_json(reply);
  if (!parsed || !parsed->is_object() || !parsed->contains("verdicts") || !(*parsed)["verdicts"].is_array()) {
    ++report.parse_failures;
    report.warnings.push_back(sentence.id + ": unparseable refinement reply, keeping supervised predictions");
    confirm_all();
    return report;
  }

  std::vector<std::optional<json>> by_id(uncertain.size());
  for (const auto& v : (*parsed)["verdicts"]) {
    if (!v.is_object() || !v.contains("id") || !v["id"].is_number_integer()) continue;
    const auto id = v["id"].get<long long>();
    if (id >= 0 && static_cast<std::size_t>(id) < uncertain.size() && !by_id[id]) by_id[id] = v;
  }

  for (std::size_t i = 0; i < uncertain.size(); ++i) {
    const auto& m = uncertain[i];
    RefinementOutcome out{m, RefineVerdict::kConfirm, {}, reply};
    if (!by_id[i]) {
      report.warnings.push_back(sentence.id + ": no verdict for \"" + m.surface + "\", confirming");
      report.outcomes.push_back(std::move(out));
      continue;
    }
    const auto& v = *by_id[i];
    const auto word = v.value("verdict", std::string());
    if (word == "DELETE") {
      out.verdict = RefineVerdict::kDelete;
    } else if (word == "CORRECT") {
      const auto surface = v.value("mention", m.surface);
      const auto type = schema.find(v.value("type", m.etype.name));
      const auto placed = type ? place_mention(sentence, surface, *type, &m) : std::nullopt;
      if (placed) {
        out.verdict = RefineVerdict::kCorrect;
        out.mentions.push_back(*placed);
      } else {
        report.warnings.push_back(sentence.id + ": rejected correction of \"" + m.surface + "\" to \"" + surface +
                                  "\", confirming");
      }
    } else if (word != "CONFIRM") {
      report.warnings.push_back(sentence.id + ": unknown verdict '" + word + "', confirming");
    }
    report.outcomes.push_back(std::move(out));
  }

  if (options.allow_add && parsed->contains("add") && (*parsed)["add"].is_array()) {
    for (const auto& a : (*parsed)["add"]) {
      if (!a.is_object() || !a.contains("mention") || !a["mention"].is_string()) continue;
      const auto type = schema.find(a.value("type", std::string()));
      const auto placed = type ? place_mention(sentence, a["mention"].get<std::string>(), *type) : std::nullopt;
      if (!placed) {
        report.warnings.push_back(sentence.id + ": rejected addition " + a.dump());
        continue;
      }
      report.outcomes.push_back({std::nullopt, RefineVerdict::kAdd, {*placed}, reply});
    }
  }
  return report;
}

/// Confident spans survive untouched; outcome spans are applied in order
/// and dropped when they overlap anything already kept. Sorted output.
inline std::vector<MentionSpan> merge(const std::vector<MentionSpan>& confident,
                                      const std::vector<RefinementOutcome>& outcomes) {
  std::vector<MentionSpan> out;
  auto try_add = [&](const MentionSpan& m) {
    for (const auto& kept : out) {
      if (kept == m || kept.overlaps(m)) return;
    }
    out.push_back(m);
  };
  for (const auto& c : confident) {
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  for (const auto& o : outcomes) {
    switch (o.verdict) {
      case RefineVerdict::kConfirm:
        if (o.original) try_add(*o.original);
        break;
      case RefineVerdict::kCorrect:
      case RefineVerdict::kAdd:
        for (const auto& m : o.mentions) try_add(m);
        break;
      case RefineVerdict::kDelete:
        break;
    }
  }
  std::sort(out.begin(), out.end(), span_less);
  return out;
}

// ---------------------------------------------------------------------------
// Grounding

struct GroundingResult {
  MentionSpan mention;
  std::optional<BoundingBox> region;
  std::string raw_response;
};

struct GroundingReport {
  std::vector<GroundingResult> results;
  std::size_t parse_failures = 0;
  std::vector<std::string> warnings;
};

/// Clips to [0, width] x [0, height]; nullopt when nothing with positive
/// area remains.
inline std::optional<BoundingBox> clip_box(BoundingBox b, int width, int height) {
  b.x_min = std::clamp(b.x_min, 0, width);
  b.x_max = std::clamp(b.x_max, 0, width);
  b.y_min = std::clamp(b.y_min, 0, height);
  b.y_max = std::clamp(b.y_max, 0, height);
  if (!b.valid()) return std::nullopt;
  return b;
}

inline std::string render_examples(const std::vector<const IclExample*>& examples) {
  std::string out;
  for (std::size_t k = 0; k < examples.size(); ++k) {
    const auto& s = examples[k]->sample;
    out += "Example " + std::to_string(k + 1) + " (image " + std::to_string(k + 1) + ", " + std::to_string(s.image_w) +
           "x" + std::to_string(s.image_h) + " pixels)\nSentence: " + s.sentence.text + "\nEntities:\n";
    for (const auto& t : s.triplets) {
      out += "- \"" + t.mention.surface + "\" (" + t.mention.etype.name + "): ";
      if (t.region) {
        out += "[" + std::to_string(t.region->x_min) + ", " + std::to_string(t.region->y_min) + ", " +
               std::to_string(t.region->x_max) + ", " + std::to_string(t.region->y_max) + "]\n";
      } else {
        out += "None\n";
      }
    }
    out += "\n";
  }
  return out;
}

/// Few-shot grounding of the given mentions. Example images precede the
/// target image. Anything the reply does not ground cleanly is None.
inline GroundingReport ground(const std::vector<MentionSpan>& entities, const Sentence& sentence, const ImageRef& image,
                              const std::vector<const IclExample*>& examples, const LlmContext& llm) {
  GroundingReport report;
  if (entities.empty()) return report;
  const auto prompt = llm.templates.render("ground", {{"examples", render_examples(examples)},
                                                     {"example_count", std::to_string(examples.size())},
                                                     {"target_image", std::to_string(examples.size() + 1)},
                                                     {"sentence", sentence.text},
                                                     {"entities", numbered_mentions(entities)},
                                                     {"width", std::to_string(image.width)},
                                                     {"height", std::to_string(image.height)}});
  std::vector<std::string> images;
  for (const auto* ex : examples) images.push_back(ex->sample.image_path);
  images.push_back(image.path);
  const auto reply = llm.gateway.complete(multimodal_request(llm, prompt, images));

  for (const auto& e : entities) report.results.push_back({e, std::nullopt, reply});
  const auto parsed = extract_json(reply);
  if (!parsed || !parsed->is_object() || !parsed->contains("groundings") || !(*parsed)["groundings"].is_array()) {
    ++report.parse_failures;
    report.warnings.push_back(sentence.id + ": unparseable grounding reply, abstaining");
    return report;
  }
  std::vector<bool> seen(entities.size(), false);
  for (const auto& g : (*parsed)["groundings"]) {
    if (!g.is_object() || !g.contains("id") || !g["id"].is_number_integer()) continue;
    const auto id = g["id"].get<long long>();
    if (id < 0 || static_cast<std::size_t>(id) >= entities.size() || seen[id]) continue;
    seen[id] = true;
    const auto& box = g.contains("box") ? g["box"] : json();
    if (box.is_null()) continue;  // not visible
    if (!box.is_array() || box.size() != 4 ||
        !std::all_of(box.begin(), box.end(), [](const json& v) { return v.is_number(); })) {
      report.warnings.push_back(sentence.id + ": malformed box for \"" + entities[id].surface + "\"");
      continue;
    }
    BoundingBox b{static_cast<int>(std::lround(box[0].get<double>())), static_cast<int>(std::lround(box[1].get<double>())),
                  static_cast<int>(std::lround(box[2].get<double>())), static_cast<int>(std::lround(box[3].get<double>()))};
    auto clipped = clip_box(b, image.width, image.height);
    if (!clipped) {
      report.warnings.push_back(sentence.id + ": degenerate box for \"" + entities[id].surface + "\"");
      continue;
    }
    report.results[id].region = clipped;
  }
  return report;
}

}  // namespace gmner
