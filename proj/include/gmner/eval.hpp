#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gmner/core.hpp"
#include "gmner/error.hpp"

namespace gmner {

/// Intersection over union of two boxes in continuous pixel coordinates.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  if (!a.valid() || !b.valid()) throw Error(ErrorKind::kInvalidArgument, "iou of a degenerate box");
  const long long ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const long long iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const long long inter = ix * iy;
  const long long uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline constexpr double kIouThreshold = 0.5;

inline bool region_match(const std::optional<BoundingBox>& pred, const std::optional<BoundingBox>& gold) {
  if (!pred && !gold) return true;
  if (!pred || !gold) return false;
  return iou(*pred, *gold) > kIouThreshold;
}

/// Exact span and type, and matching region.
inline bool triplet_match(const GmnerTriplet& pred, const GmnerTriplet& gold) {
  return pred.mention.sentence_id == gold.mention.sentence_id &&
         pred.mention.token_start == gold.mention.token_start && pred.mention.token_end == gold.mention.token_end &&
         pred.mention.etype.name == gold.mention.etype.name && region_match(pred.region, gold.region);
}

struct Prf {
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;

  double precision() const { return predicted ? static_cast<double>(correct) / static_cast<double>(predicted) : 0.0; }
  double recall() const { return gold ? static_cast<double>(correct) / static_cast<double>(gold) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
};

struct EvalReport {
  Prf gmner;
  Prf ner;  // span and type only
  std::map<std::string, Prf> per_type;
};

namespace detail {

inline bool triplet_less(const GmnerTriplet& a, const GmnerTriplet& b) {
  if (span_less(a.mention, b.mention)) return true;
  if (span_less(b.mention, a.mention)) return false;
  return a.region < b.region;
}

inline std::vector<GmnerTriplet> canonical(std::vector<GmnerTriplet> ts) {
  std::sort(ts.begin(), ts.end(), triplet_less);
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  return ts;
}

inline bool same_span_type(const MentionSpan& a, const MentionSpan& b) {
  return a.sentence_id == b.sentence_id && a.token_start == b.token_start && a.token_end == b.token_end &&
         a.etype.name == b.etype.name;
}

/// One-to-one matching: gold in canonical order, each taking the unmatched
/// prediction that matches with the highest IoU (None-None counts as 1).
inline std::vector<bool> match(const std::vector<GmnerTriplet>& pred, const std::vector<GmnerTriplet>& gold,
                               bool regions) {
  std::vector<bool> used(pred.size(), false);
  std::vector<bool> gold_hit(gold.size(), false);
  for (std::size_t g = 0; g < gold.size(); ++g) {
    std::optional<std::size_t> best;
    double best_q = -1.0;
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if (used[p] || !same_span_type(pred[p].mention, gold[g].mention)) continue;
      double q = 1.0;
      if (regions) {
        if (!region_match(pred[p].region, gold[g].region)) continue;
        if (pred[p].region) q = iou(*pred[p].region, *gold[g].region);
      }
      if (q > best_q) {
        best_q = q;
        best = p;
      }
    }
    if (best) {
      used[*best] = true;
      gold_hit[g] = true;
    }
  }
  return gold_hit;
}

}  // namespace detail

/// Scores predicted triplets against gold over the whole corpus.
/// Duplicate predictions count once.
inline EvalReport score(const std::vector<GmnerTriplet>& predicted, const std::vector<GmnerTriplet>& gold_in) {
  const auto pred = detail::canonical(predicted);
  const auto gold = detail::canonical(gold_in);
  EvalReport r;

  std::map<std::string, std::pair<std::vector<GmnerTriplet>, std::vector<GmnerTriplet>>> by_sentence;
  for (const auto& p : pred) by_sentence[p.mention.sentence_id].first.push_back(p);
  for (const auto& g : gold) by_sentence[g.mention.sentence_id].second.push_back(g);

  std::vector<GmnerTriplet> pred_spans, gold_spans;
  for (const auto& t : pred) pred_spans.push_back({t.mention, std::nullopt});
  for (const auto& t : gold) gold_spans.push_back({t.mention, std::nullopt});
  pred_spans = detail::canonical(pred_spans);
  gold_spans = detail::canonical(gold_spans);
  r.ner.predicted = pred_spans.size();
  r.ner.gold = gold_spans.size();
  const auto ner_hits = detail::match(pred_spans, gold_spans, false);
  r.ner.correct = static_cast<std::size_t>(std::count(ner_hits.begin(), ner_hits.end(), true));

  r.gmner.predicted = pred.size();
  r.gmner.gold = gold.size();
  for (const auto& p : pred) ++r.per_type[p.mention.etype.name].predicted;
  for (const auto& g : gold) ++r.per_type[g.mention.etype.name].gold;
  for (const auto& [sid, pg] : by_sentence) {
    const auto hits = detail::match(pg.first, pg.second, true);
    for (std::size_t g = 0; g < hits.size(); ++g) {
      if (!hits[g]) continue;
      ++r.gmner.correct;
      ++r.per_type[pg.second[g].mention.etype.name].correct;
    }
  }
  return r;
}

inline json to_json(const Prf& p) {
  return json{{"precision", p.precision()}, {"recall", p.recall()}, {"f1", p.f1()},
              {"correct", p.correct},       {"predicted", p.predicted}, {"gold", p.gold}};
}

inline json to_json(const EvalReport& r) {
  json types = json::object();
  for (const auto& [name, p] : r.per_type) types[name] = to_json(p);
  return json{{"gmner", to_json(r.gmner)}, {"ner", to_json(r.ner)}, {"per_type", types}};
}

inline std::string format_table(const EvalReport& r) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %9s %9s %9s %7s %7s %7s\n", "scope", "precision", "recall", "f1", "correct",
                "pred", "gold");
  out += line;
  auto row = [&](const std::string& name, const Prf& p) {
    std::snprintf(line, sizeof line, "%-12s %9.4f %9.4f %9.4f %7zu %7zu %7zu\n", name.c_str(), p.precision(),
                  p.recall(), p.f1(), p.correct, p.predicted, p.gold);
    out += line;
  };
  row("GMNER", r.gmner);
  row("NER", r.ner);
  for (const auto& [name, p] : r.per_type) row("  " + name, p);
  return out;
}

}  // namespace gmner
