#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gmner/core.hpp"
#include "gmner/crf.hpp"
#include "gmner/error.hpp"

namespace gmner {

struct RouterConfig {
  double beta = 0.8;
  double log_base = std::numbers::e;  // entropy in nats by default

  void validate() const {
    if (!(beta >= 0.0)) throw Error(ErrorKind::kConfig, "router.beta must be >= 0");
    if (!(log_base > 1.0)) throw Error(ErrorKind::kConfig, "router.log_base must be > 1");
  }
};

/// Probabilities below this contribute exactly zero entropy.
inline constexpr double kEntropyFloor = 1e-12;

/// Shannon entropy of a label distribution.
inline double token_entropy(std::span<const double> row, double log_base = std::numbers::e) {
  if (row.empty()) throw Error(ErrorKind::kInvalidArgument, "empty distribution");
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw Error(ErrorKind::kInvalidArgument, "distribution has a negative or non-finite entry");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(ErrorKind::kInvalidArgument, "distribution sums to " + std::to_string(sum));
  }
  double h = 0.0;
  for (double p : row) {
    if (p > kEntropyFloor) h -= p * std::log(p);
  }
  return log_base == std::numbers::e ? h : h / std::log(log_base);
}

/// Mean token entropy over the mention's tokens.
inline double entity_uncertainty(const MentionSpan& mention, const MarginalTable& table,
                                 double log_base = std::numbers::e) {
  if (mention.token_start >= mention.token_end || mention.token_end > table.rows) {
    throw Error(ErrorKind::kInvalidArgument,
                "span [" + std::to_string(mention.token_start) + ", " + std::to_string(mention.token_end) +
                    ") outside a marginal table of " + std::to_string(table.rows) + " rows");
  }
  double total = 0.0;
  for (auto i = mention.token_start; i < mention.token_end; ++i) total += token_entropy(table.row(i), log_base);
  return total / static_cast<double>(mention.token_end - mention.token_start);
}

enum class Route { kKeep, kRefine };

inline std::string_view to_string(Route r) { return r == Route::kKeep ? "KEEP" : "REFINE"; }

struct RoutingDecision {
  MentionSpan mention;
  double uncertainty = 0.0;
  Route routed_to = Route::kKeep;
};

struct RoutingResult {
  std::vector<MentionSpan> keep;
  std::vector<MentionSpan> refine;
  std::vector<RoutingDecision> decisions;
};

/// Splits predictions by uncertainty; only uncertainty strictly above beta
/// is sent for refinement. Input order is preserved in all three lists.
inline RoutingResult route(const std::vector<MentionSpan>& predictions,
                           const std::map<std::string, MarginalTable>& marginals, const RouterConfig& config) {
  config.validate();
  RoutingResult out;
  for (const auto& m : predictions) {
    auto it = marginals.find(m.sentence_id);
    if (it == marginals.end()) {
      throw Error(ErrorKind::kMissingKey, "no marginals for sentence '" + m.sentence_id + "'");
    }
    const double u = entity_uncertainty(m, it->second, config.log_base);
    const Route r = u > config.beta ? Route::kRefine : Route::kKeep;
    (r == Route::kRefine ? out.refine : out.keep).push_back(m);
    out.decisions.push_back(RoutingDecision{m, u, r});
  }
  return out;
}

inline json to_json(const RoutingDecision& d) {
  return json{{"sentence_id", d.mention.sentence_id},
              {"token_start", d.mention.token_start},
              {"token_end", d.mention.token_end},
              {"surface", d.mention.surface},
              {"type", d.mention.etype.name},
              {"uncertainty", d.uncertainty},
              {"verdict", to_string(d.routed_to)}};
}

inline void write_routing_report(std::ostream& out, const std::vector<RoutingDecision>& decisions) {
  for (const auto& d : decisions) out << to_json(d).dump() << '\n';
}

}  // namespace gmner
