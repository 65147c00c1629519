#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gmner/core.hpp"
#include "gmner/embedding.hpp"
#include "gmner/error.hpp"

namespace gmner {

struct SelectorConfig {
  double delta = 0.6;  // type-consistency margin
  double lambda_entity = 0.6;
  double lambda_sentence = 0.4;
  double lambda_image = 0.2;
  std::size_t k = 3;

  void validate() const {
    if (k < 1) throw Error(ErrorKind::kConfig, "selector.k must be >= 1");
    if (lambda_entity < 0 || lambda_sentence < 0 || lambda_image < 0) {
      throw Error(ErrorKind::kConfig, "selector weights must be >= 0");
    }
    if (lambda_entity + lambda_sentence + lambda_image <= 0) {
      throw Error(ErrorKind::kConfig, "selector weights must not all be zero");
    }
  }
};

/// An annotated sample from the pool plus the keys of its embeddings.
struct IclExample {
  AnnotatedSample sample;
  std::string sentence_key;
  std::vector<std::string> entity_keys;  // parallel to sample.triplets
  std::string image_key;

  static IclExample from_sample(AnnotatedSample s) {
    IclExample ex;
    ex.sentence_key = gmner::sentence_key(s.sentence.id);
    for (const auto& t : s.triplets) ex.entity_keys.push_back(entity_key(t.mention.surface));
    ex.image_key = s.has_image() ? gmner::image_key(s.image_path) : std::string();
    ex.sample = std::move(s);
    return ex;
  }
};

struct QueryEntity {
  EntityType etype;
  EmbeddingVector embedding;
};

/// A refined test sample as seen by the selector.
struct SelectorQuery {
  std::string id;
  std::vector<QueryEntity> entities;
  EmbeddingVector sentence;
  std::optional<EmbeddingVector> image;
};

/// Stores consulted for candidate-side embeddings.
struct SelectorStores {
  const EmbeddingStore& sentence;
  const EmbeddingStore& entity;
  const EmbeddingStore& image;
};

/// Pair score cos(e, e') + delta * [same type].
inline double entity_pair_score(const QueryEntity& q, EntityType candidate_type, EmbeddingView candidate, double delta) {
  return cosine(q.embedding, candidate) + (q.etype.name == candidate_type.name ? delta : 0.0);
}

/// Mean over query entities of the best pair score against the candidate's
/// entities. A candidate without entities, or a query without entities,
/// scores 0.
inline double entity_similarity(const std::vector<QueryEntity>& query, const IclExample& candidate,
                                const EmbeddingStore& entity_store, double delta) {
  const auto& triplets = candidate.sample.triplets;
  if (triplets.empty() || query.empty()) return 0.0;
  std::vector<EmbeddingView> cand;
  for (const auto& key : candidate.entity_keys) cand.push_back(entity_store.get(key));
  double total = 0.0;
  for (const auto& q : query) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < triplets.size(); ++j) {
      best = std::max(best, entity_pair_score(q, triplets[j].mention.etype, cand[j], delta));
    }
    total += best;
  }
  return total / static_cast<double>(query.size());
}

inline double sentence_similarity(EmbeddingView query, const IclExample& candidate, const EmbeddingStore& sentence_store) {
  return cosine(query, sentence_store.get(candidate.sentence_key));
}

/// Zero when the candidate image has no annotated regions or the query has
/// no image embedding.
inline double image_similarity(const std::optional<EmbeddingVector>& query, const IclExample& candidate,
                               const EmbeddingStore& image_store) {
  if (!query || !candidate.sample.has_regions()) return 0.0;
  return cosine(*query, image_store.get(candidate.image_key));
}

inline double combined_score(const SelectorConfig& c, double entity, double sentence, double image) {
  return c.lambda_entity * entity + c.lambda_sentence * sentence + c.lambda_image * image;
}

/// Indices of the k largest scores, descending; equal scores keep the
/// lower index first.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) {
    throw Error(ErrorKind::kInvalidArgument,
                "k = " + std::to_string(k) + " exceeds candidate count " + std::to_string(scores.size()));
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(k);
  return idx;
}

struct CandidateScore {
  std::size_t index = 0;
  double entity = 0.0;
  double sentence = 0.0;
  double image = 0.0;
  double combined = 0.0;
};

struct Selection {
  std::string query_id;
  std::vector<std::size_t> chosen;  // best first
  std::vector<CandidateScore> scores;
};

inline Selection select_topk(const SelectorQuery& query, const std::vector<IclExample>& candidates,
                             const SelectorStores& stores, const SelectorConfig& config) {
  config.validate();
  if (candidates.empty()) throw Error(ErrorKind::kInvalidArgument, "candidate pool is empty");
  Selection out;
  out.query_id = query.id;
  std::vector<double> combined;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    CandidateScore s;
    s.index = j;
    s.entity = entity_similarity(query.entities, candidates[j], stores.entity, config.delta);
    s.sentence = sentence_similarity(query.sentence, candidates[j], stores.sentence);
    s.image = image_similarity(query.image, candidates[j], stores.image);
    s.combined = combined_score(config, s.entity, s.sentence, s.image);
    combined.push_back(s.combined);
    out.scores.push_back(s);
  }
  out.chosen = top_k_indices(combined, config.k);
  return out;
}

inline json to_json(const Selection& s) {
  json scores = json::array();
  for (const auto& c : s.scores) {
    scores.push_back(json{{"index", c.index}, {"entity", c.entity}, {"sentence", c.sentence}, {"image", c.image},
                          {"combined", c.combined}});
  }
  return json{{"query_id", s.query_id}, {"chosen", s.chosen}, {"scores", scores}};
}

}  // namespace gmner
