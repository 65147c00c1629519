#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gmner/core.hpp"
#include "gmner/embedding.hpp"
#include "gmner/error.hpp"

namespace gmner {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return std::span<double>(data).subspan(r * cols, cols); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data).subspan(r * cols, cols);
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Per-token posterior label distribution, n x L.
using MarginalTable = Matrix;

/// Linear-chain CRF over frozen token features. Unary score of label c at
/// token i is W[c].x_i + b[c]; a sequence additionally collects
/// start[y_0], transitions[y_{i-1}][y_i] and end[y_{n-1}].
struct CrfModel {
  int label_count = 0;
  std::size_t dim = 0;
  Matrix emission_weights;  // L x D
  std::vector<double> emission_bias;
  Matrix transitions;  // L x L, [from][to]
  std::vector<double> start_scores;
  std::vector<double> end_scores;

  static CrfModel zeros(int labels, std::size_t dim) {
    if (labels < 1) throw Error(ErrorKind::kInvalidArgument, "CRF needs at least one label");
    if (dim < 1) throw Error(ErrorKind::kInvalidArgument, "CRF feature dim must be positive");
    const auto l = static_cast<std::size_t>(labels);
    CrfModel m;
    m.label_count = labels;
    m.dim = dim;
    m.emission_weights = Matrix(l, dim);
    m.emission_bias.assign(l, 0.0);
    m.transitions = Matrix(l, l);
    m.start_scores.assign(l, 0.0);
    m.end_scores.assign(l, 0.0);
    return m;
  }

  std::size_t parameter_count() const {
    const auto l = static_cast<std::size_t>(label_count);
    return l * dim + l + l * l + l + l;
  }

  /// Parameters in checkpoint order: W (row-major), b, transitions
  /// (row-major), start, end.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    out.insert(out.end(), emission_weights.data.begin(), emission_weights.data.end());
    out.insert(out.end(), emission_bias.begin(), emission_bias.end());
    out.insert(out.end(), transitions.data.begin(), transitions.data.end());
    out.insert(out.end(), start_scores.begin(), start_scores.end());
    out.insert(out.end(), end_scores.begin(), end_scores.end());
    return out;
  }

  void assign(std::span<const double> flat) {
    if (flat.size() != parameter_count()) {
      throw Error(ErrorKind::kDimMismatch, "parameter vector has " + std::to_string(flat.size()) +
                                               " entries, model needs " + std::to_string(parameter_count()));
    }
    auto it = flat.begin();
    auto take = [&](std::vector<double>& dst) {
      std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
      it += static_cast<std::ptrdiff_t>(dst.size());
    };
    take(emission_weights.data);
    take(emission_bias);
    take(transitions.data);
    take(start_scores);
    take(end_scores);
  }

  bool all_finite() const {
    const auto flat = flatten();
    return std::all_of(flat.begin(), flat.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const CrfModel&, const CrfModel&) = default;
};

namespace detail {

inline double log_sum_exp(std::span<const double> xs) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : xs) hi = std::max(hi, x);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

inline void check_features(const CrfModel& model, const Matrix& features) {
  if (features.rows == 0) throw Error(ErrorKind::kInvalidArgument, "empty token sequence");
  if (features.cols != model.dim) {
    throw Error(ErrorKind::kDimMismatch, "token features have dim " + std::to_string(features.cols) +
                                             ", model expects " + std::to_string(model.dim));
  }
}

struct ForwardBackward {
  Matrix alpha;  // n x L
  Matrix beta;   // n x L
  double log_z = 0.0;
};

inline ForwardBackward forward_backward(const CrfModel& model, const Matrix& unary) {
  const std::size_t n = unary.rows;
  const auto l = static_cast<std::size_t>(model.label_count);
  ForwardBackward fb{Matrix(n, l), Matrix(n, l), 0.0};
  std::vector<double> terms(l);

  for (std::size_t c = 0; c < l; ++c) fb.alpha(0, c) = model.start_scores[c] + unary(0, c);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t c = 0; c < l; ++c) {
      for (std::size_t a = 0; a < l; ++a) terms[a] = fb.alpha(i - 1, a) + model.transitions(a, c);
      fb.alpha(i, c) = unary(i, c) + log_sum_exp(terms);
    }
  }
  for (std::size_t c = 0; c < l; ++c) terms[c] = fb.alpha(n - 1, c) + model.end_scores[c];
  fb.log_z = log_sum_exp(terms);

  for (std::size_t c = 0; c < l; ++c) fb.beta(n - 1, c) = model.end_scores[c];
  for (std::size_t i = n - 1; i-- > 0;) {
    for (std::size_t a = 0; a < l; ++a) {
      for (std::size_t c = 0; c < l; ++c) terms[c] = model.transitions(a, c) + unary(i + 1, c) + fb.beta(i + 1, c);
      fb.beta(i, a) = log_sum_exp(terms);
    }
  }
  return fb;
}

}  // namespace detail

/// Unary scores, n x L.
inline Matrix emission_scores(const CrfModel& model, const Matrix& features) {
  detail::check_features(model, features);
  const auto l = static_cast<std::size_t>(model.label_count);
  Matrix out(features.rows, l);
  for (std::size_t i = 0; i < features.rows; ++i) {
    const auto x = features.row(i);
    for (std::size_t c = 0; c < l; ++c) {
      const auto w = model.emission_weights.row(c);
      out(i, c) = std::inner_product(w.begin(), w.end(), x.begin(), model.emission_bias[c]);
    }
  }
  return out;
}

inline void check_labels(const CrfModel& model, std::size_t n, const std::vector<int>& labels) {
  if (labels.size() != n) {
    throw Error(ErrorKind::kInvalidLabel, "label sequence length " + std::to_string(labels.size()) +
                                              " != token count " + std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || y >= model.label_count) {
      throw Error(ErrorKind::kInvalidLabel, "label id " + std::to_string(y) + " outside [0, " +
                                                std::to_string(model.label_count) + ")");
    }
  }
}

/// Unnormalized log score of one label sequence given precomputed unaries.
inline double sequence_score(const CrfModel& model, const Matrix& unary, const std::vector<int>& labels) {
  check_labels(model, unary.rows, labels);
  double s = model.start_scores[labels.front()] + model.end_scores[labels.back()];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    s += unary(i, labels[i]);
    if (i > 0) s += model.transitions(labels[i - 1], labels[i]);
  }
  return s;
}

inline double sequence_score_features(const CrfModel& model, const Matrix& features, const std::vector<int>& labels) {
  return sequence_score(model, emission_scores(model, features), labels);
}

inline double log_partition(const CrfModel& model, const Matrix& features) {
  return detail::forward_backward(model, emission_scores(model, features)).log_z;
}

inline MarginalTable marginals(const CrfModel& model, const Matrix& features) {
  const auto fb = detail::forward_backward(model, emission_scores(model, features));
  MarginalTable out(features.rows, static_cast<std::size_t>(model.label_count));
  for (std::size_t i = 0; i < out.rows; ++i) {
    for (std::size_t c = 0; c < out.cols; ++c) out(i, c) = std::exp(fb.alpha(i, c) + fb.beta(i, c) - fb.log_z);
  }
  return out;
}

struct ViterbiResult {
  std::vector<int> labels;
  double score = 0.0;
};

/// Max-scoring sequence. Ties resolve to the lowest label id, both at each
/// backpointer and at the final position.
inline ViterbiResult viterbi(const CrfModel& model, const Matrix& features) {
  const auto unary = emission_scores(model, features);
  const std::size_t n = unary.rows;
  const auto l = static_cast<std::size_t>(model.label_count);
  std::vector<double> score(l);
  std::vector<double> next(l);
  std::vector<int> back(n * l, 0);

  for (std::size_t c = 0; c < l; ++c) score[c] = model.start_scores[c] + unary(0, c);
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t c = 0; c < l; ++c) {
      double best = score[0] + model.transitions(0, c);
      int arg = 0;
      for (std::size_t a = 1; a < l; ++a) {
        const double s = score[a] + model.transitions(a, c);
        if (s > best) {
          best = s;
          arg = static_cast<int>(a);
        }
      }
      next[c] = best + unary(i, c);
      back[i * l + c] = arg;
    }
    std::swap(score, next);
  }
  int last = 0;
  double best = score[0] + model.end_scores[0];
  for (std::size_t c = 1; c < l; ++c) {
    const double s = score[c] + model.end_scores[c];
    if (s > best) {
      best = s;
      last = static_cast<int>(c);
    }
  }
  ViterbiResult out{std::vector<int>(n), best};
  out.labels[n - 1] = last;
  for (std::size_t i = n - 1; i > 0; --i) out.labels[i - 1] = back[i * l + static_cast<std::size_t>(out.labels[i])];
  return out;
}

struct NllResult {
  double loss = 0.0;
  CrfModel gradient;  // same layout as the model
};

/// NLL of the gold sequence and its gradient (expected minus observed
/// feature counts).
inline NllResult nll_and_gradient(const CrfModel& model, const Matrix& features, const std::vector<int>& gold) {
  const auto unary = emission_scores(model, features);
  check_labels(model, unary.rows, gold);
  const auto fb = detail::forward_backward(model, unary);
  const std::size_t n = unary.rows;
  const auto l = static_cast<std::size_t>(model.label_count);

  NllResult out{fb.log_z - sequence_score(model, unary, gold), CrfModel::zeros(model.label_count, model.dim)};
  auto& g = out.gradient;

  for (std::size_t i = 0; i < n; ++i) {
    const auto x = features.row(i);
    for (std::size_t c = 0; c < l; ++c) {
      double d = std::exp(fb.alpha(i, c) + fb.beta(i, c) - fb.log_z);
      if (static_cast<int>(c) == gold[i]) d -= 1.0;
      if (d == 0.0) continue;
      g.emission_bias[c] += d;
      auto w = g.emission_weights.row(c);
      for (std::size_t k = 0; k < x.size(); ++k) w[k] += d * x[k];
    }
  }
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t a = 0; a < l; ++a) {
      for (std::size_t c = 0; c < l; ++c) {
        g.transitions(a, c) +=
            std::exp(fb.alpha(i - 1, a) + model.transitions(a, c) + unary(i, c) + fb.beta(i, c) - fb.log_z);
      }
    }
    g.transitions(gold[i - 1], gold[i]) -= 1.0;
  }
  for (std::size_t c = 0; c < l; ++c) {
    g.start_scores[c] = std::exp(fb.alpha(0, c) + fb.beta(0, c) - fb.log_z);
    g.end_scores[c] = std::exp(fb.alpha(n - 1, c) + fb.beta(n - 1, c) - fb.log_z);
  }
  g.start_scores[gold.front()] -= 1.0;
  g.end_scores[gold.back()] -= 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 32;
  double lr_emission = 1e-3;  // W and b
  double lr_crf = 5e-2;       // transitions, start, end
  double weight_decay = 1e-2;
  std::uint64_t seed = 13;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},   {"batch_size", c.batch_size},     {"lr_emission", c.lr_emission},
              {"lr_crf", c.lr_crf},   {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_emission = j.value("lr_emission", c.lr_emission);
  c.lr_crf = j.value("lr_crf", c.lr_crf);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  if (c.epochs < 0 || c.batch_size == 0 || c.lr_emission < 0 || c.lr_crf < 0 || c.weight_decay < 0) {
    throw Error(ErrorKind::kConfig, "train: epochs >= 0, batch_size >= 1, rates >= 0 required");
  }
  return c;
}

struct TrainingExample {
  Matrix features;  // n x D
  std::vector<int> labels;
};

struct TrainResult {
  CrfModel model;
  double initial_nll = 0.0;  // average over the dataset
  double final_nll = 0.0;
  std::vector<double> epoch_nll;
  int best_epoch = 0;  // 0 = initial parameters
};

inline double average_nll(const CrfModel& model, const std::vector<TrainingExample>& data) {
  double total = 0.0;
  for (const auto& ex : data) {
    total += log_partition(model, ex.features) - sequence_score_features(model, ex.features, ex.labels);
  }
  return total / static_cast<double>(data.size());
}

/// Mini-batch gradient descent with decoupled weight decay, starting from
/// zeros. The returned model is the epoch snapshot with the lowest average
/// NLL (the initial parameters included), so the final NLL never exceeds
/// the initial one. Deterministic for a given seed.
inline TrainResult train(const std::vector<TrainingExample>& data, int label_count, const TrainConfig& config) {
  if (data.empty()) throw Error(ErrorKind::kEmptyDataset, "no training examples");
  const std::size_t dim = data.front().features.cols;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].features.cols != dim) {
      throw Error(ErrorKind::kDimMismatch, "training example " + std::to_string(i) + " has dim " +
                                               std::to_string(data[i].features.cols) + ", expected " +
                                               std::to_string(dim));
    }
  }
  auto model = CrfModel::zeros(label_count, dim);
  TrainResult result;
  result.initial_nll = average_nll(model, data);
  result.model = model;
  result.final_nll = result.initial_nll;

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n_emission = model.emission_weights.data.size() + model.emission_bias.size();
  const std::size_t n_weights = model.emission_weights.data.size();
  const std::size_t n_trans_end = n_emission + model.transitions.data.size();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<double> grad(model.parameter_count(), 0.0);
      for (std::size_t k = start; k < stop; ++k) {
        const auto& ex = data[order[k]];
        auto r = nll_and_gradient(model, ex.features, ex.labels);
        if (!std::isfinite(r.loss)) {
          throw Error(ErrorKind::kDivergence, "non-finite loss at epoch " + std::to_string(epoch) +
                                                  ", example " + std::to_string(order[k]));
        }
        const auto g = r.gradient.flatten();
        for (std::size_t p = 0; p < grad.size(); ++p) grad[p] += g[p];
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      auto params = model.flatten();
      for (std::size_t p = 0; p < params.size(); ++p) {
        const double lr = p < n_emission ? config.lr_emission : config.lr_crf;
        // decay applies to weight matrices, not to biases or start/end scores
        const bool decays = p < n_weights || (p >= n_emission && p < n_trans_end);
        if (decays) params[p] -= lr * config.weight_decay * params[p];
        params[p] -= lr * grad[p] * scale;
      }
      model.assign(params);
      if (!model.all_finite()) {
        throw Error(ErrorKind::kDivergence, "parameters became non-finite at epoch " + std::to_string(epoch));
      }
    }
    const double nll = average_nll(model, data);
    if (!std::isfinite(nll)) {
      throw Error(ErrorKind::kDivergence, "average NLL is non-finite after epoch " + std::to_string(epoch));
    }
    result.epoch_nll.push_back(nll);
    if (nll < result.final_nll) {
      result.final_nll = nll;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Features and checkpoints

/// Stacks the token embeddings of `sentence` (keys per token_key) into n x D.
inline Matrix token_features(const Sentence& sentence, const EmbeddingStore& store) {
  Matrix out(sentence.size(), store.dim());
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    const auto v = store.get(token_key(sentence.id, i));
    std::copy(v.begin(), v.end(), out.row(i).begin());
  }
  return out;
}

/// Binary layout: "CRF1", u32 L, u32 D, then the flattened parameters as
/// little-endian float64.
inline void save_checkpoint(const CrfModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  auto put = [&](std::uint64_t v, int bytes) {
    for (int k = 0; k < bytes; ++k) out.put(static_cast<char>((v >> (8 * k)) & 0xFF));
  };
  out.write("CRF1", 4);
  put(static_cast<std::uint32_t>(model.label_count), 4);
  put(static_cast<std::uint32_t>(model.dim), 4);
  for (double v : model.flatten()) put(std::bit_cast<std::uint64_t>(v), 8);
  if (!out) throw Error(ErrorKind::kIo, "write failed for '" + path.string() + "'");
}

inline CrfModel load_checkpoint(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path), path.string());
  if (r.bytes(4) != "CRF1") throw Error(ErrorKind::kFormat, "'" + path.string() + "' lacks CRF1 magic");
  const auto labels = static_cast<int>(r.u32());
  const auto dim = r.u32();
  auto model = CrfModel::zeros(labels, dim);
  std::vector<double> flat(model.parameter_count());
  for (auto& v : flat) v = std::bit_cast<double>(r.u64());
  if (!r.at_end()) throw Error(ErrorKind::kFormat, "'" + path.string() + "' has trailing bytes");
  model.assign(flat);
  if (!model.all_finite()) throw Error(ErrorKind::kNonFinite, "'" + path.string() + "' holds NaN/Inf");
  return model;
}

}  // namespace gmner
