#pragma once

// Oracles and helpers shared by the unit tests and the acceptance binary.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "gmner/gmner.hpp"

namespace gmner::testing {

namespace fs = std::filesystem;

inline fs::path fixture_dir() { return fs::path(GMNER_SOURCE_DIR) / "tests" / "fixtures"; }
inline fs::path prompts_dir() { return fs::path(GMNER_SOURCE_DIR) / "prompts"; }

inline std::string slurp(const fs::path& p) { return detail::read_file(p); }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("gmner-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// CRF enumeration oracle

struct CrfInstance {
  CrfModel model;
  Matrix features;
};

inline CrfInstance random_crf(std::mt19937_64& rng, std::size_t max_n = 6, int max_l = 4, std::size_t max_d = 3,
                              double scale = 1.5) {
  std::uniform_int_distribution<std::size_t> n_dist(1, max_n);
  std::uniform_int_distribution<int> l_dist(1, max_l);
  std::uniform_int_distribution<std::size_t> d_dist(1, max_d);
  std::uniform_real_distribution<double> u(-scale, scale);
  CrfInstance inst;
  inst.model = CrfModel::zeros(l_dist(rng), d_dist(rng));
  auto flat = inst.model.flatten();
  for (auto& v : flat) v = u(rng);
  inst.model.assign(flat);
  inst.features = Matrix(n_dist(rng), inst.model.dim);
  for (auto& v : inst.features.data) v = u(rng);
  return inst;
}

inline std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int labels) {
  std::uniform_int_distribution<int> d(0, labels - 1);
  std::vector<int> out(n);
  for (auto& y : out) y = d(rng);
  return out;
}

struct Enumeration {
  double log_z = 0.0;
  Matrix marginals;
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<int> best_labels;  // lexicographically first among maxima
};

/// Scores every one of the L^n label sequences directly.
inline Enumeration enumerate(const CrfModel& model, const Matrix& features) {
  const std::size_t n = features.rows;
  const auto l = static_cast<std::size_t>(model.label_count);
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= l;
  std::vector<double> scores;
  std::vector<std::vector<int>> paths;
  for (std::size_t code = 0; code < total; ++code) {  // position 0 is the most significant digit
    std::vector<int> y(n);
    auto rest = code;
    for (std::size_t i = n; i-- > 0;) {
      y[i] = static_cast<int>(rest % l);
      rest /= l;
    }
    scores.push_back(sequence_score_features(model, features, y));
    paths.push_back(std::move(y));
  }
  Enumeration e;
  double hi = -std::numeric_limits<double>::infinity();
  for (double s : scores) hi = std::max(hi, s);
  double acc = 0.0;
  for (double s : scores) acc += std::exp(s - hi);
  e.log_z = hi + std::log(acc);
  e.marginals = Matrix(n, l);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const double p = std::exp(scores[k] - e.log_z);
    for (std::size_t i = 0; i < n; ++i) e.marginals(i, static_cast<std::size_t>(paths[k][i])) += p;
    if (scores[k] > e.best_score) {
      e.best_score = scores[k];
      e.best_labels = paths[k];
    }
  }
  return e;
}

inline double nll(const CrfModel& model, const Matrix& features, const std::vector<int>& gold) {
  return log_partition(model, features) - sequence_score_features(model, features, gold);
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central differences. Relative to max(|a| + |f|, floor).
inline double gradient_check(const CrfModel& model, const Matrix& features, const std::vector<int>& gold,
                             double eps = 1e-5, double floor = 1e-4) {
  const auto analytic = nll_and_gradient(model, features, gold).gradient.flatten();
  auto params = model.flatten();
  CrfModel probe = model;
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const double keep = params[p];
    params[p] = keep + eps;
    probe.assign(params);
    const double up = nll(probe, features, gold);
    params[p] = keep - eps;
    probe.assign(params);
    const double down = nll(probe, features, gold);
    params[p] = keep;
    const double fd = (up - down) / (2 * eps);
    const double rel = std::abs(analytic[p] - fd) / std::max(std::abs(analytic[p]) + std::abs(fd), floor);
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Gateway stubs

inline HttpReply ok_reply(const std::string& text) {
  return HttpReply{200, json{{"choices", json::array({json{{"message", {{"role", "assistant"}, {"content", text}}}}})}}.dump(),
                   "", std::nullopt};
}

/// Transport answering through a callback; records every body it sees.
class StubTransport : public ChatTransport {
 public:
  using Handler = std::function<HttpReply(const std::string& body, std::size_t call)>;

  explicit StubTransport(Handler h) : handler_(std::move(h)) {}

  /// Always replies with the given assistant text.
  static std::shared_ptr<StubTransport> constant(std::string text) {
    return std::make_shared<StubTransport>([t = std::move(text)](const std::string&, std::size_t) { return ok_reply(t); });
  }

  HttpReply post(const std::string& body) override {
    std::size_t call = 0;
    {
      std::lock_guard lock(mu_);
      call = bodies_.size();
      bodies_.push_back(body);
    }
    return handler_(body, call);
  }
  std::string provider_id() const override { return "stub"; }

  std::vector<std::string> bodies() const {
    std::lock_guard lock(mu_);
    return bodies_;
  }

 private:
  Handler handler_;
  mutable std::mutex mu_;
  std::vector<std::string> bodies_;
};

inline GatewayConfig fast_gateway(GatewayMode mode) {
  GatewayConfig c;
  c.mode = mode;
  c.backoff_initial = std::chrono::milliseconds(1);
  c.backoff_max = std::chrono::milliseconds(4);
  return c;
}

/// The user-visible text of the first message in a provider body.
inline std::string prompt_of(const std::string& body) {
  const auto j = json::parse(body);
  return j.at("messages").at(0).at("content").at(0).at("text").get<std::string>();
}

// ---------------------------------------------------------------------------
// Datasets

inline std::vector<GmnerTriplet> all_triplets(const std::vector<AnnotatedSample>& samples) {
  std::vector<GmnerTriplet> out;
  for (const auto& s : samples) out.insert(out.end(), s.triplets.begin(), s.triplets.end());
  return out;
}

inline Schema e2e_schema() { return Schema({"PER", "ORG", "LOC", "WEAPON"}); }

// ---------------------------------------------------------------------------
// Synthesis fixtures

struct SynthesisCase {
  std::string name;
  SynthesisStrategy strategy;
  std::string reply;
  std::vector<std::string> rejected;
  std::size_t accepted = 0;
};

struct SynthesisFixture {
  Schema schema;
  AnnotatedSample seed;
  std::vector<SynthesisCase> cases;
};

inline SynthesisFixture load_synthesis_fixture() {
  const auto j = json::parse(slurp(fixture_dir() / "synthesis" / "cases.json"));
  SynthesisFixture f;
  f.schema = Schema(j.at("schema").get<std::vector<std::string>>());
  f.seed = parse_record(j.at("seed"), 1, f.schema);
  for (const auto& c : j.at("cases")) {
    f.cases.push_back({c.at("name").get<std::string>(), synthesis_strategy_from_string(c.at("strategy").get<std::string>()),
                       c.at("reply").get<std::string>(), c.at("rejected").get<std::vector<std::string>>(),
                       c.at("accepted").get<std::size_t>()});
  }
  return f;
}

/// Runs one canned reply through synthesize() with count_per_seed = 1.
inline SynthesisResult run_synthesis_case(const SynthesisFixture& f, const SynthesisCase& c) {
  LlmGateway gateway(fast_gateway(GatewayMode::kLive), nullptr, StubTransport::constant(c.reply));
  PromptTemplates templates(prompts_dir());
  LlmContext llm{gateway, templates, "stub-llm", 0.0};
  return synthesize({f.seed}, GuidelineTable::initial(f.schema), c.strategy, 1, f.schema, llm);
}

/// Multiset of (surface, type) pairs.
inline std::multiset<SurfaceMention> mention_bag(const std::vector<MentionSpan>& ms) {
  const auto v = surface_mentions(ms);
  return {v.begin(), v.end()};
}

inline bool paraphrase_preserved(const SynthesizedSample& s, const AnnotatedSample& seed) {
  return mention_bag(s.entities) == mention_bag(seed.mentions());
}

// ---------------------------------------------------------------------------
// End-to-end fixture

inline fs::path e2e_config_path() { return fixture_dir() / "e2e" / "pipeline.json"; }

/// Loads the e2e fixture config in REPLAY mode writing into `work_dir`.
inline PipelineConfig e2e_config(const fs::path& work_dir, std::vector<std::string> overrides = {}) {
  overrides.push_back("paths.work_dir=" + json(work_dir.string()).dump());
  overrides.push_back("gateway.mode=\"replay\"");
  return load_config(e2e_config_path(), overrides);
}

inline EvalReport run_e2e(const fs::path& work_dir, std::vector<std::string> overrides = {}) {
  Pipeline p(e2e_config(work_dir, std::move(overrides)));
  return p.run_all();
}

}  // namespace gmner::testing
