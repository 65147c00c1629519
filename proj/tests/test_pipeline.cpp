#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"

namespace gmner {
namespace {

using testing::e2e_config;
using testing::e2e_config_path;
using testing::TempDir;

json minimal_config() {
  return json{{"config_version", 1},
              {"schema", json::array({"PER", "LOC"})},
              {"paths",
               {{"train", "data/train.jsonl"},
                {"test", "data/test.jsonl"},
                {"token_store", "stores/tokens.emb"},
                {"sentence_store", "stores/sentences.emb"},
                {"entity_store", "stores/entities.emb"},
                {"image_store", "stores/images.emb"}}}};
}

ErrorKind config_error_kind(const json& doc, const std::vector<std::string>& overrides, std::string* what) {
  try {
    parse_config(doc, ".", overrides);
  } catch (const Error& e) {
    *what = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "config accepted";
  return ErrorKind::kConfig;
}

void expect_config_error(const json& doc, const std::vector<std::string>& overrides, const std::string& field) {
  std::string what;
  EXPECT_EQ(config_error_kind(doc, overrides, &what), ErrorKind::kConfig);
  EXPECT_NE(what.find(field), std::string::npos) << what;
}

TEST(Config, DefaultsFillAMinimalDocument) {
  const auto c = parse_config(minimal_config(), "/base");
  EXPECT_EQ(c.schema.size(), 2u);
  EXPECT_EQ(c.selector.k, 3u);
  EXPECT_EQ(c.gateway.max_retries, 3);
  EXPECT_TRUE(c.refine.allow_add);
  EXPECT_EQ(c.stages.variant(), "full");
  EXPECT_EQ(c.paths.train, fs::path("/base") / "data/train.jsonl");
  EXPECT_EQ(c.hash.size(), 64u);
}

TEST(Config, ErrorsNameTheOffendingField) {
  expect_config_error(minimal_config(), {"router.gamma=1"}, "router.gamma: unknown field");
  expect_config_error(minimal_config(), {"config_version=2"}, "config_version");
  expect_config_error(minimal_config(), {"schema=[]"}, "schema");
  expect_config_error(minimal_config(), {"eval.f1_gate=1.5"}, "eval.f1_gate");
  expect_config_error(minimal_config(), {"selector.lambda=[1,2]"}, "selector.lambda");
  expect_config_error(minimal_config(), {"selector.k=0"}, "selector.k");
  expect_config_error(minimal_config(), {"stages.example_selection=\"random\""}, "stages.example_selection");
  expect_config_error(minimal_config(), {"gateway.mode=\"offline\""}, "gateway.mode");
  expect_config_error(minimal_config(), {"gateway.max_in_flight=65"}, "gateway.max_in_flight");
  expect_config_error(minimal_config(), {"train.batch_size=0"}, "train.batch_size");
  expect_config_error(minimal_config(), {"synthesis.strategies=[\"rewrite\"]"}, "synthesis.strategies");
  expect_config_error(minimal_config(), {"router=3"}, "router: expected object");
  auto no_train = minimal_config();
  no_train["paths"].erase("train");
  expect_config_error(no_train, {}, "paths.train: required");
}

TEST(Config, RejectsMalformedOverrides) {
  std::string what;
  EXPECT_EQ(config_error_kind(minimal_config(), {"router.beta"}, &what), ErrorKind::kConfig);
  EXPECT_NE(what.find("field.path=value"), std::string::npos) << what;
  EXPECT_EQ(config_error_kind(minimal_config(), {"=1"}, &what), ErrorKind::kConfig);
}

TEST(Config, OverrideValuesParseAsJsonWhenPossible) {
  const auto c = parse_config(minimal_config(), ".", {"router.beta=0.25", "gateway.llm_model=gpt-x", "stages.stage2=false"});
  EXPECT_DOUBLE_EQ(c.router.beta, 0.25);
  EXPECT_EQ(c.gateway.llm_model, "gpt-x");  // not JSON, kept as a string
  EXPECT_FALSE(c.stages.stage2);
}

TEST(Config, SchemaEntriesMayCarryDescriptions) {
  auto doc = minimal_config();
  doc["schema"] = json::array({json{{"type", "PER"}, {"description", "people"}}, "LOC"});
  const auto c = parse_config(doc, ".");
  EXPECT_EQ(c.descriptions.at("PER"), "people");
  EXPECT_EQ(c.descriptions.count("LOC"), 0u);
}

TEST(Config, VariantLabels) {
  StageSwitches s;
  EXPECT_EQ(s.variant(), "full");
  s.dynamic_examples = false;
  EXPECT_EQ(s.variant(), "w/o mes");
  s.stage3 = false;
  EXPECT_EQ(s.variant(), "w/o stage3");  // fixed examples only matter with stage 3 on
  s = StageSwitches{};
  s.stage1 = false;
  s.stage2 = false;
  EXPECT_EQ(s.variant(), "w/o stage1 stage2");
}

TEST(Config, HashIgnoresRuntimeOnlySettings) {
  const auto base = parse_config(minimal_config(), ".");
  for (const auto& o : {"paths.work_dir=\"elsewhere\"", "gateway.mode=\"live\"", "gateway.max_in_flight=1",
                        "gateway.timeout_s=5", "gateway.max_retries=0", "eval.f1_gate=0.5"}) {
    EXPECT_EQ(parse_config(minimal_config(), ".", {o}).hash, base.hash) << o;
  }
  for (const auto& o : {"seed=14", "router.beta=0.3", "stages.stage1=false", "gateway.mllm_model=\"other\"",
                        "train.epochs=3"}) {
    EXPECT_NE(parse_config(minimal_config(), ".", {o}).hash, base.hash) << o;
  }
}

TEST(Config, LoadReportsMissingAndInvalidFiles) {
  TempDir dir("config");
  try {
    load_config(dir / "absent.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
  std::ofstream(dir / "bad.json") << "{ not json";
  try {
    load_config(dir / "bad.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(Config, RelativePathsResolveAgainstTheConfigFile) {
  const auto c = load_config(e2e_config_path());
  EXPECT_EQ(c.paths.train, e2e_config_path().parent_path() / "train.jsonl");
  EXPECT_TRUE(fs::exists(c.paths.token_store));
}

TEST(Artifacts, RoundTripCarriesProvenance) {
  TempDir dir("artifacts");
  ArtifactStore store(dir.path(), "aaaa", 13, "full");
  store.write_json("report.json", json{{"x", 1}});
  store.write_jsonl("refined.jsonl", {json{{"id", "a"}}, json{{"id", "b"}}});
  EXPECT_EQ(store.read_json("report.json")["x"], 1);
  EXPECT_EQ(store.read_json("report.json")["_meta"]["seed"], 13);
  const auto rows = store.read_jsonl("refined.jsonl");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1]["id"], "b");
  EXPECT_FALSE(fs::exists(dir / "report.json.tmp"));
}

TEST(Artifacts, MissingArtifactNamesItsProducer) {
  TempDir dir("artifacts");
  ArtifactStore store(dir.path(), "aaaa", 13, "full");
  try {
    store.read_jsonl("selection.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDependency);
    EXPECT_NE(std::string(e.what()).find("run 'select' first"), std::string::npos) << e.what();
  }
}

TEST(Artifacts, ForeignConfigHashIsRejected) {
  TempDir dir("artifacts");
  ArtifactStore(dir.path(), "aaaa", 13, "full").write_jsonl("supervised.jsonl", {});
  ArtifactStore other(dir.path(), "bbbb", 13, "full");
  try {
    other.read_jsonl("supervised.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kProvenance);
    EXPECT_NE(std::string(e.what()).find("rerun 'infer'"), std::string::npos) << e.what();
  }
}

TEST(Artifacts, MissingHeaderIsRejected) {
  TempDir dir("artifacts");
  std::ofstream(dir / "refined.jsonl") << R"({"id":"a","mentions":[]})" << "\n";
  std::ofstream(dir / "report.json") << R"({"x":1})";
  std::ofstream(dir / "routing.jsonl") << "";
  ArtifactStore store(dir.path(), "aaaa", 13, "full");
  for (const auto& name : {"refined.jsonl", "routing.jsonl"}) {
    try {
      store.read_jsonl(name);
      ADD_FAILURE() << name;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kProvenance) << name;
    }
  }
  try {
    store.read_json("report.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kProvenance);
  }
}

TEST(Artifacts, EveryArtifactHasAProducer) {
  for (const auto& name : {"guideline.json", "synthesized.jsonl", "crf.bin", "supervised.jsonl", "routing.jsonl",
                           "refined.jsonl", "selection.jsonl", "predictions.jsonl", "report.json"}) {
    const auto p = producer_of(name);
    const auto& cmds = pipeline_commands();
    EXPECT_NE(std::find(cmds.begin(), cmds.end(), p), cmds.end()) << name;
  }
}

TEST(Pipeline, StagesRefuseToRunOutOfOrder) {
  TempDir dir("pipeline");
  Pipeline p(e2e_config(dir.path()));
  const std::vector<std::pair<std::string, std::string>> cases{
      {"train", "synthesize"}, {"infer", "train"}, {"refine", "infer"},
      {"select", "refine"},    {"ground", "refine"}, {"eval", "ground"}};
  for (const auto& [cmd, producer] : cases) {
    try {
      p.run(cmd);
      ADD_FAILURE() << cmd << " ran without inputs";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kDependency) << cmd;
      EXPECT_NE(std::string(e.what()).find("run '" + producer + "' first"), std::string::npos) << e.what();
    }
  }
}

TEST(Pipeline, UnknownCommandIsRejected) {
  TempDir dir("pipeline");
  Pipeline p(e2e_config(dir.path()));
  try {
    p.run("deploy");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
}

// One full fixture run shared by the tests below; REPLAY makes it offline.
class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline-run");
    std::ostringstream log;
    Pipeline p(e2e_config(dir_->path()), nullptr, &log);
    report_ = new EvalReport(p.run_all());
    log_ = new std::string(log.str());
  }
  static void TearDownTestSuite() {
    delete dir_;
    delete report_;
    delete log_;
  }
  static TempDir* dir_;
  static EvalReport* report_;
  static std::string* log_;
};

TempDir* PipelineRun::dir_ = nullptr;
EvalReport* PipelineRun::report_ = nullptr;
std::string* PipelineRun::log_ = nullptr;

TEST_F(PipelineRun, WritesEveryArtifactUnderTheSameConfig) {
  const auto config = e2e_config(dir_->path());
  ArtifactStore store(dir_->path(), config.hash, config.seed, "full");
  for (const auto& name : {"guideline.json", "synthesis_report.json", "crf.json", "report.json"}) {
    EXPECT_NO_THROW(store.read_json(name)) << name;
  }
  for (const auto& name : {"synthesized.jsonl", "supervised.jsonl", "routing.jsonl", "refined.jsonl",
                           "selection.jsonl", "predictions.jsonl"}) {
    EXPECT_NO_THROW(store.read_jsonl(name)) << name;
  }
  EXPECT_TRUE(fs::exists(dir_->path() / "crf.bin"));
  EXPECT_NE(log_->find("eval: GMNER F1"), std::string::npos);
}

TEST_F(PipelineRun, ReportMatchesAFreshScoreOfThePredictions) {
  const auto config = e2e_config(dir_->path());
  const auto test = load_dataset(config.paths.test, config.schema);
  const auto pred = Pipeline::read_predictions(Pipeline(config).artifacts().read_jsonl("predictions.jsonl"), test,
                                               config.schema);
  const auto fresh = score(pred, testing::all_triplets(test));
  EXPECT_EQ(fresh.gmner.correct, report_->gmner.correct);
  EXPECT_EQ(fresh.gmner.predicted, report_->gmner.predicted);
  EXPECT_EQ(fresh.gmner.gold, report_->gmner.gold);
  EXPECT_EQ(fresh.ner.correct, report_->ner.correct);
}

TEST_F(PipelineRun, RerunningIsByteIdentical) {
  TempDir again("pipeline-again");
  testing::run_e2e(again.path());
  for (const auto& name : {"crf.bin", "synthesized.jsonl", "refined.jsonl", "selection.jsonl", "predictions.jsonl",
                           "report.json"}) {
    EXPECT_EQ(testing::slurp(dir_->path() / name), testing::slurp(again / name)) << name;
  }
}

TEST_F(PipelineRun, EvalBelowTheGateReturnsThree) {
  Pipeline strict(e2e_config(dir_->path(), {"eval.f1_gate=0.99"}));
  EXPECT_EQ(strict.run("eval"), 3);
  Pipeline lenient(e2e_config(dir_->path(), {"eval.f1_gate=0.0"}));
  EXPECT_EQ(lenient.run("eval"), 0);
}

TEST_F(PipelineRun, ChangedConfigCannotReuseArtifacts) {
  Pipeline reseeded(e2e_config(dir_->path(), {"seed=14"}));
  try {
    reseeded.run("eval");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kProvenance);
    EXPECT_NE(std::string(e.what()).find("rerun 'ground'"), std::string::npos) << e.what();
  }
}

TEST_F(PipelineRun, PredictionsMustCoverEveryTestSentence) {
  const auto config = e2e_config(dir_->path());
  const auto test = load_dataset(config.paths.test, config.schema);
  auto records = Pipeline(config).artifacts().read_jsonl("predictions.jsonl");
  ASSERT_FALSE(records.empty());
  auto missing = records;
  missing.pop_back();
  EXPECT_THROW(Pipeline::read_predictions(missing, test, config.schema), Error);
  auto repeated = records;
  repeated.push_back(records.front());
  EXPECT_THROW(Pipeline::read_predictions(repeated, test, config.schema), Error);
}

}  // namespace
}  // namespace gmner
