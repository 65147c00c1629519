// gmner: command-line entry point for the staged pipeline.
//
//   gmner run-all --config pipeline.json
//   gmner refine  --config pipeline.json --set stages.stage2=false --work-dir work/no-stage2
//   gmner config  --config pipeline.json        # print the effective config and its hash

#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gmner/gmner.hpp"
#include "gmner/http_transport.hpp"

namespace {

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string mode;
  std::string work_dir;
  bool quiet = false;
};

gmner::PipelineConfig resolve(const Options& o) {
  auto overrides = o.overrides;
  if (!o.mode.empty()) overrides.push_back("gateway.mode=\"" + o.mode + "\"");
  if (!o.work_dir.empty()) overrides.push_back("paths.work_dir=" + gmner::json(o.work_dir).dump());
  return gmner::load_config(o.config, overrides);
}

std::shared_ptr<gmner::ChatTransport> make_transport(const gmner::PipelineConfig& c) {
  if (c.gateway.mode == gmner::GatewayMode::kReplay) return nullptr;
  if (c.gateway.endpoint.empty()) {
    throw gmner::Error(gmner::ErrorKind::kConfig,
                       "config: gateway.endpoint: required in " + std::string(to_string(c.gateway.mode)) + " mode");
  }
  auto key = gmner::api_key_from_env(c.gateway.api_key_env);
  if (key.empty()) std::cerr << "warning: $" << c.gateway.api_key_env << " is not set\n";
  return std::make_shared<gmner::HttpChatTransport>(c.gateway.endpoint, std::move(key), c.gateway.timeout_s);
}

int run_command(const std::string& command, const Options& o) {
  auto config = resolve(o);
  if (command == "config") {
    std::cout << config.document.dump(2) << "\nconfig_hash: " << config.hash << "\nvariant: "
              << config.stages.variant() << '\n';
    return 0;
  }
  gmner::Pipeline pipeline(config, make_transport(config), o.quiet ? nullptr : &std::cerr);
  const int status = pipeline.run(command);
  if (!o.quiet) {
    if (const auto* m = pipeline.metrics()) {
      std::cerr << "gateway: " << m->requests << " requests, " << m->cache_hits << " cache hits, " << m->network_calls
                << " network calls, " << m->retries << " retries, " << m->failures << " failures\n";
    }
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grounded multimodal NER pipeline: CRF labeling, uncertainty-routed MLLM refinement, few-shot grounding"};
  app.require_subcommand(1);
  Options opts;
  std::string selected;

  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", opts.config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", opts.overrides, "override a config field, e.g. --set stages.stage2=false");
    sub->add_option("--mode", opts.mode, "gateway mode")->check(CLI::IsMember({"live", "record", "replay"}));
    sub->add_option("--work-dir", opts.work_dir, "artifact directory (overrides paths.work_dir)");
    sub->add_flag("-q,--quiet", opts.quiet, "suppress progress output");
    sub->callback([&selected, name] { selected = name; });
  };
  add("synthesize", "Stage 1: refine the guideline table and synthesize training data");
  add("train", "train the CRF on the annotated set plus synthesized data");
  add("infer", "supervised CRF predictions with entity uncertainty on the test set");
  add("refine", "Stage 2: route uncertain entities to the MLLM and merge its verdicts");
  add("select", "Stage 3: choose in-context examples for each test sentence");
  add("ground", "Stage 3: few-shot visual grounding of the refined entities");
  add("eval", "score predictions against the test set (exit 3 below eval.f1_gate)");
  add("run-all", "run every stage in order, respecting the stage switches");
  add("config", "print the effective config, its hash and the ablation variant");

  CLI11_PARSE(app, argc, argv);
  try {
    return run_command(selected, opts);
  } catch (const gmner::Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
