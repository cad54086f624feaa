#include <iostream>

#include "CLI11.hpp"
#include "crpaml/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace crpaml::pipeline;
  CLI::App app{"CRP-AML: context, risk and prediction for anti-money-laundering"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool no_filter = false;
  std::vector<std::string> inputs;

  for (auto name : kCommands) {
    auto* sub = app.add_subcommand(std::string(name));
    sub->add_option("--config,-c", config_path, "INI config file");
    sub->add_option("--set", overrides, "section.key=value override (repeatable)");
    sub->add_option("--seed", seed, "use this single seed");
    sub->add_flag("--no-risk-filter", no_filter, "skip the risk filter");
    if (name == "report") sub->add_option("inputs", inputs, "metrics files or run directories (default: latest run)");
  }
  app.get_subcommand("synth")->description("generate a labeled synthetic CSV");
  app.get_subcommand("ingest")->description("parse the input CSV into the transaction store");
  app.get_subcommand("profile")->description("fit the profiler and snapshot account profiles");
  app.get_subcommand("fit-risk")->description("fit risk-indicator tables");
  app.get_subcommand("train")->description("train one checkpoint per seed (and the ablation)");
  app.get_subcommand("evaluate")->description("score the held-out split and write a report");
  app.get_subcommand("score")->description("write held-out predictions for the case service");
  app.get_subcommand("serve")->description("serve flagged cases over HTTP");
  app.get_subcommand("report")->description("aggregate metrics as mean ± std");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  Context ctx;
  try {
    if (seed) {
      overrides.push_back("train.seeds=" + std::to_string(*seed));
      overrides.push_back("score.seed=" + std::to_string(*seed));
    }
    if (no_filter) overrides.push_back("risk.filter=false");
    ctx.config = Config::load(config_path, overrides);
  } catch (const std::exception& e) {
    std::cerr << "crpaml " << command << ": error: " << e.what() << "\n";
    return 2;
  }
  return run_command(command, ctx, inputs);
}
