// Copyright 2026 The lbw Authors
// SPDX-License-Identifier: Apache-2.0
//
// lbw: desk-scale workbench for language-as-trigger backdoors in tiny
// transformer models. Pipelines run stage by stage into a manifest-tracked
// output directory and resume where they left off.
#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "lbw/runner.hpp"

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string recipe_name;
  std::string out_dir = "runs/out";
  bool resume = false;
  int threads = 1;
  uint64_t seed = 0;
  bool seed_set = false;
};

lbw::runner::ExperimentConfig resolve_config(const GlobalArgs& args) {
  if (!args.config_path.empty()) {
    return lbw::runner::ExperimentConfig::load(args.config_path);
  }
  if (!args.recipe_name.empty()) {
    return lbw::runner::recipe(args.recipe_name);
  }
  lbw::fail(lbw::ErrorKind::config, "no configuration given: pass --config or --recipe");
}

int run_stages(const GlobalArgs& args, const std::vector<std::string>& only) {
  lbw::runner::ExperimentConfig config = resolve_config(args);
  lbw::runner::RunOptions opts;
  opts.out_dir = args.out_dir;
  opts.resume = args.resume;
  opts.threads = args.threads;
  opts.only_stages = only;
  if (args.seed_set) opts.seed_override = args.seed;
  lbw::runner::RunManifest manifest = lbw::runner::run_experiment(config, opts);
  std::printf("run complete: %zu stage(s) recorded\n", manifest.stages.size());
  std::printf("manifest: %s/manifest.json\n", args.out_dir.c_str());
  std::printf("stable hash: %s\n", manifest.stable_hash().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lbw - lingual-backdoor workbench"};
  app.require_subcommand(1);

  GlobalArgs args;
  app.add_option("--config", args.config_path, "Experiment config JSON path");
  app.add_option("--recipe", args.recipe_name, "Packaged recipe name (see `lbw recipes`)");
  app.add_option("--out", args.out_dir, "Run output directory");
  app.add_flag("--resume", args.resume, "Skip hash-verified completed stages");
  app.add_option("--threads", args.threads, "Worker threads for search/eval sweeps");
  auto* seed_opt =
      app.add_option("--seed", args.seed, "Master seed overriding every named config seed");

  auto* run_cmd = app.add_subcommand("run", "Execute every configured stage");
  const std::vector<std::string> stage_names = {
      "gen-data", "train-clean", "poison", "train-backdoor", "pgcg",
      "advtrain", "eval",        "defend", "ablate",         "report"};
  std::map<std::string, CLI::App*> stage_cmds;
  for (const auto& name : stage_names) {
    stage_cmds[name] = app.add_subcommand(name, "Run only the " + name + " stage");
  }
  auto* recipes_cmd = app.add_subcommand("recipes", "List packaged experiment recipes");

  CLI11_PARSE(app, argc, argv);
  args.seed_set = seed_opt->count() > 0;

  try {
    if (recipes_cmd->parsed()) {
      for (const auto& name : lbw::runner::recipe_names()) {
        std::printf("%s\n", name.c_str());
      }
      return 0;
    }
    if (run_cmd->parsed()) return run_stages(args, {});
    for (const auto& [name, cmd] : stage_cmds) {
      if (cmd->parsed()) return run_stages(args, {name});
    }
  } catch (const lbw::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
