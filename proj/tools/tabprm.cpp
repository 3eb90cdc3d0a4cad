#include <CLI11.hpp>

#include <iostream>

#include "tabprm/commands.hpp"

int main(int argc, char** argv) {
  using namespace tabprm;
  CLI::App app{"Table-grounded step verification and test-time scaling"};
  app.require_subcommand(1);

  std::string config, dataset, trajectories, query, table, strategy, out;
  std::int64_t seed = 0;
  std::vector<std::size_t> n_values;

  auto overrides = [&](CLI::App* cmd) {
    CliOverrides o;
    if (!out.empty()) o.out = out;
    if (cmd->count("--seed")) o.seed = seed;
    o.n_values = n_values;
    if (!strategy.empty()) o.strategy = strategy;
    return o;
  };
  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "engine config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "output location");
    cmd->add_option("--seed", seed, "override the config seed");
  };

  auto* tts = app.add_subcommand("tts", "test-time scaling");
  tts->require_subcommand(1);
  auto* run = tts->add_subcommand("run", "evaluate a dataset with the configured search");
  common(run);
  run->add_option("--dataset", dataset, "tasks (JSONL)")->required();
  run->add_option("--n", n_values, "candidate budgets to sweep")->delimiter(',');
  run->add_option("--strategy", strategy, "best_of_n | beam | dvts | majority | judge");

  auto* curate = app.add_subcommand("curate", "build labeled training instances");
  common(curate);
  curate->add_option("--dataset,--tasks", dataset, "tasks (JSONL)")->required();

  auto* theorem = app.add_subcommand("theorem", "exact MDP checks and bound trials");
  common(theorem);

  auto* probe = app.add_subcommand("probe", "retrieval sensitivity probe");
  common(probe);
  probe->add_option("--trajectories", trajectories, "JSONL of {task, trajectory}")->required();

  auto* score = app.add_subcommand("score", "verify trajectories offline");
  common(score);
  score->add_option("--trajectories", trajectories, "JSONL of {task, trajectory}")->required();

  auto* sandbox = app.add_subcommand("sandbox", "run one table query");
  sandbox->add_option("query", query, "query text")->required();
  sandbox->add_option("--table", table, "table file (.csv, .tsv, .json)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (run->parsed()) return cmd_tts_run(config, dataset, overrides(run), std::cout, std::cerr);
  if (curate->parsed()) return cmd_curate(config, dataset, overrides(curate), std::cout, std::cerr);
  if (theorem->parsed()) return cmd_theorem(config, overrides(theorem), std::cout, std::cerr);
  if (probe->parsed()) return cmd_probe(config, trajectories, overrides(probe), std::cout, std::cerr);
  if (score->parsed()) return cmd_score(config, trajectories, overrides(score), std::cout, std::cerr);
  if (sandbox->parsed()) return cmd_sandbox(query, table, std::cout, std::cerr);
  return kExitUsage;
}
