#include "tabprm/commands.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <random>

#include "tabprm/dsl.hpp"

namespace tabprm {

namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const Json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_jsonl(const fs::path& path, const std::vector<Json>& lines) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) out << l.dump() << '\n';
}

Json embedded(const EngineConfig& c) {
  Json j = c.raw;
  j["seed"] = c.seed;
  return j;
}

std::vector<TaskInstance> read_tasks(const fs::path& path) {
  if (!fs::exists(path)) throw TaskError(TaskError::Code::Io, 0, "dataset not found: " + path.string());
  return load_tasks(path);
}

std::unique_ptr<StepVerifier> probe_verifier(const EngineConfig& c, std::span<const ProbeItem> items) {
  if (c.verifier.kind != "region_oracle") return make_verifier(c.verifier, c.cache_dir);
  std::map<std::string, TableRegion> gold;
  for (const auto& item : items)
    for (const auto& step : item.trajectory.steps)
      if (step.category == StepCategory::TableRetrieval && step.cited_region) {
        gold.emplace(item.trajectory.id, *step.cited_region);
        break;
      }
  return std::make_unique<RegionOracleVerifier>(std::move(gold));
}

// Shared error mapping for subcommands.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TaskError& e) {
    err << "dataset error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CurationError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TableError& e) {
    err << "table error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << '\n';
    return e.code() == BackendError::Code::Config ? kExitUsage : kExitBackend;
  } catch (const Json::exception& e) {
    err << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitVerification;
  }
}

}  // namespace

EngineConfig resolve_config(const fs::path& path, const CliOverrides& overrides) {
  EngineConfig c = load_config(path);
  Json raw = c.raw;
  if (overrides.seed) raw["seed"] = *overrides.seed;
  if (!raw.contains("seed")) raw["seed"] = 0;
  if (overrides.strategy) raw["search"]["strategy"] = *overrides.strategy;
  if (!overrides.n_values.empty()) raw["search"]["n_values"] = overrides.n_values;
  if (overrides.out) raw["output_dir"] = fs::absolute(*overrides.out).lexically_normal().string();
  try {
    return parse_config(raw, c.base_dir);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

int cmd_tts_run(const fs::path& config_path, const fs::path& dataset_path, const CliOverrides& overrides,
                std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto config = resolve_config(config_path, overrides);
    auto tasks = read_tasks(dataset_path);
    if (!config.policy) throw ConfigError("backends.policy is required");
    auto policy = make_backend(*config.policy, config.cache_dir);
    std::unique_ptr<StepVerifier> verifier;
    std::shared_ptr<Backend> judge;
    if (config.search.strategy == Strategy::Judge) {
      if (!config.judge) throw ConfigError("the judge strategy needs backends.judge");
      judge = make_backend(*config.judge, config.cache_dir);
    } else if (config.search.strategy != Strategy::Majority) {
      verifier = make_verifier(config.verifier, config.cache_dir);
    }
    auto report = evaluate_dataset(tasks, *policy, verifier.get(), judge.get(), config.search, config.n_values,
                                   embedded(config));
    write_eval_report(report, config.output_dir);
    out << "accuracy " << report.accuracy << " over " << report.per_task.size() << " runs; reports in "
        << config.output_dir.string() << '\n';
    std::size_t backend_failures = 0;
    for (const auto& r : report.per_task)
      if (r.error) {
        err << "task " << r.id << " (n=" << r.n << "): " << *r.error << '\n';
        if (r.error->rfind("backend: ", 0) == 0) ++backend_failures;
      }
    return backend_failures ? kExitBackend : kExitOk;
  });
}

int cmd_curate(const fs::path& config_path, const fs::path& tasks_path, const CliOverrides& overrides,
               std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    CliOverrides o = overrides;
    o.out.reset();
    auto config = resolve_config(config_path, o);
    auto tasks = read_tasks(tasks_path);
    if (tasks.empty()) throw ConfigError("no tasks in " + tasks_path.string());
    if (!config.judge) throw ConfigError("curation needs backends.judge");

    std::vector<PolicySource> sources;
    SamplingParams policy_params;
    if (!config.curation_policies.empty()) {
      for (const auto& [id, ref] : config.curation_policies)
        sources.push_back({id, make_backend(ref, config.cache_dir)});
      policy_params = config.curation_policies.front().second.params;
    } else if (config.policy) {
      sources.push_back({config.policy->model, make_backend(*config.policy, config.cache_dir)});
      policy_params = config.policy->params;
    } else {
      throw ConfigError("curation needs curation.policies or backends.policy");
    }
    auto judge = make_backend(*config.judge, config.cache_dir);
    CurationParams params;
    params.policy_params = policy_params;
    params.judge_params = config.judge->params;
    params.seed = config.seed;
    params.concurrency = config.search.concurrency;

    fs::path target = overrides.out ? *overrides.out : config.output_dir / "instances.jsonl";
    auto counters = run_curation(tasks, sources, config.samples_per_task, *judge, params, target);
    Json summary{{"config", embedded(config)},
                 {"seed", config.seed},
                 {"output", target.string()},
                 {"counters",
                  {{"pool", counters.pool},
                   {"accepted", counters.accepted},
                   {"rejected", counters.pool - counters.accepted},
                   {"dropped", counters.dropped_labels},
                   {"flags", counters.flags},
                   {"written", counters.written},
                   {"skipped", counters.skipped}}}};
    out << summary["counters"].dump() << '\n';
    fs::path summary_path = target;
    summary_path += ".summary.json";
    write_json(summary_path, summary);
    return kExitOk;
  });
}

TheoremOutcome run_theorem(const EngineConfig& config, const fs::path& dir) {
  const auto& th = config.theorem;
  TheoremOutcome outcome;

  double pdl_max = 0.0;
  for (std::size_t i = 0; i < th.pdl_instances; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(th.trials.seed), 1u, static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    auto mdp = npg::random_mdp(rng, th.pdl_sizes);
    auto pi = npg::random_policy(rng, mdp);
    auto pi2 = npg::random_policy(rng, mdp);
    double r = std::fabs(npg::pdl_residual(mdp, pi, pi2));
    pdl_max = std::max(pdl_max, r);
    if (!(r <= th.pdl_tolerance))
      outcome.violations.push_back(Json{{"suite", "pdl"},
                                        {"index", i},
                                        {"residual", r},
                                        {"mdp", npg::mdp_to_json(mdp)},
                                        {"policy", npg::matrix_to_json(pi)},
                                        {"new_policy", npg::matrix_to_json(pi2)}});
  }
  outcome.pdl_ok = pdl_max <= th.pdl_tolerance;

  std::size_t decayed = 0;
  for (std::size_t i = 0; i < th.first_order_instances; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(th.trials.seed), 2u, static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    auto inst = npg::single_state_instance(rng, 5);
    auto curve = npg::first_order_check(inst.mdp, inst.pi, inst.rewards, th.first_order_gammas);
    if (npg::decays(th.first_order_gammas, curve, th.first_order_min_decay)) ++decayed;
  }
  double fraction = th.first_order_instances ? static_cast<double>(decayed) / th.first_order_instances : 1.0;
  outcome.first_order_ok = fraction >= th.first_order_min_fraction;
  if (!outcome.first_order_ok)
    outcome.violations.push_back(Json{{"suite", "first_order"}, {"decayed_fraction", fraction}});

  npg::UpdateFn update = npg::npg_update;
  if (th.faulty_update)
    update = [](const npg::Policy& pi, const npg::Matrix& a, const npg::Matrix& r, double g) {
      return npg::npg_update(pi, -a, -r, g);
    };
  fs::path audit = dir.empty() ? fs::path{} : dir / "bound_audit.jsonl";
  auto summary = npg::falsify_bound(th.trials, audit, update,
                                    [&](std::size_t i, const npg::TrialInstance& inst, const npg::BoundReport& r) {
                                      Json v = npg::instance_to_json(i, inst, r);
                                      v["suite"] = "bound";
                                      outcome.violations.push_back(std::move(v));
                                    });
  outcome.bound_ok = summary.violations == 0;

  outcome.summary = Json{{"config", embedded(config)},
                         {"seed", config.seed},
                         {"pdl", {{"instances", th.pdl_instances}, {"max_residual", pdl_max}, {"ok", outcome.pdl_ok}}},
                         {"first_order",
                          {{"instances", th.first_order_instances},
                           {"gammas", th.first_order_gammas},
                           {"decayed_fraction", fraction},
                           {"ok", outcome.first_order_ok}}},
                         {"bound", npg::summary_to_json(summary)},
                         {"ok", outcome.ok()}};
  outcome.summary["bound"]["ok"] = outcome.bound_ok;
  if (!dir.empty()) {
    write_json(dir / "theorem_summary.json", outcome.summary);
    write_jsonl(dir / "violations.jsonl", outcome.violations);
  }
  return outcome;
}

int cmd_theorem(const fs::path& config_path, const CliOverrides& overrides, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto config = resolve_config(config_path, overrides);
    auto outcome = run_theorem(config, config.output_dir);
    out << "pdl " << (outcome.pdl_ok ? "ok" : "FAILED") << ", first-order "
        << (outcome.first_order_ok ? "ok" : "FAILED") << ", bound " << (outcome.bound_ok ? "ok" : "FAILED") << " ("
        << outcome.summary["bound"]["violations"].get<std::size_t>() << " violations of "
        << outcome.summary["bound"]["population"].get<std::size_t>() << ")\n";
    if (!outcome.ok()) {
      err << "verification failed; offending instances in " << (config.output_dir / "violations.jsonl").string()
          << '\n';
      return kExitVerification;
    }
    return kExitOk;
  });
}

int cmd_probe(const fs::path& config_path, const fs::path& trajectories_path, const CliOverrides& overrides,
              std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto config = resolve_config(config_path, overrides);
    if (!fs::exists(trajectories_path)) throw ConfigError("trajectory file not found: " + trajectories_path.string());
    auto items = load_probe_items(trajectories_path);
    auto verifier = probe_verifier(config, items);
    auto report = retrieval_sensitivity_probe(items, *verifier, config.probe_seed);
    Json j = probe_report_to_json(report);
    j["config"] = embedded(config);
    j["seed"] = config.seed;
    j["verifier"] = verifier->name();
    write_json(config.output_dir / "probe.json", j);
    out << "pairs " << report.pairs << ", separation rate " << report.separation_rate << '\n';
    return kExitOk;
  });
}

int cmd_sandbox(const std::string& query, const fs::path& table_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::ifstream in(table_path, std::ios::binary);
    if (!in) throw ConfigError("cannot read table " + table_path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto ext = table_path.extension().string();
    Table table = ext == ".json"  ? parse_table(bytes, TableFormat::Json)
                  : ext == ".tsv" ? parse_table(bytes, TableFormat::Csv, '\t')
                                  : parse_table(bytes, TableFormat::Csv);
    try {
      out << dsl::format_result(dsl::execute(dsl::parse_query(query), table)) << '\n';
    } catch (const dsl::QueryError& e) {
      if (e.code() == dsl::QueryError::Code::Syntax)
        err << e.what() << '\n';
      else
        err << e.code_name() << ": " << e.what() << '\n';
      return kExitUsage;
    }
    return kExitOk;
  });
}

int cmd_score(const fs::path& config_path, const fs::path& trajectories_path, const CliOverrides& overrides,
              std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto config = resolve_config(config_path, overrides);
    if (!fs::exists(trajectories_path)) throw ConfigError("trajectory file not found: " + trajectories_path.string());
    auto items = load_probe_items(trajectories_path);
    auto verifier = make_verifier(config.verifier, config.cache_dir);
    Json results = Json::array();
    for (const auto& item : items) {
      auto res = verify_trajectory(*verifier, item.task, item.trajectory, config.search.aggregator,
                                   MissingVerdict::Negative);
      Json verdicts = Json::array();
      for (const auto& v : res.verdicts) verdicts.push_back(verdict_to_json(v));
      results.push_back(Json{{"task_id", item.task.id},
                             {"trajectory_id", item.trajectory.id},
                             {"score", score_report_json(res.score)},
                             {"verdict_missing", res.verdict_missing},
                             {"tool_calls", res.tool_calls},
                             {"verdicts", std::move(verdicts)}});
      out << item.trajectory.id << ' ' << res.score.aggregate << '\n';
    }
    write_json(config.output_dir / "scores.json",
               Json{{"config", embedded(config)}, {"seed", config.seed}, {"results", std::move(results)}});
    return kExitOk;
  });
}

}  // namespace tabprm
