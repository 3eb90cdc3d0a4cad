#include "tabprm/tts.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "tabprm/parallel.hpp"
#include "tabprm/text_util.hpp"

namespace tabprm {

namespace {

const char* kPolicySystem =
    "Answer the question about the table. Reason inside <think> </think>, one step per line,\n"
    "each starting with \"Step N:\". After </think> write \"Final Answer is \\boxed{ANSWER}\".";

struct Beam {
  std::vector<std::string> steps;
  std::vector<StepReward> rewards;
  std::optional<std::string> answer;
};

double partial_score(const Beam& b) {
  if (b.rewards.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : b.rewards) s += r.value();
  return s / static_cast<double>(b.rewards.size());
}

std::string candidate_id(const TaskInstance& task, std::size_t subtree, std::size_t k) {
  return task.id + ":" + std::to_string(subtree) + ":" + std::to_string(k);
}

std::size_t cache_hits_of(Backend* b) {
  if (auto* c = dynamic_cast<CachedBackend*>(b)) return c->hits();
  return 0;
}

std::size_t verifier_cache_hits(StepVerifier* v) {
  if (auto* g = dynamic_cast<GenerativePrm*>(v)) return cache_hits_of(&g->backend());
  return 0;
}

// Independent full samples with seeds seed + k.
std::vector<Candidate> sample_candidates(const TaskInstance& task, Backend& policy, const SearchConfig& config,
                                         SearchCounters& counters) {
  auto prompt = policy_prompt(task);
  std::vector<Candidate> out(config.n);
  parallel_for(config.n, config.concurrency, [&](std::size_t k) {
    SamplingParams p = config.params;
    p.seed = config.seed + static_cast<std::int64_t>(k);
    auto c = policy.complete(prompt, p);
    Candidate cand;
    try {
      cand.trajectory = parse_trajectory(c.text, task);
    } catch (const TrajectoryError&) {
      cand.trajectory.raw_text = c.text;
    }
    cand.trajectory.id = candidate_id(task, 0, k);
    cand.trajectory.task_id = task.id;
    cand.completed = cand.trajectory.final_answer.has_value() && !cand.trajectory.steps.empty();
    out[k] = std::move(cand);
  });
  counters.policy_calls += config.n;
  return out;
}

void run_beam(const TaskInstance& task, Backend& policy, StepVerifier& verifier, const SearchConfig& config,
              std::size_t width, std::size_t m, std::int64_t base_seed, std::int64_t stride, std::size_t subtree,
              SearchOutcome& out) {
  auto prompt = policy_prompt(task);
  auto seed_for = [&](std::size_t round, std::size_t slot) {
    return base_seed + stride * static_cast<std::int64_t>(round * width + slot);
  };

  struct Child {
    Beam beam;
    ContinuationUnit unit;
  };
  auto expand = [&](const std::vector<const Beam*>& parents, std::size_t round) {
    std::vector<Child> children(parents.size());
    parallel_for(parents.size(), config.concurrency, [&](std::size_t slot) {
      SamplingParams p = config.params;
      p.seed = seed_for(round, slot);
      children[slot].beam = *parents[slot];
      children[slot].unit = continue_trajectory(policy, prompt, parents[slot]->steps, p);
    });
    return children;
  };

  std::vector<Beam> completed;
  std::size_t w = width;
  std::vector<Beam> active;

  auto absorb = [&](std::vector<Child>& children) {
    std::size_t done = 0;
    active.clear();
    for (auto& ch : children) {
      out.counters.policy_calls += ch.unit.backend_calls;
      if (ch.unit.is_answer) {
        ++done;
        if (ch.beam.steps.empty()) continue;
        ch.beam.answer = ch.unit.text;
        completed.push_back(std::move(ch.beam));
      } else {
        ch.beam.steps.push_back(ch.unit.text);
        active.push_back(std::move(ch.beam));
      }
    }
    w -= std::min(w, done);
    return done;
  };

  Beam root;
  std::vector<const Beam*> roots(width, &root);
  auto first = expand(roots, 0);
  out.completions_per_round.push_back(absorb(first));
  out.active_per_round.push_back(active.size());

  std::size_t round = 0;
  while (!active.empty()) {
    // verify the newest step of every active beam
    std::vector<StepVerdict> verdicts(active.size());
    parallel_for(active.size(), config.concurrency, [&](std::size_t i) {
      auto traj = assemble_trajectory(task, active[i].steps, std::nullopt, candidate_id(task, subtree, i));
      verdicts[i] = verify_step_checked(verifier, task, traj, traj.steps.size() - 1, MissingVerdict::Negative);
    });
    for (std::size_t i = 0; i < active.size(); ++i) {
      out.counters.verifier_calls += verdicts[i].backend_calls;
      out.counters.tool_calls += verdicts[i].tool_calls.size();
      out.counters.verdict_missing += verdicts[i].verdict_missing ? 1 : 0;
      active[i].rewards.push_back(verdicts[i].reward);
    }
    if (active.front().steps.size() >= config.max_steps) break;

    std::vector<std::size_t> order(active.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return partial_score(active[a]) > partial_score(active[b]); });
    std::size_t keep = std::min(active.size(), (w + m - 1) / m);
    std::vector<const Beam*> parents;
    for (std::size_t r = 0; r < keep; ++r)
      for (std::size_t t = 0; t < m && parents.size() < w; ++t) parents.push_back(&active[order[r]]);

    ++round;
    auto children = expand(parents, round);
    out.completions_per_round.push_back(absorb(children));
    out.active_per_round.push_back(active.size());
  }

  // Force-complete beams still active at the step limit.
  std::vector<Candidate> forced(active.size());
  std::vector<SearchCounters> forced_counters(active.size());
  parallel_for(active.size(), config.concurrency, [&](std::size_t i) {
    SamplingParams p = config.params;
    p.seed = seed_for(round + 1, i);
    auto rest = finish_trajectory(policy, prompt, active[i].steps, p);
    Candidate cand;
    try {
      cand.trajectory = parse_trajectory(rest, task);
    } catch (const TrajectoryError&) {
      cand.trajectory.raw_text = rest;
    }
    forced_counters[i].policy_calls = 1;
    cand.completed = cand.trajectory.final_answer.has_value() && !cand.trajectory.steps.empty();
    if (cand.completed) {
      auto vr = verify_trajectory(verifier, task, cand.trajectory, config.aggregator, MissingVerdict::Negative);
      cand.score = vr.score;
      forced_counters[i].verifier_calls = vr.backend_calls;
      forced_counters[i].tool_calls = vr.tool_calls;
      forced_counters[i].verdict_missing = vr.verdict_missing;
    }
    forced[i] = std::move(cand);
  });

  std::size_t k = 0;
  for (auto& b : completed) {
    Candidate cand;
    cand.trajectory = assemble_trajectory(task, b.steps, b.answer, candidate_id(task, subtree, k++));
    cand.completed = cand.trajectory.final_answer.has_value();
    cand.score = score_trajectory(b.rewards, config.aggregator);
    out.all_candidates.push_back(std::move(cand));
  }
  for (std::size_t i = 0; i < forced.size(); ++i) {
    forced[i].trajectory.id = candidate_id(task, subtree, k++);
    forced[i].trajectory.task_id = task.id;
    out.counters += forced_counters[i];
    ++out.counters.force_completed;
    out.all_candidates.push_back(std::move(forced[i]));
  }
}

void finish_outcome(SearchOutcome& out, std::size_t cache_before, std::size_t cache_after) {
  out.counters.backend_calls = out.counters.policy_calls + out.counters.verifier_calls;
  out.counters.cache_hits = cache_after - cache_before;
  auto best = select_best(out.all_candidates);
  if (!best) throw SearchError(SearchError::Code::AllCandidatesFailed, "no candidate produced an answer");
  out.selected = *best;
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::BestOfN: return "best_of_n";
    case Strategy::Beam: return "beam";
    case Strategy::Dvts: return "dvts";
    case Strategy::Majority: return "majority";
    case Strategy::Judge: return "judge";
  }
  return "best_of_n";
}

Strategy strategy_from_string(std::string_view s) {
  for (auto st : {Strategy::BestOfN, Strategy::Beam, Strategy::Dvts, Strategy::Majority, Strategy::Judge})
    if (iequals(s, to_string(st))) return st;
  throw std::invalid_argument("unknown strategy: " + std::string(s));
}

void validate(const SearchConfig& c) {
  if (c.n < 1) throw std::invalid_argument("n must be >= 1");
  if (c.max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (c.concurrency < 1) throw std::invalid_argument("concurrency must be >= 1");
  if (c.strategy == Strategy::Beam) {
    if (c.beam_branch_m < 2) throw std::invalid_argument("beam search needs beam_branch_m >= 2");
    if (c.n % c.beam_branch_m != 0) throw std::invalid_argument("beam_branch_m must divide n");
  }
  if (c.strategy == Strategy::Dvts) {
    if (c.subtrees_k < 1 || c.n % c.subtrees_k != 0) throw std::invalid_argument("subtrees_k must divide n");
    if (c.beam_branch_m < 1 || (c.n / c.subtrees_k) % c.beam_branch_m != 0)
      throw std::invalid_argument("beam_branch_m must divide n / subtrees_k");
  }
  if (c.strategy == Strategy::Judge && c.n > 16) throw std::invalid_argument("judge strategy supports n <= 16");
  validate(c.params);
}

Json search_config_to_json(const SearchConfig& c) {
  return Json{{"strategy", std::string(to_string(c.strategy))},
              {"n", c.n},
              {"beam_branch_m", c.beam_branch_m},
              {"subtrees_k", c.subtrees_k},
              {"max_steps", c.max_steps},
              {"aggregator", std::string(to_string(c.aggregator))},
              {"params", params_to_json(c.params)},
              {"seed", c.seed},
              {"concurrency", c.concurrency}};
}

SearchConfig search_config_from_json(const Json& j) {
  SearchConfig c;
  if (j.contains("strategy")) c.strategy = strategy_from_string(j["strategy"].get<std::string>());
  c.n = j.value("n", c.n);
  c.beam_branch_m = j.value("beam_branch_m", c.beam_branch_m);
  c.subtrees_k = j.value("subtrees_k", c.subtrees_k);
  c.max_steps = j.value("max_steps", c.max_steps);
  if (j.contains("aggregator")) c.aggregator = aggregator_from_string(j["aggregator"].get<std::string>());
  if (j.contains("params")) c.params = params_from_json(j["params"]);
  c.seed = j.value("seed", c.seed);
  c.concurrency = j.value("concurrency", c.concurrency);
  validate(c);
  return c;
}

SearchCounters& SearchCounters::operator+=(const SearchCounters& o) {
  backend_calls += o.backend_calls;
  policy_calls += o.policy_calls;
  verifier_calls += o.verifier_calls;
  tool_calls += o.tool_calls;
  verdict_missing += o.verdict_missing;
  cache_hits += o.cache_hits;
  force_completed += o.force_completed;
  return *this;
}

Json counters_to_json(const SearchCounters& c) {
  return Json{{"backend_calls", c.backend_calls},   {"policy_calls", c.policy_calls},
              {"verifier_calls", c.verifier_calls}, {"tool_calls", c.tool_calls},
              {"verdict_missing", c.verdict_missing}, {"cache_hits", c.cache_hits},
              {"force_completed", c.force_completed}};
}

std::vector<ChatMessage> policy_prompt(const TaskInstance& task) {
  std::string user = "Table:\n" + render_table(task.table) + "\nQuestion: " + task.question + "\n";
  return {ChatMessage{Role::System, kPolicySystem}, ChatMessage{Role::User, std::move(user)}};
}

Trajectory assemble_trajectory(const TaskInstance& task, std::span<const std::string> steps,
                               const std::optional<std::string>& answer_text, std::string id) {
  Trajectory t;
  t.id = std::move(id);
  t.task_id = task.id;
  for (std::size_t i = 0; i < steps.size(); ++i) t.steps.push_back(Step{i, steps[i], StepCategory::InnerThinking, {}});
  classify_steps(t, task.table);
  t.raw_text = step_prefill(steps) + "</think>";
  if (answer_text) {
    t.answer_text = *answer_text;
    t.raw_text += "\n" + *answer_text;
    try {
      t.final_answer = extract_final_answer(*answer_text, task.answer_kind);
    } catch (const TrajectoryError&) {
    }
  }
  return t;
}

std::optional<std::size_t> select_best(std::span<const Candidate> candidates) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (!c.completed) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = candidates[*best];
    double cs = c.score ? c.score->aggregate : 0.0;
    double bs = b.score ? b.score->aggregate : 0.0;
    if (cs > bs) best = i;
  }
  return best;
}

SearchOutcome best_of_n(const TaskInstance& task, Backend& policy, StepVerifier& verifier, const SearchConfig& config) {
  validate(config);
  auto hits_before = cache_hits_of(&policy) + verifier_cache_hits(&verifier);
  SearchOutcome out;
  out.all_candidates = sample_candidates(task, policy, config, out.counters);
  std::vector<SearchCounters> per(config.n);
  parallel_for(config.n, config.concurrency, [&](std::size_t k) {
    auto& cand = out.all_candidates[k];
    if (!cand.completed) return;
    auto vr = verify_trajectory(verifier, task, cand.trajectory, config.aggregator, MissingVerdict::Negative);
    cand.score = vr.score;
    per[k].verifier_calls = vr.backend_calls;
    per[k].tool_calls = vr.tool_calls;
    per[k].verdict_missing = vr.verdict_missing;
  });
  for (const auto& c : per) out.counters += c;
  finish_outcome(out, hits_before, cache_hits_of(&policy) + verifier_cache_hits(&verifier));
  return out;
}

SearchOutcome beam_search(const TaskInstance& task, Backend& policy, StepVerifier& verifier,
                          const SearchConfig& config) {
  validate(config);
  auto hits_before = cache_hits_of(&policy) + verifier_cache_hits(&verifier);
  SearchOutcome out;
  run_beam(task, policy, verifier, config, config.n, config.beam_branch_m, config.seed, 1, 0, out);
  finish_outcome(out, hits_before, cache_hits_of(&policy) + verifier_cache_hits(&verifier));
  return out;
}

SearchOutcome dvts(const TaskInstance& task, Backend& policy, StepVerifier& verifier, const SearchConfig& config) {
  validate(config);
  auto hits_before = cache_hits_of(&policy) + verifier_cache_hits(&verifier);
  const std::size_t k = config.subtrees_k;
  const std::size_t width = config.n / k;
  SearchOutcome out;
  for (std::size_t t = 0; t < k; ++t) {
    SearchOutcome sub;
    run_beam(task, policy, verifier, config, width, config.beam_branch_m, config.seed + static_cast<std::int64_t>(t),
             static_cast<std::int64_t>(k), t, sub);
    for (auto& c : sub.all_candidates) out.all_candidates.push_back(std::move(c));
    out.counters += sub.counters;
    if (t == 0) {
      out.active_per_round = sub.active_per_round;
      out.completions_per_round = sub.completions_per_round;
    }
  }
  finish_outcome(out, hits_before, cache_hits_of(&policy) + verifier_cache_hits(&verifier));
  return out;
}

SearchOutcome majority_search(const TaskInstance& task, Backend& policy, const SearchConfig& config) {
  validate(config);
  auto hits_before = cache_hits_of(&policy);
  SearchOutcome out;
  out.all_candidates = sample_candidates(task, policy, config, out.counters);
  std::vector<Trajectory> trajs;
  for (const auto& c : out.all_candidates) trajs.push_back(c.trajectory);
  try {
    out.selected = majority_vote(trajs, task.answer_kind);
  } catch (const VerifierError& e) {
    throw SearchError(SearchError::Code::AllCandidatesFailed, e.what());
  }
  out.counters.backend_calls = out.counters.policy_calls;
  out.counters.cache_hits = cache_hits_of(&policy) - hits_before;
  return out;
}

SearchOutcome judge_search(const TaskInstance& task, Backend& policy, Backend& judge, const SearchConfig& config) {
  validate(config);
  auto hits_before = cache_hits_of(&policy) + cache_hits_of(&judge);
  SearchOutcome out;
  out.all_candidates = sample_candidates(task, policy, config, out.counters);
  std::vector<std::size_t> index;
  std::vector<Trajectory> trajs;
  for (std::size_t i = 0; i < out.all_candidates.size(); ++i) {
    if (!out.all_candidates[i].completed) continue;
    index.push_back(i);
    trajs.push_back(out.all_candidates[i].trajectory);
  }
  if (trajs.empty()) throw SearchError(SearchError::Code::AllCandidatesFailed, "no candidate produced an answer");
  auto before = judge.calls();
  SamplingParams p = config.params;
  p.seed = config.seed;
  out.selected = index[llm_judge(judge, task, trajs, p)];
  out.counters.verifier_calls = judge.calls() - before;
  out.counters.backend_calls = out.counters.policy_calls + out.counters.verifier_calls;
  out.counters.cache_hits = cache_hits_of(&policy) + cache_hits_of(&judge) - hits_before;
  return out;
}

SearchOutcome run_search(const TaskInstance& task, Backend& policy, StepVerifier* verifier, Backend* judge,
                         const SearchConfig& config) {
  auto need_verifier = [&] {
    if (!verifier) throw std::invalid_argument(std::string(to_string(config.strategy)) + " needs a verifier");
    return verifier;
  };
  switch (config.strategy) {
    case Strategy::BestOfN: return best_of_n(task, policy, *need_verifier(), config);
    case Strategy::Beam: return beam_search(task, policy, *need_verifier(), config);
    case Strategy::Dvts: return dvts(task, policy, *need_verifier(), config);
    case Strategy::Majority: return majority_search(task, policy, config);
    case Strategy::Judge:
      if (!judge) throw SearchError(SearchError::Code::MissingJudge, "judge strategy needs a judge backend");
      return judge_search(task, policy, *judge, config);
  }
  throw std::invalid_argument("unknown strategy");
}

EvalReport evaluate_dataset(std::span<const TaskInstance> tasks, Backend& policy, StepVerifier* verifier,
                            Backend* judge, const SearchConfig& config, std::span<const std::size_t> n_values,
                            Json embedded_config) {
  if (tasks.empty()) throw std::invalid_argument("evaluate_dataset needs at least one task");
  std::vector<std::size_t> ns(n_values.begin(), n_values.end());
  if (ns.empty()) ns.push_back(config.n);
  for (auto n : ns) {
    SearchConfig c = config;
    c.n = n;
    validate(c);
  }

  EvalReport report;
  report.strategy = config.strategy;
  report.config = embedded_config.is_null() ? search_config_to_json(config) : std::move(embedded_config);
  for (auto n : ns) {
    SearchConfig c = config;
    c.n = n;
    std::size_t correct = 0;
    for (const auto& task : tasks) {
      TaskResult r;
      r.id = task.id;
      r.n = n;
      r.gold = normalize_gold(task);
      try {
        auto out = run_search(task, policy, verifier, judge, c);
        const auto& sel = out.selected_candidate();
        if (sel.trajectory.final_answer) r.selected_answer = normalize_answer(*sel.trajectory.final_answer, task.answer_kind);
        r.correct = sel.trajectory.final_answer && r.selected_answer == r.gold;
        if (sel.score) r.score = sel.score->aggregate;
        r.counters = out.counters;
      } catch (const BackendError& e) {
        r.error = std::string("backend: ") + e.what();
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      correct += r.correct ? 1 : 0;
      report.counters += r.counters;
      report.per_task.push_back(std::move(r));
    }
    report.accuracy_by_n.emplace_back(n, static_cast<double>(correct) / static_cast<double>(tasks.size()));
  }
  report.accuracy = report.accuracy_by_n.back().second;
  return report;
}

Json eval_report_to_json(const EvalReport& report) {
  Json per = Json::array();
  for (const auto& r : report.per_task) {
    Json j{{"id", r.id},
           {"n", r.n},
           {"selected_answer", r.selected_answer},
           {"gold", r.gold},
           {"correct", r.correct},
           {"counters", counters_to_json(r.counters)}};
    j["score"] = r.score ? Json(*r.score) : Json(nullptr);
    j["error"] = r.error ? Json(*r.error) : Json(nullptr);
    per.push_back(std::move(j));
  }
  Json by_n = Json::object();
  for (const auto& [n, acc] : report.accuracy_by_n) by_n[std::to_string(n)] = acc;
  return Json{{"config", report.config},
              {"strategy", std::string(to_string(report.strategy))},
              {"per_task", std::move(per)},
              {"accuracy", report.accuracy},
              {"accuracy_by_n", std::move(by_n)},
              {"counters", counters_to_json(report.counters)}};
}

namespace {

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string number(double v) { return format_decimal(v); }

}  // namespace

std::string eval_report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "id,n,selected_answer,gold,correct,score,backend_calls,tool_calls,verdict_missing,error\n";
  for (const auto& r : report.per_task) {
    os << csv_field(r.id) << ',' << r.n << ',' << csv_field(r.selected_answer) << ',' << csv_field(r.gold) << ','
       << (r.correct ? 1 : 0) << ',' << (r.score ? number(*r.score) : "") << ',' << r.counters.backend_calls << ','
       << r.counters.tool_calls << ',' << r.counters.verdict_missing << ',' << csv_field(r.error.value_or("")) << '\n';
  }
  return os.str();
}

std::string plot_data_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "strategy,n,accuracy\n";
  for (const auto& [n, acc] : report.accuracy_by_n) os << to_string(report.strategy) << ',' << n << ',' << number(acc) << '\n';
  return os.str();
}

void write_eval_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << body;
  };
  write("report.json", eval_report_to_json(report).dump(2) + "\n");
  write("report.csv", eval_report_csv(report));
  write("plot.csv", plot_data_csv(report));
}

}  // namespace tabprm
