#pragma once

// Test-time scaling: Best-of-N, verifier-guided beam search, DVTS, majority
// vote and LLM-judge selection, and dataset-level evaluation reports.

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabprm/backend.hpp"
#include "tabprm/reward.hpp"
#include "tabprm/table.hpp"
#include "tabprm/trajectory.hpp"
#include "tabprm/verifier.hpp"

namespace tabprm {

enum class Strategy { BestOfN, Beam, Dvts, Majority, Judge };
std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct SearchConfig {
  Strategy strategy = Strategy::BestOfN;
  std::size_t n = 4;
  std::size_t beam_branch_m = 2;
  std::size_t subtrees_k = 1;
  std::size_t max_steps = 24;
  Aggregator aggregator = Aggregator::Mean;
  SamplingParams params;
  std::int64_t seed = 0;
  std::size_t concurrency = 1;
};

/// Rejects n = 0, beam with m < 2 or m not dividing n, and DVTS with k not
/// dividing n or m not dividing n / k.
void validate(const SearchConfig& config);
Json search_config_to_json(const SearchConfig& config);
SearchConfig search_config_from_json(const Json& j);

class SearchError : public std::runtime_error {
 public:
  enum class Code { AllCandidatesFailed, MissingJudge };
  SearchError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

struct SearchCounters {
  std::size_t backend_calls = 0;
  std::size_t policy_calls = 0;
  std::size_t verifier_calls = 0;
  std::size_t tool_calls = 0;
  std::size_t verdict_missing = 0;
  std::size_t cache_hits = 0;
  std::size_t force_completed = 0;

  SearchCounters& operator+=(const SearchCounters& o);
};

Json counters_to_json(const SearchCounters& c);

struct Candidate {
  Trajectory trajectory;
  std::optional<TrajectoryScore> score;
  bool completed = false;  // has an extractable final answer
};

struct SearchOutcome {
  std::vector<Candidate> all_candidates;
  std::size_t selected = 0;
  SearchCounters counters;
  /// Active-beam count after each expansion round (beam / DVTS only).
  std::vector<std::size_t> active_per_round;
  std::vector<std::size_t> completions_per_round;

  const Candidate& selected_candidate() const { return all_candidates.at(selected); }
};

/// Policy prompt for a task: system instructions and the rendered table with the question.
std::vector<ChatMessage> policy_prompt(const TaskInstance& task);

/// Builds a classified trajectory from generated steps and an optional answer span.
Trajectory assemble_trajectory(const TaskInstance& task, std::span<const std::string> steps,
                               const std::optional<std::string>& answer_text, std::string id);

/// Index of the highest aggregate among completed candidates, lowest index on ties.
std::optional<std::size_t> select_best(std::span<const Candidate> candidates);

SearchOutcome best_of_n(const TaskInstance& task, Backend& policy, StepVerifier& verifier, const SearchConfig& config);
SearchOutcome beam_search(const TaskInstance& task, Backend& policy, StepVerifier& verifier,
                          const SearchConfig& config);
SearchOutcome dvts(const TaskInstance& task, Backend& policy, StepVerifier& verifier, const SearchConfig& config);
SearchOutcome majority_search(const TaskInstance& task, Backend& policy, const SearchConfig& config);
SearchOutcome judge_search(const TaskInstance& task, Backend& policy, Backend& judge, const SearchConfig& config);

/// Dispatches on config.strategy. `judge` is required for the judge strategy,
/// `verifier` for best_of_n / beam / dvts.
SearchOutcome run_search(const TaskInstance& task, Backend& policy, StepVerifier* verifier, Backend* judge,
                         const SearchConfig& config);

struct TaskResult {
  std::string id;
  std::size_t n = 0;
  std::string selected_answer;
  std::string gold;
  bool correct = false;
  std::optional<double> score;
  SearchCounters counters;
  std::optional<std::string> error;
};

struct EvalReport {
  Json config;
  Strategy strategy = Strategy::BestOfN;
  std::vector<TaskResult> per_task;
  std::vector<std::pair<std::size_t, double>> accuracy_by_n;
  double accuracy = 0.0;
  SearchCounters counters;
};

/// Runs the search for each task and each N in `n_values` (config.n when
/// empty). Task failures are recorded in the report rather than raised.
EvalReport evaluate_dataset(std::span<const TaskInstance> tasks, Backend& policy, StepVerifier* verifier,
                            Backend* judge, const SearchConfig& config, std::span<const std::size_t> n_values = {},
                            Json embedded_config = nullptr);

Json eval_report_to_json(const EvalReport& report);
std::string eval_report_csv(const EvalReport& report);
std::string plot_data_csv(const EvalReport& report);
/// Writes report.json, report.csv and plot.csv into `dir`.
void write_eval_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace tabprm
