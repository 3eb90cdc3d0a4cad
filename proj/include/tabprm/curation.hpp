#pragma once

// Training-data curation: trajectory pool with dual judge filtering, per-step
// labels with table prefixes, tool-call synthesis over arithmetic spans,
// instance emission and audit, and the retrieval-sensitivity probe.

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

class CurationError : public std::runtime_error {
 public:
  enum class Code { JudgeUnparsable, Io, Schema, NoRetrievalStep };
  CurationError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

struct ToolRecord {
  std::string query;
  std::string result;
  friend bool operator==(const ToolRecord&, const ToolRecord&) = default;
};

struct StepLabel {
  std::size_t step_index = 0;
  StepCategory category = StepCategory::InnerThinking;
  int reward_value = 1;
  std::string rationale;
  std::optional<Table> table_prefix;
  std::vector<ToolRecord> tool_records;
  std::vector<std::string> flags;

  RewardChannel channel() const { return channel_for(category); }
  friend bool operator==(const StepLabel&, const StepLabel&) = default;
};

struct PolicySource {
  std::string generator_id;
  std::shared_ptr<Backend> backend;
};

struct PoolEntry {
  TaskInstance task;
  Trajectory trajectory;
  std::string generator_id;
  std::size_t sample_index = 0;
  bool judge_a = false;  // completeness
  bool judge_b = false;  // well-formedness
  bool accepted = false;
  std::optional<std::string> error;
};

struct CurationParams {
  SamplingParams policy_params;
  SamplingParams judge_params{0.0, 1.0, 1024, {}, 0};
  std::int64_t seed = 0;
  std::size_t concurrency = 1;
};

std::vector<ChatMessage> completeness_prompt(const TaskInstance& task, const Trajectory& trajectory);
std::vector<ChatMessage> wellformed_prompt(const TaskInstance& task, const Trajectory& trajectory);

/// Parses a judge's `\boxed{pass}` / `\boxed{fail}` vote.
bool parse_vote(std::string_view reply);

/// samples_per_task trajectories per task and policy, each checked by the two
/// judge prompts; accepted iff both pass. Sample j uses seed + j.
std::vector<PoolEntry> generate_pool(std::span<const TaskInstance> tasks, std::span<const PolicySource> policies,
                                     std::size_t samples_per_task, Backend& judge, const CurationParams& params);

std::vector<ChatMessage> step_judge_prompt(const TaskInstance& task, const Trajectory& trajectory, std::size_t i,
                                           const std::optional<Table>& prefix);
std::vector<ChatMessage> region_correction_prompt(const TaskInstance& task, const Trajectory& trajectory,
                                                  std::size_t i);

/// Extracts `<region>{"rows":[…],"cols":[…]}</region>` from a judge reply.
std::optional<TableRegion> parse_region_reply(std::string_view reply, const Table& table);

struct LabelResult {
  std::vector<StepLabel> labels;
  std::size_t dropped = 0;
};

/// One label per step; steps whose judge reply cannot be parsed are dropped
/// and counted. Schema-interaction steps get the prefix of the nearest
/// preceding retrieval step, replaced by a judge-corrected region when that
/// step was labeled -1.
LabelResult label_steps(const TaskInstance& task, const Trajectory& trajectory, Backend& judge,
                        const SamplingParams& params);

/// Table a label's tool records run against: its prefix when present, else the task table.
const Table& governing_table(const StepLabel& label, const TaskInstance& task);

/// Replaces arithmetic spans ("a + b + … = c", "(a + … ) / n = c") and
/// "sum / total / mean / average of <column> = c" phrases in the rationale by
/// `<tool>query</tool><result>value</result>` when they map onto a column.
/// Spans whose claimed value disagrees with the tool output are flagged.
StepLabel synthesize_tool_calls(const StepLabel& label, const Table& table);

struct TrainingInstance {
  TaskInstance task;
  Trajectory trajectory;
  std::string generator_id;
  std::size_t sample_index = 0;
  std::vector<StepLabel> labels;
};

Json instance_to_json(const TrainingInstance& inst);
TrainingInstance instance_from_json(const Json& j);

struct EmitResult {
  std::size_t written = 0;
  std::size_t skipped = 0;
};

/// Writes complete instances as JSONL sorted by (task id, generator id,
/// sample index). Instances whose labels do not cover every step are skipped.
EmitResult emit_instances(std::vector<TrainingInstance> instances, const std::filesystem::path& path);
std::vector<TrainingInstance> read_instances(const std::filesystem::path& path);

struct AuditReport {
  std::size_t instances = 0;
  std::size_t tool_records = 0;
  std::size_t fidelity_failures = 0;
  std::size_t completeness_failures = 0;
  std::size_t prefix_failures = 0;
  std::size_t channel_failures = 0;
  std::vector<std::string> messages;

  bool ok() const { return fidelity_failures + completeness_failures + prefix_failures + channel_failures == 0; }
};

/// Region of `table` whose extraction equals `sub`, if any.
std::optional<TableRegion> find_region(const Table& table, const Table& sub);

/// Re-executes every tool record and checks label completeness, prefix
/// soundness and channel routing.
AuditReport audit_instances(std::span<const TrainingInstance> instances);

struct CurationCounters {
  std::size_t pool = 0;
  std::size_t accepted = 0;
  std::size_t dropped_labels = 0;
  std::size_t flags = 0;
  std::size_t written = 0;
  std::size_t skipped = 0;
};

/// generate_pool → label_steps → synthesize_tool_calls → emit_instances.
CurationCounters run_curation(std::span<const TaskInstance> tasks, std::span<const PolicySource> policies,
                              std::size_t samples_per_task, Backend& judge, const CurationParams& params,
                              const std::filesystem::path& out_path);

struct ProbeItem {
  TaskInstance task;
  Trajectory trajectory;
};

std::vector<ProbeItem> load_probe_items(const std::filesystem::path& path);

struct ProbeReport {
  std::size_t pairs = 0;
  double separation_rate = 0.0;
  double mean_real = 0.0;
  double mean_random = 0.0;
  std::size_t skipped = 0;
  std::vector<std::pair<int, int>> rewards;  // (real, random) per pair
};

Json probe_report_to_json(const ProbeReport& report);

/// Trajectory with step `i`'s cited region replaced and the extracted
/// sub-table appended to the step text.
Trajectory with_region(const Trajectory& trajectory, std::size_t i, const TableRegion& region, const Table& table);

/// Verifies the first retrieval step of each trajectory with its real region
/// and with a random region of the same shape.
ProbeReport retrieval_sensitivity_probe(std::span<const ProbeItem> items, StepVerifier& verifier, std::uint64_t seed);

}  // namespace tabprm
