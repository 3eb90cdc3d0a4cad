#pragma once

// Step-level verification: the generative tool-loop verifier, reference
// verifiers for tests and probes, and the answer-level selectors
// (majority vote, LLM judge).

#include <atomic>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabprm/backend.hpp"
#include "tabprm/dsl.hpp"
#include "tabprm/reward.hpp"
#include "tabprm/table.hpp"
#include "tabprm/trajectory.hpp"

namespace tabprm {

class VerifierError : public std::runtime_error {
 public:
  enum class Code { StepOutOfRange, NoAnswers, JudgeUnparsable };
  VerifierError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

/// A piece of a verification rationale: model output or an injected tool block.
struct RationaleSegment {
  bool injected = false;
  std::string text;
};

struct StepVerdict {
  std::size_t step_index = 0;
  std::string rationale;
  std::vector<RationaleSegment> segments;
  std::vector<ToolCallRecord> tool_calls;
  StepReward reward{1, StepCategory::Other, kFallbackConfidence};
  std::optional<Table> table_prefix_used;
  std::size_t backend_calls = 0;
  bool confidence_missing = false;
  bool verdict_missing = false;  // set when a missing verdict was mapped to -1
};

Json verdict_to_json(const StepVerdict& verdict);

class StepVerifier {
 public:
  virtual ~StepVerifier() = default;
  virtual StepVerdict verify_step(const TaskInstance& task, const Trajectory& trajectory, std::size_t step_index) = 0;
  virtual std::string name() const = 0;
};

/// Table prefix for step `i`: the cited region of the nearest preceding
/// TableRetrieval step, extracted from the task table. Only for SchemaInteraction.
std::optional<Table> table_prefix_for(const TaskInstance& task, const Trajectory& trajectory, std::size_t i);

/// Verification prompt: system block (instructions + query grammar) and user block.
std::vector<ChatMessage> verification_prompt(const TaskInstance& task, const Trajectory& trajectory, std::size_t i,
                                             const std::optional<Table>& prefix);

struct GenerativePrmConfig {
  SamplingParams params{0.0, 1.0, 2048, {}, 0};
  std::size_t max_tool_calls_per_step = 4;
  dsl::ExecBudget exec_budget;
};

/// Verifier driven by a chat backend. Tool blocks `<tool>query</tool>` pause
/// generation; the query is executed against the task table and
/// `<result>…</result>` (or `<error>…</error>`) is appended before resuming.
class GenerativePrm : public StepVerifier {
 public:
  GenerativePrm(std::shared_ptr<Backend> backend, GenerativePrmConfig config = {});

  StepVerdict verify_step(const TaskInstance& task, const Trajectory& trajectory, std::size_t step_index) override;
  std::string name() const override { return "generative_prm"; }
  Backend& backend() { return *backend_; }

 private:
  std::shared_ptr<Backend> backend_;
  GenerativePrmConfig config_;
};

/// Every step gets +1 iff the trajectory's final answer matches the gold answer.
class OracleVerifier : public StepVerifier {
 public:
  StepVerdict verify_step(const TaskInstance& task, const Trajectory& trajectory, std::size_t step_index) override;
  std::string name() const override { return "oracle"; }
};

/// Returns the same reward for every step, ignoring the table.
class ConstantVerifier : public StepVerifier {
 public:
  explicit ConstantVerifier(int value = 1) : value_(value) {}
  StepVerdict verify_step(const TaskInstance& task, const Trajectory& trajectory, std::size_t step_index) override;
  std::string name() const override { return "constant"; }

 private:
  int value_;
};

/// Retrieval steps get +1 iff their cited region equals the gold region
/// registered for the trajectory id; other steps get +1.
class RegionOracleVerifier : public StepVerifier {
 public:
  explicit RegionOracleVerifier(std::map<std::string, TableRegion> gold) : gold_(std::move(gold)) {}
  StepVerdict verify_step(const TaskInstance& task, const Trajectory& trajectory, std::size_t step_index) override;
  std::string name() const override { return "region_oracle"; }

 private:
  std::map<std::string, TableRegion> gold_;
};

enum class MissingVerdict { Raise, Negative };

struct VerificationResult {
  TrajectoryScore score;
  std::vector<StepVerdict> verdicts;
  std::size_t verdict_missing = 0;
  std::size_t tool_calls = 0;
  std::size_t backend_calls = 0;
};

/// verify_step; with MissingVerdict::Negative a missing or malformed verdict
/// becomes reward -1 with `verdict_missing` set.
StepVerdict verify_step_checked(StepVerifier& verifier, const TaskInstance& task, const Trajectory& trajectory,
                                std::size_t step_index, MissingVerdict missing);

/// Verifies every step in order and aggregates. With MissingVerdict::Negative
/// a missing or malformed verdict becomes -1 and is counted.
VerificationResult verify_trajectory(StepVerifier& verifier, const TaskInstance& task, const Trajectory& trajectory,
                                     Aggregator aggregator, MissingVerdict missing = MissingVerdict::Raise);

/// Index of the first candidate holding the most frequent normalized answer.
std::size_t majority_vote(std::span<const Trajectory> candidates, AnswerKind kind);

std::vector<ChatMessage> judge_prompt(const TaskInstance& task, std::span<const Trajectory> candidates);

/// Asks the backend to pick one candidate with `\boxed{k}`, k 0-based.
std::size_t llm_judge(Backend& backend, const TaskInstance& task, std::span<const Trajectory> candidates,
                      const SamplingParams& params);

}  // namespace tabprm
