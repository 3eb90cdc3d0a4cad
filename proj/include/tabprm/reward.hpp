#pragma once

// Step rewards, trajectory aggregation, verdict parsing, the per-step
// training signal and group-relative advantages.

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tabprm/table.hpp"
#include "tabprm/trajectory.hpp"

namespace tabprm {

enum class RewardChannel { Tab, Rea };
enum class Aggregator { Mean, Sum };

std::string_view to_string(RewardChannel c);
std::string_view to_string(Aggregator a);
Aggregator aggregator_from_string(std::string_view s);

inline constexpr double kMinConfidence = 1e-6;
/// Used when a backend reports no confidence for its verdict.
inline constexpr double kFallbackConfidence = 0.5;

/// Table steps (retrieval, schema interaction) are scored on the table channel;
/// inner-thinking and "other" steps on the reasoning channel.
inline RewardChannel channel_for(StepCategory c) {
  return is_table_step(c) ? RewardChannel::Tab : RewardChannel::Rea;
}

class StepReward {
 public:
  StepReward(int value, StepCategory category, double confidence);

  int value() const { return value_; }
  RewardChannel channel() const { return channel_; }
  double confidence() const { return confidence_; }

 private:
  int value_;
  RewardChannel channel_;
  double confidence_;
};

struct TrajectoryScore {
  std::vector<StepReward> step_rewards;
  double aggregate = 0.0;
  Aggregator aggregator = Aggregator::Mean;
};

class RewardError : public std::runtime_error {
 public:
  enum class Code { EmptyRewards, VerdictMissing, VerdictMalformed, GroupSizeMismatch };
  RewardError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

double aggregate(std::span<const StepReward> rewards, Aggregator aggregator);
TrajectoryScore score_trajectory(std::vector<StepReward> rewards, Aggregator aggregator);

struct Verdict {
  int value = 0;                      // -1 or +1
  std::optional<std::string> annotation;  // "correct" / "incorrect"
};

/// Parses the last `\boxed{...}` span: "1", "+1", "-1" with an optional
/// "(correct)" / "(incorrect)" annotation.
Verdict parse_verdict(std::string_view rationale);
std::string render_verdict(int value);

struct ShapingConfig {
  double lambda_cal = 0.8;
  double lambda_tool = 1.0;
  std::size_t group_size = 8;
  double epsilon = 1e-8;
};

void validate(const ShapingConfig& config);

struct ShapingSignal {
  int label_match = 0;
  double calibration_penalty = 0.0;
  int tool_grounding = 0;
  double s_value = 0.0;
};

ShapingSignal shaping_signal(const StepReward& predicted, int gold_value, int tool_support,
                             const ShapingConfig& config);
double trajectory_training_reward(std::span<const ShapingSignal> signals);
std::vector<double> group_advantages(std::span<const double> group_rewards, const ShapingConfig& config);

/// One executed tool call inside a verification rationale.
struct ToolCallRecord {
  std::string query_text;
  bool ok = false;               // parsed and executed without error
  std::string result_text;       // formatted result, or the error message
  std::size_t result_end = 0;    // offset in the rationale just past the result block
};

/// 1 iff there is at least one call, every call succeeded, and some call's
/// result text is restated in the rationale after its result block.
int tool_support(std::span<const ToolCallRecord> calls, std::string_view rationale);

Json score_report_json(const TrajectoryScore& score);

}  // namespace tabprm
