#pragma once

// Reasoning trajectories: step segmentation, step categories, final answers.

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tabprm/table.hpp"

namespace tabprm {

enum class StepCategory { TableRetrieval, SchemaInteraction, InnerThinking, Other };

std::string_view to_string(StepCategory c);
StepCategory step_category_from_string(std::string_view s);

/// True for the two table-grounded categories (routed to the table reward channel).
inline bool is_table_step(StepCategory c) {
  return c == StepCategory::TableRetrieval || c == StepCategory::SchemaInteraction;
}

struct Step {
  std::size_t index = 0;
  std::string text;
  StepCategory category = StepCategory::InnerThinking;
  std::optional<TableRegion> cited_region;  // only for table steps
};

struct Answer {
  using Value = std::variant<double, std::string, bool, std::vector<std::string>>;
  Value value;
  std::string raw_span;
};

struct Trajectory {
  std::string id;
  std::string task_id;
  std::vector<Step> steps;
  std::optional<Answer> final_answer;
  std::string answer_text;  // everything after the reasoning envelope
  std::string raw_text;

  /// L = steps + final answer.
  std::size_t length() const { return steps.size() + 1; }
};

class TrajectoryError : public std::runtime_error {
 public:
  enum class Code { NoContent, NoAnswerFound, Schema };
  TrajectoryError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

enum class ErrorLabel {
  UnitMismatch,
  RowMisSelection,
  Miscalculation,
  ColumnMisSelection,
  PartialAggregation,
  ContextOmission,
  OutputFormat,
  IncorrectGrouping,
  DoubleCounting,
  Misinterpretation,
  ContradictorySteps,
  LogicalError,
  Other,
};

inline constexpr std::size_t kErrorLabelCount = 13;

StepCategory map_error_to_category(ErrorLabel label);

/// Splits raw model text into steps. Steps keep their "Step N:" marker. When
/// `kind` is absent the answer kind is inferred (number, then boolean, then text).
/// All steps are InnerThinking until classified.
Trajectory segment(std::string_view raw_text, std::optional<AnswerKind> kind = std::nullopt);

StepCategory classify_step(std::string_view step_text, const Table& table);

/// Region named by a step: headers mentioned verbatim give the columns; rows
/// whose text cells are mentioned give the rows (all rows when none are).
std::optional<TableRegion> cite_region(std::string_view step_text, const Table& table);

/// Assigns categories and cited regions to every step of `trajectory`.
void classify_steps(Trajectory& trajectory, const Table& table);

/// segment + classify + answer extraction against the task.
Trajectory parse_trajectory(std::string_view raw_text, const TaskInstance& task);

/// Last `\boxed{}` span wins; falls back to the text after the last "Final Answer".
Answer extract_final_answer(std::string_view raw_text, AnswerKind kind);
/// As above; with no kind the answer type is inferred.
Answer extract_final_answer(std::string_view raw_text, std::optional<AnswerKind> kind);
std::string normalize_answer(const Answer& answer, AnswerKind kind);
/// Normalized form of a task's gold answer, comparable with normalize_answer output.
std::string normalize_gold(const TaskInstance& task);
bool answer_matches_gold(const Trajectory& trajectory, const TaskInstance& task);

Json trajectory_to_json(const Trajectory& trajectory);
Trajectory trajectory_from_json(const Json& j, std::optional<AnswerKind> kind = std::nullopt);

}  // namespace tabprm
