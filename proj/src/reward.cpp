#include "tabprm/reward.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

#include "tabprm/text_util.hpp"

namespace tabprm {

namespace {

// "22460" -> "22,460"; "-1234567.5" -> "-1,234,567.5". Empty when not a plain number.
std::string group_thousands(std::string_view s) {
  std::string_view body = s;
  std::string sign;
  if (!body.empty() && body.front() == '-') {
    sign = "-";
    body.remove_prefix(1);
  }
  auto dot = body.find('.');
  auto int_part = body.substr(0, dot);
  if (int_part.empty() || int_part.size() <= 3) return {};
  if (!std::all_of(int_part.begin(), int_part.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    return {};
  std::string grouped;
  std::size_t lead = int_part.size() % 3 == 0 ? 3 : int_part.size() % 3;
  grouped += int_part.substr(0, lead);
  for (std::size_t i = lead; i < int_part.size(); i += 3) {
    grouped += ',';
    grouped += int_part.substr(i, 3);
  }
  if (dot != std::string_view::npos) grouped += body.substr(dot);
  return sign + grouped;
}

}  // namespace

std::string_view to_string(RewardChannel c) { return c == RewardChannel::Tab ? "tab" : "rea"; }
std::string_view to_string(Aggregator a) { return a == Aggregator::Mean ? "mean" : "sum"; }

Aggregator aggregator_from_string(std::string_view s) {
  if (iequals(s, "mean")) return Aggregator::Mean;
  if (iequals(s, "sum")) return Aggregator::Sum;
  throw std::invalid_argument("unknown aggregator: " + std::string(s));
}

StepReward::StepReward(int value, StepCategory category, double confidence)
    : value_(value), channel_(channel_for(category)), confidence_(std::clamp(confidence, kMinConfidence, 1.0)) {
  if (value != 1 && value != -1) throw std::invalid_argument("step reward must be -1 or +1");
  if (std::isnan(confidence)) confidence_ = kFallbackConfidence;
}

double aggregate(std::span<const StepReward> rewards, Aggregator aggregator) {
  if (rewards.empty()) throw RewardError(RewardError::Code::EmptyRewards, "no step rewards to aggregate");
  double sum = 0.0;
  for (const auto& r : rewards) sum += r.value();
  return aggregator == Aggregator::Sum ? sum : sum / static_cast<double>(rewards.size());
}

TrajectoryScore score_trajectory(std::vector<StepReward> rewards, Aggregator aggregator) {
  TrajectoryScore s;
  s.aggregate = aggregate(rewards, aggregator);
  s.aggregator = aggregator;
  s.step_rewards = std::move(rewards);
  return s;
}

Verdict parse_verdict(std::string_view rationale) {
  std::string inner;
  if (!last_boxed(rationale, inner)) throw RewardError(RewardError::Code::VerdictMissing, "no \\boxed{} verdict");
  static const std::regex re(R"(^\s*([+-]?1)\s*(?:\(\s*(correct|incorrect)\s*\))?\s*$)", std::regex::icase);
  std::smatch m;
  if (!std::regex_match(inner, m, re))
    throw RewardError(RewardError::Code::VerdictMalformed, "malformed verdict: " + inner);
  Verdict v;
  v.value = m[1].str() == "-1" ? -1 : 1;
  if (m[2].matched) {
    v.annotation = to_lower(m[2].str());
    bool says_correct = *v.annotation == "correct";
    if (says_correct != (v.value == 1))
      throw RewardError(RewardError::Code::VerdictMalformed, "verdict value contradicts annotation: " + inner);
  }
  return v;
}

std::string render_verdict(int value) {
  return value > 0 ? "\\boxed{1(correct)}" : "\\boxed{-1(incorrect)}";
}

void validate(const ShapingConfig& config) {
  if (config.lambda_cal < 0 || config.lambda_tool < 0)
    throw std::invalid_argument("shaping coefficients must be non-negative");
  if (config.group_size < 2) throw std::invalid_argument("group_size must be >= 2");
}

ShapingSignal shaping_signal(const StepReward& predicted, int gold_value, int tool_support,
                             const ShapingConfig& config) {
  ShapingSignal s;
  s.label_match = predicted.value() == gold_value ? 1 : 0;
  double p_gold = s.label_match ? predicted.confidence() : 1.0 - predicted.confidence();
  p_gold = std::clamp(p_gold, kMinConfidence, 1.0);
  s.calibration_penalty = -std::log(p_gold);
  s.tool_grounding = tool_support ? 1 : 0;
  s.s_value = s.label_match - config.lambda_cal * s.calibration_penalty + config.lambda_tool * s.tool_grounding;
  return s;
}

double trajectory_training_reward(std::span<const ShapingSignal> signals) {
  if (signals.empty()) throw RewardError(RewardError::Code::EmptyRewards, "no shaping signals");
  double sum = 0.0;
  for (const auto& s : signals) sum += s.s_value;
  return sum / static_cast<double>(signals.size());
}

std::vector<double> group_advantages(std::span<const double> group_rewards, const ShapingConfig& config) {
  if (group_rewards.size() != config.group_size)
    throw RewardError(RewardError::Code::GroupSizeMismatch,
                      "group has " + std::to_string(group_rewards.size()) + " rewards, expected " +
                          std::to_string(config.group_size));
  double mean = 0.0;
  for (double r : group_rewards) mean += r;
  mean /= static_cast<double>(group_rewards.size());
  double var = 0.0;
  for (double r : group_rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(group_rewards.size());
  double denom = std::sqrt(var) + config.epsilon;
  std::vector<double> out;
  out.reserve(group_rewards.size());
  for (double r : group_rewards) out.push_back((r - mean) / denom);
  return out;
}

int tool_support(std::span<const ToolCallRecord> calls, std::string_view rationale) {
  if (calls.empty()) return 0;
  if (!std::all_of(calls.begin(), calls.end(), [](const ToolCallRecord& c) { return c.ok; })) return 0;
  for (const auto& call : calls) {
    if (call.result_end > rationale.size() || is_blank(call.result_text)) continue;
    auto tail = rationale.substr(call.result_end);
    auto needle = trim(call.result_text);
    if (tail.find(needle) != std::string_view::npos) return 1;
    // numeric results may be restated with thousands separators ("22,460")
    auto grouped = group_thousands(needle);
    if (!grouped.empty() && tail.find(grouped) != std::string_view::npos) return 1;
  }
  return 0;
}

Json score_report_json(const TrajectoryScore& score) {
  Json rewards = Json::array();
  for (std::size_t i = 0; i < score.step_rewards.size(); ++i) {
    const auto& r = score.step_rewards[i];
    rewards.push_back(Json{{"index", i},
                           {"value", r.value()},
                           {"channel", std::string(to_string(r.channel()))},
                           {"confidence", r.confidence()}});
  }
  return Json{{"step_rewards", std::move(rewards)},
              {"aggregate", score.aggregate},
              {"aggregator", std::string(to_string(score.aggregator))}};
}

}  // namespace tabprm
