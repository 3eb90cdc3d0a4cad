#include "tabprm/verifier.hpp"

#include <algorithm>
#include <charconv>
#include <map>

#include "tabprm/text_util.hpp"

namespace tabprm {

namespace {

constexpr std::string_view kToolOpen = "<tool>";
constexpr std::string_view kToolClose = "</tool>";

const char* kVerifierSystem =
    "You verify one reasoning step of a solution to a question about a table.\n"
    "You may query the table with a tool call written as <tool>QUERY</tool>; the result is returned\n"
    "as <result>...</result> or <error>...</error>. Queries use this language:\n"
    "  query := \"table\" (\"|\" stage)*\n"
    "  stage := select \"c1\", \"c2\" | where PRED | row N | head N | sort \"c\" [asc|desc]\n"
    "         | cell N \"c\" | sum \"c\" | mean \"c\" | min \"c\" | max \"c\" | count\n"
    "  PRED  := \"c\" OP LITERAL combined with and / or and parentheses;\n"
    "           OP is one of == != < <= > >= contains\n"
    "Aggregates (cell, sum, mean, min, max, count) must be the last stage.\n"
    "Explain your check, then end with \\boxed{1(correct)} or \\boxed{-1(incorrect)}.";

const char* kJudgeSystem =
    "You compare candidate solutions to a question about a table and pick the most plausible,\n"
    "logically consistent one. Candidates are numbered from 0. Answer with \\boxed{k} where k is\n"
    "the number of the chosen candidate.";

StepVerdict fixed_verdict(const Trajectory& trajectory, std::size_t i, int value, std::string rationale) {
  if (i >= trajectory.steps.size())
    throw VerifierError(VerifierError::Code::StepOutOfRange, "step index " + std::to_string(i) + " out of range");
  StepVerdict v;
  v.step_index = i;
  v.rationale = rationale + "\n" + render_verdict(value);
  v.segments.push_back({false, v.rationale});
  v.reward = StepReward(value, trajectory.steps[i].category, 1.0);
  return v;
}

std::string query_text_from(std::string_view generated) {
  auto open = generated.rfind(kToolOpen);
  auto body = open == std::string_view::npos ? generated : generated.substr(open + kToolOpen.size());
  return std::string(trim(body));
}

}  // namespace

Json verdict_to_json(const StepVerdict& v) {
  Json tools = Json::array();
  for (const auto& c : v.tool_calls)
    tools.push_back(Json{{"query", c.query_text}, {"ok", c.ok}, {"result", c.result_text}});
  Json j{{"step_index", v.step_index},
         {"rationale", v.rationale},
         {"tool_calls", std::move(tools)},
         {"reward", v.reward.value()},
         {"channel", std::string(to_string(v.reward.channel()))},
         {"confidence", v.reward.confidence()},
         {"backend_calls", v.backend_calls},
         {"verdict_missing", v.verdict_missing}};
  j["table_prefix"] = v.table_prefix_used ? table_to_json(*v.table_prefix_used) : Json(nullptr);
  return j;
}

std::optional<Table> table_prefix_for(const TaskInstance& task, const Trajectory& trajectory, std::size_t i) {
  if (i >= trajectory.steps.size() || trajectory.steps[i].category != StepCategory::SchemaInteraction)
    return std::nullopt;
  for (std::size_t j = i; j-- > 0;) {
    const auto& s = trajectory.steps[j];
    if (s.category == StepCategory::TableRetrieval && s.cited_region) return extract_region(task.table, *s.cited_region);
  }
  return std::nullopt;
}

std::vector<ChatMessage> verification_prompt(const TaskInstance& task, const Trajectory& trajectory, std::size_t i,
                                             const std::optional<Table>& prefix) {
  std::string user = "Table:\n" + render_table(task.table) + "\nQuestion: " + task.question + "\n\nPrevious steps:\n";
  if (i == 0) user += "(none)\n";
  for (std::size_t j = 0; j < i; ++j) user += trajectory.steps[j].text + "\n";
  if (prefix) user += "\nTable prefix:\n" + render_table(*prefix);
  user += "\nStep to verify:\n" + trajectory.steps[i].text + "\n";
  return {ChatMessage{Role::System, kVerifierSystem}, ChatMessage{Role::User, std::move(user)}};
}

GenerativePrm::GenerativePrm(std::shared_ptr<Backend> backend, GenerativePrmConfig config)
    : backend_(std::move(backend)), config_(std::move(config)) {
  if (!backend_) throw std::invalid_argument("GenerativePrm needs a backend");
  validate(config_.params);
}

StepVerdict GenerativePrm::verify_step(const TaskInstance& task, const Trajectory& trajectory, std::size_t i) {
  if (i >= trajectory.steps.size())
    throw VerifierError(VerifierError::Code::StepOutOfRange, "step index " + std::to_string(i) + " out of range");
  StepVerdict v;
  v.step_index = i;
  v.table_prefix_used = table_prefix_for(task, trajectory, i);
  auto messages = verification_prompt(task, trajectory, i, v.table_prefix_used);
  const std::size_t base_size = messages.size();

  std::optional<double> confidence;
  std::int64_t tokens_left = config_.params.max_tokens;
  while (true) {
    SamplingParams p = config_.params;
    bool tools_allowed = v.tool_calls.size() < config_.max_tool_calls_per_step;
    p.stop_sequences = tools_allowed ? std::vector<std::string>{std::string(kToolClose)} : std::vector<std::string>{};
    messages.resize(base_size);
    if (!v.rationale.empty()) messages.push_back(ChatMessage{Role::Assistant, v.rationale});

    auto c = backend_->complete(messages, p);
    ++v.backend_calls;
    v.segments.push_back({false, c.text});
    v.rationale += c.text;
    if (c.confidence) confidence = c.confidence;
    tokens_left -= std::max<std::int64_t>(c.completion_tokens, 1);

    if (c.finish_reason != FinishReason::ToolPause || !tools_allowed || tokens_left <= 0) break;

    ToolCallRecord rec;
    rec.query_text = query_text_from(c.text);
    std::string block(kToolClose);
    try {
      auto result = dsl::execute(dsl::parse_query(rec.query_text), task.table, config_.exec_budget);
      rec.ok = true;
      rec.result_text = dsl::format_result(result);
      block += "<result>" + rec.result_text + "</result>";
    } catch (const dsl::QueryError& e) {
      rec.ok = false;
      rec.result_text = std::string(e.code_name()) + ": " + e.what();
      block += "<error>" + rec.result_text + "</error>";
    }
    v.segments.push_back({true, block});
    v.rationale += block;
    rec.result_end = v.rationale.size();
    v.tool_calls.push_back(std::move(rec));
  }

  auto verdict = parse_verdict(v.rationale);
  v.confidence_missing = !confidence.has_value();
  v.reward = StepReward(verdict.value, trajectory.steps[i].category, confidence.value_or(kFallbackConfidence));
  return v;
}

StepVerdict OracleVerifier::verify_step(const TaskInstance& task, const Trajectory& trajectory, std::size_t i) {
  bool ok = answer_matches_gold(trajectory, task);
  return fixed_verdict(trajectory, i, ok ? 1 : -1, ok ? "Final answer matches gold." : "Final answer differs from gold.");
}

StepVerdict ConstantVerifier::verify_step(const TaskInstance&, const Trajectory& trajectory, std::size_t i) {
  return fixed_verdict(trajectory, i, value_, "Constant verdict.");
}

StepVerdict RegionOracleVerifier::verify_step(const TaskInstance&, const Trajectory& trajectory, std::size_t i) {
  if (i >= trajectory.steps.size())
    throw VerifierError(VerifierError::Code::StepOutOfRange, "step index " + std::to_string(i) + " out of range");
  const auto& step = trajectory.steps[i];
  if (step.category != StepCategory::TableRetrieval) return fixed_verdict(trajectory, i, 1, "Not a retrieval step.");
  auto it = gold_.find(trajectory.id);
  bool ok = it != gold_.end() && step.cited_region && *step.cited_region == it->second;
  return fixed_verdict(trajectory, i, ok ? 1 : -1, ok ? "Region matches gold." : "Region differs from gold.");
}

StepVerdict verify_step_checked(StepVerifier& verifier, const TaskInstance& task, const Trajectory& trajectory,
                                std::size_t i, MissingVerdict missing) {
  try {
    return verifier.verify_step(task, trajectory, i);
  } catch (const RewardError& e) {
    if (missing == MissingVerdict::Raise) throw;
    StepVerdict v;
    v.step_index = i;
    v.reward = StepReward(-1, trajectory.steps.at(i).category, kFallbackConfidence);
    v.verdict_missing = true;
    v.rationale = e.what();
    return v;
  }
}

VerificationResult verify_trajectory(StepVerifier& verifier, const TaskInstance& task, const Trajectory& trajectory,
                                     Aggregator aggregator, MissingVerdict missing) {
  if (trajectory.steps.empty()) throw RewardError(RewardError::Code::EmptyRewards, "trajectory has no steps");
  VerificationResult out;
  std::vector<StepReward> rewards;
  for (std::size_t i = 0; i < trajectory.steps.size(); ++i) {
    auto v = verify_step_checked(verifier, task, trajectory, i, missing);
    out.verdict_missing += v.verdict_missing ? 1 : 0;
    out.tool_calls += v.tool_calls.size();
    out.backend_calls += v.backend_calls;
    rewards.push_back(v.reward);
    out.verdicts.push_back(std::move(v));
  }
  out.score = score_trajectory(std::move(rewards), aggregator);
  return out;
}

std::size_t majority_vote(std::span<const Trajectory> candidates, AnswerKind kind) {
  std::map<std::string, std::size_t> counts;
  std::vector<std::optional<std::string>> normalized;
  for (const auto& c : candidates) {
    if (!c.final_answer) {
      normalized.emplace_back();
      continue;
    }
    auto n = normalize_answer(*c.final_answer, kind);
    ++counts[n];
    normalized.emplace_back(std::move(n));
  }
  if (counts.empty()) throw VerifierError(VerifierError::Code::NoAnswers, "no candidate has an extractable answer");
  std::optional<std::size_t> best;
  std::size_t best_count = 0;
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    if (!normalized[i]) continue;
    auto cnt = counts[*normalized[i]];
    if (cnt > best_count) {
      best = i;
      best_count = cnt;
    }
  }
  return *best;
}

std::vector<ChatMessage> judge_prompt(const TaskInstance& task, std::span<const Trajectory> candidates) {
  std::string user = "Table:\n" + render_table(task.table) + "\nQuestion: " + task.question + "\n";
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    user += "\nCandidate " + std::to_string(i) + ":\n" + candidates[i].raw_text + "\n";
  }
  return {ChatMessage{Role::System, kJudgeSystem}, ChatMessage{Role::User, std::move(user)}};
}

std::size_t llm_judge(Backend& backend, const TaskInstance& task, std::span<const Trajectory> candidates,
                      const SamplingParams& params) {
  if (candidates.empty() || candidates.size() > 16)
    throw std::invalid_argument("llm_judge takes between 1 and 16 candidates");
  if (candidates.size() == 1) return 0;
  auto c = backend.complete(judge_prompt(task, candidates), params);
  std::string inner;
  if (!last_boxed(c.text, inner))
    throw VerifierError(VerifierError::Code::JudgeUnparsable, "judge reply has no \\boxed{} index");
  auto t = trim(inner);
  std::size_t k = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), k);
  if (ec != std::errc{} || ptr != t.data() + t.size() || k >= candidates.size())
    throw VerifierError(VerifierError::Code::JudgeUnparsable, "judge chose invalid index: " + std::string(t));
  return k;
}

}  // namespace tabprm
