#include "tabprm/curation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "tabprm/dsl.hpp"
#include "tabprm/parallel.hpp"
#include "tabprm/text_util.hpp"
#include "tabprm/tts.hpp"

namespace tabprm {

namespace {

const char* kCompletenessSystem =
    "You check whether a solution to a question about a table is complete: it reasons step by step\n"
    "and reaches a final answer that addresses the question. Reply \\boxed{pass} or \\boxed{fail}.";

const char* kWellformedSystem =
    "You check whether a solution is well formed: its steps are coherent, reference the table\n"
    "faithfully and its final answer is stated clearly. Reply \\boxed{pass} or \\boxed{fail}.";

const char* kStepJudgeSystem =
    "You label one reasoning step of a solution to a question about a table.\n"
    "For a retrieval step judge whether the retrieved rows and columns are the ones the question needs.\n"
    "For a step operating on retrieved content judge the operation against the table prefix.\n"
    "For other steps judge the reasoning itself.\n"
    "Explain briefly, then end with \\boxed{1(correct)} or \\boxed{-1(incorrect)}.";

const char* kRegionSystem =
    "The retrieval step below selected the wrong part of the table. Give the rows and columns the\n"
    "question needs as 0-based indices: <region>{\"rows\": [...], \"cols\": [...]}</region>.";

std::string solution_block(const TaskInstance& task, const Trajectory& trajectory) {
  return "Table:\n" + render_table(task.table) + "\nQuestion: " + task.question + "\n\nSolution:\n" +
         trajectory.raw_text + "\n";
}

std::string steps_block(const Trajectory& t, std::size_t upto) {
  std::string out;
  for (std::size_t j = 0; j < upto; ++j) out += t.steps[j].text + "\n";
  return out.empty() ? "(none)\n" : out;
}

// Number tokens: grouped ("22,460") or plain ("350", "5.15", "-2").
const std::string kNum = R"((?:-?\d{1,3}(?:,\d{3})+(?:\.\d+)?|-?\d+(?:\.\d+)?))";
const std::string kTerm = "(?:" + kNum + R"(|\.\.\.|…))";
const std::string kSumRun = kNum + R"((?:\s*\+\s*)" + kTerm + ")+";

double parse_number(std::string s) {
  s.erase(std::remove(s.begin(), s.end(), ','), s.end());
  return std::stod(s);
}

bool is_ellipsis(std::string_view s) { return s == "..." || s == "…"; }

// Operands of "a + b + … + c"; nullopt entries stand for an ellipsis.
std::vector<std::optional<double>> operands(const std::string& run) {
  static const std::regex term(kTerm);
  std::vector<std::optional<double>> out;
  for (std::sregex_iterator it(run.begin(), run.end(), term), end; it != end; ++it) {
    auto t = it->str();
    if (is_ellipsis(t)) {
      out.emplace_back();
    } else {
      out.emplace_back(parse_number(t));
    }
  }
  return out;
}

std::vector<double> numeric_column(const Table& table, std::size_t c) {
  std::vector<double> v;
  for (const auto& row : table.rows()) {
    if (!is_numeric(row[c])) return {};
    v.push_back(as_double(row[c]));
  }
  return v;
}

bool close(double a, double b) { return std::fabs(a - b) <= 1e-9 * std::max(1.0, std::fabs(b)); }

// True when the listed operands enumerate the whole column.
bool covers_column(const std::vector<std::optional<double>>& ops, const std::vector<double>& col) {
  if (col.empty()) return false;
  auto gap = std::find_if(ops.begin(), ops.end(), [](const auto& o) { return !o.has_value(); });
  if (gap == ops.end()) {
    if (ops.size() != col.size()) return false;
    std::vector<double> a, b = col;
    for (const auto& o : ops) a.push_back(*o);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!close(a[i], b[i])) return false;
    return true;
  }
  if (std::count_if(ops.begin(), ops.end(), [](const auto& o) { return !o.has_value(); }) > 1) return false;
  std::size_t head = static_cast<std::size_t>(gap - ops.begin());
  std::vector<double> tail;
  for (auto it = gap + 1; it != ops.end(); ++it) tail.push_back(**it);
  if (head + tail.size() > col.size()) return false;
  for (std::size_t i = 0; i < head; ++i)
    if (!close(*ops[i], col[i])) return false;
  for (std::size_t i = 0; i < tail.size(); ++i)
    if (!close(tail[i], col[col.size() - tail.size() + i])) return false;
  return true;
}

std::optional<std::string> column_for(const std::vector<std::optional<double>>& ops, const Table& table) {
  for (std::size_t c = 0; c < table.num_cols(); ++c) {
    if (covers_column(ops, numeric_column(table, c))) return table.headers()[c];
  }
  return std::nullopt;
}

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

std::string regex_escape(std::string_view s) {
  static const std::string special = R"(\^$.|?*+()[]{}-)";
  std::string out;
  for (char c : s) {
    if (special.find(c) != std::string::npos) out += '\\';
    out += c;
  }
  return out;
}

// Decimal places written in a claimed value.
int decimals(std::string_view s) {
  auto dot = s.find('.');
  return dot == std::string_view::npos ? 0 : static_cast<int>(s.size() - dot - 1);
}

bool agrees(std::string_view claimed, const dsl::ToolValue& result) {
  if (!std::holds_alternative<CellValue>(result)) return false;
  const auto& cell = std::get<CellValue>(result);
  if (!is_numeric(cell)) return false;
  double tol = 0.5 * std::pow(10.0, -decimals(claimed)) + 1e-9;
  return std::fabs(parse_number(std::string(claimed)) - as_double(cell)) <= tol;
}

struct SpanMatch {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string query;
  std::string claimed;
};

// Earliest mappable span at or after `from`.
std::optional<SpanMatch> next_span(const std::string& text, std::size_t from, const Table& table) {
  static const std::regex mean_re(R"(\(\s*()" + kSumRun + R"()\s*\)\s*/\s*(\d+)\s*=\s*()" + kNum + ")");
  static const std::regex sum_re("(" + kSumRun + R"()\s*=\s*()" + kNum + ")");
  std::optional<SpanMatch> best;
  auto consider = [&](SpanMatch m) {
    if (!best || m.begin < best->begin) best = std::move(m);
  };
  auto begin = text.begin() + static_cast<std::ptrdiff_t>(from);

  for (std::sregex_iterator it(begin, text.end(), mean_re), end; it != end; ++it) {
    const auto& m = *it;
    auto ops = operands(m[1].str());
    auto col = column_for(ops, table);
    if (!col || static_cast<std::size_t>(std::stoul(m[2].str())) != table.num_rows()) continue;
    consider({from + static_cast<std::size_t>(m.position(0)), from + static_cast<std::size_t>(m.position(0) + m.length(0)),
              "table | mean " + quote(*col), m[3].str()});
    break;
  }
  for (std::sregex_iterator it(begin, text.end(), sum_re), end; it != end; ++it) {
    const auto& m = *it;
    auto pos = from + static_cast<std::size_t>(m.position(0));
    auto ops = operands(m[1].str());
    auto col = column_for(ops, table);
    if (!col) continue;
    consider({pos, pos + static_cast<std::size_t>(m.length(0)), "table | sum " + quote(*col), m[2].str()});
    break;
  }
  for (const auto& h : table.headers()) {
    if (numeric_column(table, *table.column_index(h)).empty()) continue;
    std::regex phrase(R"(\b(sum|total|mean|average) of (?:the )?["']?)" + regex_escape(h) +
                          R"(["']?(?: column)?\s*(?:is|=|:)\s*()" + kNum + ")",
                      std::regex::icase);
    std::smatch m;
    if (std::regex_search(begin, text.end(), m, phrase)) {
      auto kw = to_lower(m[1].str());
      auto op = (kw == "sum" || kw == "total") ? "sum " : "mean ";
      auto pos = from + static_cast<std::size_t>(m.position(0));
      consider({pos, pos + static_cast<std::size_t>(m.length(0)), "table | " + std::string(op) + quote(h), m[2].str()});
    }
  }
  return best;
}

Json label_to_json(const StepLabel& l) {
  Json tools = Json::array();
  for (const auto& t : l.tool_records) tools.push_back(Json{{"query", t.query}, {"result", t.result}});
  Json j{{"index", l.step_index},
         {"category", std::string(to_string(l.category))},
         {"reward", l.reward_value},
         {"channel", std::string(to_string(l.channel()))},
         {"rationale", l.rationale},
         {"tools", std::move(tools)},
         {"flags", l.flags}};
  j["table_prefix"] = l.table_prefix ? table_to_json(*l.table_prefix) : Json(nullptr);
  return j;
}

StepLabel label_from_json(const Json& j) {
  StepLabel l;
  l.step_index = j.at("index").get<std::size_t>();
  l.category = step_category_from_string(j.at("category").get<std::string>());
  l.reward_value = j.at("reward").get<int>();
  if (l.reward_value != 1 && l.reward_value != -1) throw CurationError(CurationError::Code::Schema, "reward must be +-1");
  if (j.contains("channel") && j["channel"].get<std::string>() != to_string(l.channel()))
    throw CurationError(CurationError::Code::Schema, "channel does not match category");
  l.rationale = j.at("rationale").get<std::string>();
  if (!j.at("table_prefix").is_null()) l.table_prefix = table_from_json(j["table_prefix"]);
  for (const auto& t : j.at("tools")) l.tool_records.push_back({t.at("query").get<std::string>(), t.at("result").get<std::string>()});
  l.flags = j.at("flags").get<std::vector<std::string>>();
  return l;
}

bool labels_complete(const TrainingInstance& inst) {
  if (inst.labels.size() != inst.trajectory.steps.size()) return false;
  for (std::size_t i = 0; i < inst.labels.size(); ++i) {
    if (inst.labels[i].step_index != i || inst.labels[i].category != inst.trajectory.steps[i].category) return false;
  }
  return true;
}

}  // namespace

std::vector<ChatMessage> completeness_prompt(const TaskInstance& task, const Trajectory& trajectory) {
  return {ChatMessage{Role::System, kCompletenessSystem}, ChatMessage{Role::User, solution_block(task, trajectory)}};
}

std::vector<ChatMessage> wellformed_prompt(const TaskInstance& task, const Trajectory& trajectory) {
  return {ChatMessage{Role::System, kWellformedSystem}, ChatMessage{Role::User, solution_block(task, trajectory)}};
}

bool parse_vote(std::string_view reply) {
  std::string inner;
  if (!last_boxed(reply, inner)) throw CurationError(CurationError::Code::JudgeUnparsable, "vote has no \\boxed{}");
  auto v = to_lower(trim(inner));
  if (v == "pass") return true;
  if (v == "fail") return false;
  throw CurationError(CurationError::Code::JudgeUnparsable, "vote must be pass or fail: " + v);
}

std::vector<PoolEntry> generate_pool(std::span<const TaskInstance> tasks, std::span<const PolicySource> policies,
                                     std::size_t samples_per_task, Backend& judge, const CurationParams& params) {
  if (samples_per_task < 1) throw std::invalid_argument("samples_per_task must be >= 1");
  std::vector<PoolEntry> pool;
  for (const auto& task : tasks)
    for (const auto& policy : policies)
      for (std::size_t j = 0; j < samples_per_task; ++j) {
        PoolEntry e;
        e.task = task;
        e.generator_id = policy.generator_id;
        e.sample_index = j;
        pool.push_back(std::move(e));
      }

  std::vector<const PolicySource*> source(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) source[i] = &policies[(i / samples_per_task) % policies.size()];

  parallel_for(pool.size(), params.concurrency, [&](std::size_t i) {
    auto& e = pool[i];
    try {
      SamplingParams p = params.policy_params;
      p.seed = params.seed + static_cast<std::int64_t>(e.sample_index);
      auto c = source[i]->backend->complete(policy_prompt(e.task), p);
      e.trajectory = parse_trajectory(c.text, e.task);
      e.trajectory.id = e.task.id + ":" + e.generator_id + ":" + std::to_string(e.sample_index);
      e.trajectory.task_id = e.task.id;
      e.judge_a = parse_vote(judge.complete(completeness_prompt(e.task, e.trajectory), params.judge_params).text);
      e.judge_b = parse_vote(judge.complete(wellformed_prompt(e.task, e.trajectory), params.judge_params).text);
      e.accepted = e.judge_a && e.judge_b;
    } catch (const std::exception& ex) {
      e.error = ex.what();
      e.accepted = false;
    }
  });
  return pool;
}

std::vector<ChatMessage> step_judge_prompt(const TaskInstance& task, const Trajectory& trajectory, std::size_t i,
                                           const std::optional<Table>& prefix) {
  const auto& step = trajectory.steps.at(i);
  std::string user = "Table:\n" + render_table(task.table) + "\nQuestion: " + task.question +
                     "\n\nPrevious steps:\n" + steps_block(trajectory, i) + "\nStep category: " +
                     std::string(to_string(step.category)) + "\n";
  if (step.category == StepCategory::TableRetrieval && step.cited_region)
    user += "\nRetrieved sub-table:\n" + render_table(extract_region(task.table, *step.cited_region));
  if (prefix) user += "\nTable prefix:\n" + render_table(*prefix);
  user += "\nStep to label:\n" + step.text + "\n";
  return {ChatMessage{Role::System, kStepJudgeSystem}, ChatMessage{Role::User, std::move(user)}};
}

std::vector<ChatMessage> region_correction_prompt(const TaskInstance& task, const Trajectory& trajectory,
                                                  std::size_t i) {
  std::string user = "Table:\n" + render_table(task.table) + "\nQuestion: " + task.question +
                     "\n\nRetrieval step:\n" + trajectory.steps.at(i).text + "\n";
  return {ChatMessage{Role::System, kRegionSystem}, ChatMessage{Role::User, std::move(user)}};
}

std::optional<TableRegion> parse_region_reply(std::string_view reply, const Table& table) {
  auto open = reply.rfind("<region>");
  if (open == std::string_view::npos) return std::nullopt;
  auto close = reply.find("</region>", open);
  if (close == std::string_view::npos) return std::nullopt;
  try {
    auto region = region_from_json(Json::parse(reply.substr(open + 8, close - open - 8)));
    extract_region(table, region);  // bounds check
    return region;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

LabelResult label_steps(const TaskInstance& task, const Trajectory& trajectory, Backend& judge,
                        const SamplingParams& params) {
  LabelResult out;
  std::vector<std::optional<int>> values(trajectory.steps.size());
  for (std::size_t i = 0; i < trajectory.steps.size(); ++i) {
    const auto& step = trajectory.steps[i];
    StepLabel label;
    label.step_index = i;
    label.category = step.category;

    if (step.category == StepCategory::SchemaInteraction) {
      for (std::size_t j = i; j-- > 0;) {
        const auto& prev = trajectory.steps[j];
        if (prev.category != StepCategory::TableRetrieval || !prev.cited_region) continue;
        label.table_prefix = extract_region(task.table, *prev.cited_region);
        if (values[j] && *values[j] < 0) {
          auto reply = judge.complete(region_correction_prompt(task, trajectory, j), params);
          if (auto corrected = parse_region_reply(reply.text, task.table)) {
            label.table_prefix = extract_region(task.table, *corrected);
            label.flags.push_back("prefix_corrected");
          } else {
            label.flags.push_back("prefix_correction_failed");
          }
        }
        break;
      }
    }

    auto reply = judge.complete(step_judge_prompt(task, trajectory, i, label.table_prefix), params);
    try {
      label.reward_value = parse_verdict(reply.text).value;
    } catch (const RewardError&) {
      ++out.dropped;
      continue;
    }
    label.rationale = reply.text;
    values[i] = label.reward_value;
    out.labels.push_back(std::move(label));
  }
  return out;
}

const Table& governing_table(const StepLabel& label, const TaskInstance& task) {
  return label.table_prefix ? *label.table_prefix : task.table;
}

StepLabel synthesize_tool_calls(const StepLabel& label, const Table& table) {
  StepLabel out = label;
  std::string text;
  std::size_t pos = 0;
  const auto& src = label.rationale;
  while (auto span = next_span(src, pos, table)) {
    auto value = dsl::execute(dsl::parse_query(span->query), table);
    auto result = dsl::format_result(value);
    text += src.substr(pos, span->begin - pos);
    text += "<tool>" + span->query + "</tool><result>" + result + "</result>";
    out.tool_records.push_back({span->query, result});
    if (!agrees(span->claimed, value))
      out.flags.push_back("disagreement: " + span->query + " claimed " + span->claimed + ", tool " + result);
    pos = span->end;
  }
  text += src.substr(pos);
  out.rationale = std::move(text);
  return out;
}

Json instance_to_json(const TrainingInstance& inst) {
  Json labels = Json::array();
  for (const auto& l : inst.labels) labels.push_back(label_to_json(l));
  return Json{{"task", task_to_json(inst.task)},
              {"trajectory", trajectory_to_json(inst.trajectory)},
              {"generator_id", inst.generator_id},
              {"sample_index", inst.sample_index},
              {"labels", std::move(labels)}};
}

TrainingInstance instance_from_json(const Json& j) {
  try {
    TrainingInstance inst;
    inst.task = task_from_json(j.at("task"));
    inst.trajectory = trajectory_from_json(j.at("trajectory"), inst.task.answer_kind);
    inst.generator_id = j.value("generator_id", std::string{});
    inst.sample_index = j.value("sample_index", std::size_t{0});
    for (const auto& l : j.at("labels")) inst.labels.push_back(label_from_json(l));
    return inst;
  } catch (const Json::exception& e) {
    throw CurationError(CurationError::Code::Schema, e.what());
  }
}

EmitResult emit_instances(std::vector<TrainingInstance> instances, const std::filesystem::path& path) {
  std::stable_sort(instances.begin(), instances.end(), [](const TrainingInstance& a, const TrainingInstance& b) {
    return std::tie(a.task.id, a.generator_id, a.sample_index) < std::tie(b.task.id, b.generator_id, b.sample_index);
  });
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CurationError(CurationError::Code::Io, "cannot write " + path.string());
  EmitResult r;
  for (const auto& inst : instances) {
    if (!labels_complete(inst)) {
      ++r.skipped;
      continue;
    }
    for (const auto& l : inst.labels) {
      if (l.table_prefix && l.category != StepCategory::SchemaInteraction)
        throw CurationError(CurationError::Code::Schema, "table prefix on a non schema-interaction label");
    }
    out << instance_to_json(inst).dump() << '\n';
    ++r.written;
  }
  if (!out) throw CurationError(CurationError::Code::Io, "short write to " + path.string());
  return r;
}

std::vector<TrainingInstance> read_instances(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CurationError(CurationError::Code::Io, "cannot read " + path.string());
  std::vector<TrainingInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (is_blank(line)) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw CurationError(CurationError::Code::Schema, e.what());
    }
    out.push_back(instance_from_json(j));
  }
  return out;
}

std::optional<TableRegion> find_region(const Table& table, const Table& sub) {
  TableRegion region;
  for (const auto& h : sub.headers()) {
    auto c = table.column_index(h);
    if (!c || (!region.col_indices.empty() && *c <= region.col_indices.back())) return std::nullopt;
    region.col_indices.push_back(*c);
  }
  std::size_t next = 0;
  for (const auto& row : sub.rows()) {
    bool found = false;
    for (; next < table.num_rows(); ++next) {
      bool eq = true;
      for (std::size_t k = 0; k < region.col_indices.size() && eq; ++k)
        eq = table.rows()[next][region.col_indices[k]] == row[k];
      if (eq) {
        region.row_indices.push_back(next++);
        found = true;
        break;
      }
    }
    if (!found) return std::nullopt;
  }
  return region;
}

AuditReport audit_instances(std::span<const TrainingInstance> instances) {
  AuditReport r;
  for (const auto& inst : instances) {
    ++r.instances;
    const auto& id = inst.trajectory.id;
    if (!labels_complete(inst)) {
      ++r.completeness_failures;
      r.messages.push_back(id + ": labels do not cover every step");
    }
    for (const auto& l : inst.labels) {
      if (l.table_prefix) {
        if (l.category != StepCategory::SchemaInteraction || !find_region(inst.task.table, *l.table_prefix)) {
          ++r.prefix_failures;
          r.messages.push_back(id + ": unsound table prefix on step " + std::to_string(l.step_index));
        }
      }
      if (l.step_index < inst.trajectory.steps.size() &&
          channel_for(inst.trajectory.steps[l.step_index].category) != l.channel()) {
        ++r.channel_failures;
        r.messages.push_back(id + ": channel mismatch on step " + std::to_string(l.step_index));
      }
      for (const auto& t : l.tool_records) {
        ++r.tool_records;
        std::string got;
        try {
          got = dsl::format_result(dsl::execute(dsl::parse_query(t.query), governing_table(l, inst.task)));
        } catch (const std::exception& e) {
          got = std::string("error: ") + e.what();
        }
        if (got != t.result) {
          ++r.fidelity_failures;
          r.messages.push_back(id + ": tool record '" + t.query + "' re-executes to " + got);
        }
      }
    }
  }
  return r;
}

CurationCounters run_curation(std::span<const TaskInstance> tasks, std::span<const PolicySource> policies,
                              std::size_t samples_per_task, Backend& judge, const CurationParams& params,
                              const std::filesystem::path& out_path) {
  CurationCounters counters;
  auto pool = generate_pool(tasks, policies, samples_per_task, judge, params);
  counters.pool = pool.size();
  std::vector<std::size_t> accepted;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].accepted) accepted.push_back(i);
  counters.accepted = accepted.size();

  std::vector<TrainingInstance> instances(accepted.size());
  std::vector<std::size_t> dropped(accepted.size(), 0);
  parallel_for(accepted.size(), params.concurrency, [&](std::size_t k) {
    const auto& e = pool[accepted[k]];
    auto& inst = instances[k];
    inst.task = e.task;
    inst.trajectory = e.trajectory;
    inst.generator_id = e.generator_id;
    inst.sample_index = e.sample_index;
    LabelResult labels;
    try {
      labels = label_steps(e.task, e.trajectory, judge, params.judge_params);
    } catch (const BackendError&) {
      dropped[k] = e.trajectory.steps.size();
      return;
    }
    dropped[k] = labels.dropped;
    for (auto& l : labels.labels) inst.labels.push_back(synthesize_tool_calls(l, governing_table(l, e.task)));
  });
  for (std::size_t k = 0; k < instances.size(); ++k) {
    counters.dropped_labels += dropped[k];
    for (const auto& l : instances[k].labels) counters.flags += l.flags.size();
  }
  auto r = emit_instances(std::move(instances), out_path);
  counters.written = r.written;
  counters.skipped = r.skipped;
  return counters;
}

std::vector<ProbeItem> load_probe_items(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CurationError(CurationError::Code::Io, "cannot read " + path.string());
  std::vector<ProbeItem> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    try {
      auto j = Json::parse(line);
      ProbeItem item;
      item.task = task_from_json(j.at("task"));
      item.trajectory = trajectory_from_json(j.at("trajectory"), item.task.answer_kind);
      out.push_back(std::move(item));
    } catch (const std::exception& e) {
      throw CurationError(CurationError::Code::Schema, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

Json probe_report_to_json(const ProbeReport& r) {
  return Json{{"pairs", r.pairs},
              {"separation_rate", r.separation_rate},
              {"mean_real", r.mean_real},
              {"mean_random", r.mean_random},
              {"skipped", r.skipped}};
}

Trajectory with_region(const Trajectory& trajectory, std::size_t i, const TableRegion& region, const Table& table) {
  Trajectory t = trajectory;
  auto& step = t.steps.at(i);
  step.cited_region = region;
  step.text += "\nRetrieved sub-table:\n" + render_table(extract_region(table, region));
  return t;
}

ProbeReport retrieval_sensitivity_probe(std::span<const ProbeItem> items, StepVerifier& verifier, std::uint64_t seed) {
  struct Pair {
    bool valid = false;
    int real = 0;
    int random = 0;
  };
  std::vector<Pair> pairs(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& item = items[k];
    const auto& steps = item.trajectory.steps;
    auto it = std::find_if(steps.begin(), steps.end(), [](const Step& s) {
      return s.category == StepCategory::TableRetrieval && s.cited_region.has_value();
    });
    if (it == steps.end()) continue;
    auto i = static_cast<std::size_t>(it - steps.begin());
    const auto& real_region = *it->cited_region;
    const auto& table = item.task.table;

    TableRegion rand_region;
    for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
      rand_region = random_region(table, seed + k * 16 + attempt, real_region.row_indices.size(),
                                  real_region.col_indices.size());
      if (!(rand_region == real_region)) break;
    }
    auto real = with_region(item.trajectory, i, real_region, table);
    auto fake = with_region(item.trajectory, i, rand_region, table);
    pairs[k].real = verify_step_checked(verifier, item.task, real, i, MissingVerdict::Negative).reward.value();
    pairs[k].random = verify_step_checked(verifier, item.task, fake, i, MissingVerdict::Negative).reward.value();
    pairs[k].valid = true;
  }

  ProbeReport r;
  std::size_t separated = 0;
  double sum_real = 0.0, sum_random = 0.0;
  for (const auto& p : pairs) {
    if (!p.valid) {
      ++r.skipped;
      continue;
    }
    ++r.pairs;
    separated += p.real > p.random ? 1 : 0;
    sum_real += p.real;
    sum_random += p.random;
    r.rewards.emplace_back(p.real, p.random);
  }
  if (r.pairs > 0) {
    r.separation_rate = static_cast<double>(separated) / static_cast<double>(r.pairs);
    r.mean_real = sum_real / static_cast<double>(r.pairs);
    r.mean_random = sum_random / static_cast<double>(r.pairs);
  }
  return r;
}

}  // namespace tabprm
