#include "corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <regex>
#include <fstream>
#include <stdexcept>

#include "tabprm/curation.hpp"
#include "tabprm/trajectory.hpp"
#include "tabprm/verifier.hpp"
#include "tabprm/tts.hpp"

namespace tabprm::corpus {

namespace {

const std::vector<std::pair<std::string, std::int64_t>> kLifts = {
    {"betten betten village", 350}, {"betten village bettmeralp", 500}, {"bettmeralp chalet", 970},
    {"bettmeralp cable car", 10000}, {"bettmerhorn gondola", 2000},    {"wurzenbord chairlift", 2800},
    {"schönbiel", 650},               {"alpmatten 1", 650},             {"alpmatten 2", 1000},
    {"blausee", 1000},                {"steibenkreuz", 720},            {"trainerlift", 820},
    {"lager 1", 1000},
};

std::string first_quoted(std::string_view text) {
  auto a = text.find('"');
  if (a == std::string_view::npos) return {};
  auto b = text.find('"', a + 1);
  if (b == std::string_view::npos) return {};
  return std::string(text.substr(a + 1, b - a - 1));
}

std::vector<std::string> all_quoted(const std::string& text) {
  static const std::regex re("\"([^\"]+)\"");
  std::vector<std::string> out;
  for (std::sregex_iterator it(text.begin(), text.end(), re), end; it != end; ++it) out.push_back((*it)[1].str());
  return out;
}

std::string section(const std::string& text, const std::string& header) {
  auto at = text.find(header);
  if (at == std::string::npos) return {};
  auto start = at + header.size();
  auto end = text.find('\n', start);
  return text.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

std::vector<std::int64_t> column_values(const Table& table, const std::string& column) {
  std::vector<std::int64_t> out;
  auto c = *table.column_index(column);
  for (const auto& row : table.rows()) out.push_back(std::get<std::int64_t>(row[c]));
  return out;
}

std::string join(const std::vector<std::int64_t>& v, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + std::to_string(v[i]);
  return out;
}

struct Arithmetic {
  std::vector<double> operands;
  double claimed = 0;
  std::string claimed_text;
};

std::optional<Arithmetic> arithmetic(const std::string& step) {
  static const std::regex re(R"(((?:\d[\d,]*\s*\+\s*)+\d[\d,]*)\s*=\s*(\d[\d,]*))");
  std::smatch m;
  if (!std::regex_search(step, m, re)) return std::nullopt;
  auto num = [](std::string s) {
    s.erase(std::remove(s.begin(), s.end(), ','), s.end());
    return std::stod(s);
  };
  Arithmetic a;
  static const std::regex term(R"(\d[\d,]*)");
  auto run = m[1].str();
  for (std::sregex_iterator it(run.begin(), run.end(), term), end; it != end; ++it) a.operands.push_back(num(it->str()));
  a.claimed_text = m[2].str();
  a.claimed = num(a.claimed_text);
  return a;
}

std::string fmt(double x) { return std::to_string(static_cast<long long>(std::llround(x))); }

}  // namespace

Table golden_table() {
  std::vector<std::vector<CellValue>> rows;
  for (const auto& [name, cap] : kLifts) rows.push_back({CellValue(name), CellValue(cap)});
  return Table({"name or route", kGoldenColumn}, std::move(rows), "lifts");
}

TaskInstance golden_task() {
  TaskInstance t;
  t.id = "golden-lifts";
  t.table = golden_table();
  t.question = std::string("What is the total \"") + kGoldenColumn + "\" of all lifts?";
  t.gold_answer = CellValue(std::int64_t{22460});
  t.answer_kind = AnswerKind::Number;
  return t;
}

std::string golden_trajectory_text() {
  auto values = column_values(golden_table(), kGoldenColumn);
  return std::string("<think>\nStep 1: I need the \"") + kGoldenColumn + "\" column for every lift in the table.\n" +
         "Step 2: The \"" + kGoldenColumn + "\" values are " + join(values, ", ") + ".\n" +
         "Step 3: Adding them: " + join(values, " + ") + " = 22460.\n" +
         "Step 4: So the overall carrying capacity is 22460 persons per hour.\n" +
         "</think>\nFinal Answer is \\boxed{22460}";
}

std::string candidate_text(const TaskInstance& task, const std::string& cited_column, long claimed, int wording) {
  auto values = column_values(task.table, cited_column);
  std::string first = wording % 2 == 0 ? "Step 1: I need the \"" + cited_column + "\" column for every row.\n"
                                       : "Step 1: Let me look up the \"" + cited_column + "\" values of all rows.\n";
  return "<think>\n" + first + "Step 2: The \"" + cited_column + "\" values are " + join(values, ", ") + ".\n" +
         "Step 3: Adding them: " + join(values, " + ") + " = " + std::to_string(claimed) + ".\n" +
         "</think>\nFinal Answer is \\boxed{" + std::to_string(claimed) + "}";
}

std::vector<CorpusTask> synthetic_corpus(const CorpusOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int> rows_dist(3, 6), value(1, 99), delta(1, 9);
  std::bernoulli_distribution correct(options.p_correct), coin(0.5);
  std::vector<CorpusTask> out;
  for (std::size_t i = 0; i < options.tasks; ++i) {
    CorpusTask ct;
    int n = rows_dist(rng);
    std::vector<std::vector<CellValue>> rows;
    for (int r = 0; r < n; ++r)
      rows.push_back({CellValue("item " + std::to_string(r + 1)), CellValue(std::int64_t{value(rng)}),
                      CellValue(std::int64_t{value(rng)})});
    ct.column = "points";
    ct.task.id = "task-" + std::to_string(i);
    ct.task.table = Table({"name", "points", "bonus"}, std::move(rows), ct.task.id);
    ct.task.question = "What is the total \"points\" over all rows?";
    auto values = column_values(ct.task.table, "points");
    long gold = std::accumulate(values.begin(), values.end(), 0L);
    ct.task.gold_answer = CellValue(std::int64_t{gold});
    ct.task.answer_kind = AnswerKind::Number;
    for (std::size_t k = 0; k < options.candidates; ++k) {
      bool ok = correct(rng);
      long claimed = ok ? gold : gold + (coin(rng) ? 1 : -1) * delta(rng);
      std::string text;
      if (k == 0 && options.wrong_retrieval_every && i % options.wrong_retrieval_every == 3) {
        auto bonus = column_values(ct.task.table, "bonus");
        claimed = std::accumulate(bonus.begin(), bonus.end(), 0L);
        ok = claimed == gold;
        text = candidate_text(ct.task, "bonus", claimed, 0);
      } else if (k == 0 && options.unfinished_every && i % options.unfinished_every == 5) {
        text = candidate_text(ct.task, "points", claimed, 0);
        text = text.substr(0, text.find("Step 3:"));
        ok = false;
      } else {
        text = candidate_text(ct.task, "points", claimed, static_cast<int>(k % 2));
      }
      ct.candidates.push_back(std::move(text));
      ct.correct.push_back(ok);
    }
    out.push_back(std::move(ct));
  }
  return out;
}

std::vector<FixtureEntry> policy_entries(std::span<const CorpusTask> tasks, const SamplingParams& params) {
  std::vector<FixtureEntry> out;
  for (const auto& t : tasks) {
    auto key = fixture_key(policy_prompt(t.task), params);
    for (const auto& c : t.candidates) {
      FixtureEntry e;
      e.digest = key;
      e.text = c;
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::vector<TaskInstance> tasks_of(std::span<const CorpusTask> corpus) {
  std::vector<TaskInstance> out;
  for (const auto& c : corpus) out.push_back(c.task);
  return out;
}

Completion ResponderBackend::do_complete(std::span<const ChatMessage> messages, const SamplingParams& params) {
  Completion c;
  c.text = fn_(messages, params);
  c.finish_reason = apply_stop_sequences(c.text, params.stop_sequences) ? FinishReason::ToolPause : FinishReason::Stop;
  c.completion_tokens = static_cast<std::int64_t>(c.text.size() / 4);
  return c;
}

Responder rule_judge(std::vector<TaskInstance> tasks) {
  return [tasks = std::move(tasks)](std::span<const ChatMessage> messages, const SamplingParams&) -> std::string {
    const std::string& user = messages.back().content;
    auto question = section(user, "Question: ");
    auto task = std::find_if(tasks.begin(), tasks.end(), [&](const auto& t) {
      return t.question == question && user.find(render_table(t.table)) != std::string::npos;
    });
    if (task == tasks.end()) return "I cannot tell which task this is.";
    const std::string column = first_quoted(question);

    if (auto at = user.find("\nSolution:\n"); at != std::string::npos) {
      auto answer = user.find("</think>", at);
      bool boxed = answer != std::string::npos && user.find("\\boxed{", answer) != std::string::npos;
      return boxed ? "The solution reasons step by step and states its answer. \\boxed{pass}"
                   : "The solution never states a final answer. \\boxed{fail}";
    }

    if (user.find("\nRetrieval step:\n") != std::string::npos) {
      std::string rows;
      for (std::size_t r = 0; r < task->table.num_rows(); ++r) rows += (r ? ", " : "") + std::to_string(r);
      return "The question needs every row of \"" + column + "\". <region>{\"rows\": [" + rows + "], \"cols\": [" +
             std::to_string(*task->table.column_index(column)) + "]}</region>";
    }

    auto label_at = user.find("\nStep to label:\n");
    if (label_at == std::string::npos) return "Unrecognised request.";
    std::string step = user.substr(label_at + 16);
    for (const auto& q : all_quoted(step))
      if (q != column)
        return "The step works with \"" + q + "\" but the question asks about \"" + column +
               "\". The step is \\boxed{-1(incorrect)}";

    if (auto a = arithmetic(step)) {
      if (task->id == "golden-lifts")
        return "Let me add each part together: " + join(column_values(task->table, column), " + ") +
               " = 16,920. Since the provided step gives a final calculation result of " + a->claimed_text +
               ", which is not equal to 16,920, the step is incorrect. The step is \\boxed{-1(incorrect)}";
      double total = std::accumulate(a->operands.begin(), a->operands.end(), 0.0);
      std::string recheck;
      for (std::size_t i = 0; i < a->operands.size(); ++i) recheck += (i ? " + " : "") + fmt(a->operands[i]);
      recheck += " = " + fmt(total);
      if (total == a->claimed) return "Recomputing: " + recheck + ", as claimed. The step is \\boxed{1(correct)}";
      return "Recomputing: " + recheck + ", not " + a->claimed_text + ". The step is \\boxed{-1(incorrect)}";
    }
    return "The step follows from the table and the previous steps. The step is \\boxed{1(correct)}";
  };
}

std::string rule_prm(std::span<const ChatMessage> messages, const SamplingParams&) {
  std::string user, prefill;
  for (const auto& m : messages) {
    if (m.role == Role::User) user = m.content;
    if (m.role == Role::Assistant) prefill = m.content;
  }
  auto at = user.find("\nStep to verify:\n");
  std::string step = at == std::string::npos ? std::string{} : user.substr(at + 17);
  auto column = first_quoted(section(user, "Question: "));
  auto a = arithmetic(step);
  if (!a) return "The step is consistent with the table. The step is \\boxed{1(correct)}";

  auto result_at = prefill.rfind("<result>");
  if (result_at == std::string::npos)
    return "I will recompute the total with the table tool. <tool>table | sum \"" + column + "\"</tool>";
  auto end = prefill.find("</result>", result_at);
  auto result = prefill.substr(result_at + 8, end - result_at - 8);
  bool ok = std::fabs(std::stod(result) - a->claimed) < 1e-9;
  return " The tool returns " + result + (ok ? ", matching" : ", which differs from") + " the claimed " +
         a->claimed_text + ". The step is " + (ok ? "\\boxed{1(correct)}" : "\\boxed{-1(incorrect)}");
}

namespace {

void write_lines(const std::filesystem::path& path, const std::vector<Json>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) out << l.dump() << '\n';
}

void write_config(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json scripted(const std::string& fixture, const SamplingParams& params) {
  return Json{{"kind", "scripted"}, {"fixture", fixture}, {"params", params_to_json(params)}};
}

}  // namespace

void write_demo_fixtures(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const SamplingParams policy_params{0.7, 0.95, 2048, {}, std::nullopt};
  const SamplingParams prm_params{0.0, 1.0, 2048, {}, std::nullopt};
  const SamplingParams judge_params{0.0, 1.0, 1024, {}, std::nullopt};

  CorpusOptions options;
  options.tasks = 19;
  options.wrong_retrieval_every = 7;
  options.unfinished_every = 11;
  auto corpus = synthetic_corpus(options);
  CorpusTask golden{golden_task(), kGoldenColumn, {golden_trajectory_text()}, {true}};
  auto wrong = golden_trajectory_text();
  for (auto at = wrong.find("22460"); at != std::string::npos; at = wrong.find("22460", at)) wrong.replace(at, 5, "16920");
  golden.candidates.push_back(wrong);
  golden.correct.push_back(false);
  corpus.insert(corpus.begin(), golden);
  auto tasks = tasks_of(corpus);

  std::vector<Json> task_lines;
  for (const auto& t : tasks) task_lines.push_back(task_to_json(t));
  write_lines(dir / "tasks.jsonl", task_lines);
  auto policy = policy_entries(corpus, policy_params);
  write_fixture(dir / "policy.jsonl", policy);

  Json base{{"seed", 0}, {"backends", {{"policy", scripted("policy.jsonl", policy_params)}}}};
  Json prm_verifier{{"kind", "scripted_prm"}, {"backend", scripted("prm.jsonl", prm_params)}, {"max_tool_calls_per_step", 4}};

  Json bon = base;
  bon["output_dir"] = "out/bon";
  bon["backends"]["verifier"] = prm_verifier;
  bon["search"] = {{"strategy", "best_of_n"}, {"n", 8}, {"n_values", {1, 2, 4, 8}}, {"aggregator", "mean"}};
  Json beam = base;
  beam["output_dir"] = "out/beam";
  beam["backends"]["verifier"] = prm_verifier;
  beam["search"] = {{"strategy", "beam"}, {"n", 4}, {"beam_branch_m", 2}, {"aggregator", "mean"}};
  Json dvts = beam;
  dvts["output_dir"] = "out/dvts";
  dvts["search"] = {{"strategy", "dvts"}, {"n", 4}, {"beam_branch_m", 2}, {"subtrees_k", 2}, {"aggregator", "mean"}};
  Json oracle = base;
  oracle["output_dir"] = "out/oracle";
  oracle["backends"]["verifier"] = {{"kind", "oracle"}};
  oracle["search"] = {{"strategy", "best_of_n"}, {"n", 8}, {"n_values", {1, 2, 4, 8}}};
  Json majority = base;
  majority["output_dir"] = "out/majority";
  majority["search"] = {{"strategy", "majority"}, {"n", 8}};

  Json curate = base;
  curate["output_dir"] = "out/curate";
  curate["backends"]["judge"] = scripted("judge.jsonl", judge_params);
  curate["curation"] = {{"samples_per_task", 1}};

  Json theorem{{"seed", 0}, {"output_dir", "out/theorem"}, {"theorem", {{"count", 1000}, {"gamma", 0.05}}}};
  Json aligned{{"seed", 0},
               {"output_dir", "out/theorem_aligned"},
               {"theorem", {{"count", 200}, {"reward_model", "sign_aligned"}}}};
  Json faulty{{"seed", 0},
              {"output_dir", "out/theorem_faulty"},
              {"theorem", {{"count", 200}, {"reward_model", "sign_aligned"}, {"faulty_update", true}}}};

  Json probe_oracle{{"seed", 0}, {"output_dir", "out/probe_oracle"}, {"backends", {{"verifier", {{"kind", "region_oracle"}}}}}};
  Json probe_constant{{"seed", 0},
                      {"output_dir", "out/probe_constant"},
                      {"backends", {{"verifier", {{"kind", "constant"}, {"value", 1}}}}}};
  Json score = base;
  score["output_dir"] = "out/score";
  score["backends"]["verifier"] = prm_verifier;

  const std::vector<std::pair<std::string, Json>> configs = {
      {"tts_bon.json", bon},          {"tts_beam.json", beam},         {"tts_dvts.json", dvts},
      {"tts_oracle.json", oracle},    {"tts_majority.json", majority}, {"curate.json", curate},
      {"theorem.json", theorem},      {"theorem_aligned.json", aligned}, {"theorem_faulty.json", faulty},
      {"probe_oracle.json", probe_oracle}, {"probe_constant.json", probe_constant}, {"score.json", score}};
  for (const auto& [name, j] : configs) write_config(dir / name, j);

  // verifier transcripts for every search the configs run
  auto replay = std::make_shared<ScriptedBackend>(policy);
  auto recorder = std::make_shared<RecordingBackend>(std::make_shared<ResponderBackend>(rule_prm, "rule-prm"));
  GenerativePrmConfig prm_config;
  prm_config.params = prm_params;
  GenerativePrm prm(recorder, prm_config);
  for (const Json* j : {&bon, &beam, &dvts}) {
    Json search = (*j)["search"];
    search["params"] = params_to_json(policy_params);
    auto sc = search_config_from_json(search);
    std::vector<std::size_t> ns = search.value("n_values", std::vector<std::size_t>{});
    evaluate_dataset(tasks, *replay, &prm, nullptr, sc, ns);
  }
  for (const auto& t : corpus) {
    for (const auto& text : t.candidates) {
      auto traj = parse_trajectory(text, t.task);
      if (!traj.steps.empty()) verify_trajectory(prm, t.task, traj, Aggregator::Mean, MissingVerdict::Negative);
    }
  }
  auto prm_entries = recorder->entries();
  write_fixture(dir / "prm.jsonl", prm_entries);

  // curation judge transcripts
  auto judge = std::make_shared<RecordingBackend>(std::make_shared<ResponderBackend>(rule_judge(tasks), "rule-judge"));
  std::vector<PolicySource> sources{{"scripted", std::make_shared<ScriptedBackend>(policy)}};
  CurationParams cp;
  cp.policy_params = policy_params;
  cp.judge_params = judge_params;
  auto scratch = fs::temp_directory_path() / ("tabprm-demo-" + std::to_string(std::hash<std::string>{}(dir.string())));
  run_curation(tasks, sources, 1, *judge, cp, scratch / "instances.jsonl");
  fs::remove_all(scratch);
  auto judge_entries = judge->entries();
  write_fixture(dir / "judge.jsonl", judge_entries);

  // probe and score inputs: the first candidate of each task
  std::vector<Json> probe_lines;
  for (const auto& t : corpus) {
    auto traj = parse_trajectory(t.candidates.front(), t.task);
    traj.id = t.task.id + ":0";
    probe_lines.push_back(Json{{"task", task_to_json(t.task)}, {"trajectory", trajectory_to_json(traj)}});
  }
  write_lines(dir / "trajectories.jsonl", probe_lines);
}

}  // namespace tabprm::corpus
