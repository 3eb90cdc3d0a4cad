#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <mutex>
#include <set>

#include "support.hpp"
#include "tabprm/config.hpp"
#include "tabprm/curation.hpp"
#include "tabprm/text_util.hpp"

using namespace tabprm;

namespace {

std::vector<corpus::CorpusTask> small_corpus(std::size_t n = 3) {
  corpus::CorpusOptions o;
  o.tasks = n;
  o.candidates = 1;
  o.seed = 11;
  return corpus::synthetic_corpus(o);
}

long column_sum(const Table& t, const std::string& column) {
  long total = 0;
  auto c = *t.column_index(column);
  for (const auto& row : t.rows()) total += static_cast<long>(as_double(row[c]));
  return total;
}

const TaskInstance* task_in(std::span<const ChatMessage> messages, const std::vector<TaskInstance>& tasks) {
  const auto& user = messages.back().role == Role::User ? messages.back().content : messages[1].content;
  for (const auto& t : tasks)
    if (user.find(render_table(t.table)) != std::string::npos) return &t;
  return nullptr;
}

/// Policy that answers each task correctly and records the seeds it saw.
struct HonestPolicy {
  std::vector<TaskInstance> tasks;
  std::shared_ptr<std::mutex> mu = std::make_shared<std::mutex>();
  std::shared_ptr<std::multiset<std::int64_t>> seeds = std::make_shared<std::multiset<std::int64_t>>();

  std::shared_ptr<Backend> backend(const std::string& name) {
    return std::make_shared<corpus::ResponderBackend>(
        [tasks = tasks, mu = mu, seeds = seeds](std::span<const ChatMessage> m, const SamplingParams& p) {
          {
            std::lock_guard lock(*mu);
            seeds->insert(p.seed.value_or(-1));
          }
          const auto* t = task_in(m, tasks);
          if (!t) return std::string("no idea");
          return corpus::candidate_text(*t, "points", column_sum(t->table, "points"), 0);
        },
        name);
  }
};

CurationParams params(std::int64_t seed = 100) {
  CurationParams p;
  p.seed = seed;
  p.concurrency = 4;
  return p;
}

const StepLabel* label_at(const LabelResult& r, std::size_t i) {
  for (const auto& l : r.labels)
    if (l.step_index == i) return &l;
  return nullptr;
}

TrainingInstance labeled(const TaskInstance& task, const std::string& text, std::size_t sample) {
  TrainingInstance inst;
  inst.task = task;
  inst.trajectory = parse_trajectory(text, task);
  inst.trajectory.id = task.id + ":g:" + std::to_string(sample);
  inst.trajectory.task_id = task.id;
  inst.generator_id = "g";
  inst.sample_index = sample;
  for (std::size_t i = 0; i < inst.trajectory.steps.size(); ++i) {
    StepLabel l;
    l.step_index = i;
    l.category = inst.trajectory.steps[i].category;
    l.reward_value = 1;
    l.rationale = "ok \\boxed{1}";
    inst.labels.push_back(l);
  }
  return inst;
}

Table kv(std::vector<std::int64_t> values) {
  std::vector<std::vector<CellValue>> rows;
  for (std::size_t i = 0; i < values.size(); ++i)
    rows.push_back({CellValue("r" + std::to_string(i)), CellValue(values[i])});
  return Table({"k", "v"}, std::move(rows));
}

CurationError::Code curation_error(auto&& fn) {
  try {
    fn();
  } catch (const CurationError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no CurationError thrown";
  return CurationError::Code::Io;
}

}  // namespace

TEST(Votes, Parse) {
  EXPECT_TRUE(parse_vote("looks right \\boxed{pass}"));
  EXPECT_FALSE(parse_vote("\\boxed{ FAIL }"));
  EXPECT_EQ(curation_error([] { parse_vote("no verdict"); }), CurationError::Code::JudgeUnparsable);
  EXPECT_EQ(curation_error([] { parse_vote("\\boxed{maybe}"); }), CurationError::Code::JudgeUnparsable);
}

TEST(Pool, TwoJudgesGateAcceptance) {
  auto corpus = small_corpus();
  auto tasks = corpus::tasks_of(corpus);
  HonestPolicy honest{tasks};
  std::vector<PolicySource> policies{{"alpha", honest.backend("alpha")}, {"beta", honest.backend("beta")}};
  corpus::ResponderBackend judge(corpus::rule_judge(tasks), "judge");

  auto pool = generate_pool(tasks, policies, 2, judge, params());
  ASSERT_EQ(pool.size(), 12u);
  for (const auto& e : pool) {
    EXPECT_TRUE(e.judge_a && e.judge_b) << e.error.value_or("");
    EXPECT_TRUE(e.accepted);
    EXPECT_EQ(e.trajectory.task_id, e.task.id);
  }
  EXPECT_EQ(pool[0].generator_id, "alpha");
  EXPECT_EQ(pool[2].generator_id, "beta");
  EXPECT_EQ(*honest.seeds, (std::multiset<std::int64_t>{100, 100, 100, 100, 100, 100, 101, 101, 101, 101, 101, 101}));

  const Table& picky = tasks[1].table;
  auto base = corpus::rule_judge(tasks);
  corpus::ResponderBackend strict(
      [&](std::span<const ChatMessage> m, const SamplingParams& p) {
        bool wellformed = m[0].content.find("well formed") != std::string::npos;
        if (wellformed && m.back().content.find(render_table(picky)) != std::string::npos)
          return std::string("Step numbering is broken. \\boxed{fail}");
        return base(m, p);
      },
      "strict");
  pool = generate_pool(tasks, policies, 2, strict, params());
  std::size_t rejected = 0;
  for (const auto& e : pool) {
    EXPECT_TRUE(e.judge_a);
    if (e.task.id == tasks[1].id) {
      EXPECT_FALSE(e.judge_b);
      EXPECT_FALSE(e.accepted);
      ++rejected;
    } else {
      EXPECT_TRUE(e.accepted);
    }
  }
  EXPECT_EQ(rejected, 4u);
}

TEST(Pool, UnfinishedSolutionFailsCompleteness) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  corpus::ResponderBackend cut(
      [&](std::span<const ChatMessage>, const SamplingParams&) {
        auto text = corpus::candidate_text(tasks[0], "points", 1, 0);
        return text.substr(0, text.find("Step 3:"));
      },
      "cut");
  std::vector<PolicySource> policies{{"cut", std::shared_ptr<Backend>(&cut, [](Backend*) {})}};
  corpus::ResponderBackend judge(corpus::rule_judge(tasks), "judge");
  auto pool = generate_pool(tasks, policies, 1, judge, params());
  ASSERT_EQ(pool.size(), 1u);
  EXPECT_FALSE(pool[0].judge_a);
  EXPECT_FALSE(pool[0].accepted);
  EXPECT_THROW(generate_pool(tasks, policies, 0, judge, params()), std::invalid_argument);
}

TEST(Pool, PolicyErrorIsRecorded) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  ScriptedBackend empty(std::vector<FixtureEntry>{});
  std::vector<PolicySource> policies{{"empty", std::shared_ptr<Backend>(&empty, [](Backend*) {})}};
  corpus::ResponderBackend judge(corpus::rule_judge(tasks), "judge");
  auto pool = generate_pool(tasks, policies, 1, judge, params());
  EXPECT_FALSE(pool[0].accepted);
  EXPECT_TRUE(pool[0].error);
}

TEST(Labels, WrongColumnRetrievalIsNegativeTab) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  const auto& task = tasks[0];
  auto t = parse_trajectory(corpus::candidate_text(task, "bonus", column_sum(task.table, "bonus"), 0), task);
  ASSERT_EQ(t.steps[0].category, StepCategory::TableRetrieval);
  corpus::ResponderBackend judge(corpus::rule_judge(tasks), "judge");
  auto r = label_steps(task, t, judge, SamplingParams{});
  EXPECT_EQ(r.dropped, 0u);
  ASSERT_EQ(r.labels.size(), t.steps.size());
  EXPECT_EQ(r.labels[0].reward_value, -1);
  EXPECT_EQ(r.labels[0].channel(), RewardChannel::Tab);
  EXPECT_NE(r.labels[0].rationale.find("\"bonus\""), std::string::npos);
  EXPECT_FALSE(r.labels[0].table_prefix);
}

TEST(Labels, SchemaStepAfterBadRetrievalGetsCorrectedPrefix) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  const auto& task = tasks[0];
  auto t = parse_trajectory(corpus::candidate_text(task, "bonus", column_sum(task.table, "bonus"), 0), task);
  auto schema = std::find_if(t.steps.begin(), t.steps.end(),
                             [](const Step& s) { return s.category == StepCategory::SchemaInteraction; });
  ASSERT_NE(schema, t.steps.end());
  corpus::ResponderBackend judge(corpus::rule_judge(tasks), "judge");
  auto r = label_steps(task, t, judge, SamplingParams{});
  const auto* l = label_at(r, schema->index);
  ASSERT_TRUE(l);
  ASSERT_TRUE(l->table_prefix);
  EXPECT_EQ(l->flags, (std::vector<std::string>{"prefix_corrected"}));
  EXPECT_EQ(l->table_prefix->headers(), (std::vector<std::string>{"points"}));
  EXPECT_EQ(l->table_prefix->num_rows(), task.table.num_rows());
}

TEST(Labels, UncorrectablePrefixIsFlagged) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  const auto& task = tasks[0];
  auto t = parse_trajectory(corpus::candidate_text(task, "bonus", column_sum(task.table, "bonus"), 0), task);
  auto base = corpus::rule_judge(tasks);
  corpus::ResponderBackend judge(
      [&](std::span<const ChatMessage> m, const SamplingParams& p) {
        if (m.back().content.find("\nRetrieval step:\n") != std::string::npos) return std::string("<region>oops</region>");
        return base(m, p);
      },
      "judge");
  auto r = label_steps(task, t, judge, SamplingParams{});
  bool flagged = false;
  for (const auto& l : r.labels) {
    if (l.category != StepCategory::SchemaInteraction) continue;
    flagged = true;
    EXPECT_EQ(l.flags, (std::vector<std::string>{"prefix_correction_failed"}));
    ASSERT_TRUE(l.table_prefix);
    EXPECT_EQ(l.table_prefix->headers(), (std::vector<std::string>{"bonus"}));
  }
  EXPECT_TRUE(flagged);
}

TEST(Labels, CorrectRetrievalAndWrongArithmetic) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  const auto& task = tasks[0];
  long gold = column_sum(task.table, "points");
  auto t = parse_trajectory(corpus::candidate_text(task, "points", gold + 3, 1), task);
  corpus::ResponderBackend judge(corpus::rule_judge(tasks), "judge");
  auto r = label_steps(task, t, judge, SamplingParams{});
  ASSERT_EQ(r.labels.size(), t.steps.size());
  EXPECT_EQ(r.labels[0].reward_value, 1);
  ASSERT_TRUE(t.steps[0].cited_region);
  EXPECT_EQ(t.steps[0].cited_region->col_indices, (std::vector<std::size_t>{1}));
  for (const auto& l : r.labels)
    if (l.table_prefix) EXPECT_TRUE(l.flags.empty());

  const auto& last = r.labels.back();
  EXPECT_EQ(last.reward_value, -1);
  EXPECT_EQ(last.channel(), channel_for(t.steps.back().category));
  EXPECT_NE(last.rationale.find("not " + std::to_string(gold + 3)), std::string::npos);
}

TEST(Labels, UnparsableVerdictIsDropped) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  auto t = parse_trajectory(corpus::candidate_text(tasks[0], "points", 1, 0), tasks[0]);
  corpus::ResponderBackend mute([](std::span<const ChatMessage>, const SamplingParams&) { return std::string("hmm"); },
                                "mute");
  auto r = label_steps(tasks[0], t, mute, SamplingParams{});
  EXPECT_TRUE(r.labels.empty());
  EXPECT_EQ(r.dropped, t.steps.size());
}

TEST(ToolSynthesis, GoldenFaultyHandSumIsContradicted) {
  auto task = corpus::golden_task();
  auto t = parse_trajectory(corpus::golden_trajectory_text(), task);
  corpus::ResponderBackend judge(corpus::rule_judge({task}), "judge");
  auto r = label_steps(task, t, judge, SamplingParams{});
  auto faulty = std::find_if(r.labels.begin(), r.labels.end(),
                             [](const StepLabel& l) { return l.rationale.find("16,920") != std::string::npos; });
  ASSERT_NE(faulty, r.labels.end());
  EXPECT_EQ(faulty->reward_value, -1);

  auto fixed = synthesize_tool_calls(*faulty, governing_table(*faulty, task));
  ASSERT_EQ(fixed.tool_records.size(), 1u);
  EXPECT_EQ(fixed.tool_records[0].query, "table | sum \"capacity in persons / hour\"");
  EXPECT_EQ(fixed.tool_records[0].result, "22460");
  EXPECT_NE(fixed.rationale.find("<tool>table | sum \"capacity in persons / hour\"</tool><result>22460</result>"),
            std::string::npos);
  EXPECT_EQ(fixed.rationale.find("= 16,920."), std::string::npos);
  ASSERT_FALSE(fixed.flags.empty());
  EXPECT_EQ(fixed.flags.back(), "disagreement: table | sum \"capacity in persons / hour\" claimed 16,920, tool 22460");
  EXPECT_EQ(fixed.reward_value, faulty->reward_value);
}

TEST(ToolSynthesis, TextWithoutSpansIsUnchanged) {
  StepLabel l;
  l.rationale = "The step follows from the table. \\boxed{1(correct)}";
  auto out = synthesize_tool_calls(l, kv({1, 2}));
  EXPECT_EQ(out.rationale, l.rationale);
  EXPECT_TRUE(out.tool_records.empty());
  EXPECT_TRUE(out.flags.empty());
}

TEST(ToolSynthesis, MeanSumAndPhraseSpans) {
  auto table = kv({2, 4, 9});
  StepLabel l;
  l.rationale = "Mean: (2 + 4 + 9) / 3 = 5. Then 2 + ... + 9 = 15, and the sum of v is 16.";
  auto out = synthesize_tool_calls(l, table);
  ASSERT_EQ(out.tool_records.size(), 3u);
  EXPECT_EQ(out.tool_records[0].query, "table | mean \"v\"");
  EXPECT_EQ(out.tool_records[0].result, "5");
  EXPECT_EQ(out.tool_records[1].query, "table | sum \"v\"");
  EXPECT_EQ(out.tool_records[1].result, "15");
  EXPECT_EQ(out.tool_records[2].query, "table | sum \"v\"");
  EXPECT_EQ(out.flags, (std::vector<std::string>{"disagreement: table | sum \"v\" claimed 16, tool 15"}));
  EXPECT_EQ(out.rationale.rfind("Mean: <tool>", 0), 0u);
}

TEST(ToolSynthesis, RecordsReexecuteUnderGoverningTable) {
  auto table = kv({2, 4, 9});
  StepLabel l;
  l.category = StepCategory::SchemaInteraction;
  l.table_prefix = Table({"v"}, {{CellValue(std::int64_t{2})}, {CellValue(std::int64_t{4})}});
  l.rationale = "2 + 4 = 6";
  TaskInstance task;
  task.table = table;
  auto out = synthesize_tool_calls(l, governing_table(l, task));
  ASSERT_EQ(out.tool_records.size(), 1u);
  EXPECT_EQ(out.tool_records[0].result, "6");
  EXPECT_TRUE(out.flags.empty());
}

TEST(Emit, ZeroInstancesCreatesEmptyFile) {
  tabprm::testing::TempDir dir("emit0");
  auto path = dir / "nested/instances.jsonl";
  auto r = emit_instances({}, path);
  EXPECT_EQ(r.written, 0u);
  EXPECT_EQ(r.skipped, 0u);
  ASSERT_TRUE(std::filesystem::exists(path));
  EXPECT_EQ(std::filesystem::file_size(path), 0u);
  EXPECT_TRUE(read_instances(path).empty());
}

TEST(Emit, IncompleteInstancesAreSkippedAndRoundTrip) {
  auto tasks = corpus::tasks_of(small_corpus(5));
  std::vector<TrainingInstance> insts;
  for (std::size_t i = 0; i < 5; ++i)
    insts.push_back(labeled(tasks[4 - i], corpus::candidate_text(tasks[4 - i], "points", 7, 0), 0));
  insts[2].labels.pop_back();
  insts[0].labels[1].tool_records.push_back({"table | count", "3"});
  insts[0].labels[1].flags.push_back("x");

  tabprm::testing::TempDir dir("emit");
  auto r = emit_instances(insts, dir / "i.jsonl");
  EXPECT_EQ(r.written, 4u);
  EXPECT_EQ(r.skipped, 1u);
  auto back = read_instances(dir / "i.jsonl");
  ASSERT_EQ(back.size(), 4u);
  for (std::size_t i = 1; i < back.size(); ++i) EXPECT_LT(back[i - 1].task.id, back[i].task.id);
  const auto& first = *std::find_if(back.begin(), back.end(),
                                    [&](const auto& b) { return b.task.id == insts[0].task.id; });
  EXPECT_EQ(first.labels[1].tool_records[0].query, "table | count");
  EXPECT_EQ(first.labels[1].flags, (std::vector<std::string>{"x"}));
  EXPECT_EQ(first.trajectory.steps.size(), insts[0].trajectory.steps.size());
  EXPECT_EQ(instance_to_json(first), instance_to_json(insts[0]));
}

TEST(Emit, PrefixOnNonSchemaLabelIsRejected) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  auto inst = labeled(tasks[0], corpus::candidate_text(tasks[0], "points", 7, 0), 0);
  ASSERT_EQ(inst.labels[0].category, StepCategory::TableRetrieval);
  inst.labels[0].table_prefix = tasks[0].table;
  tabprm::testing::TempDir dir("emitbad");
  EXPECT_EQ(curation_error([&] { emit_instances({inst}, dir / "i.jsonl"); }), CurationError::Code::Schema);
}

TEST(Emit, ReadErrors) {
  tabprm::testing::TempDir dir("read");
  EXPECT_EQ(curation_error([&] { read_instances(dir / "missing.jsonl"); }), CurationError::Code::Io);
  tabprm::testing::write_file(dir / "bad.jsonl", "{not json}\n");
  EXPECT_EQ(curation_error([&] { read_instances(dir / "bad.jsonl"); }), CurationError::Code::Schema);
  tabprm::testing::write_file(dir / "shape.jsonl", "{\"labels\": []}\n");
  EXPECT_EQ(curation_error([&] { read_instances(dir / "shape.jsonl"); }), CurationError::Code::Schema);
}

TEST(Audit, FindRegion) {
  auto table = kv({2, 4, 9});
  auto region = find_region(table, Table({"v"}, {{CellValue(std::int64_t{4})}, {CellValue(std::int64_t{9})}}));
  ASSERT_TRUE(region);
  EXPECT_EQ(region->col_indices, (std::vector<std::size_t>{1}));
  EXPECT_EQ(region->row_indices, (std::vector<std::size_t>{1, 2}));
  EXPECT_FALSE(find_region(table, Table({"v"}, {{CellValue(std::int64_t{5})}})));
  EXPECT_FALSE(find_region(table, Table({"v", "k"}, {})));
}

TEST(Audit, CuratedDemoOutputIsSound) {
  auto cfg = load_config(tabprm::testing::demo_dir() / "curate.json");
  auto tasks = load_tasks(tabprm::testing::demo_dir() / "tasks.jsonl");
  std::vector<PolicySource> policies{{cfg.policy->model, make_backend(*cfg.policy, std::nullopt)}};
  auto judge = make_backend(*cfg.judge, std::nullopt);
  CurationParams p;
  p.policy_params = cfg.policy->params;
  p.judge_params = cfg.judge->params;
  p.seed = cfg.seed;
  p.concurrency = 4;

  tabprm::testing::TempDir dir("audit");
  auto counters = run_curation(tasks, policies, cfg.samples_per_task, *judge, p, dir / "instances.jsonl");
  EXPECT_EQ(counters.pool, tasks.size());
  EXPECT_GT(counters.accepted, 0u);
  EXPECT_LT(counters.accepted, counters.pool);
  EXPECT_EQ(counters.written + counters.skipped, counters.accepted);
  EXPECT_GT(counters.flags, 0u);

  auto insts = read_instances(dir / "instances.jsonl");
  ASSERT_EQ(insts.size(), counters.written);
  auto report = audit_instances(insts);
  EXPECT_TRUE(report.ok()) << (report.messages.empty() ? "" : report.messages.front());
  EXPECT_GT(report.tool_records, 0u);

  bool tampered = false;
  for (auto& inst : insts)
    for (auto& l : inst.labels)
      if (!tampered && !l.tool_records.empty()) {
        l.tool_records[0].result = "-1";
        tampered = true;
      }
  ASSERT_TRUE(tampered);
  insts.front().labels.pop_back();
  auto bad = audit_instances(insts);
  EXPECT_FALSE(bad.ok());
  EXPECT_EQ(bad.fidelity_failures, 1u);
  EXPECT_EQ(bad.completeness_failures, 1u);
}

TEST(Audit, UnsoundPrefixIsReported) {
  auto tasks = corpus::tasks_of(small_corpus(1));
  auto inst = labeled(tasks[0], corpus::candidate_text(tasks[0], "points", 7, 0), 0);
  auto schema = std::find_if(inst.labels.begin(), inst.labels.end(),
                             [](const StepLabel& l) { return l.category == StepCategory::SchemaInteraction; });
  ASSERT_NE(schema, inst.labels.end());
  schema->table_prefix = Table({"points"}, {{CellValue(std::int64_t{-12345})}});
  auto r = audit_instances(std::vector<TrainingInstance>{inst});
  EXPECT_EQ(r.prefix_failures, 1u);
  inst.labels[0].category = StepCategory::InnerThinking;
  r = audit_instances(std::vector<TrainingInstance>{inst});
  EXPECT_EQ(r.channel_failures, 1u);
}

namespace {

std::map<std::string, TableRegion> gold_regions(const std::vector<ProbeItem>& items) {
  std::map<std::string, TableRegion> gold;
  for (const auto& item : items)
    for (const auto& s : item.trajectory.steps)
      if (s.category == StepCategory::TableRetrieval && s.cited_region) {
        gold.emplace(item.trajectory.id, *s.cited_region);
        break;
      }
  return gold;
}

/// Region oracle for the first `honest` items; the rest cannot tell regions apart.
class PartialOracle : public StepVerifier {
 public:
  PartialOracle(std::map<std::string, TableRegion> gold, std::set<std::string> honest)
      : oracle_(std::move(gold)), honest_(std::move(honest)) {}
  StepVerdict verify_step(const TaskInstance& task, const Trajectory& t, std::size_t i) override {
    if (honest_.count(t.id)) return oracle_.verify_step(task, t, i);
    return constant_.verify_step(task, t, i);
  }
  std::string name() const override { return "partial"; }

 private:
  RegionOracleVerifier oracle_;
  ConstantVerifier constant_{1};
  std::set<std::string> honest_;
};

}  // namespace

TEST(Probe, OracleSeparatesConstantDoesNot) {
  auto items = load_probe_items(tabprm::testing::demo_dir() / "trajectories.jsonl");
  auto gold = gold_regions(items);
  ASSERT_FALSE(gold.empty());

  RegionOracleVerifier oracle(gold);
  auto r = retrieval_sensitivity_probe(items, oracle, 0);
  EXPECT_EQ(r.pairs, gold.size());
  EXPECT_EQ(r.pairs + r.skipped, items.size());
  EXPECT_DOUBLE_EQ(r.separation_rate, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_real, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_random, -1.0);

  ConstantVerifier constant(1);
  auto c = retrieval_sensitivity_probe(items, constant, 0);
  EXPECT_EQ(c.pairs, r.pairs);
  EXPECT_DOUBLE_EQ(c.separation_rate, 0.0);
  EXPECT_DOUBLE_EQ(c.mean_real, c.mean_random);

  auto j = probe_report_to_json(r);
  EXPECT_EQ(j["pairs"], r.pairs);
  EXPECT_EQ(j["separation_rate"], 1.0);
}

TEST(Probe, SeparationRateIsTheHonestFraction) {
  auto items = load_probe_items(tabprm::testing::demo_dir() / "trajectories.jsonl");
  auto gold = gold_regions(items);
  std::set<std::string> honest;
  for (const auto& [id, region] : gold)
    if (honest.size() * 4 < gold.size()) honest.insert(id);
  PartialOracle v(gold, honest);
  auto r = retrieval_sensitivity_probe(items, v, 3);
  ASSERT_EQ(r.pairs, gold.size());
  EXPECT_DOUBLE_EQ(r.separation_rate, static_cast<double>(honest.size()) / static_cast<double>(gold.size()));
}

TEST(Probe, RandomRegionMatchesShapeAndIsSeeded) {
  auto items = load_probe_items(tabprm::testing::demo_dir() / "trajectories.jsonl");
  RegionOracleVerifier oracle(gold_regions(items));
  auto a = retrieval_sensitivity_probe(items, oracle, 5);
  auto b = retrieval_sensitivity_probe(items, oracle, 5);
  EXPECT_EQ(a.rewards, b.rewards);

  const auto& item = items.front();
  TableRegion r{{0}, {0}};
  auto t = with_region(item.trajectory, 0, r, item.task.table);
  EXPECT_EQ(t.steps[0].cited_region, r);
  EXPECT_NE(t.steps[0].text.find("Retrieved sub-table:"), std::string::npos);
  EXPECT_EQ(t.steps.size(), item.trajectory.steps.size());
}
