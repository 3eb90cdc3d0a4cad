#include <gtest/gtest.h>

#include <map>

#include "support.hpp"
#include "tabprm/table.hpp"

using namespace tabprm;
using tabprm::testing::TempDir;

namespace {

Table grid3() {
  return Table({"a", "b", "c"}, {{std::int64_t{1}, std::int64_t{2}, std::int64_t{3}},
                                 {std::int64_t{4}, std::int64_t{5}, std::int64_t{6}},
                                 {std::int64_t{7}, std::int64_t{8}, std::int64_t{9}}});
}

TableError::Code table_error_code(auto&& fn) {
  try {
    fn();
  } catch (const TableError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no TableError thrown";
  return TableError::Code::Decode;
}

}  // namespace

TEST(Cells, InferenceTypesNumbersBooleansAndNull) {
  EXPECT_EQ(infer_cell("42"), CellValue(std::int64_t{42}));
  EXPECT_EQ(infer_cell("3.5"), CellValue(3.5));
  EXPECT_EQ(infer_cell("TRUE"), CellValue(true));
  EXPECT_EQ(infer_cell("false"), CellValue(false));
  EXPECT_TRUE(is_null(infer_cell("")));
  EXPECT_EQ(infer_cell("22,460"), CellValue(std::int64_t{22460}));
  EXPECT_EQ(infer_cell("1,2x"), CellValue(std::string("1,2x")));
}

TEST(ParseTable, HeaderOnly) {
  auto t = parse_table("only\n", TableFormat::Csv);
  EXPECT_EQ(t.num_cols(), 1u);
  EXPECT_EQ(t.num_rows(), 0u);
}

TEST(ParseTable, GoldenLiftTableFromCsvFile) {
  auto bytes = tabprm::testing::read_file(tabprm::testing::source_dir() / "fixtures" / "golden_lifts.csv");
  auto t = parse_table(bytes, TableFormat::Csv);
  ASSERT_EQ(t.num_rows(), 13u);
  EXPECT_EQ(t.headers(), (std::vector<std::string>{"name or route", "capacity in persons / hour"}));
  for (const auto& row : t.rows()) EXPECT_TRUE(std::holds_alternative<std::int64_t>(row[1]));
  EXPECT_EQ(t, corpus::golden_table());
}

TEST(ParseTable, JsonLayout) {
  auto t = parse_table(R"({"columns": ["name or route", "capacity in persons / hour"],
                           "data": [["betten betten village", 350], ["lager 1", 1000]]})",
                       TableFormat::Json);
  EXPECT_EQ(t.num_rows(), 2u);
  EXPECT_EQ(t.at(1, 1), CellValue(std::int64_t{1000}));
}

TEST(ParseTable, RaggedRowReportsPosition) {
  try {
    parse_table("x,y\n1,2\n1,2,3\n", TableFormat::Csv);
    FAIL();
  } catch (const TableError& e) {
    EXPECT_EQ(e.code(), TableError::Code::RaggedRow);
    EXPECT_EQ(e.row_index, 1u);
    EXPECT_EQ(e.expected, 2u);
    EXPECT_EQ(e.got, 3u);
  }
}

TEST(ParseTable, DuplicateHeadersAfterTrimRejected) {
  EXPECT_EQ(table_error_code([] { parse_table("a, a \n1,2\n", TableFormat::Csv); }),
            TableError::Code::DuplicateHeader);
}

TEST(ParseTable, QuotedCsvFields) {
  auto t = parse_table("name,note\n\"a, b\",\"say \"\"hi\"\"\"\n", TableFormat::Csv);
  EXPECT_EQ(t.at(0, 0), CellValue(std::string("a, b")));
  EXPECT_EQ(t.at(0, 1), CellValue(std::string("say \"hi\"")));
}

TEST(Render, SingleCellMarkdown) {
  Table t({"x"}, {});
  EXPECT_EQ(render_table(t), "| x |\n| --- |\n");
  Table one({"x"}, {{CellValue(std::string("x"))}});
  EXPECT_EQ(render_table(one), "| x |\n| --- |\n| x |\n");
}

TEST(Render, NullIsEmptyCell) {
  Table t({"a", "b"}, {{std::monostate{}, std::int64_t{1}}});
  EXPECT_EQ(render_table(t), "| a | b |\n| --- | --- |\n| | 1 |\n");
}

TEST(Render, TsvRoundTripProperty) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> kind(0, 4), small(-50, 50);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t cols = 1 + trial % 4, rows = trial % 6;
    std::vector<std::string> headers;
    for (std::size_t c = 0; c < cols; ++c) headers.push_back("h" + std::to_string(c));
    std::vector<std::vector<CellValue>> data;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<CellValue> row;
      for (std::size_t c = 0; c < cols; ++c) {
        switch (kind(rng)) {
          case 0: row.emplace_back(std::int64_t{small(rng)}); break;
          case 1: row.emplace_back(small(rng) / 4.0 + 0.25); break;
          case 2: row.emplace_back(small(rng) > 0); break;
          case 3: row.emplace_back(std::string("word") + std::to_string(small(rng) + 100)); break;
          default: row.emplace_back(std::monostate{}); break;
        }
      }
      data.push_back(std::move(row));
    }
    Table t(headers, data);
    auto back = parse_table(render_table(t, RenderStyle::Tsv), TableFormat::Csv, '\t');
    ASSERT_EQ(back, t) << render_table(t, RenderStyle::Tsv);
  }
}

TEST(Render, Deterministic) { EXPECT_EQ(render_table(corpus::golden_table()), render_table(corpus::golden_table())); }

TEST(Regions, FullRegionIsIdentity) {
  auto t = corpus::golden_table();
  EXPECT_EQ(extract_region(t, full_region(t)), t);
}

TEST(Regions, HandPickedSubTable) {
  auto sub = extract_region(grid3(), TableRegion{{0, 2}, {1}});
  EXPECT_EQ(sub, Table({"b"}, {{std::int64_t{2}}, {std::int64_t{8}}}));
}

TEST(Regions, OutOfBoundsColumn) {
  EXPECT_EQ(table_error_code([] { extract_region(grid3(), TableRegion{{0}, {3}}); }),
            TableError::Code::IndexOutOfBounds);
}

TEST(Regions, RandomRegionOnSingleCell) {
  Table t({"x"}, {{std::int64_t{1}}});
  EXPECT_EQ(random_region(t, 99, 3, 3), (TableRegion{{0}, {0}}));
}

TEST(Regions, RandomRegionDeterministicAndSized) {
  std::vector<std::string> headers{"a", "b", "c", "d", "e"};
  std::vector<std::vector<CellValue>> rows(10, std::vector<CellValue>(5, CellValue(std::int64_t{0})));
  Table t(headers, rows);
  auto r1 = random_region(t, 5, 3, 2), r2 = random_region(t, 5, 3, 2);
  EXPECT_EQ(r1, r2);
  EXPECT_EQ(r1.row_indices.size(), 3u);
  EXPECT_EQ(r1.col_indices.size(), 2u);
  EXPECT_TRUE(std::is_sorted(r1.row_indices.begin(), r1.row_indices.end()));
}

TEST(Regions, RandomRegionEmptyTable) {
  Table t({"x"}, {});
  EXPECT_EQ(table_error_code([&] { random_region(t, 1, 1, 1); }), TableError::Code::EmptyTable);
}

TEST(Regions, RandomRowsRoughlyUniform) {
  std::vector<std::vector<CellValue>> rows(4, std::vector<CellValue>(4, CellValue(std::int64_t{0})));
  Table t({"a", "b", "c", "d"}, rows);
  std::map<std::size_t, int> freq;
  const int draws = 1000;
  for (int s = 0; s < draws; ++s)
    for (auto r : random_region(t, static_cast<std::uint64_t>(s), 1, 1).row_indices) ++freq[r];
  for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(freq[r] / double(draws), 0.25, 0.05) << "row " << r;
}

TEST(Tasks, EmptyFileGivesNoTasks) {
  TempDir dir("tasks");
  tabprm::testing::write_file(dir / "t.jsonl", "");
  EXPECT_TRUE(load_tasks(dir / "t.jsonl").empty());
}

TEST(Tasks, DemoFixtureLoadsInOrder) {
  auto tasks = load_tasks(tabprm::testing::demo_dir() / "tasks.jsonl");
  ASSERT_EQ(tasks.size(), 20u);
  EXPECT_EQ(tasks.front().id, "golden-lifts");
  EXPECT_EQ(tasks.front().table, corpus::golden_table());
  EXPECT_EQ(tasks[1].id, "task-0");
}

TEST(Tasks, ThreeTaskRoundTrip) {
  TempDir dir("tasks");
  std::string body;
  for (int i = 0; i < 3; ++i) {
    TaskInstance t;
    t.id = "t" + std::to_string(i);
    t.table = Table({"k", "v"}, {{CellValue(std::string("x")), CellValue(std::int64_t{i})}});
    t.question = "q" + std::to_string(i);
    t.gold_answer = CellValue(std::int64_t{i});
    t.answer_kind = AnswerKind::Number;
    body += task_to_json(t).dump() + "\n";
  }
  tabprm::testing::write_file(dir / "t.jsonl", body);
  auto tasks = load_tasks(dir / "t.jsonl");
  ASSERT_EQ(tasks.size(), 3u);
  EXPECT_EQ(tasks[2].table.at(0, 1), CellValue(std::int64_t{2}));
  EXPECT_EQ(tasks[1].question, "q1");
}

TEST(Tasks, DuplicateIdRejected) {
  TempDir dir("tasks");
  std::string line =
      R"({"id":"a","table":{"columns":["x"],"data":[[1]]},"question":"q","gold_answer":1,"answer_kind":"number"})";
  tabprm::testing::write_file(dir / "t.jsonl", line + "\n" + line + "\n");
  try {
    load_tasks(dir / "t.jsonl");
    FAIL();
  } catch (const TaskError& e) {
    EXPECT_EQ(e.code(), TaskError::Code::DuplicateId);
    EXPECT_EQ(e.line_no(), 2u);
  }
}

TEST(Tasks, SchemaErrorCarriesLine) {
  TempDir dir("tasks");
  tabprm::testing::write_file(dir / "t.jsonl", R"({"id":"a"})" "\n");
  try {
    load_tasks(dir / "t.jsonl");
    FAIL();
  } catch (const TaskError& e) {
    EXPECT_EQ(e.code(), TaskError::Code::Schema);
    EXPECT_EQ(e.line_no(), 1u);
  }
}
