#include <gtest/gtest.h>

#include <random>

#include "support.hpp"
#include "tabprm/dsl.hpp"

using namespace tabprm;
using namespace tabprm::dsl;

namespace {

QueryError::Code query_error(auto&& fn) {
  try {
    fn();
  } catch (const QueryError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no QueryError thrown";
  return QueryError::Code::Syntax;
}

CellValue scalar(const std::string& q, const Table& t, ExecBudget budget = {}) {
  return std::get<CellValue>(execute(parse_query(q), t, budget));
}

Table peaks() {
  auto s = [](const char* x) { return CellValue(std::string(x)); };
  auto i = [](std::int64_t x) { return CellValue(x); };
  return Table({"peak", "country", "elevation (m)", "prominence"},
               {{s("Margherita"), s("Congo"), i(5109), i(3951)},
                {s("Karisimbi"), s("Rwanda"), i(4507), i(3312)},
                {s("Mikeno"), s("Congo"), i(4437), i(1090)},
                {s("Muhabura"), s("Uganda"), i(4127), i(1530)},
                {s("Nyiragongo"), s("Congo"), i(3470), CellValue(std::monostate{})},
                {s("Kahuzi"), s("Congo"), i(2900), i(1400)}});
}

}  // namespace

TEST(Parse, BareTableHasNoStages) { EXPECT_TRUE(parse_query("table").stages.empty()); }

TEST(Parse, WhereThenSumMatchesHandBuiltTree) {
  auto q = parse_query(R"q(table | where "country" == "Congo" | sum "elevation (m)")q");
  auto pred = std::make_shared<Pred>();
  pred->kind = Pred::Kind::Cmp;
  pred->cmp = Comparison{"country", CmpOp::Eq, CellValue(std::string("Congo"))};
  Query expected{{Where{pred}, Sum{"elevation (m)"}}};
  EXPECT_EQ(q, expected);
}

TEST(Parse, AggregateMustBeTerminal) {
  EXPECT_EQ(query_error([] { parse_query(R"(table | sum "x" | head 3)"); }), QueryError::Code::AggregateNotTerminal);
}

TEST(Parse, SyntaxErrorCarriesPosition) {
  try {
    parse_query(R"(table | sum x)");
    FAIL();
  } catch (const QueryError& e) {
    EXPECT_EQ(e.code(), QueryError::Code::Syntax);
    EXPECT_EQ(e.position, 12u);
    EXPECT_FALSE(e.expected.empty());
  }
  EXPECT_EQ(query_error([] { parse_query("tables"); }), QueryError::Code::Syntax);
  EXPECT_EQ(query_error([] { parse_query(R"(table | where "a" == )"); }), QueryError::Code::Syntax);
}

TEST(Parse, CanonicalTextRoundTrips) {
  for (const char* text : {
           R"(table | select "a", "b")",
           R"(table | where ("a" > 1 and "b" contains "x") or "c" != true | count)",
           R"(table | sort "a" desc | head 2 | row 1)",
           R"(table | cell 3 "name \"quoted\"")",
           R"(table | where "x" <= -2.5 | mean "x")",
       }) {
    auto q = parse_query(text);
    EXPECT_EQ(parse_query(to_text(q)), q) << text;
  }
}

TEST(Execute, GoldenSumIs22460) {
  auto v = scalar(R"(table | sum "capacity in persons / hour")", corpus::golden_table());
  EXPECT_EQ(v, CellValue(std::int64_t{22460}));
  EXPECT_EQ(format_scalar(v), "22460");
}

TEST(Execute, CountOnEmptyTable) {
  Table t({"x"}, {});
  EXPECT_EQ(scalar("table | count", t), CellValue(std::int64_t{0}));
  EXPECT_EQ(format_result(execute(parse_query("table | count"), t)), "0");
}

TEST(Execute, FilteredMeanMatchesBruteForce) {
  auto t = peaks();
  auto v = scalar(R"q(table | where "elevation (m)" >= 3000 | mean "prominence")q", t);
  double sum = 0;
  int n = 0;
  for (const auto& row : t.rows()) {
    if (as_double(row[2]) >= 3000 && !is_null(row[3])) {
      sum += as_double(row[3]);
      ++n;
    }
  }
  EXPECT_DOUBLE_EQ(as_double(v), sum / n);
}

TEST(Execute, NullNeverSatisfiesComparisons) {
  auto t = peaks();
  EXPECT_EQ(scalar(R"(table | where "prominence" < 100000 | count)", t), CellValue(std::int64_t{5}));
  EXPECT_EQ(scalar(R"(table | where "prominence" != 0 | count)", t), CellValue(std::int64_t{5}));
}

TEST(Execute, Errors) {
  auto t = peaks();
  EXPECT_EQ(query_error([&] { scalar(R"(table | sum "nope")", t); }), QueryError::Code::UnknownColumn);
  try {
    scalar(R"(table | sum "country")", t);
    FAIL();
  } catch (const QueryError& e) {
    EXPECT_EQ(e.code(), QueryError::Code::NonNumericCell);
    EXPECT_EQ(e.row, 0u);
    EXPECT_EQ(e.column, "country");
  }
  EXPECT_EQ(query_error([&] { scalar(R"(table | where "country" == "Chad" | mean "prominence")", t); }),
            QueryError::Code::EmptyAggregate);
  EXPECT_EQ(query_error([&] { scalar(R"(table | sum "prominence")", t, ExecBudget{3, 100}); }),
            QueryError::Code::BudgetExceeded);
}

TEST(Execute, SelectRowCellMinMax) {
  auto t = peaks();
  auto sel = std::get<Table>(execute(parse_query(R"(table | select "peak" | head 2)"), t));
  EXPECT_EQ(sel, Table({"peak"}, {{CellValue(std::string("Margherita"))}, {CellValue(std::string("Karisimbi"))}}));
  EXPECT_EQ(scalar(R"(table | cell 1 "country")", t), CellValue(std::string("Rwanda")));
  EXPECT_EQ(scalar(R"q(table | min "elevation (m)")q", t), CellValue(std::int64_t{2900}));
  EXPECT_EQ(scalar(R"(table | max "prominence")", t), CellValue(std::int64_t{3951}));
  auto row = std::get<Table>(execute(parse_query("table | row 2"), t));
  EXPECT_EQ(row.num_rows(), 1u);
  EXPECT_EQ(row.at(0, 0), CellValue(std::string("Mikeno")));
  EXPECT_EQ(query_error([&] { execute(parse_query("table | row 6"), t); }), QueryError::Code::RowOutOfRange);
}

TEST(Execute, ContainsAndBooleanLogic) {
  auto t = peaks();
  EXPECT_EQ(scalar(R"(table | where "peak" contains "ongo" and "country" == "Congo" | count)", t),
            CellValue(std::int64_t{1}));
  EXPECT_EQ(scalar(R"(table | where "country" == "Rwanda" or "country" == "Uganda" | count)", t),
            CellValue(std::int64_t{2}));
}

TEST(Execute, SortIsStable) {
  auto s = [](const char* x) { return CellValue(std::string(x)); };
  Table t({"k", "id"}, {{CellValue(std::int64_t{2}), s("a")},
                        {CellValue(std::int64_t{1}), s("b")},
                        {CellValue(std::int64_t{2}), s("c")},
                        {CellValue(std::int64_t{1}), s("d")}});
  auto sorted = std::get<Table>(execute(parse_query(R"(table | sort "k")"), t));
  std::vector<std::string> ids;
  for (const auto& row : sorted.rows()) ids.push_back(std::get<std::string>(row[1]));
  EXPECT_EQ(ids, (std::vector<std::string>{"b", "d", "a", "c"}));
  auto desc = std::get<Table>(execute(parse_query(R"(table | sort "k" desc)"), t));
  ids.clear();
  for (const auto& row : desc.rows()) ids.push_back(std::get<std::string>(row[1]));
  EXPECT_EQ(ids, (std::vector<std::string>{"a", "c", "b", "d"}));
}

TEST(Execute, PureAndRepeatable) {
  auto t = peaks();
  auto before = t;
  auto q = parse_query(R"(table | sort "prominence" desc | head 3)");
  auto a = execute(q, t), b = execute(q, t);
  EXPECT_EQ(a, b);
  EXPECT_EQ(t, before);
}

TEST(Property, FilterThenSumMatchesBruteForce) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> val(-20, 20), rows(0, 8), pick(0, 5);
  const CmpOp ops[] = {CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge};
  const char* op_text[] = {"==", "!=", "<", "<=", ">", ">="};
  for (int trial = 0; trial < 1000; ++trial) {
    int n = rows(rng);
    std::vector<std::vector<CellValue>> data;
    for (int r = 0; r < n; ++r) data.push_back({CellValue(std::int64_t{val(rng)}), CellValue(std::int64_t{val(rng)})});
    Table t({"p", "c"}, data);
    int op = pick(rng);
    int lit = val(rng);
    auto q = std::string(R"(table | where "p" )") + op_text[op] + " " + std::to_string(lit) + R"( | sum "c")";
    std::int64_t expected = 0;
    for (const auto& row : data) {
      auto p = std::get<std::int64_t>(row[0]);
      bool keep = false;
      switch (ops[op]) {
        case CmpOp::Eq: keep = p == lit; break;
        case CmpOp::Ne: keep = p != lit; break;
        case CmpOp::Lt: keep = p < lit; break;
        case CmpOp::Le: keep = p <= lit; break;
        case CmpOp::Gt: keep = p > lit; break;
        case CmpOp::Ge: keep = p >= lit; break;
        default: break;
      }
      if (keep) expected += std::get<std::int64_t>(row[1]);
    }
    ASSERT_EQ(as_double(scalar(q, t)), static_cast<double>(expected)) << q;
  }
}

TEST(Property, BudgetMonotonicity) {
  auto t = corpus::golden_table();
  auto q = parse_query(R"(table | where "capacity in persons / hour" > 700 | sort "name or route" | head 4)");
  std::uint64_t smallest = 0;
  for (std::uint64_t b = 1; b < 500; ++b) {
    try {
      execute(q, t, ExecBudget{b, 100'000});
      smallest = b;
      break;
    } catch (const QueryError& e) {
      ASSERT_EQ(e.code(), QueryError::Code::BudgetExceeded);
    }
  }
  ASSERT_GT(smallest, 0u);
  auto reference = execute(q, t, ExecBudget{smallest, 100'000});
  for (std::uint64_t b = smallest; b < smallest + 200; b += 7) EXPECT_EQ(execute(q, t, ExecBudget{b, 100'000}), reference);
}

TEST(Format, ScalarsAndTables) {
  EXPECT_EQ(format_scalar(CellValue(std::int64_t{22460})), "22460");
  EXPECT_EQ(format_scalar(CellValue(2.5)), "2.5");
  EXPECT_EQ(format_scalar(CellValue(1.0 / 3.0)), "0.333333");
  EXPECT_EQ(format_scalar(CellValue(4.0)), "4");
  Table empty({"a", "b"}, {});
  EXPECT_EQ(format_result(ToolValue(empty)), "| a | b |\n| --- | --- |\n");
}
