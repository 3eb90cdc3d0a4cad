#pragma once

// Table-query mini-language used as the verifier's lookup and computation tool.
//
//   query := "table" ("|" stage)*
//   stage := select "c1" ("," "c2")*      projection
//          | where pred                   row filter
//          | row N                        single row (as a table)
//          | head N                       first N rows
//          | sort "c" [asc|desc]          stable sort, nulls last
//          | cell N "c"                   one cell            (terminal)
//          | sum "c" | mean "c"           numeric aggregates  (terminal)
//          | min "c" | max "c"                                (terminal)
//          | count                        number of rows      (terminal)
//   pred  := conj ("or" conj)*
//   conj  := atom ("and" atom)*
//   atom  := "(" pred ")" | "c" op literal
//   op    := == | != | < | <= | > | >= | contains
//   literal := number | "string" | true | false
//
// Column names and string literals are double-quoted; `\"` and `\\` escape.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tabprm/table.hpp"

namespace tabprm::dsl {

enum class CmpOp { Eq, Ne, Lt, Le, Gt, Ge, Contains };

struct Pred;
using PredPtr = std::shared_ptr<const Pred>;

struct Comparison {
  std::string column;
  CmpOp op = CmpOp::Eq;
  CellValue literal;
  friend bool operator==(const Comparison&, const Comparison&) = default;
};

struct Pred {
  enum class Kind { Cmp, And, Or };
  Kind kind = Kind::Cmp;
  Comparison cmp;  // Kind::Cmp
  PredPtr lhs;     // And / Or
  PredPtr rhs;
};
bool operator==(const Pred& a, const Pred& b);

struct Select { std::vector<std::string> columns; friend bool operator==(const Select&, const Select&) = default; };
struct Where { PredPtr pred; friend bool operator==(const Where& a, const Where& b) { return *a.pred == *b.pred; } };
struct RowAt { std::size_t index = 0; friend bool operator==(const RowAt&, const RowAt&) = default; };
struct CellAt {
  std::size_t index = 0;
  std::string column;
  friend bool operator==(const CellAt&, const CellAt&) = default;
};
struct Sum { std::string column; friend bool operator==(const Sum&, const Sum&) = default; };
struct Mean { std::string column; friend bool operator==(const Mean&, const Mean&) = default; };
struct Count { friend bool operator==(const Count&, const Count&) = default; };
struct Min { std::string column; friend bool operator==(const Min&, const Min&) = default; };
struct Max { std::string column; friend bool operator==(const Max&, const Max&) = default; };
struct Sort {
  std::string column;
  bool descending = false;
  friend bool operator==(const Sort&, const Sort&) = default;
};
struct Head { std::size_t n = 0; friend bool operator==(const Head&, const Head&) = default; };

using Stage = std::variant<Select, Where, RowAt, CellAt, Sum, Mean, Count, Min, Max, Sort, Head>;

bool is_terminal(const Stage& stage);

struct Query {
  std::vector<Stage> stages;
  friend bool operator==(const Query&, const Query&) = default;
};

/// Canonical text of a query; parse_query(to_text(q)) == q.
std::string to_text(const Query& query);

using ToolValue = std::variant<CellValue, Table>;

struct ExecBudget {
  std::uint64_t max_cell_touches = 1'000'000;
  std::uint64_t max_result_cells = 100'000;
};

class QueryError : public std::runtime_error {
 public:
  enum class Code {
    Syntax,
    AggregateNotTerminal,
    UnknownColumn,
    NonNumericCell,
    EmptyAggregate,
    BudgetExceeded,
    RowOutOfRange,
  };

  QueryError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }
  std::string_view code_name() const noexcept;

  // Syntax: byte offset into the query text and the expected token.
  std::size_t position = 0;
  std::string expected;
  // NonNumericCell: offending row and column name.
  std::size_t row = 0;
  std::string column;

 private:
  Code code_;
};

Query parse_query(std::string_view text);
ToolValue execute(const Query& query, const Table& table, const ExecBudget& budget = {});
std::string format_result(const ToolValue& value);
std::string format_scalar(const CellValue& value);

}  // namespace tabprm::dsl
