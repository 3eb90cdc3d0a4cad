#include "tabprm/dsl.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "tabprm/text_util.hpp"

namespace tabprm::dsl {

namespace {

enum class Tok { Word, String, Number, Pipe, Comma, LParen, RParen, Op, End };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  std::size_t pos = 0;
};

[[noreturn]] void syntax_error(std::size_t pos, const std::string& expected) {
  QueryError err(QueryError::Code::Syntax,
                 "syntax error at position " + std::to_string(pos) + ": expected " + expected);
  err.position = pos;
  err.expected = expected;
  throw err;
}

std::vector<Token> lex(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    Token t;
    t.pos = i;
    if (c == '|') {
      t.kind = Tok::Pipe;
      t.text = "|";
      ++i;
    } else if (c == ',') {
      t.kind = Tok::Comma;
      t.text = ",";
      ++i;
    } else if (c == '(') {
      t.kind = Tok::LParen;
      ++i;
    } else if (c == ')') {
      t.kind = Tok::RParen;
      ++i;
    } else if (c == '"') {
      t.kind = Tok::String;
      ++i;
      bool closed = false;
      while (i < s.size()) {
        if (s[i] == '\\' && i + 1 < s.size()) {
          t.text += s[i + 1];
          i += 2;
        } else if (s[i] == '"') {
          closed = true;
          ++i;
          break;
        } else {
          t.text += s[i++];
        }
      }
      if (!closed) syntax_error(s.size(), "closing '\"'");
    } else if (c == '=' || c == '!' || c == '<' || c == '>') {
      t.kind = Tok::Op;
      t.text = c;
      ++i;
      if (i < s.size() && s[i] == '=') {
        t.text += '=';
        ++i;
      }
      if (t.text == "=" || t.text == "!") syntax_error(t.pos, "comparison operator");
    } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '.') {
      t.kind = Tok::Number;
      while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '.' ||
                              s[i] == '-' || s[i] == '+')) {
        // a sign is only part of the number at the start or after an exponent marker
        if ((s[i] == '-' || s[i] == '+') && i != t.pos && s[i - 1] != 'e' && s[i - 1] != 'E') break;
        t.text += s[i++];
      }
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      t.kind = Tok::Word;
      while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_'))
        t.text += s[i++];
    } else {
      syntax_error(i, "token");
    }
    out.push_back(std::move(t));
  }
  out.push_back(Token{Tok::End, "", s.size()});
  return out;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : toks_(lex(text)) {}

  Query parse() {
    expect_word("table");
    Query q;
    while (peek().kind == Tok::Pipe) {
      auto pipe_pos = next().pos;
      if (!q.stages.empty() && is_terminal(q.stages.back())) {
        QueryError err(QueryError::Code::AggregateNotTerminal,
                       "aggregate stage must terminate the pipeline (stage at position " +
                           std::to_string(pipe_pos) + ")");
        err.position = pipe_pos;
        throw err;
      }
      q.stages.push_back(stage());
    }
    if (peek().kind != Tok::End) syntax_error(peek().pos, "'|' or end of query");
    return q;
  }

 private:
  const Token& peek() const { return toks_[i_]; }
  const Token& next() { return toks_[i_++]; }

  void expect_word(std::string_view w) {
    if (peek().kind != Tok::Word || peek().text != w) syntax_error(peek().pos, "'" + std::string(w) + "'");
    ++i_;
  }

  std::string column() {
    if (peek().kind != Tok::String) syntax_error(peek().pos, "quoted column name");
    return next().text;
  }

  std::size_t index() {
    if (peek().kind != Tok::Number) syntax_error(peek().pos, "non-negative integer");
    const auto& t = next();
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), v);
    if (ec != std::errc() || p != t.text.data() + t.text.size()) syntax_error(t.pos, "non-negative integer");
    return v;
  }

  Stage stage() {
    if (peek().kind != Tok::Word) syntax_error(peek().pos, "stage keyword");
    const auto& kw = next();
    const std::string& k = kw.text;
    if (k == "select") {
      Select s;
      s.columns.push_back(column());
      while (peek().kind == Tok::Comma) {
        next();
        s.columns.push_back(column());
      }
      return s;
    }
    if (k == "where") return Where{pred()};
    if (k == "row") return RowAt{index()};
    if (k == "cell") {
      CellAt c;
      c.index = index();
      c.column = column();
      return c;
    }
    if (k == "sum") return Sum{column()};
    if (k == "mean") return Mean{column()};
    if (k == "min") return Min{column()};
    if (k == "max") return Max{column()};
    if (k == "count") return Count{};
    if (k == "head") return Head{index()};
    if (k == "sort") {
      Sort s;
      s.column = column();
      if (peek().kind == Tok::Word && (peek().text == "asc" || peek().text == "desc")) {
        s.descending = next().text == "desc";
      }
      return s;
    }
    syntax_error(kw.pos, "stage keyword");
  }

  PredPtr pred() {
    auto lhs = conj();
    while (peek().kind == Tok::Word && peek().text == "or") {
      next();
      auto p = std::make_shared<Pred>();
      p->kind = Pred::Kind::Or;
      p->lhs = lhs;
      p->rhs = conj();
      lhs = p;
    }
    return lhs;
  }

  PredPtr conj() {
    auto lhs = atom();
    while (peek().kind == Tok::Word && peek().text == "and") {
      next();
      auto p = std::make_shared<Pred>();
      p->kind = Pred::Kind::And;
      p->lhs = lhs;
      p->rhs = atom();
      lhs = p;
    }
    return lhs;
  }

  PredPtr atom() {
    if (peek().kind == Tok::LParen) {
      next();
      auto p = pred();
      if (peek().kind != Tok::RParen) syntax_error(peek().pos, "')'");
      next();
      return p;
    }
    auto p = std::make_shared<Pred>();
    p->cmp.column = column();
    const auto& op = peek();
    if (op.kind == Tok::Op) {
      static const std::pair<const char*, CmpOp> kOps[] = {{"==", CmpOp::Eq}, {"!=", CmpOp::Ne},
                                                           {"<", CmpOp::Lt},  {"<=", CmpOp::Le},
                                                           {">", CmpOp::Gt},  {">=", CmpOp::Ge}};
      for (const auto& [text, code] : kOps) {
        if (op.text == text) p->cmp.op = code;
      }
    } else if (op.kind == Tok::Word && op.text == "contains") {
      p->cmp.op = CmpOp::Contains;
    } else {
      syntax_error(op.pos, "comparison operator");
    }
    next();
    p->cmp.literal = literal();
    return p;
  }

  CellValue literal() {
    const auto& t = peek();
    if (t.kind == Tok::String) return next().text;
    if (t.kind == Tok::Word && (t.text == "true" || t.text == "false")) return next().text == "true";
    if (t.kind == Tok::Number) {
      auto v = infer_cell(t.text);
      if (!is_numeric(v)) syntax_error(t.pos, "number");
      next();
      return v;
    }
    syntax_error(t.pos, "literal");
  }

  std::vector<Token> toks_;
  std::size_t i_ = 0;
};

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string literal_text(const CellValue& v) {
  if (auto s = std::get_if<std::string>(&v)) return quote(*s);
  return cell_to_string(v);
}

std::string pred_text(const Pred& p) {
  switch (p.kind) {
    case Pred::Kind::Cmp: {
      static const char* kNames[] = {"==", "!=", "<", "<=", ">", ">=", "contains"};
      return quote(p.cmp.column) + " " + kNames[static_cast<int>(p.cmp.op)] + " " +
             literal_text(p.cmp.literal);
    }
    case Pred::Kind::And:
      return "(" + pred_text(*p.lhs) + " and " + pred_text(*p.rhs) + ")";
    case Pred::Kind::Or:
      return "(" + pred_text(*p.lhs) + " or " + pred_text(*p.rhs) + ")";
  }
  return {};
}

// Interpreter -------------------------------------------------------------

class Budget {
 public:
  explicit Budget(const ExecBudget& b) : b_(b) {}
  void touch(std::uint64_t n) {
    used_ += n;
    if (used_ > b_.max_cell_touches)
      throw QueryError(QueryError::Code::BudgetExceeded,
                       "cell-touch budget of " + std::to_string(b_.max_cell_touches) + " exceeded");
  }
  void check_result(const Table& t) const {
    if (static_cast<std::uint64_t>(t.num_rows()) * t.num_cols() > b_.max_result_cells)
      throw QueryError(QueryError::Code::BudgetExceeded,
                       "result exceeds " + std::to_string(b_.max_result_cells) + " cells");
  }

 private:
  ExecBudget b_;
  std::uint64_t used_ = 0;
};

std::size_t require_column(const Table& t, const std::string& name) {
  auto idx = t.column_index(name);
  if (!idx) {
    QueryError err(QueryError::Code::UnknownColumn, "unknown column: " + name);
    err.column = name;
    throw err;
  }
  return *idx;
}

int type_rank(const CellValue& v) {
  if (is_numeric(v)) return 0;
  if (std::holds_alternative<bool>(v)) return 1;
  if (std::holds_alternative<std::string>(v)) return 2;
  return 3;
}

// Three-way comparison of two non-null values of the same rank.
int compare_same_rank(const CellValue& a, const CellValue& b) {
  if (is_numeric(a)) {
    auto ia = std::get_if<std::int64_t>(&a);
    auto ib = std::get_if<std::int64_t>(&b);
    if (ia && ib) return *ia < *ib ? -1 : (*ia > *ib ? 1 : 0);
    double x = as_double(a), y = as_double(b);
    return x < y ? -1 : (x > y ? 1 : 0);
  }
  if (auto ba = std::get_if<bool>(&a)) {
    bool bb = std::get<bool>(b);
    return *ba == bb ? 0 : (*ba ? 1 : -1);
  }
  const auto& sa = std::get<std::string>(a);
  const auto& sb = std::get<std::string>(b);
  return sa < sb ? -1 : (sa > sb ? 1 : 0);
}

bool eval_cmp(const Comparison& c, const CellValue& cell) {
  if (is_null(cell) || is_null(c.literal)) return false;
  if (c.op == CmpOp::Contains) {
    return cell_to_string(cell).find(cell_to_string(c.literal)) != std::string::npos;
  }
  if (type_rank(cell) != type_rank(c.literal)) return c.op == CmpOp::Ne;
  int r = compare_same_rank(cell, c.literal);
  switch (c.op) {
    case CmpOp::Eq: return r == 0;
    case CmpOp::Ne: return r != 0;
    case CmpOp::Lt: return r < 0;
    case CmpOp::Le: return r <= 0;
    case CmpOp::Gt: return r > 0;
    case CmpOp::Ge: return r >= 0;
    case CmpOp::Contains: break;
  }
  return false;
}

void collect_columns(const Pred& p, std::vector<std::string>& out) {
  if (p.kind == Pred::Kind::Cmp) {
    out.push_back(p.cmp.column);
  } else {
    collect_columns(*p.lhs, out);
    collect_columns(*p.rhs, out);
  }
}

bool eval_pred(const Pred& p, const Table& t, std::size_t row, Budget& budget) {
  switch (p.kind) {
    case Pred::Kind::Cmp:
      budget.touch(1);
      return eval_cmp(p.cmp, t.at(row, *t.column_index(p.cmp.column)));
    case Pred::Kind::And:
      return eval_pred(*p.lhs, t, row, budget) && eval_pred(*p.rhs, t, row, budget);
    case Pred::Kind::Or:
      return eval_pred(*p.lhs, t, row, budget) || eval_pred(*p.rhs, t, row, budget);
  }
  return false;
}

// Numeric cells of a column in row order; nulls skipped, anything else non-numeric is an error.
std::vector<CellValue> numeric_cells(const Table& t, const std::string& column, Budget& budget) {
  auto c = require_column(t, column);
  budget.touch(t.num_rows());
  std::vector<CellValue> out;
  for (std::size_t r = 0; r < t.num_rows(); ++r) {
    const auto& v = t.at(r, c);
    if (is_null(v)) continue;
    if (!is_numeric(v)) {
      QueryError err(QueryError::Code::NonNumericCell,
                     "non-numeric cell at row " + std::to_string(r) + " in column \"" + column + "\"");
      err.row = r;
      err.column = column;
      throw err;
    }
    out.push_back(v);
  }
  return out;
}

CellValue sum_cells(const std::vector<CellValue>& cells) {
  bool all_int = std::all_of(cells.begin(), cells.end(),
                             [](const CellValue& v) { return std::holds_alternative<std::int64_t>(v); });
  if (all_int) {
    std::int64_t acc = 0;
    bool overflow = false;
    for (const auto& v : cells) {
      if (__builtin_add_overflow(acc, std::get<std::int64_t>(v), &acc)) {
        overflow = true;
        break;
      }
    }
    if (!overflow) return acc;
  }
  double acc = 0.0;
  for (const auto& v : cells) acc += as_double(v);
  return acc;
}

Table rows_of(const Table& t, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<CellValue>> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(t.rows()[r]);
  return Table(t.headers(), std::move(out), t.source_id());
}

struct StageRunner {
  Table& current;
  Budget& budget;

  ToolValue operator()(const Select& s) {
    std::vector<std::size_t> cols;
    for (const auto& name : s.columns) cols.push_back(require_column(current, name));
    budget.touch(static_cast<std::uint64_t>(current.num_rows()) * cols.size());
    std::vector<std::string> headers;
    for (auto c : cols) headers.push_back(current.headers()[c]);
    std::vector<std::vector<CellValue>> rows;
    for (const auto& row : current.rows()) {
      std::vector<CellValue> r;
      for (auto c : cols) r.push_back(row[c]);
      rows.push_back(std::move(r));
    }
    return Table(std::move(headers), std::move(rows), current.source_id());
  }
  ToolValue operator()(const Where& w) {
    std::vector<std::string> cols;
    collect_columns(*w.pred, cols);
    for (const auto& c : cols) require_column(current, c);
    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < current.num_rows(); ++r) {
      if (eval_pred(*w.pred, current, r, budget)) keep.push_back(r);
    }
    budget.touch(static_cast<std::uint64_t>(keep.size()) * current.num_cols());
    return rows_of(current, keep);
  }
  ToolValue operator()(const RowAt& r) {
    if (r.index >= current.num_rows())
      throw QueryError(QueryError::Code::RowOutOfRange, "row " + std::to_string(r.index) + " out of range");
    budget.touch(current.num_cols());
    return rows_of(current, {r.index});
  }
  ToolValue operator()(const CellAt& c) {
    auto col = require_column(current, c.column);
    if (c.index >= current.num_rows())
      throw QueryError(QueryError::Code::RowOutOfRange, "row " + std::to_string(c.index) + " out of range");
    budget.touch(1);
    return current.at(c.index, col);
  }
  ToolValue operator()(const Sum& s) { return sum_cells(numeric_cells(current, s.column, budget)); }
  ToolValue operator()(const Mean& m) {
    auto cells = numeric_cells(current, m.column, budget);
    if (cells.empty())
      throw QueryError(QueryError::Code::EmptyAggregate, "mean over zero numeric cells");
    return as_double(sum_cells(cells)) / static_cast<double>(cells.size());
  }
  ToolValue operator()(const Count&) { return static_cast<std::int64_t>(current.num_rows()); }
  ToolValue operator()(const Min& m) { return extremum(m.column, -1); }
  ToolValue operator()(const Max& m) { return extremum(m.column, 1); }
  ToolValue operator()(const Sort& s) {
    auto c = require_column(current, s.column);
    budget.touch(static_cast<std::uint64_t>(current.num_rows()) * (current.num_cols() + 1));
    std::vector<std::size_t> order(current.num_rows());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const auto& x = current.at(a, c);
      const auto& y = current.at(b, c);
      int ra = type_rank(x), rb = type_rank(y);
      if (ra == 3 || rb == 3) return ra < rb;  // nulls last in both directions
      if (ra != rb) return s.descending ? ra > rb : ra < rb;
      int cmp = compare_same_rank(x, y);
      return s.descending ? cmp > 0 : cmp < 0;
    });
    return rows_of(current, order);
  }
  ToolValue operator()(const Head& h) {
    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < std::min(h.n, current.num_rows()); ++r) keep.push_back(r);
    budget.touch(static_cast<std::uint64_t>(keep.size()) * current.num_cols());
    return rows_of(current, keep);
  }

  CellValue extremum(const std::string& column, int sign) {
    auto cells = numeric_cells(current, column, budget);
    if (cells.empty())
      throw QueryError(QueryError::Code::EmptyAggregate, "min/max over zero numeric cells");
    CellValue best = cells.front();
    for (const auto& v : cells) {
      if (compare_same_rank(v, best) * sign > 0) best = v;
    }
    return best;
  }
};

}  // namespace

bool operator==(const Pred& a, const Pred& b) {
  if (a.kind != b.kind) return false;
  if (a.kind == Pred::Kind::Cmp) return a.cmp == b.cmp;
  return *a.lhs == *b.lhs && *a.rhs == *b.rhs;
}

bool is_terminal(const Stage& stage) {
  return std::holds_alternative<Sum>(stage) || std::holds_alternative<Mean>(stage) ||
         std::holds_alternative<Count>(stage) || std::holds_alternative<Min>(stage) ||
         std::holds_alternative<Max>(stage) || std::holds_alternative<CellAt>(stage);
}

std::string_view QueryError::code_name() const noexcept {
  switch (code_) {
    case Code::Syntax: return "Syntax";
    case Code::AggregateNotTerminal: return "AggregateNotTerminal";
    case Code::UnknownColumn: return "UnknownColumn";
    case Code::NonNumericCell: return "NonNumericCell";
    case Code::EmptyAggregate: return "EmptyAggregate";
    case Code::BudgetExceeded: return "BudgetExceeded";
    case Code::RowOutOfRange: return "RowOutOfRange";
  }
  return "Unknown";
}

Query parse_query(std::string_view text) { return Parser(text).parse(); }

std::string to_text(const Query& query) {
  std::string out = "table";
  for (const auto& stage : query.stages) {
    out += " | ";
    out += std::visit(
        [](const auto& s) -> std::string {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, Select>) {
            std::string r = "select ";
            for (std::size_t i = 0; i < s.columns.size(); ++i) r += (i ? ", " : "") + quote(s.columns[i]);
            return r;
          } else if constexpr (std::is_same_v<T, Where>) {
            return "where " + pred_text(*s.pred);
          } else if constexpr (std::is_same_v<T, RowAt>) {
            return "row " + std::to_string(s.index);
          } else if constexpr (std::is_same_v<T, CellAt>) {
            return "cell " + std::to_string(s.index) + " " + quote(s.column);
          } else if constexpr (std::is_same_v<T, Sum>) {
            return "sum " + quote(s.column);
          } else if constexpr (std::is_same_v<T, Mean>) {
            return "mean " + quote(s.column);
          } else if constexpr (std::is_same_v<T, Count>) {
            return "count";
          } else if constexpr (std::is_same_v<T, Min>) {
            return "min " + quote(s.column);
          } else if constexpr (std::is_same_v<T, Max>) {
            return "max " + quote(s.column);
          } else if constexpr (std::is_same_v<T, Sort>) {
            return "sort " + quote(s.column) + (s.descending ? " desc" : " asc");
          } else {
            return "head " + std::to_string(s.n);
          }
        },
        stage);
  }
  return out;
}

ToolValue execute(const Query& query, const Table& table, const ExecBudget& budget) {
  Budget tracker(budget);
  Table current = table;
  for (const auto& stage : query.stages) {
    auto value = std::visit(StageRunner{current, tracker}, stage);
    if (auto* scalar = std::get_if<CellValue>(&value)) return *scalar;
    current = std::move(std::get<Table>(value));
    tracker.check_result(current);
  }
  tracker.check_result(current);
  return current;
}

std::string format_scalar(const CellValue& value) {
  if (auto i = std::get_if<std::int64_t>(&value)) return std::to_string(*i);
  if (auto d = std::get_if<double>(&value)) return format_decimal(*d);
  if (is_null(value)) return "null";
  return cell_to_string(value);
}

std::string format_result(const ToolValue& value) {
  if (auto scalar = std::get_if<CellValue>(&value)) return format_scalar(*scalar);
  return render_table(std::get<Table>(value), RenderStyle::Markdown);
}

}  // namespace tabprm::dsl
