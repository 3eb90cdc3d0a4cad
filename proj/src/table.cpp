#include "tabprm/table.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "tabprm/text_util.hpp"

namespace tabprm {

namespace {

std::optional<std::int64_t> parse_int(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<double> parse_float(std::string_view s) {
  if (s.empty()) return std::nullopt;
  // from_chars accepts "inf"/"nan"; only plain decimal notation is numeric here.
  for (char c : s) {
    if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == 'e' ||
          c == 'E' || c == '+'))
      return std::nullopt;
  }
  if (!std::isdigit(static_cast<unsigned char>(s.front())) && s.front() != '-' && s.front() != '.')
    return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// "22,460" or "1,234,567.5": digit groups of three after the first.
std::optional<std::string> strip_thousands(std::string_view s) {
  if (s.find(',') == std::string_view::npos) return std::nullopt;
  std::string_view body = s;
  std::string sign;
  if (!body.empty() && body.front() == '-') {
    sign = "-";
    body.remove_prefix(1);
  }
  auto dot = body.find('.');
  std::string_view int_part = body.substr(0, dot);
  std::string_view frac = dot == std::string_view::npos ? std::string_view{} : body.substr(dot);
  std::string digits;
  std::size_t group = 0;
  bool first = true;
  std::size_t start = 0;
  while (start <= int_part.size()) {
    auto comma = int_part.find(',', start);
    auto piece = int_part.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                      : comma - start);
    if (piece.empty()) return std::nullopt;
    if (!std::all_of(piece.begin(), piece.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
      return std::nullopt;
    if (first ? piece.size() > 3 : piece.size() != 3) return std::nullopt;
    first = false;
    digits += piece;
    ++group;
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (group < 2) return std::nullopt;
  return sign + digits + std::string(frac);
}

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    }
    i += len;
  }
  return true;
}

std::vector<std::vector<std::string>> split_csv(std::string_view bytes, char delim) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t i = 0;
  auto end_record = [&] {
    record.push_back(std::move(field));
    field.clear();
    records.push_back(std::move(record));
    record.clear();
    field_started = false;
  };
  while (i < bytes.size()) {
    char c = bytes[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < bytes.size() && bytes[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty()) {
      in_quotes = true;
      field_started = true;
    } else if (c == delim) {
      record.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (c == '\r' && i + 1 < bytes.size() && bytes[i + 1] == '\n') {
      // handled by the '\n' branch
    } else if (c == '\n') {
      end_record();
    } else {
      field += c;
      field_started = true;
    }
    ++i;
  }
  if (in_quotes) throw TableError(TableError::Code::Decode, "unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();
  return records;
}

void check_region(const Table& table, const TableRegion& region) {
  for (auto r : region.row_indices) {
    if (r >= table.num_rows())
      throw TableError(TableError::Code::IndexOutOfBounds,
                       "row index " + std::to_string(r) + " out of bounds");
  }
  for (auto c : region.col_indices) {
    if (c >= table.num_cols())
      throw TableError(TableError::Code::IndexOutOfBounds,
                       "column index " + std::to_string(c) + " out of bounds");
  }
}

std::string escape_markdown(std::string s) {
  std::string out;
  for (char c : s) {
    if (c == '|') {
      out += "\\|";
    } else if (c == '\n' || c == '\r') {
      out += ' ';
    } else {
      out += c;
    }
  }
  return out;
}

}  // namespace

double as_double(const CellValue& v) {
  if (auto i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  if (auto d = std::get_if<double>(&v)) return *d;
  throw std::invalid_argument("cell is not numeric");
}

CellValue infer_cell(std::string_view raw) {
  std::string_view s = trim(raw);
  if (s.empty()) return std::monostate{};
  if (iequals(s, "true")) return true;
  if (iequals(s, "false")) return false;
  if (auto i = parse_int(s)) return *i;
  if (auto d = parse_float(s)) return *d;
  if (auto stripped = strip_thousands(s)) {
    if (auto i = parse_int(*stripped)) return *i;
    if (auto d = parse_float(*stripped)) return *d;
  }
  return std::string(s);
}

std::string cell_to_string(const CellValue& v) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) {
          return "";
        } else if constexpr (std::is_same_v<T, bool>) {
          return x ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          return std::to_string(x);
        } else if constexpr (std::is_same_v<T, double>) {
          // shortest round-trip form; integral values keep a ".0" so the type survives re-parsing
          char buf[64];
          auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
          std::string s(buf, ptr);
          if (s.find_first_of(".e") == std::string::npos) s += ".0";
          return s;
        } else {
          return x;
        }
      },
      v);
}

Json cell_to_json(const CellValue& v) {
  return std::visit(
      [](const auto& x) -> Json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) {
          return nullptr;
        } else {
          return x;
        }
      },
      v);
}

CellValue cell_from_json(const Json& j, bool infer) {
  switch (j.type()) {
    case Json::value_t::null:
      return std::monostate{};
    case Json::value_t::boolean:
      return j.get<bool>();
    case Json::value_t::number_integer:
      return j.get<std::int64_t>();
    case Json::value_t::number_unsigned: {
      auto u = j.get<std::uint64_t>();
      if (u > static_cast<std::uint64_t>(INT64_MAX)) return static_cast<double>(u);
      return static_cast<std::int64_t>(u);
    }
    case Json::value_t::number_float: {
      double d = j.get<double>();
      if (!std::isfinite(d)) throw TableError(TableError::Code::Decode, "non-finite number");
      return d;
    }
    case Json::value_t::string: {
      const auto& s = j.get_ref<const std::string&>();
      if (infer) return infer_cell(s);
      return s;
    }
    default:
      throw TableError(TableError::Code::Decode, "unsupported cell JSON type");
  }
}

Table::Table(std::vector<std::string> headers, std::vector<std::vector<CellValue>> rows,
             std::optional<std::string> source_id)
    : headers_(std::move(headers)), rows_(std::move(rows)), source_id_(std::move(source_id)) {
  if (headers_.empty()) throw TableError(TableError::Code::NoHeaders, "table has no headers");
  std::set<std::string, std::less<>> seen;
  for (auto& h : headers_) {
    h = std::string(trim(h));
    if (!seen.insert(h).second)
      throw TableError(TableError::Code::DuplicateHeader, "duplicate header: " + h);
  }
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (rows_[i].size() != headers_.size()) {
      TableError err(TableError::Code::RaggedRow,
                     "ragged row " + std::to_string(i) + ": expected " +
                         std::to_string(headers_.size()) + " cells, got " +
                         std::to_string(rows_[i].size()));
      err.row_index = i;
      err.expected = headers_.size();
      err.got = rows_[i].size();
      throw err;
    }
    for (const auto& cell : rows_[i]) {
      if (auto d = std::get_if<double>(&cell); d && !std::isfinite(*d))
        throw TableError(TableError::Code::Decode, "non-finite float cell");
    }
  }
}

std::optional<std::size_t> Table::column_index(std::string_view name) const {
  auto key = trim(name);
  for (std::size_t i = 0; i < headers_.size(); ++i) {
    if (headers_[i] == key) return i;
  }
  return std::nullopt;
}

Table parse_table(std::string_view bytes, TableFormat format, char csv_delimiter) {
  if (!valid_utf8(bytes)) throw TableError(TableError::Code::Decode, "input is not valid UTF-8");
  if (format == TableFormat::Json) {
    Json j;
    try {
      j = Json::parse(bytes);
    } catch (const Json::parse_error& e) {
      throw TableError(TableError::Code::Decode, e.what());
    }
    return table_from_json(j);
  }
  auto records = split_csv(bytes, csv_delimiter);
  if (records.empty()) throw TableError(TableError::Code::NoHeaders, "empty CSV input");
  std::vector<std::string> headers = std::move(records.front());
  std::vector<std::vector<CellValue>> rows;
  rows.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    std::vector<CellValue> row;
    row.reserve(records[r].size());
    for (const auto& f : records[r]) row.push_back(infer_cell(f));
    rows.push_back(std::move(row));
  }
  return Table(std::move(headers), std::move(rows));
}

std::string render_table(const Table& table, RenderStyle style) {
  std::ostringstream out;
  if (style == RenderStyle::Markdown) {
    out << '|';
    for (const auto& h : table.headers()) out << ' ' << escape_markdown(h) << " |";
    out << "\n|";
    for (std::size_t i = 0; i < table.num_cols(); ++i) out << " --- |";
    out << '\n';
    for (const auto& row : table.rows()) {
      out << '|';
      for (const auto& cell : row) {
        auto s = escape_markdown(cell_to_string(cell));
        out << (s.empty() ? " " : " " + s + " ") << '|';
      }
      out << '\n';
    }
    return out.str();
  }
  for (std::size_t i = 0; i < table.num_cols(); ++i) out << (i ? "\t" : "") << table.headers()[i];
  out << '\n';
  for (const auto& row : table.rows()) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "\t" : "") << cell_to_string(row[i]);
    out << '\n';
  }
  return out.str();
}

Table extract_region(const Table& table, const TableRegion& region) {
  check_region(table, region);
  std::vector<std::size_t> rows(region.row_indices);
  std::vector<std::size_t> cols(region.col_indices);
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  std::sort(cols.begin(), cols.end());
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
  if (cols.empty()) throw TableError(TableError::Code::IndexOutOfBounds, "region selects no columns");

  std::vector<std::string> headers;
  for (auto c : cols) headers.push_back(table.headers()[c]);
  std::vector<std::vector<CellValue>> out;
  out.reserve(rows.size());
  for (auto r : rows) {
    std::vector<CellValue> row;
    for (auto c : cols) row.push_back(table.at(r, c));
    out.push_back(std::move(row));
  }
  return Table(std::move(headers), std::move(out), table.source_id());
}

TableRegion full_region(const Table& table) {
  TableRegion region;
  region.row_indices.resize(table.num_rows());
  std::iota(region.row_indices.begin(), region.row_indices.end(), 0);
  region.col_indices.resize(table.num_cols());
  std::iota(region.col_indices.begin(), region.col_indices.end(), 0);
  return region;
}

TableRegion random_region(const Table& table, std::uint64_t seed, std::size_t target_rows,
                          std::size_t target_cols) {
  if (table.num_rows() == 0 || table.num_cols() == 0)
    throw TableError(TableError::Code::EmptyTable, "cannot sample a region of an empty table");
  if (target_rows == 0 || target_cols == 0)
    throw std::invalid_argument("region targets must be >= 1");
  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t available, std::size_t target) {
    std::vector<std::size_t> all(available);
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::size_t> chosen;
    std::sample(all.begin(), all.end(), std::back_inserter(chosen), std::min(target, available), rng);
    return chosen;  // std::sample preserves relative order, so already sorted
  };
  TableRegion region;
  region.row_indices = pick(table.num_rows(), target_rows);
  region.col_indices = pick(table.num_cols(), target_cols);
  return region;
}

Json table_to_json(const Table& table) {
  Json data = Json::array();
  for (const auto& row : table.rows()) {
    Json r = Json::array();
    for (const auto& cell : row) r.push_back(cell_to_json(cell));
    data.push_back(std::move(r));
  }
  return Json{{"columns", table.headers()}, {"data", std::move(data)}};
}

Table table_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("columns") || !j.contains("data") || !j["columns"].is_array() ||
      !j["data"].is_array())
    throw TableError(TableError::Code::Decode, "table JSON requires {columns:[...], data:[[...]]}");
  std::vector<std::string> headers;
  for (const auto& h : j["columns"]) {
    if (!h.is_string()) throw TableError(TableError::Code::Decode, "column names must be strings");
    headers.push_back(h.get<std::string>());
  }
  std::vector<std::vector<CellValue>> rows;
  for (const auto& r : j["data"]) {
    if (!r.is_array()) throw TableError(TableError::Code::Decode, "each data row must be an array");
    std::vector<CellValue> row;
    for (const auto& c : r) row.push_back(cell_from_json(c, true));
    rows.push_back(std::move(row));
  }
  std::optional<std::string> source;
  if (j.contains("source_id") && j["source_id"].is_string()) source = j["source_id"].get<std::string>();
  return Table(std::move(headers), std::move(rows), std::move(source));
}

Json region_to_json(const TableRegion& region) {
  return Json{{"rows", region.row_indices}, {"cols", region.col_indices}};
}

TableRegion region_from_json(const Json& j) {
  TableRegion region;
  region.row_indices = j.at("rows").get<std::vector<std::size_t>>();
  region.col_indices = j.at("cols").get<std::vector<std::size_t>>();
  std::sort(region.row_indices.begin(), region.row_indices.end());
  std::sort(region.col_indices.begin(), region.col_indices.end());
  return region;
}

std::string_view to_string(AnswerKind kind) {
  switch (kind) {
    case AnswerKind::Number: return "number";
    case AnswerKind::Text: return "text";
    case AnswerKind::Boolean: return "boolean";
    case AnswerKind::List: return "list";
  }
  return "text";
}

AnswerKind answer_kind_from_string(std::string_view s) {
  if (s == "number") return AnswerKind::Number;
  if (s == "text") return AnswerKind::Text;
  if (s == "boolean") return AnswerKind::Boolean;
  if (s == "list") return AnswerKind::List;
  throw std::invalid_argument("unknown answer_kind: " + std::string(s));
}

Json task_to_json(const TaskInstance& task) {
  return Json{{"id", task.id},
              {"table", table_to_json(task.table)},
              {"question", task.question},
              {"gold_answer", cell_to_json(task.gold_answer)},
              {"answer_kind", std::string(to_string(task.answer_kind))}};
}

TaskInstance task_from_json(const Json& j) {
  auto fail = [](const std::string& why) { throw TaskError(TaskError::Code::Schema, 0, why); };
  if (!j.is_object()) fail("task line is not a JSON object");
  for (const char* key : {"id", "table", "question", "gold_answer", "answer_kind"}) {
    if (!j.contains(key)) fail(std::string("missing field '") + key + "'");
  }
  if (!j["id"].is_string() || !j["question"].is_string() || !j["answer_kind"].is_string())
    fail("id, question and answer_kind must be strings");
  TaskInstance task;
  task.id = j["id"].get<std::string>();
  task.question = j["question"].get<std::string>();
  try {
    task.answer_kind = answer_kind_from_string(j["answer_kind"].get<std::string>());
    task.table = table_from_json(j["table"]);
  } catch (const std::exception& e) {
    fail(e.what());
  }

  const Json& gold = j["gold_answer"];
  switch (task.answer_kind) {
    case AnswerKind::Number: {
      CellValue v = gold.is_string() ? infer_cell(gold.get<std::string>()) : cell_from_json(gold);
      if (!is_numeric(v)) fail("gold_answer is not numeric for answer_kind number");
      task.gold_answer = v;
      break;
    }
    case AnswerKind::Boolean: {
      CellValue v = gold.is_string() ? infer_cell(gold.get<std::string>()) : cell_from_json(gold);
      if (auto s = std::get_if<std::string>(&v)) {
        if (iequals(*s, "yes")) v = true;
        else if (iequals(*s, "no")) v = false;
      }
      if (!std::holds_alternative<bool>(v)) fail("gold_answer is not boolean for answer_kind boolean");
      task.gold_answer = v;
      break;
    }
    case AnswerKind::List: {
      if (gold.is_array()) {
        std::string joined;
        for (std::size_t i = 0; i < gold.size(); ++i) {
          if (i) joined += ", ";
          joined += gold[i].is_string() ? gold[i].get<std::string>() : gold[i].dump();
        }
        task.gold_answer = joined;
      } else if (gold.is_string()) {
        task.gold_answer = gold.get<std::string>();
      } else {
        fail("gold_answer must be a string or array for answer_kind list");
      }
      break;
    }
    case AnswerKind::Text: {
      if (gold.is_string()) {
        task.gold_answer = gold.get<std::string>();
      } else if (gold.is_array() || gold.is_object()) {
        fail("gold_answer must be a scalar for answer_kind text");
      } else {
        task.gold_answer = cell_from_json(gold);
      }
      break;
    }
  }
  return task;
}

std::vector<TaskInstance> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TaskError(TaskError::Code::Io, 0, "cannot open task file: " + path.string());
  std::vector<TaskInstance> tasks;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw TaskError(TaskError::Code::Schema, line_no,
                      "line " + std::to_string(line_no) + ": " + e.what());
    }
    TaskInstance task;
    try {
      task = task_from_json(j);
    } catch (const TaskError& e) {
      throw TaskError(TaskError::Code::Schema, line_no,
                      "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!ids.insert(task.id).second)
      throw TaskError(TaskError::Code::DuplicateId, line_no, "duplicate task id: " + task.id);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

}  // namespace tabprm
