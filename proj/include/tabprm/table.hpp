#pragma once

// Table representation, sub-table regions and task ingestion.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace tabprm {

using Json = nlohmann::json;

/// A single table cell. Integers and floats are always finite.
using CellValue = std::variant<std::monostate, bool, std::int64_t, double, std::string>;

inline bool is_null(const CellValue& v) { return std::holds_alternative<std::monostate>(v); }
inline bool is_numeric(const CellValue& v) {
  return std::holds_alternative<std::int64_t>(v) || std::holds_alternative<double>(v);
}
double as_double(const CellValue& v);

/// Infers the cell type of a raw text field: "" -> null, true/false -> bool,
/// integers before floats, thousands separators stripped when the rest is numeric.
CellValue infer_cell(std::string_view raw);

/// Canonical text of a cell as used in rendering and formatting.
std::string cell_to_string(const CellValue& v);

Json cell_to_json(const CellValue& v);
/// Converts a JSON scalar; strings go through infer_cell only when `infer` is set.
CellValue cell_from_json(const Json& j, bool infer = false);

class TableError : public std::runtime_error {
 public:
  enum class Code { RaggedRow, DuplicateHeader, Decode, IndexOutOfBounds, EmptyTable, NoHeaders };

  TableError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

  // Populated for RaggedRow only.
  std::size_t row_index = 0;
  std::size_t expected = 0;
  std::size_t got = 0;

 private:
  Code code_;
};

class Table {
 public:
  Table() = default;
  /// Validates rectangularity and header uniqueness; throws TableError.
  Table(std::vector<std::string> headers, std::vector<std::vector<CellValue>> rows,
        std::optional<std::string> source_id = std::nullopt);

  const std::vector<std::string>& headers() const { return headers_; }
  const std::vector<std::vector<CellValue>>& rows() const { return rows_; }
  const std::optional<std::string>& source_id() const { return source_id_; }

  std::size_t num_rows() const { return rows_.size(); }
  std::size_t num_cols() const { return headers_.size(); }
  const CellValue& at(std::size_t row, std::size_t col) const { return rows_.at(row).at(col); }

  /// Index of a header (exact match after trimming), if present.
  std::optional<std::size_t> column_index(std::string_view name) const;

  friend bool operator==(const Table& a, const Table& b) {
    return a.headers_ == b.headers_ && a.rows_ == b.rows_;
  }

 private:
  std::vector<std::string> headers_;
  std::vector<std::vector<CellValue>> rows_;
  std::optional<std::string> source_id_;
};

struct TableRegion {
  std::vector<std::size_t> row_indices;  // sorted, unique
  std::vector<std::size_t> col_indices;  // sorted, unique

  friend bool operator==(const TableRegion&, const TableRegion&) = default;
};

enum class TableFormat { Csv, Json };
enum class RenderStyle { Markdown, Tsv };

Table parse_table(std::string_view bytes, TableFormat format, char csv_delimiter = ',');
std::string render_table(const Table& table, RenderStyle style = RenderStyle::Markdown);
Table extract_region(const Table& table, const TableRegion& region);
TableRegion full_region(const Table& table);
TableRegion random_region(const Table& table, std::uint64_t seed, std::size_t target_rows,
                          std::size_t target_cols);

/// {"columns": [...], "data": [[...]]}
Json table_to_json(const Table& table);
Table table_from_json(const Json& j);
Json region_to_json(const TableRegion& region);
TableRegion region_from_json(const Json& j);

enum class AnswerKind { Number, Text, Boolean, List };
std::string_view to_string(AnswerKind kind);
AnswerKind answer_kind_from_string(std::string_view s);

struct TaskInstance {
  std::string id;
  Table table;
  std::string question;
  CellValue gold_answer;
  AnswerKind answer_kind = AnswerKind::Text;
};

class TaskError : public std::runtime_error {
 public:
  enum class Code { Schema, DuplicateId, Io };

  TaskError(Code code, std::size_t line_no, const std::string& what)
      : std::runtime_error(what), code_(code), line_no_(line_no) {}
  Code code() const noexcept { return code_; }
  std::size_t line_no() const noexcept { return line_no_; }

 private:
  Code code_;
  std::size_t line_no_;
};

Json task_to_json(const TaskInstance& task);
TaskInstance task_from_json(const Json& j);
std::vector<TaskInstance> load_tasks(const std::filesystem::path& path);

}  // namespace tabprm
