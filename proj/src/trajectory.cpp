#include "tabprm/trajectory.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <regex>
#include <set>

#include "tabprm/text_util.hpp"

namespace tabprm {

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

// Case-insensitive occurrences of `needle` in `hay` that sit on word boundaries.
std::vector<std::size_t> find_word(std::string_view hay_lower, std::string_view needle_lower) {
  std::vector<std::size_t> out;
  if (needle_lower.empty()) return out;
  std::size_t pos = hay_lower.find(needle_lower);
  while (pos != std::string_view::npos) {
    bool left_ok = pos == 0 || !is_word_char(hay_lower[pos - 1]) || !is_word_char(needle_lower.front());
    std::size_t end = pos + needle_lower.size();
    bool right_ok =
        end >= hay_lower.size() || !is_word_char(hay_lower[end]) || !is_word_char(needle_lower.back());
    // a numeric token must not continue with ".digit" either ("5.1" is not "5.15")
    if (right_ok && end + 1 < hay_lower.size() && hay_lower[end] == '.' &&
        std::isdigit(static_cast<unsigned char>(hay_lower[end + 1])) &&
        std::isdigit(static_cast<unsigned char>(needle_lower.back())))
      right_ok = false;
    if (left_ok && right_ok) out.push_back(pos);
    pos = hay_lower.find(needle_lower, pos + 1);
  }
  return out;
}

constexpr std::array<std::string_view, 8> kRetrievalCues = {
    "column", "columns", "row", "rows", "table", "retrieve", "focus on", "looking at"};
constexpr std::array<std::string_view, 5> kSchemaCues = {"sum", "add", "average", "each row", "note down"};
constexpr std::array<std::string_view, 3> kSetupCues = {"final answer", "i need to figure out",
                                                        "the question asks"};

// Cell text that counts as a mention: text cells of 3+ chars, numeric cells of 2+ chars.
std::optional<std::string> mention_key(const CellValue& v) {
  if (auto s = std::get_if<std::string>(&v)) {
    auto t = to_lower(trim(*s));
    if (t.size() >= 3) return t;
    return std::nullopt;
  }
  if (is_numeric(v)) {
    std::string t = std::holds_alternative<std::int64_t>(v) ? std::to_string(std::get<std::int64_t>(v))
                                                          : format_decimal(std::get<double>(v));
    if (t.size() >= 2) return t;
  }
  return std::nullopt;
}

struct Mentions {
  std::vector<std::size_t> headers;           // column indices named in the text
  std::vector<std::pair<std::size_t, std::size_t>> header_spans;  // [begin, end) of each hit
  std::set<std::string> cell_values;          // distinct mentioned cell values
  std::set<std::size_t> rows;                 // rows holding a mentioned text cell
};

Mentions find_mentions(std::string_view text_lower, const Table& table) {
  Mentions m;
  for (std::size_t c = 0; c < table.num_cols(); ++c) {
    auto h = to_lower(table.headers()[c]);
    auto hits = find_word(text_lower, h);
    if (!hits.empty()) m.headers.push_back(c);
    for (auto p : hits) m.header_spans.emplace_back(p, p + h.size());
  }
  for (std::size_t r = 0; r < table.num_rows(); ++r) {
    for (std::size_t c = 0; c < table.num_cols(); ++c) {
      auto key = mention_key(table.at(r, c));
      if (!key) continue;
      if (find_word(text_lower, *key).empty()) continue;
      m.cell_values.insert(*key);
      if (std::holds_alternative<std::string>(table.at(r, c))) m.rows.insert(r);
    }
  }
  return m;
}

bool has_cue(std::string_view text_lower, std::string_view cue) { return !find_word(text_lower, cue).empty(); }

// Retrieval cues that are not part of an enumeration phrase such as "each row".
bool has_retrieval_cue(std::string_view text_lower) {
  auto each_row = find_word(text_lower, "each row");
  for (auto cue : kRetrievalCues) {
    for (auto pos : find_word(text_lower, cue)) {
      bool inside = std::any_of(each_row.begin(), each_row.end(),
                                [&](std::size_t e) { return pos >= e && pos < e + 8; });
      if (!inside) return true;
    }
  }
  return false;
}

bool digit_adjacent_to_header(std::string_view text_lower, const Mentions& m) {
  for (auto [begin, end] : m.header_spans) {
    std::size_t i = end;
    for (int skipped = 0; i < text_lower.size() && skipped < 4 && !is_word_char(text_lower[i]); ++skipped) ++i;
    if (i < text_lower.size() && std::isdigit(static_cast<unsigned char>(text_lower[i]))) return true;
    std::size_t j = begin;
    for (int skipped = 0; j > 0 && skipped < 4 && !is_word_char(text_lower[j - 1]); ++skipped) --j;
    if (j > 0 && std::isdigit(static_cast<unsigned char>(text_lower[j - 1]))) return true;
  }
  return false;
}

std::optional<double> parse_number_span(std::string_view span) {
  std::string cleaned;
  for (char c : span) {
    if (c == ',' || c == '$' || c == '%' || c == '\\' || std::isspace(static_cast<unsigned char>(c))) continue;
    cleaned += c;
  }
  auto first = cleaned.find_first_of("-0123456789.");
  if (first == std::string::npos) return std::nullopt;
  auto last = cleaned.find_last_of("0123456789.");
  std::string body = cleaned.substr(first, last - first + 1);
  if (first > 0) {
    // any leading text must be non-alphanumeric (a currency sign); "abc12" is not a number
    for (std::size_t i = 0; i < first; ++i) {
      if (is_word_char(cleaned[i])) return std::nullopt;
    }
  }
  for (std::size_t i = last + 1; i < cleaned.size(); ++i) {
    if (is_word_char(cleaned[i])) return std::nullopt;
  }
  double v = 0;
  auto [ptr, ec] = std::from_chars(body.data(), body.data() + body.size(), v);
  if (ec != std::errc() || ptr != body.data() + body.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool_span(std::string_view span) {
  auto t = to_lower(trim(span));
  while (!t.empty() && std::ispunct(static_cast<unsigned char>(t.back()))) t.pop_back();
  if (t == "true" || t == "yes") return true;
  if (t == "false" || t == "no") return false;
  return std::nullopt;
}

std::vector<std::string> parse_list_span(std::string_view span) {
  std::vector<std::string> out;
  for (auto& part : split(span, ',')) {
    auto t = trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::string normalize_text(std::string_view s) {
  std::string lowered = to_lower(s);
  std::string collapsed;
  bool space = false;
  for (char c : lowered) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = true;
      continue;
    }
    if (space && !collapsed.empty()) collapsed += ' ';
    space = false;
    collapsed += c;
  }
  std::size_t b = 0, e = collapsed.size();
  auto strippable = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) || c == ' '; };
  while (b < e && strippable(collapsed[b])) ++b;
  while (e > b && strippable(collapsed[e - 1])) --e;
  return collapsed.substr(b, e - b);
}

std::string normalize_list(const std::vector<std::string>& items) {
  std::vector<std::string> norm;
  for (const auto& it : items) {
    auto n = normalize_text(it);
    if (!n.empty()) norm.push_back(std::move(n));
  }
  std::sort(norm.begin(), norm.end());
  return join(norm, "|");
}

Answer parse_span(const std::string& span, std::optional<AnswerKind> kind) {
  Answer a;
  a.raw_span = span;
  if (!kind) {
    if (auto n = parse_number_span(span)) {
      a.value = *n;
    } else if (auto b = parse_bool_span(span)) {
      a.value = *b;
    } else {
      a.value = std::string(trim(span));
    }
    return a;
  }
  switch (*kind) {
    case AnswerKind::Number: {
      auto n = parse_number_span(span);
      if (!n) throw TrajectoryError(TrajectoryError::Code::NoAnswerFound, "answer span is not a number: " + span);
      a.value = *n;
      break;
    }
    case AnswerKind::Boolean: {
      auto b = parse_bool_span(span);
      if (!b) throw TrajectoryError(TrajectoryError::Code::NoAnswerFound, "answer span is not boolean: " + span);
      a.value = *b;
      break;
    }
    case AnswerKind::List:
      a.value = parse_list_span(span);
      break;
    case AnswerKind::Text:
      a.value = std::string(trim(span));
      break;
  }
  return a;
}

std::optional<std::string> find_answer_span(std::string_view raw) {
  std::string inner;
  if (last_boxed(raw, inner)) return inner;
  auto lowered = to_lower(raw);
  auto pos = lowered.rfind("final answer");
  if (pos == std::string::npos) return std::nullopt;
  std::string_view rest = raw.substr(pos + 12);
  auto nl = rest.find('\n');
  auto line = trim(rest.substr(0, nl == std::string_view::npos ? rest.size() : nl));
  // drop connective lead-ins: "is", ":", "is:"
  for (bool changed = true; changed;) {
    changed = false;
    if (!line.empty() && line.front() == ':') {
      line = trim(line.substr(1));
      changed = true;
    }
    if (line.size() >= 2 && iequals(line.substr(0, 2), "is") && (line.size() == 2 || !is_word_char(line[2]))) {
      line = trim(line.substr(2));
      changed = true;
    }
  }
  while (!line.empty() && line.back() == '.') line = trim(line.substr(0, line.size() - 1));
  if (line.empty()) return std::nullopt;
  return std::string(line);
}

const std::regex& step_marker() {
  static const std::regex re(R"(Step\s+\d+\s*:)", std::regex::icase);
  return re;
}

}  // namespace

std::string_view to_string(StepCategory c) {
  switch (c) {
    case StepCategory::TableRetrieval: return "TableRetrieval";
    case StepCategory::SchemaInteraction: return "SchemaInteraction";
    case StepCategory::InnerThinking: return "InnerThinking";
    case StepCategory::Other: return "Other";
  }
  return "Other";
}

StepCategory step_category_from_string(std::string_view s) {
  if (s == "TableRetrieval") return StepCategory::TableRetrieval;
  if (s == "SchemaInteraction") return StepCategory::SchemaInteraction;
  if (s == "InnerThinking") return StepCategory::InnerThinking;
  if (s == "Other") return StepCategory::Other;
  throw TrajectoryError(TrajectoryError::Code::Schema, "unknown step category: " + std::string(s));
}

StepCategory map_error_to_category(ErrorLabel label) {
  switch (label) {
    case ErrorLabel::RowMisSelection:
    case ErrorLabel::ColumnMisSelection:
    case ErrorLabel::UnitMismatch:
    case ErrorLabel::PartialAggregation:
      return StepCategory::TableRetrieval;
    case ErrorLabel::Miscalculation:
    case ErrorLabel::IncorrectGrouping:
    case ErrorLabel::DoubleCounting:
    case ErrorLabel::Misinterpretation:
      return StepCategory::SchemaInteraction;
    case ErrorLabel::LogicalError:
    case ErrorLabel::ContradictorySteps:
      return StepCategory::InnerThinking;
    case ErrorLabel::ContextOmission:
    case ErrorLabel::OutputFormat:
    case ErrorLabel::Other:
      return StepCategory::Other;
  }
  return StepCategory::Other;
}

Trajectory segment(std::string_view raw_text, std::optional<AnswerKind> kind) {
  if (is_blank(raw_text)) throw TrajectoryError(TrajectoryError::Code::NoContent, "trajectory text is blank");
  Trajectory t;
  t.raw_text = std::string(raw_text);

  std::string content;
  constexpr std::string_view kOpen = "<think>", kClose = "</think>";
  auto open = raw_text.find(kOpen);
  if (open != std::string_view::npos) {
    auto body_start = open + kOpen.size();
    auto close = raw_text.find(kClose, body_start);
    content = std::string(raw_text.substr(0, open));
    content += raw_text.substr(body_start, close == std::string_view::npos ? std::string_view::npos
                                                                           : close - body_start);
    if (close != std::string_view::npos) t.answer_text = std::string(trim(raw_text.substr(close + kClose.size())));
  } else {
    auto lowered = to_lower(raw_text);
    auto marker = lowered.rfind("final answer");
    content = std::string(raw_text.substr(0, marker));
    if (marker != std::string::npos) t.answer_text = std::string(trim(raw_text.substr(marker)));
  }

  std::vector<std::string> pieces;
  std::vector<std::size_t> starts;
  for (auto it = std::sregex_iterator(content.begin(), content.end(), step_marker()); it != std::sregex_iterator();
       ++it) {
    starts.push_back(static_cast<std::size_t>(it->position()));
  }
  if (!starts.empty()) {
    auto preamble = trim(std::string_view(content).substr(0, starts.front()));
    if (!preamble.empty()) pieces.emplace_back(preamble);
    for (std::size_t i = 0; i < starts.size(); ++i) {
      auto end = i + 1 < starts.size() ? starts[i + 1] : content.size();
      auto piece = trim(std::string_view(content).substr(starts[i], end - starts[i]));
      if (!piece.empty()) pieces.emplace_back(piece);
    }
  } else {
    static const std::regex blank_line(R"(\n[ \t\r]*\n)");
    for (auto it = std::sregex_token_iterator(content.begin(), content.end(), blank_line, -1);
         it != std::sregex_token_iterator(); ++it) {
      auto str = it->str();
      auto piece = trim(str);
      if (!piece.empty()) pieces.emplace_back(piece);
    }
  }
  if (pieces.empty()) pieces.emplace_back(trim(t.answer_text.empty() ? raw_text : t.answer_text));

  for (std::size_t i = 0; i < pieces.size(); ++i) {
    Step s;
    s.index = i;
    s.text = std::move(pieces[i]);
    t.steps.push_back(std::move(s));
  }

  try {
    t.final_answer = extract_final_answer(t.answer_text.empty() ? raw_text : std::string_view(t.answer_text), kind);
  } catch (const TrajectoryError&) {
    t.final_answer.reset();
  }
  return t;
}

std::optional<TableRegion> cite_region(std::string_view step_text, const Table& table) {
  auto lowered = to_lower(step_text);
  auto m = find_mentions(lowered, table);
  if (m.headers.empty() && m.rows.empty()) return std::nullopt;
  TableRegion region;
  if (m.headers.empty()) {
    region.col_indices = full_region(table).col_indices;
  } else {
    region.col_indices = m.headers;
  }
  if (m.rows.empty()) {
    region.row_indices = full_region(table).row_indices;
  } else {
    region.row_indices.assign(m.rows.begin(), m.rows.end());
  }
  return region;
}

StepCategory classify_step(std::string_view step_text, const Table& table) {
  auto lowered = to_lower(trim(step_text));
  auto m = find_mentions(lowered, table);
  bool names_header = !m.headers.empty();

  if (names_header && has_retrieval_cue(lowered)) return StepCategory::TableRetrieval;

  bool arithmetic_cue = std::any_of(kSchemaCues.begin(), kSchemaCues.end(),
                                    [&](std::string_view c) { return has_cue(lowered, c); }) ||
                        digit_adjacent_to_header(lowered, m);
  if (m.cell_values.size() >= 2 || (names_header && arithmetic_cue)) return StepCategory::SchemaInteraction;

  bool setup = std::any_of(kSetupCues.begin(), kSetupCues.end(),
                           [&](std::string_view c) { return lowered.find(c) != std::string::npos; });
  if (setup && !names_header && m.cell_values.empty()) return StepCategory::Other;

  return StepCategory::InnerThinking;
}

void classify_steps(Trajectory& trajectory, const Table& table) {
  for (auto& step : trajectory.steps) {
    step.category = classify_step(step.text, table);
    step.cited_region.reset();
    if (is_table_step(step.category)) step.cited_region = cite_region(step.text, table);
  }
}

Trajectory parse_trajectory(std::string_view raw_text, const TaskInstance& task) {
  auto t = segment(raw_text, task.answer_kind);
  t.task_id = task.id;
  classify_steps(t, task.table);
  return t;
}

Answer extract_final_answer(std::string_view raw_text, AnswerKind kind) {
  return extract_final_answer(raw_text, std::optional<AnswerKind>(kind));
}

std::string normalize_answer(const Answer& answer, AnswerKind kind) {
  return std::visit(
      [&](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, double>) {
          return format_decimal(v);
        } else if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
          return normalize_list(v);
        } else {
          if (kind == AnswerKind::Number) {
            if (auto n = parse_number_span(v)) return format_decimal(*n);
          }
          if (kind == AnswerKind::Boolean) {
            if (auto b = parse_bool_span(v)) return *b ? "true" : "false";
          }
          if (kind == AnswerKind::List) return normalize_list(parse_list_span(v));
          return normalize_text(v);
        }
      },
      answer.value);
}

std::string normalize_gold(const TaskInstance& task) {
  const auto& g = task.gold_answer;
  switch (task.answer_kind) {
    case AnswerKind::Number:
      if (is_numeric(g)) return format_decimal(as_double(g));
      break;
    case AnswerKind::Boolean:
      if (auto b = std::get_if<bool>(&g)) return *b ? "true" : "false";
      break;
    case AnswerKind::List:
      return normalize_list(parse_list_span(cell_to_string(g)));
    case AnswerKind::Text:
      break;
  }
  if (auto d = std::get_if<double>(&g)) return normalize_text(format_decimal(*d));
  return normalize_text(cell_to_string(g));
}

bool answer_matches_gold(const Trajectory& trajectory, const TaskInstance& task) {
  if (!trajectory.final_answer) return false;
  return normalize_answer(*trajectory.final_answer, task.answer_kind) == normalize_gold(task);
}

Json trajectory_to_json(const Trajectory& trajectory) {
  Json steps = Json::array();
  for (const auto& s : trajectory.steps) {
    steps.push_back(Json{{"index", s.index},
                         {"text", s.text},
                         {"category", std::string(to_string(s.category))},
                         {"region", s.cited_region ? region_to_json(*s.cited_region) : Json(nullptr)}});
  }
  return Json{{"id", trajectory.id},
              {"task_id", trajectory.task_id},
              {"steps", std::move(steps)},
              {"final_answer", trajectory.final_answer ? Json(trajectory.final_answer->raw_span) : Json(nullptr)},
              {"raw_text", trajectory.raw_text}};
}

Trajectory trajectory_from_json(const Json& j, std::optional<AnswerKind> kind) {
  try {
    Trajectory t;
    t.id = j.at("id").get<std::string>();
    t.task_id = j.at("task_id").get<std::string>();
    t.raw_text = j.value("raw_text", std::string{});
    std::size_t expected = 0;
    for (const auto& s : j.at("steps")) {
      Step step;
      step.index = s.at("index").get<std::size_t>();
      if (step.index != expected++)
        throw TrajectoryError(TrajectoryError::Code::Schema, "step indices must be contiguous from 0");
      step.text = s.at("text").get<std::string>();
      if (is_blank(step.text)) throw TrajectoryError(TrajectoryError::Code::Schema, "step text is blank");
      step.category = step_category_from_string(s.at("category").get<std::string>());
      if (s.contains("region") && !s["region"].is_null()) step.cited_region = region_from_json(s["region"]);
      t.steps.push_back(std::move(step));
    }
    if (j.contains("final_answer") && j["final_answer"].is_string()) {
      try {
        t.final_answer = parse_span(j["final_answer"].get<std::string>(), kind);
      } catch (const TrajectoryError&) {
        t.final_answer.reset();
      }
    }
    return t;
  } catch (const Json::exception& e) {
    throw TrajectoryError(TrajectoryError::Code::Schema, e.what());
  }
}

// Overload taking an optional kind; used by segment when the kind is unknown.
Answer extract_final_answer(std::string_view raw_text, std::optional<AnswerKind> kind) {
  auto span = find_answer_span(raw_text);
  if (!span) throw TrajectoryError(TrajectoryError::Code::NoAnswerFound, "no final answer found");
  return parse_span(*span, kind);
}

}  // namespace tabprm
