#include "tabprm/text_util.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>

namespace tabprm {

namespace {
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }
}  // namespace

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), lower);
  return out;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) { return lower(x) == lower(y); });
}

bool icontains(std::string_view haystack, std::string_view needle) {
  if (needle.empty()) return true;
  auto it = std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end(),
                        [](char x, char y) { return lower(x) == lower(y); });
  return it != haystack.end();
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

bool is_blank(std::string_view s) { return trim(s).empty(); }

std::string format_decimal(double v) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  std::string s(buf);
  if (auto dot = s.find('.'); dot != std::string::npos) {
    while (!s.empty() && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}

bool last_boxed(std::string_view text, std::string& inner) {
  constexpr std::string_view kOpen = "\\boxed{";
  auto pos = text.rfind(kOpen);
  while (pos != std::string_view::npos) {
    std::size_t depth = 1;
    std::size_t i = pos + kOpen.size();
    for (; i < text.size() && depth > 0; ++i) {
      if (text[i] == '{') ++depth;
      else if (text[i] == '}') --depth;
    }
    if (depth == 0) {
      auto start = pos + kOpen.size();
      inner = std::string(text.substr(start, i - 1 - start));
      return true;
    }
    if (pos == 0) break;
    pos = text.rfind(kOpen, pos - 1);
  }
  return false;
}

std::string strip_whitespace(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (!is_space(c)) out += c;
  }
  return out;
}

}  // namespace tabprm
