#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace tabprm {

std::string_view trim(std::string_view s);
std::string to_lower(std::string_view s);
bool iequals(std::string_view a, std::string_view b);
bool icontains(std::string_view haystack, std::string_view needle);
std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
bool is_blank(std::string_view s);

/// Decimal text with at most six fractional digits, trailing zeros (and a bare
/// point) trimmed, "-0" folded to "0".
std::string format_decimal(double v);

/// Finds the last `\boxed{...}` span, honoring nested braces. Returns the inner text.
bool last_boxed(std::string_view text, std::string& inner);

/// Non-whitespace characters of `s`, in order.
std::string strip_whitespace(std::string_view s);

}  // namespace tabprm
