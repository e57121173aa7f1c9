#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ctxlm::detail {

/// Decodes one UTF-8 code point starting at s[i]; advances i. Invalid lead
/// or continuation bytes are passed through as single code points.
inline std::uint32_t next_codepoint(std::string_view s, std::size_t& i) {
  const unsigned char c = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) {
    return i + k < s.size() &&
           (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
  };
  if (c < 0x80) {
    ++i;
    return c;
  }
  if ((c & 0xE0) == 0xC0 && cont(1)) {
    const std::uint32_t cp =
        (c & 0x1Fu) << 6 | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu);
    i += 2;
    return cp;
  }
  if ((c & 0xF0) == 0xE0 && cont(1) && cont(2)) {
    const std::uint32_t cp = (c & 0x0Fu) << 12 |
                             (static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 6 |
                             (static_cast<unsigned char>(s[i + 2]) & 0x3Fu);
    i += 3;
    return cp;
  }
  if ((c & 0xF8) == 0xF0 && cont(1) && cont(2) && cont(3)) {
    const std::uint32_t cp =
        (c & 0x07u) << 18 |
        (static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 12 |
        (static_cast<unsigned char>(s[i + 2]) & 0x3Fu) << 6 |
        (static_cast<unsigned char>(s[i + 3]) & 0x3Fu);
    i += 4;
    return cp;
  }
  ++i;
  return c;
}

inline void append_codepoint(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

/// Splits a string into single-code-point strings.
inline std::vector<std::string> codepoint_split(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t start = i;
    next_codepoint(s, i);
    out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

}  // namespace ctxlm::detail
