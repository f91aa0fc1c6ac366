#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace cfp::unicode {

// A decoded code point and the byte range it occupies in the source string.
// Malformed UTF-8 bytes decode one at a time to U+FFFD so that every byte is
// covered by exactly one unit.
struct Unit {
  char32_t cp;
  std::size_t begin;
  std::size_t end;
};

std::vector<Unit> decode_utf8(std::string_view text);

bool is_letter(char32_t cp);
bool is_number(char32_t cp);
bool is_space(char32_t cp);

}  // namespace cfp::unicode
