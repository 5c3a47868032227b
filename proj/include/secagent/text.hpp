#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace secagent {

bool is_valid_utf8(std::string_view s);

// Strips Unicode White_Space from both ends.
std::string_view trim_whitespace(std::string_view s);

// Unicode NFC. Invalid UTF-8 sequences are replaced with U+FFFD.
std::string nfc_normalize(std::string_view s);

// Full Unicode case folding.
std::string case_fold(std::string_view s);

// Decodes UTF-8 into code points; invalid bytes become U+FFFD.
std::vector<char32_t> utf8_codepoints(std::string_view s);

// Word count where every CJK ideograph is one word and each maximal run of
// other letters/digits (joined by apostrophes, hyphens and combining marks)
// is one word.
std::size_t word_count(std::string_view s);

std::string base64_encode(std::string_view bytes);

}  // namespace secagent
