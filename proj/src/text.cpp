#include "secagent/text.hpp"

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include <stdexcept>

namespace secagent {

namespace {

// Decodes the code point starting at byte offset i, advancing i. Returns a
// negative value on malformed input.
UChar32 next_codepoint(std::string_view s, std::size_t& i) {
  const auto* p = reinterpret_cast<const uint8_t*>(s.data());
  const auto n = static_cast<int32_t>(s.size());
  auto idx = static_cast<int32_t>(i);
  UChar32 c = 0;
  U8_NEXT(p, idx, n, c);
  i = static_cast<std::size_t>(idx);
  return c;
}

bool is_word_char(UChar32 c) {
  return u_isalnum(c) || (U_GET_GC_MASK(c) & U_GC_M_MASK) != 0;
}

bool is_joiner(UChar32 c) {
  return c == U'\'' || c == U'’' || c == U'-';
}

}  // namespace

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    if (next_codepoint(s, i) < 0) return false;
  }
  return true;
}

std::string_view trim_whitespace(std::string_view s) {
  std::size_t begin = 0;
  while (begin < s.size()) {
    std::size_t next = begin;
    UChar32 c = next_codepoint(s, next);
    if (c < 0 || !u_isUWhiteSpace(c)) break;
    begin = next;
  }
  // Scan forward remembering the end of the last non-space code point.
  std::size_t end = begin;
  std::size_t i = begin;
  while (i < s.size()) {
    UChar32 c = next_codepoint(s, i);
    if (c < 0 || !u_isUWhiteSpace(c)) end = i;
  }
  return s.substr(begin, end - begin);
}

std::string nfc_normalize(std::string_view s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) {
    throw std::runtime_error("ICU NFC normalizer unavailable");
  }
  icu::UnicodeString src = icu::UnicodeString::fromUTF8(
      icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  icu::UnicodeString dst = nfc->normalize(src, status);
  if (U_FAILURE(status)) {
    throw std::runtime_error("NFC normalization failed");
  }
  std::string out;
  dst.toUTF8String(out);
  return out;
}

std::string case_fold(std::string_view s) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  u.foldCase();
  std::string out;
  u.toUTF8String(out);
  return out;
}

std::vector<char32_t> utf8_codepoints(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    UChar32 c = next_codepoint(s, i);
    out.push_back(c < 0 ? U'�' : static_cast<char32_t>(c));
  }
  return out;
}

std::size_t word_count(std::string_view s) {
  std::size_t words = 0;
  bool in_word = false;
  const auto cps = utf8_codepoints(s);
  for (std::size_t k = 0; k < cps.size(); ++k) {
    const auto c = static_cast<UChar32>(cps[k]);
    if (u_hasBinaryProperty(c, UCHAR_IDEOGRAPHIC)) {
      ++words;
      in_word = false;
    } else if (is_word_char(c)) {
      if (!in_word) ++words;
      in_word = true;
    } else if (in_word && is_joiner(c) && k + 1 < cps.size() &&
               is_word_char(static_cast<UChar32>(cps[k + 1])) &&
               !u_hasBinaryProperty(static_cast<UChar32>(cps[k + 1]), UCHAR_IDEOGRAPHIC)) {
      // stays inside the current word
    } else {
      in_word = false;
    }
  }
  return words;
}

std::string base64_encode(std::string_view bytes) {
  static constexpr char kAlphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const auto b0 = static_cast<unsigned char>(bytes[i]);
    const auto b1 = static_cast<unsigned char>(bytes[i + 1]);
    const auto b2 = static_cast<unsigned char>(bytes[i + 2]);
    out.push_back(kAlphabet[b0 >> 2]);
    out.push_back(kAlphabet[((b0 & 0x03) << 4) | (b1 >> 4)]);
    out.push_back(kAlphabet[((b1 & 0x0f) << 2) | (b2 >> 6)]);
    out.push_back(kAlphabet[b2 & 0x3f]);
  }
  if (i < bytes.size()) {
    const auto b0 = static_cast<unsigned char>(bytes[i]);
    const bool two = i + 1 < bytes.size();
    const auto b1 = two ? static_cast<unsigned char>(bytes[i + 1]) : 0;
    out.push_back(kAlphabet[b0 >> 2]);
    out.push_back(kAlphabet[((b0 & 0x03) << 4) | (b1 >> 4)]);
    out.push_back(two ? kAlphabet[(b1 & 0x0f) << 2] : '=');
    out.push_back('=');
  }
  return out;
}

}  // namespace secagent
