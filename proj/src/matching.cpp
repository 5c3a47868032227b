#include "secagent/matching.hpp"

#include "secagent/text.hpp"

namespace secagent {

std::string normalize_typed_text(std::string_view s, bool case_sensitive) {
  std::string out = nfc_normalize(s);
  out = std::string(trim_whitespace(out));
  if (!case_sensitive) out = nfc_normalize(case_fold(out));
  return out;
}

bool match_choice(const Action& predicted, const GoldChoice& choice,
                  const MatchOptions& opts) {
  return std::visit(
      [&](const auto& target) -> bool {
        using T = std::decay_t<decltype(target)>;
        if constexpr (std::is_same_v<T, ClickTarget>) {
          const auto* c = std::get_if<Click>(&predicted);
          return c != nullptr && target.bbox.contains(c->coordinate);
        } else if constexpr (std::is_same_v<T, TypeTarget>) {
          const auto* t = std::get_if<Type>(&predicted);
          return t != nullptr && normalize_typed_text(t->text, opts.case_sensitive) ==
                                     normalize_typed_text(target.text, opts.case_sensitive);
        } else if constexpr (std::is_same_v<T, SwipeTarget>) {
          const auto* s = std::get_if<Swipe>(&predicted);
          if (s == nullptr || s->coordinate == s->coordinate2) return false;
          return derive_swipe_direction(*s) == target.direction;
        } else if constexpr (std::is_same_v<T, TerminateTarget>) {
          const auto* t = std::get_if<Terminate>(&predicted);
          return t != nullptr && t->status == target.status;
        } else {
          return predicted == target.action;
        }
      },
      choice);
}

bool match_action(const Action& predicted, std::span<const GoldChoice> choices,
                  const MatchOptions& opts) {
  for (const auto& c : choices) {
    if (match_choice(predicted, c, opts)) return true;
  }
  return false;
}

}  // namespace secagent
