#pragma once

#include <span>

#include "secagent/dataset.hpp"

namespace secagent {

struct MatchOptions {
  // Type targets compare after NFC + trim; case folding only when false.
  bool case_sensitive = true;
};

bool match_choice(const Action& predicted, const GoldChoice& choice,
                  const MatchOptions& opts = {});

// True iff `predicted` satisfies any of `choices`.
bool match_action(const Action& predicted, std::span<const GoldChoice> choices,
                  const MatchOptions& opts = {});

std::string normalize_typed_text(std::string_view s, bool case_sensitive = true);

}  // namespace secagent
