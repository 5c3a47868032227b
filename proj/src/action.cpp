#include "secagent/action.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <set>

#include "secagent/text.hpp"

namespace secagent {

namespace {

constexpr std::string_view kToolName = "mobile_use";

[[noreturn]] void fail(ActionError::Kind kind, std::string field,
                       const std::string& detail) {
  throw ActionError(kind, std::move(field), detail);
}

const Json& require(const Json& obj, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    fail(ActionError::Kind::kMissingArgument, key, "required argument is absent");
  }
  return *it;
}

int parse_coord_value(const Json& v, const std::string& field) {
  if (!v.is_number()) {
    fail(ActionError::Kind::kInvalidValue, field, "coordinate must be numeric");
  }
  if (v.is_number_integer()) {
    if (v.is_number_unsigned()) {
      auto u = v.get<std::uint64_t>();
      if (u > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) {
        fail(ActionError::Kind::kInvalidValue, field, "coordinate out of range");
      }
      return static_cast<int>(u);
    }
    auto i = v.get<std::int64_t>();
    if (i < 0) {
      fail(ActionError::Kind::kInvalidValue, field, "coordinate is negative");
    }
    if (i > std::numeric_limits<int>::max()) {
      fail(ActionError::Kind::kInvalidValue, field, "coordinate out of range");
    }
    return static_cast<int>(i);
  }
  double d = v.get<double>();
  if (!std::isfinite(d)) {
    fail(ActionError::Kind::kInvalidValue, field, "coordinate is not finite");
  }
  double f = std::floor(d);
  if (f < 0) {
    fail(ActionError::Kind::kInvalidValue, field, "coordinate is negative");
  }
  if (f > std::numeric_limits<int>::max()) {
    fail(ActionError::Kind::kInvalidValue, field, "coordinate out of range");
  }
  return static_cast<int>(f);
}

Point parse_point(const Json& v, const std::string& field) {
  if (!v.is_array() || v.size() != 2) {
    fail(ActionError::Kind::kInvalidValue, field,
         "expected a two-element [x, y] array");
  }
  return {parse_coord_value(v[0], field), parse_coord_value(v[1], field)};
}

double parse_wait_seconds(const Json& v) {
  double d = 0;
  if (v.is_number()) {
    d = v.get<double>();
  } else if (v.is_string()) {
    const auto& s = v.get_ref<const std::string&>();
    auto trimmed = trim_whitespace(s);
    const char* first = trimmed.data();
    const char* last = trimmed.data() + trimmed.size();
    auto [ptr, ec] = std::from_chars(first, last, d);
    if (trimmed.empty() || ec != std::errc() || ptr != last) {
      fail(ActionError::Kind::kInvalidValue, "time",
           "not a numeric seconds value: \"" + s + "\"");
    }
  } else {
    fail(ActionError::Kind::kInvalidValue, "time",
         "expected a number or numeric string");
  }
  if (!std::isfinite(d) || d <= 0) {
    fail(ActionError::Kind::kInvalidValue, "time", "wait time must be positive");
  }
  return d;
}

std::string format_seconds(double s) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), s);
  return std::string(buf, ptr);
}

void check_only_keys(const Json& args, std::initializer_list<const char*> allowed) {
  for (auto it = args.begin(); it != args.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      fail(ActionError::Kind::kInvalidValue, it.key(), "unexpected argument");
    }
  }
}

std::optional<SystemButtonKind> button_from_string(std::string_view s) {
  std::string lower(s);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "back") return SystemButtonKind::kBack;
  if (lower == "home") return SystemButtonKind::kHome;
  if (lower == "menu") return SystemButtonKind::kMenu;
  if (lower == "enter") return SystemButtonKind::kEnter;
  return std::nullopt;
}

}  // namespace

ActionError::ActionError(Kind kind, std::string field, const std::string& detail)
    : std::runtime_error(std::string(secagent::to_string(kind)) +
                         (field.empty() ? "" : " [" + field + "]") + ": " + detail),
      kind_(kind),
      field_(std::move(field)) {}

std::string_view to_string(ActionError::Kind k) {
  switch (k) {
    case ActionError::Kind::kMalformedJson: return "MalformedJson";
    case ActionError::Kind::kUnknownAction: return "UnknownAction";
    case ActionError::Kind::kMissingArgument: return "MissingArgument";
    case ActionError::Kind::kInvalidValue: return "InvalidValue";
    case ActionError::Kind::kDegenerateSwipe: return "DegenerateSwipe";
  }
  return "?";
}

ActionKind kind_of(const Action& a) { return static_cast<ActionKind>(a.index()); }

std::string_view action_name(ActionKind kind) {
  switch (kind) {
    case ActionKind::kClick: return "click";
    case ActionKind::kSwipe: return "swipe";
    case ActionKind::kType: return "type";
    case ActionKind::kSystemButton: return "system_button";
    case ActionKind::kWait: return "wait";
    case ActionKind::kTerminate: return "terminate";
  }
  return "?";
}

std::string_view to_string(SystemButtonKind b) {
  switch (b) {
    case SystemButtonKind::kBack: return "Back";
    case SystemButtonKind::kHome: return "Home";
    case SystemButtonKind::kMenu: return "Menu";
    case SystemButtonKind::kEnter: return "Enter";
  }
  return "?";
}

std::string_view to_string(TerminateStatus s) {
  return s == TerminateStatus::kSuccess ? "success" : "failure";
}

std::string_view to_string(SwipeDirection d) {
  switch (d) {
    case SwipeDirection::kUp: return "up";
    case SwipeDirection::kDown: return "down";
    case SwipeDirection::kLeft: return "left";
    case SwipeDirection::kRight: return "right";
  }
  return "?";
}

std::optional<TerminateStatus> terminate_status_from_string(std::string_view s) {
  if (s == "success") return TerminateStatus::kSuccess;
  if (s == "failure") return TerminateStatus::kFailure;
  return std::nullopt;
}

std::optional<SwipeDirection> swipe_direction_from_string(std::string_view s) {
  if (s == "up") return SwipeDirection::kUp;
  if (s == "down") return SwipeDirection::kDown;
  if (s == "left") return SwipeDirection::kLeft;
  if (s == "right") return SwipeDirection::kRight;
  return std::nullopt;
}

Action action_from_json(const Json& doc) {
  if (!doc.is_object()) {
    fail(ActionError::Kind::kMalformedJson, "", "tool call must be a JSON object");
  }
  const Json& name = require(doc, "name");
  if (!name.is_string() || name.get_ref<const std::string&>() != kToolName) {
    fail(ActionError::Kind::kInvalidValue, "name", "tool name must be \"mobile_use\"");
  }
  const Json& args = require(doc, "arguments");
  check_only_keys(doc, {"name", "arguments"});
  if (!args.is_object()) {
    fail(ActionError::Kind::kInvalidValue, "arguments", "arguments must be an object");
  }
  const Json& action = require(args, "action");
  if (!action.is_string()) {
    fail(ActionError::Kind::kInvalidValue, "action", "action must be a string");
  }
  const auto& verb = action.get_ref<const std::string&>();

  Action out;
  if (verb == "click") {
    Point p = parse_point(require(args, "coordinate"), "coordinate");
    check_only_keys(args, {"action", "coordinate"});
    out = Click{p};
  } else if (verb == "swipe") {
    Point p = parse_point(require(args, "coordinate"), "coordinate");
    Point q = parse_point(require(args, "coordinate2"), "coordinate2");
    check_only_keys(args, {"action", "coordinate", "coordinate2"});
    out = Swipe{p, q};
  } else if (verb == "type") {
    const Json& t = require(args, "text");
    if (!t.is_string()) {
      fail(ActionError::Kind::kInvalidValue, "text", "text must be a string");
    }
    check_only_keys(args, {"action", "text"});
    out = Type{t.get<std::string>()};
  } else if (verb == "system_button") {
    const Json& b = require(args, "button");
    std::optional<SystemButtonKind> kind;
    if (b.is_string()) kind = button_from_string(b.get_ref<const std::string&>());
    if (!kind) {
      fail(ActionError::Kind::kInvalidValue, "button",
           "button must be one of Back, Home, Menu, Enter");
    }
    check_only_keys(args, {"action", "button"});
    out = SystemButton{*kind};
  } else if (verb == "wait") {
    double s = parse_wait_seconds(require(args, "time"));
    check_only_keys(args, {"action", "time"});
    out = Wait{s};
  } else if (verb == "terminate") {
    const Json& st = require(args, "status");
    std::optional<TerminateStatus> status;
    if (st.is_string()) status = terminate_status_from_string(st.get_ref<const std::string&>());
    if (!status) {
      fail(ActionError::Kind::kInvalidValue, "status",
           "status must be \"success\" or \"failure\"");
    }
    check_only_keys(args, {"action", "status"});
    out = Terminate{*status};
  } else {
    fail(ActionError::Kind::kUnknownAction, "action", "unknown action \"" + verb + "\"");
  }
  validate_action(out);
  return out;
}

Action parse_action(std::string_view raw) {
  Json doc;
  try {
    doc = Json::parse(raw.begin(), raw.end());
  } catch (const Json::parse_error& e) {
    fail(ActionError::Kind::kMalformedJson, "", e.what());
  }
  return action_from_json(doc);
}

Json action_to_json(const Action& a) {
  Json args = Json::object();
  args["action"] = std::string(action_name(kind_of(a)));
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Click>) {
          args["coordinate"] = {v.coordinate.x, v.coordinate.y};
        } else if constexpr (std::is_same_v<T, Swipe>) {
          args["coordinate"] = {v.coordinate.x, v.coordinate.y};
          args["coordinate2"] = {v.coordinate2.x, v.coordinate2.y};
        } else if constexpr (std::is_same_v<T, Type>) {
          args["text"] = v.text;
        } else if constexpr (std::is_same_v<T, SystemButton>) {
          args["button"] = std::string(to_string(v.button));
        } else if constexpr (std::is_same_v<T, Wait>) {
          args["time"] = format_seconds(v.seconds);
        } else if constexpr (std::is_same_v<T, Terminate>) {
          args["status"] = std::string(to_string(v.status));
        }
      },
      a);
  Json doc = Json::object();
  doc["name"] = std::string(kToolName);
  doc["arguments"] = std::move(args);
  return doc;
}

std::string serialize_action(const Action& a) { return action_to_json(a).dump(); }

void validate_action(const Action& a) {
  std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        auto check_point = [](Point p, const char* field) {
          if (p.x < 0 || p.y < 0) {
            fail(ActionError::Kind::kInvalidValue, field, "coordinate is negative");
          }
        };
        if constexpr (std::is_same_v<T, Click>) {
          check_point(v.coordinate, "coordinate");
        } else if constexpr (std::is_same_v<T, Swipe>) {
          check_point(v.coordinate, "coordinate");
          check_point(v.coordinate2, "coordinate2");
          if (v.coordinate == v.coordinate2) {
            fail(ActionError::Kind::kInvalidValue, "coordinate2",
                 "swipe endpoints coincide");
          }
        } else if constexpr (std::is_same_v<T, Type>) {
          if (v.text.empty()) {
            fail(ActionError::Kind::kInvalidValue, "text", "text is empty");
          }
          if (!is_valid_utf8(v.text)) {
            fail(ActionError::Kind::kInvalidValue, "text", "text is not valid UTF-8");
          }
        } else if constexpr (std::is_same_v<T, Wait>) {
          if (!std::isfinite(v.seconds) || v.seconds <= 0) {
            fail(ActionError::Kind::kInvalidValue, "time", "wait time must be positive");
          }
        }
      },
      a);
}

void validate_action(const Action& a, ScreenSize screen) {
  validate_action(a);
  auto in_bounds = [&](Point p, const char* field) {
    if (p.x >= screen.width || p.y >= screen.height) {
      fail(ActionError::Kind::kInvalidValue, field, "coordinate outside the screen");
    }
  };
  if (const auto* c = std::get_if<Click>(&a)) {
    in_bounds(c->coordinate, "coordinate");
  } else if (const auto* s = std::get_if<Swipe>(&a)) {
    in_bounds(s->coordinate, "coordinate");
    in_bounds(s->coordinate2, "coordinate2");
  }
}

SwipeDirection derive_swipe_direction(const Swipe& s) {
  const std::int64_t dx = std::int64_t{s.coordinate2.x} - s.coordinate.x;
  const std::int64_t dy = std::int64_t{s.coordinate2.y} - s.coordinate.y;
  if (dx == 0 && dy == 0) {
    fail(ActionError::Kind::kDegenerateSwipe, "coordinate2", "swipe endpoints coincide");
  }
  if (std::llabs(dx) >= std::llabs(dy)) {
    return dx > 0 ? SwipeDirection::kRight : SwipeDirection::kLeft;
  }
  return dy > 0 ? SwipeDirection::kDown : SwipeDirection::kUp;
}

SwipeDirection opposite(SwipeDirection d) {
  switch (d) {
    case SwipeDirection::kUp: return SwipeDirection::kDown;
    case SwipeDirection::kDown: return SwipeDirection::kUp;
    case SwipeDirection::kLeft: return SwipeDirection::kRight;
    case SwipeDirection::kRight: return SwipeDirection::kLeft;
  }
  return d;
}

}  // namespace secagent
