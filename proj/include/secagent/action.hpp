#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>

#include "secagent/json.hpp"

namespace secagent {

// Pixel coordinate in the screenshot's native resolution, origin top-left.
struct Point {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct ScreenSize {
  int width = 0;
  int height = 0;
};

// Axis-aligned box with x_min < x_max and y_min < y_max. Containment is
// inclusive on all four edges.
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  bool valid() const {
    return x_min >= 0 && y_min >= 0 && x_min < x_max && y_min < y_max;
  }
  bool contains(Point p) const {
    return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max;
  }
  Point center() const {
    // Floor of the midpoint; all coordinates are non-negative.
    return {static_cast<int>((std::int64_t{x_min} + x_max) / 2),
            static_cast<int>((std::int64_t{y_min} + y_max) / 2)};
  }
  std::int64_t width() const { return std::int64_t{x_max} - x_min; }
  std::int64_t height() const { return std::int64_t{y_max} - y_min; }
  std::int64_t area() const { return width() * height(); }

  friend bool operator==(const BBox&, const BBox&) = default;
};

enum class SystemButtonKind { kBack, kHome, kMenu, kEnter };
enum class TerminateStatus { kSuccess, kFailure };
enum class SwipeDirection { kUp, kDown, kLeft, kRight };

struct Click {
  Point coordinate;
  friend bool operator==(const Click&, const Click&) = default;
};
struct Swipe {
  Point coordinate;
  Point coordinate2;
  friend bool operator==(const Swipe&, const Swipe&) = default;
};
struct Type {
  std::string text;
  friend bool operator==(const Type&, const Type&) = default;
};
struct SystemButton {
  SystemButtonKind button = SystemButtonKind::kBack;
  friend bool operator==(const SystemButton&, const SystemButton&) = default;
};
struct Wait {
  double seconds = 1.0;
  friend bool operator==(const Wait&, const Wait&) = default;
};
struct Terminate {
  TerminateStatus status = TerminateStatus::kSuccess;
  friend bool operator==(const Terminate&, const Terminate&) = default;
};

using Action = std::variant<Click, Swipe, Type, SystemButton, Wait, Terminate>;

enum class ActionKind { kClick, kSwipe, kType, kSystemButton, kWait, kTerminate };

ActionKind kind_of(const Action& a);
// Wire name of the action ("click", "swipe", "type", "system_button", "wait",
// "terminate").
std::string_view action_name(ActionKind kind);

std::string_view to_string(SystemButtonKind b);
std::string_view to_string(TerminateStatus s);
std::string_view to_string(SwipeDirection d);
std::optional<TerminateStatus> terminate_status_from_string(std::string_view s);
std::optional<SwipeDirection> swipe_direction_from_string(std::string_view s);

class ActionError : public std::runtime_error {
 public:
  enum class Kind {
    kMalformedJson,
    kUnknownAction,
    kMissingArgument,
    kInvalidValue,
    kDegenerateSwipe,
  };

  ActionError(Kind kind, std::string field, const std::string& detail);

  Kind kind() const { return kind_; }
  // Name of the offending field ("" when the whole document is at fault).
  const std::string& field() const { return field_; }

 private:
  Kind kind_;
  std::string field_;
};

std::string_view to_string(ActionError::Kind k);

// Parses a single tool-call object:
//   {"name":"mobile_use","arguments":{"action":...,...}}
// Anything else raises ActionError naming the offending field.
Action parse_action(std::string_view raw);

// Same contract as parse_action, for a tool call already held as JSON.
Action action_from_json(const Json& j);
Json action_to_json(const Action& a);

// Byte-deterministic serialization; key order is name, arguments, action,
// then the action's own arguments. parse_action(serialize_action(a)) == a.
std::string serialize_action(const Action& a);

// Throws ActionError when the action breaks a type invariant (negative
// coordinates, coincident swipe endpoints, empty text, non-positive wait).
void validate_action(const Action& a);

// Additional bounds check against a known screen size.
void validate_action(const Action& a, ScreenSize screen);

// Dominant axis wins; |dx| == |dy| resolves to the horizontal axis.
SwipeDirection derive_swipe_direction(const Swipe& s);

SwipeDirection opposite(SwipeDirection d);

}  // namespace secagent
