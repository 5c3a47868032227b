#pragma once

#include <json.hpp>

namespace secagent {

// Insertion-ordered JSON; emitted objects keep their key order.
using Json = nlohmann::ordered_json;

}  // namespace secagent
