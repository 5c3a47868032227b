#include "secagent/prompt.hpp"

#include <fstream>

#include "secagent/json.hpp"

namespace secagent {

namespace {

constexpr const char* kActionSpace =
    R"(You operate a mobile phone through one tool, "mobile_use". Every action is a single JSON tool call. Coordinates are absolute screenshot pixels [x, y] with the origin at the top-left corner.
- click: tap the point at coordinate.
  {"name":"mobile_use","arguments":{"action":"click","coordinate":[x,y]}}
- swipe: drag from coordinate to coordinate2.
  {"name":"mobile_use","arguments":{"action":"swipe","coordinate":[x,y],"coordinate2":[x2,y2]}}
- type: enter text into the focused input field.
  {"name":"mobile_use","arguments":{"action":"type","text":"..."}}
- system_button: press one of Back, Home, Menu, Enter.
  {"name":"mobile_use","arguments":{"action":"system_button","button":"Back"}}
- wait: pause for the given number of seconds.
  {"name":"mobile_use","arguments":{"action":"wait","time":"2"}}
- terminate: end the task and report "success" or "failure".
  {"name":"mobile_use","arguments":{"action":"terminate","status":"success"}})";

constexpr const char* kOutputContract =
    R"(Reply with exactly one JSON object containing three keys in this order:
{"semantic_context": "<summary of the key operations completed so far, including this step's outcome>", "thought": "{{thought_field}}", "action": <one mobile_use tool call>})";

const PromptTemplate kBuiltin{
    "secagent-prompt/v1",
    "{{action_space}}\n\n{{output_contract}}",
    kActionSpace,
    kOutputContract,
    "<your reasoning about what to do next>",
    "",
    "Instruction: {{instruction}}\n",
    "Previous semantic context: {{context}}\n",
    "Previous steps (oldest first):\n",
    "Step {{step}} screenshot: <image>\nStep {{step}} action: {{action}}\n",
    "Current screenshot (step {{step}}): <image>\n",
};

}  // namespace

std::string_view to_string(HistoryMode m) {
  switch (m) {
    case HistoryMode::kNone: return "none";
    case HistoryMode::kRawHistory: return "raw_history";
    case HistoryMode::kSemanticContext: return "semantic_context";
  }
  return "?";
}

std::optional<HistoryMode> history_mode_from_string(std::string_view s) {
  if (s == "none") return HistoryMode::kNone;
  if (s == "raw_history") return HistoryMode::kRawHistory;
  if (s == "semantic_context") return HistoryMode::kSemanticContext;
  return std::nullopt;
}

void validate_history_config(const HistoryConfig& cfg) {
  if (cfg.window < 0) throw ConfigError("history window must be non-negative");
  if (cfg.mode == HistoryMode::kNone && cfg.window != 0) {
    throw ConfigError("history mode none requires window 0");
  }
  if (cfg.mode == HistoryMode::kSemanticContext && cfg.window > 1 &&
      !cfg.allow_wide_context_window) {
    throw ConfigError("semantic_context mode uses at most one prior step unless widened");
  }
}

const PromptTemplate& PromptTemplate::builtin() { return kBuiltin; }

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open prompt template " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("prompt template " + path.string() + ": " + e.what());
  }
  PromptTemplate t = kBuiltin;
  auto take = [&](const char* key, std::string& field) {
    if (j.contains(key)) field = j.at(key).get<std::string>();
  };
  take("version", t.version);
  take("system", t.system);
  take("action_space", t.action_space);
  take("output_contract", t.output_contract);
  take("thought_enabled", t.thought_enabled);
  take("thought_disabled", t.thought_disabled);
  take("instruction", t.instruction);
  take("context", t.context);
  take("history_header", t.history_header);
  take("history_entry", t.history_entry);
  take("current", t.current);
  return t;
}

std::string render_placeholders(std::string_view tmpl,
                                const std::vector<std::pair<std::string, std::string>>& vars) {
  std::string out;
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) {
      throw ConfigError("unterminated placeholder in prompt template");
    }
    out.append(tmpl.substr(pos, open - pos));
    std::string name(tmpl.substr(open + 2, close - open - 2));
    bool found = false;
    for (const auto& [k, v] : vars) {
      if (k == name) {
        out.append(v);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown prompt placeholder {{" + name + "}}");
    pos = close + 2;
  }
  return out;
}

PromptBundle build_prompt(const AgentTurnInput& input, const HistoryConfig& cfg,
                          const PromptTemplate& tmpl) {
  validate_history_config(cfg);
  if (static_cast<int>(input.history.size()) > cfg.window) {
    throw ConfigError("turn input carries " + std::to_string(input.history.size()) +
                      " history entries, window is " + std::to_string(cfg.window));
  }

  PromptBundle bundle;
  const std::string contract = render_placeholders(
      tmpl.output_contract,
      {{"thought_field", cfg.include_thought ? tmpl.thought_enabled : tmpl.thought_disabled}});
  bundle.system_text = render_placeholders(
      tmpl.system, {{"action_space", tmpl.action_space}, {"output_contract", contract}});

  std::string user = render_placeholders(tmpl.instruction, {{"instruction", input.instruction}});
  if (cfg.mode == HistoryMode::kSemanticContext) {
    user += render_placeholders(tmpl.context, {{"context", input.prev_context}});
  }

  std::size_t pairs = 0;
  if (cfg.mode != HistoryMode::kNone) {
    pairs = std::min<std::size_t>(input.history.size(), static_cast<std::size_t>(cfg.window));
  }
  if (pairs > 0) {
    user += tmpl.history_header;
    // history is newest first; render oldest first.
    for (std::size_t k = pairs; k-- > 0;) {
      const auto& h = input.history[k];
      const int step = input.step - static_cast<int>(k) - 1;
      user += render_placeholders(
          tmpl.history_entry,
          {{"step", std::to_string(step)}, {"action", serialize_action(h.action)}});
      bundle.images.push_back(h.screenshot);
    }
  }
  user += render_placeholders(tmpl.current, {{"step", std::to_string(input.step)}});
  bundle.images.push_back(input.current_screenshot);
  bundle.user_text = std::move(user);
  return bundle;
}

}  // namespace secagent
