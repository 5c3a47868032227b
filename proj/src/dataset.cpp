#include "secagent/dataset.hpp"

#include <fstream>
#include <set>

#include "secagent/matching.hpp"

namespace secagent {

namespace {

constexpr const char* kManifestFormat = "secagent-episodes";
constexpr int kManifestVersion = 1;

BBox bbox_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw std::invalid_argument("bbox must be [x_min, y_min, x_max, y_max]");
  }
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw std::invalid_argument("bbox values must be integers");
  }
  BBox b{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
  if (!b.valid()) throw std::invalid_argument("bbox is empty or negative");
  return b;
}

std::optional<std::string> optional_string(const Json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<std::string>();
}

void check_choice(const GoldChoice& c) {
  std::visit(
      [](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, ClickTarget>) {
          if (!t.bbox.valid()) throw std::invalid_argument("click target bbox is invalid");
        } else if constexpr (std::is_same_v<T, TypeTarget>) {
          if (t.text.empty()) throw std::invalid_argument("type target text is empty");
        } else if constexpr (std::is_same_v<T, ExactTarget>) {
          validate_action(t.action);
        }
      },
      c);
}

}  // namespace

DatasetError::DatasetError(std::string where, const std::string& what)
    : std::runtime_error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}

Json gold_choice_to_json(const GoldChoice& c) {
  Json j = Json::object();
  std::visit(
      [&](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, ClickTarget>) {
          j["type"] = "click";
          j["bbox"] = {t.bbox.x_min, t.bbox.y_min, t.bbox.x_max, t.bbox.y_max};
        } else if constexpr (std::is_same_v<T, TypeTarget>) {
          j["type"] = "type";
          j["text"] = t.text;
        } else if constexpr (std::is_same_v<T, SwipeTarget>) {
          j["type"] = "swipe";
          j["direction"] = std::string(to_string(t.direction));
        } else if constexpr (std::is_same_v<T, TerminateTarget>) {
          j["type"] = "terminate";
          j["status"] = std::string(to_string(t.status));
        } else {
          j["type"] = "exact";
          j["action"] = action_to_json(t.action);
        }
      },
      c);
  return j;
}

GoldChoice gold_choice_from_json(const Json& j) {
  if (!j.is_object()) throw std::invalid_argument("gold choice must be an object");
  const auto type = j.at("type").get<std::string>();
  GoldChoice out;
  if (type == "click") {
    out = ClickTarget{bbox_from_json(j.at("bbox"))};
  } else if (type == "type") {
    out = TypeTarget{j.at("text").get<std::string>()};
  } else if (type == "swipe") {
    auto d = swipe_direction_from_string(j.at("direction").get<std::string>());
    if (!d) throw std::invalid_argument("unknown swipe direction");
    out = SwipeTarget{*d};
  } else if (type == "terminate") {
    auto s = terminate_status_from_string(j.at("status").get<std::string>());
    if (!s) throw std::invalid_argument("unknown terminate status");
    out = TerminateTarget{*s};
  } else if (type == "exact") {
    out = ExactTarget{action_from_json(j.at("action"))};
  } else {
    throw std::invalid_argument("unknown gold choice type \"" + type + "\"");
  }
  check_choice(out);
  return out;
}

GoldChoice choice_for_action(const Action& a, const std::optional<BBox>& bbox) {
  switch (kind_of(a)) {
    case ActionKind::kClick:
      if (!bbox) throw std::invalid_argument("click choice requires a bounding box");
      return ClickTarget{*bbox};
    case ActionKind::kType:
      return TypeTarget{std::get<Type>(a).text};
    case ActionKind::kSwipe:
      return SwipeTarget{derive_swipe_direction(std::get<Swipe>(a))};
    case ActionKind::kTerminate:
      return TerminateTarget{std::get<Terminate>(a).status};
    default:
      return ExactTarget{a};
  }
}

Json step_to_json(const StepRecord& s) {
  Json j = Json::object();
  j["index"] = s.index;
  j["screenshot"] = s.screenshot;
  j["primary_action"] = action_to_json(s.primary_action);
  Json choices = Json::array();
  for (const auto& c : s.gold_choices) choices.push_back(gold_choice_to_json(c));
  j["gold_choices"] = std::move(choices);
  if (s.annotated_context) j["annotated_context"] = *s.annotated_context;
  if (s.annotated_thought) j["annotated_thought"] = *s.annotated_thought;
  return j;
}

StepRecord step_from_json(const Json& j) {
  StepRecord s;
  s.index = j.at("index").get<int>();
  s.screenshot = j.at("screenshot").get<std::string>();
  s.primary_action = action_from_json(j.at("primary_action"));
  for (const auto& c : j.at("gold_choices")) s.gold_choices.push_back(gold_choice_from_json(c));
  s.annotated_context = optional_string(j, "annotated_context");
  s.annotated_thought = optional_string(j, "annotated_thought");
  return s;
}

Json episode_to_json(const Episode& e) {
  Json j = Json::object();
  j["id"] = e.id;
  j["app"] = e.app;
  j["instruction"] = e.instruction;
  j["source"] = e.source;
  if (e.parent_id) j["parent_id"] = *e.parent_id;
  Json steps = Json::array();
  for (const auto& s : e.steps) steps.push_back(step_to_json(s));
  j["steps"] = std::move(steps);
  return j;
}

Episode episode_from_json(const Json& j) {
  if (!j.is_object()) throw std::invalid_argument("episode record must be an object");
  Episode e;
  e.id = j.at("id").get<std::string>();
  e.app = j.value("app", "");
  e.instruction = j.at("instruction").get<std::string>();
  e.source = j.value("source", "");
  e.parent_id = optional_string(j, "parent_id");
  for (const auto& s : j.at("steps")) e.steps.push_back(step_from_json(s));
  return e;
}

void validate_episode(const Episode& e, int max_agent_steps) {
  const std::string where = "episode " + (e.id.empty() ? std::string("<no id>") : e.id);
  if (e.id.empty()) throw DatasetError(where, "episode id is empty");
  if (e.instruction.empty()) throw DatasetError(where, "instruction is empty");
  if (e.steps.empty()) throw DatasetError(where, "episode has no steps");
  if (e.source == "agent" && static_cast<int>(e.steps.size()) > max_agent_steps) {
    throw DatasetError(where, "agent-driven episode has " + std::to_string(e.steps.size()) +
                                  " steps, limit is " + std::to_string(max_agent_steps));
  }
  for (std::size_t k = 0; k < e.steps.size(); ++k) {
    const auto& s = e.steps[k];
    const std::string at = where + " step " + std::to_string(k + 1);
    if (s.index != static_cast<int>(k) + 1) {
      throw DatasetError(at, "step index " + std::to_string(s.index) +
                                 " breaks the contiguous 1-based sequence");
    }
    if (s.gold_choices.empty()) throw DatasetError(at, "step has no gold choices");
    for (std::size_t a = 0; a < s.gold_choices.size(); ++a) {
      try {
        check_choice(s.gold_choices[a]);
      } catch (const std::exception& ex) {
        throw DatasetError(at, ex.what());
      }
      for (std::size_t b = a + 1; b < s.gold_choices.size(); ++b) {
        if (s.gold_choices[a] == s.gold_choices[b]) {
          throw DatasetError(at, "duplicate gold choice");
        }
      }
    }
    try {
      validate_action(s.primary_action);
    } catch (const ActionError& ex) {
      throw DatasetError(at, std::string("primary action invalid: ") + ex.what());
    }
    if (!match_action(s.primary_action, s.gold_choices)) {
      throw DatasetError(at, "primary action matches none of the step's gold choices");
    }
  }
}

Dataset load_dataset(const std::filesystem::path& path, const LoadOptions& opts) {
  namespace fs = std::filesystem;
  fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream mf(manifest_path);
  if (!mf) throw DatasetError(manifest_path.string(), "cannot open manifest");
  Json manifest;
  try {
    manifest = Json::parse(mf);
  } catch (const Json::parse_error& e) {
    throw DatasetError(manifest_path.string(), e.what());
  }
  if (manifest.value("format", "") != kManifestFormat) {
    throw DatasetError(manifest_path.string(), "manifest format is not secagent-episodes");
  }
  if (manifest.value("version", 0) != kManifestVersion) {
    throw DatasetError(manifest_path.string(), "unsupported manifest version");
  }
  const fs::path base = manifest_path.parent_path();
  const fs::path records = base / manifest.value("episodes", "episodes.jsonl");
  fs::path image_root = manifest.value("image_root", ".");
  if (image_root.is_relative()) image_root = base / image_root;

  Dataset ds;
  ds.image_root = image_root.lexically_normal();
  std::ifstream in(records);
  if (!in) throw DatasetError(records.string(), "cannot open episode records");
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = records.filename().string() + ":" + std::to_string(line_no);
    Episode e;
    try {
      e = episode_from_json(Json::parse(line));
    } catch (const std::exception& ex) {
      throw DatasetError(where, ex.what());
    }
    try {
      validate_episode(e, opts.max_agent_steps);
    } catch (const DatasetError& ex) {
      throw DatasetError(where, ex.what());
    }
    if (!ids.insert(e.id).second) throw DatasetError(where, "duplicate episode id " + e.id);
    if (opts.check_images) {
      for (const auto& s : e.steps) {
        if (!fs::exists(ds.resolve(s.screenshot))) {
          throw DatasetError(where, "missing screenshot " + s.screenshot);
        }
      }
    }
    ds.episodes.push_back(std::move(e));
  }
  if (ds.episodes.empty()) throw DatasetError(records.string(), "dataset has no episodes");
  return ds;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Episode>& episodes,
                   const std::string& image_root, const Json& extra_manifest) {
  std::filesystem::create_directories(dir);
  Json manifest = Json::object();
  manifest["format"] = kManifestFormat;
  manifest["version"] = kManifestVersion;
  manifest["episodes"] = "episodes.jsonl";
  manifest["image_root"] = image_root;
  manifest["episode_count"] = episodes.size();
  if (extra_manifest.is_object()) {
    for (auto it = extra_manifest.begin(); it != extra_manifest.end(); ++it) {
      manifest[it.key()] = it.value();
    }
  }
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
  }
  std::ofstream out(dir / "episodes.jsonl", std::ios::binary | std::ios::trunc);
  for (const auto& e : episodes) out << episode_to_json(e).dump() << '\n';
  if (!out) throw DatasetError((dir / "episodes.jsonl").string(), "write failed");
}

}  // namespace secagent
