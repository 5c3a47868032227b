#include <iostream>
#include <map>
#include <memory>

#include "cli_common.hpp"
#include "secagent/prompt.hpp"
#include "secagent/rewards.hpp"

namespace secagent::cli {

namespace {

struct RewardArgs {
  std::string input;
  std::string out;
  bool case_insensitive = false;
  double std_epsilon = 1e-6;
};

// Input records: {"group"?: string, "output": string, "gold_choices": [...]}.
// Output records keep input order and add the group advantage when the
// record belongs to a group of at least two.
int run_reward(const RewardArgs& a) {
  if (!(a.std_epsilon > 0)) throw ConfigError("--std-epsilon must be positive");
  const std::filesystem::path input = a.input;
  const auto records = read_jsonl(input);
  MatchOptions match;
  match.case_sensitive = !a.case_insensitive;

  std::vector<Json> rows;
  std::map<std::string, std::vector<std::size_t>> groups;
  std::vector<std::string> group_order;
  for (const auto& rec : records) {
    const std::string where = location(input, rec.line);
    std::string output;
    std::vector<GoldChoice> gold;
    std::optional<std::string> group;
    try {
      output = rec.value.at("output").get<std::string>();
      for (const auto& c : rec.value.at("gold_choices")) gold.push_back(gold_choice_from_json(c));
      if (auto g = rec.value.find("group"); g != rec.value.end() && !g->is_null()) {
        group = g->is_string() ? g->get<std::string>() : g->dump();
      }
    } catch (const std::exception& e) {
      throw DatasetError(where, e.what());
    }
    if (gold.empty()) throw DatasetError(where, "gold_choices must not be empty");
    const RewardBreakdown r = compute_reward(output, gold, match);
    Json row = Json::object();
    row["line"] = rec.line;
    if (group) row["group"] = *group;
    row["format_reward"] = r.format_reward;
    row["action_reward"] = r.action_reward;
    row["reward"] = r.total();
    if (group) {
      if (!groups.count(*group)) group_order.push_back(*group);
      groups[*group].push_back(rows.size());
    }
    rows.push_back(std::move(row));
  }

  int failed_groups = 0;
  for (const auto& name : group_order) {
    const auto& members = groups[name];
    std::vector<double> rewards;
    for (auto i : members) rewards.push_back(rows[i]["reward"].get<double>());
    try {
      const auto adv = group_advantages(rewards, a.std_epsilon);
      for (std::size_t k = 0; k < members.size(); ++k) rows[members[k]]["advantage"] = adv[k];
    } catch (const GroupTooSmall& e) {
      ++failed_groups;
      std::cerr << "group " << name << ": GroupTooSmall: " << e.what() << "\n";
      for (auto i : members) {
        rows[i]["advantage"] = nullptr;
        rows[i]["group_error"] = "GroupTooSmall";
      }
    }
  }

  std::string text;
  for (const auto& row : rows) text += row.dump() + "\n";
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
    std::cerr << "scored " << rows.size() << " records in " << group_order.size() << " groups";
    if (failed_groups > 0) std::cerr << " (" << failed_groups << " too small)";
    std::cerr << "\n";
  }
  return kExitOk;
}

}  // namespace

void register_reward(CLI::App& app, Runner& runner) {
  auto args = std::make_shared<RewardArgs>();
  auto* cmd = app.add_subcommand(
      "reward",
      "Score completions with the rule-based reward and group-normalized advantages.\n"
      "Input JSONL: {group?, output, gold_choices}. Output JSONL adds\n"
      "format_reward, action_reward, reward and advantage.");
  cmd->add_option("--input", args->input, "Batch JSONL")->required();
  cmd->add_option("--out", args->out, "Output JSONL (default: stdout)");
  cmd->add_flag("--case-insensitive", args->case_insensitive,
                "Compare typed text case-insensitively");
  cmd->add_option("--std-epsilon", args->std_epsilon,
                  "Groups with a smaller reward spread get zero advantages")
      ->capture_default_str();
  cmd->callback([args, &runner] { runner = [args] { return run_reward(*args); }; });
}

}  // namespace secagent::cli
