// Acceptance checks. Prints one PASS/FAIL line per criterion; exits nonzero
// when any criterion fails.

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "secagent/agent.hpp"
#include "secagent/annotation.hpp"
#include "secagent/eval.hpp"
#include "secagent/pipeline.hpp"
#include "secagent/rewards.hpp"
#include "test_support.hpp"

using namespace secagent;
using testing::TempDir;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

BackendFactory replay_factory() {
  return [](const Episode& e) { return std::make_unique<ReplayBackend>(e); };
}

// ---------------------------------------------------------------------------

Outcome replay_oracle() {
  Outcome o;
  TempDir dir;
  testing::write_synthetic_dataset(dir.path(), 50, 10, 101);
  const auto t0 = Clock::now();
  const Dataset ds = load_dataset(dir.path(), LoadOptions{true});
  const EvalReport r = aggregate(evaluate_dataset(ds, replay_factory(), EvalOptions{}, 1));
  const double elapsed = seconds_since(t0);
  if (r.step_accuracy.numerator != 500 || r.step_accuracy.denominator != 500) {
    o.fail("SA " + std::to_string(r.step_accuracy.numerator) + "/" +
           std::to_string(r.step_accuracy.denominator));
  }
  if (r.task_accuracy.numerator != 50 || r.task_accuracy.denominator != 50) {
    o.fail("TA " + std::to_string(r.task_accuracy.numerator) + "/" +
           std::to_string(r.task_accuracy.denominator));
  }
  if (!(elapsed < 10.0)) o.fail("took " + fmt(elapsed) + " s");
  if (o.pass) {
    o.detail = "SA=" + fmt(r.step_accuracy.value()) + " TA=" + fmt(r.task_accuracy.value()) +
               " over 50x10 in " + fmt(elapsed) + " s";
  }
  return o;
}

Outcome corruption_exactness() {
  Outcome o;
  TempDir dir;
  const int n_episodes = 12;
  const int n_steps = 6;
  testing::write_synthetic_dataset(dir.path(), n_episodes, n_steps, 202);
  const Dataset ds = load_dataset(dir.path());
  const std::int64_t n = n_episodes * n_steps;
  std::mt19937_64 rng(7);
  for (int pattern = 0; pattern < 100 && o.pass; ++pattern) {
    const int k = std::uniform_int_distribution<int>(0, static_cast<int>(n))(rng);
    std::vector<int> slots(n);
    for (int i = 0; i < n; ++i) slots[i] = i;
    std::shuffle(slots.begin(), slots.end(), rng);
    std::map<std::string, std::set<int>> wrong;
    for (int i = 0; i < k; ++i) {
      wrong[ds.episodes[slots[i] / n_steps].id].insert(slots[i] % n_steps + 1);
    }
    const auto results = evaluate_dataset(
        ds,
        [&](const Episode& e) {
          std::vector<std::string> script;
          for (const auto& s : e.steps) {
            const Action a =
                wrong[e.id].count(s.index) ? testing::guaranteed_wrong(s) : s.primary_action;
            script.push_back(make_triplet_text("after " + std::to_string(s.index), "t", a));
          }
          return std::make_unique<ScriptedBackend>(script);
        },
        EvalOptions{});
    const EvalReport r = aggregate(results);
    std::int64_t untouched = 0;
    for (const auto& e : ds.episodes) untouched += wrong[e.id].empty() ? 1 : 0;
    const double sa_expected = static_cast<double>(n - k) / static_cast<double>(n);
    const double ta_expected = static_cast<double>(untouched) / n_episodes;
    if (r.step_accuracy.numerator != n - k || r.step_accuracy.denominator != n ||
        r.step_accuracy.value() != sa_expected) {
      o.fail("pattern " + std::to_string(pattern) + ": SA " + fmt(r.step_accuracy.value()) +
             " expected " + fmt(sa_expected));
    }
    if (r.task_accuracy.numerator != untouched || r.task_accuracy.value() != ta_expected) {
      o.fail("pattern " + std::to_string(pattern) + ": TA " + fmt(r.task_accuracy.value()) +
             " expected " + fmt(ta_expected));
    }
  }
  if (o.pass) o.detail = "100 patterns over " + std::to_string(n) + " steps";
  return o;
}

Outcome multi_choice_matrix() {
  Outcome o;
  struct Family {
    std::string name;
    GoldChoice choice;
    Action hit;
    std::vector<Action> misses;
  };
  const std::vector<Family> families = {
      {"click", ClickTarget{BBox{100, 100, 200, 200}}, Click{{150, 150}},
       {Click{{250, 150}}, Click{{150, 99}}, Click{{201, 201}}}},
      {"swipe", SwipeTarget{SwipeDirection::kUp}, Swipe{{500, 1500}, {500, 500}},
       {Swipe{{500, 500}, {500, 1500}}, Swipe{{900, 1000}, {100, 1000}}}},
      {"type", TypeTarget{"hello"}, Type{"hello"}, {Type{"goodbye"}}},
      {"terminate", TerminateTarget{TerminateStatus::kSuccess}, Terminate{TerminateStatus::kSuccess},
       {Terminate{TerminateStatus::kFailure}}},
      {"exact", ExactTarget{SystemButton{SystemButtonKind::kBack}},
       SystemButton{SystemButtonKind::kBack},
       {SystemButton{SystemButtonKind::kHome}, Wait{1}}},
  };
  int cells = 0;
  for (std::size_t a = 0; a < families.size(); ++a) {
    for (std::size_t b = 0; b < families.size(); ++b) {
      if (a == b) continue;
      const std::vector<GoldChoice> gold = {families[a].choice, families[b].choice};
      for (std::size_t f = 0; f < families.size(); ++f) {
        const bool member = f == a || f == b;
        ++cells;
        if (match_action(families[f].hit, gold) != member) {
          o.fail("gold {" + families[a].name + "," + families[b].name + "} " +
                 (member ? "rejects " : "accepts ") + families[f].name + " hit");
        }
        for (const auto& miss : families[f].misses) {
          ++cells;
          // A miss from one family may still be the other family's hit.
          const bool expect = (f != a && match_choice(miss, families[a].choice)) ||
                              (f != b && match_choice(miss, families[b].choice));
          if (expect) continue;
          if (match_action(miss, gold)) {
            o.fail("gold {" + families[a].name + "," + families[b].name + "} accepts " +
                   serialize_action(miss));
          }
        }
      }
    }
  }
  // The headline pair, spelled out.
  const std::vector<GoldChoice> click_or_swipe = {ClickTarget{BBox{100, 100, 200, 200}},
                                                  SwipeTarget{SwipeDirection::kUp}};
  if (!match_action(Click{{100, 200}}, click_or_swipe)) o.fail("edge click rejected");
  if (!match_action(Swipe{{10, 900}, {12, 100}}, click_or_swipe)) o.fail("upward swipe rejected");
  if (match_action(Click{{99, 150}}, click_or_swipe)) o.fail("out-of-box click accepted");
  if (match_action(Swipe{{10, 100}, {12, 900}}, click_or_swipe)) o.fail("downward swipe accepted");
  if (o.pass) o.detail = std::to_string(cells) + " matrix cells";
  return o;
}

Outcome action_grammar() {
  Outcome o;
  std::mt19937_64 rng(11);
  const int n = 10000;
  int round_trips = 0;
  for (int i = 0; i < n; ++i) {
    const Action a = testing::random_action(rng);
    const std::string wire = serialize_action(a);
    try {
      if (parse_action(wire) == a && serialize_action(parse_action(wire)) == wire) ++round_trips;
    } catch (const ActionError&) {
    }
  }
  if (round_trips != n) o.fail(std::to_string(n - round_trips) + " round trips failed");

  int mutants = 0;
  int typed = 0;
  auto expect = [&](const std::string& raw, ActionError::Kind kind, const std::string& field) {
    ++mutants;
    try {
      parse_action(raw);
      o.fail("accepted mutant " + raw);
    } catch (const ActionError& e) {
      if (e.kind() == kind && (field.empty() || e.field() == field)) {
        ++typed;
      } else {
        o.fail("mutant " + raw + " gave " + std::string(to_string(e.kind())) + "/" + e.field());
      }
    }
  };
  const std::vector<std::string> unknown = {"fly", "clik", "Click ", "", "long_press", "scroll"};
  for (int i = 0; i < 2000; ++i) {
    const Json wire = action_to_json(testing::random_action(rng));
    const Json& args = wire["arguments"];
    for (auto it = args.begin(); it != args.end(); ++it) {
      if (it.key() == "action") continue;
      Json renamed = wire;
      renamed["arguments"].erase(it.key());
      renamed["arguments"][it.key() + "_"] = it.value();
      expect(renamed.dump(), ActionError::Kind::kMissingArgument, it.key());
      Json dropped = wire;
      dropped["arguments"].erase(it.key());
      expect(dropped.dump(), ActionError::Kind::kMissingArgument, it.key());
    }
    Json verb = wire;
    verb["arguments"]["action"] = unknown[static_cast<std::size_t>(i) % unknown.size()];
    expect(verb.dump(), ActionError::Kind::kUnknownAction, "action");
    Json no_args = wire;
    no_args.erase("arguments");
    expect(no_args.dump(), ActionError::Kind::kMissingArgument, "arguments");
    const std::string text = wire.dump();
    const auto cut = std::uniform_int_distribution<std::size_t>(0, text.size() - 1)(rng);
    expect(text.substr(0, cut), ActionError::Kind::kMalformedJson, "");
  }
  if (o.pass) {
    o.detail = std::to_string(round_trips) + "/" + std::to_string(n) + " round trips, " +
               std::to_string(typed) + "/" + std::to_string(mutants) + " mutants rejected";
  }
  return o;
}

Outcome reward_lattice() {
  Outcome o;
  std::mt19937_64 rng(13);
  std::set<double> seen;
  const std::vector<GoldChoice> gold = {ClickTarget{BBox{10, 10, 50, 50}}};
  const Action right = Click{{20, 30}};
  const Action wrong = Click{{400, 400}};
  struct Cell {
    bool format;
    bool correct;
    std::string output;
    double expected;
  };
  const std::vector<Cell> grid = {
      {true, true, make_triplet_text("c", "t", right), 1.5},
      {true, false, make_triplet_text("c", "t", wrong), 0.5},
      {false, true, serialize_action(right), 0.0},
      {false, false, "no triplet here", 0.0},
  };
  for (const auto& c : grid) {
    const double r = compute_reward(c.output, gold).total();
    seen.insert(r);
    if (r != c.expected) {
      o.fail("format=" + std::to_string(c.format) + " correct=" + std::to_string(c.correct) +
             " gave " + fmt(r));
    }
  }
  for (int i = 0; i < 5000; ++i) {
    const StepRecord step = testing::random_step(rng, 1, "s.png", {1080, 2400});
    const int shape = std::uniform_int_distribution<int>(0, 3)(rng);
    std::string out;
    switch (shape) {
      case 0: out = make_triplet_text("c", "t", step.primary_action); break;
      case 1: out = make_triplet_text("c", "t", testing::guaranteed_wrong(step)); break;
      case 2: out = serialize_action(step.primary_action); break;
      default: out = testing::random_text(rng); break;
    }
    seen.insert(compute_reward(out, step.gold_choices).total());
  }
  if (seen != std::set<double>{0.0, 0.5, 1.5}) {
    std::string got;
    for (double v : seen) got += fmt(v) + " ";
    o.fail("reachable set " + got);
  }
  if (seen.count(1.0)) o.fail("1.0 reached");
  if (o.pass) o.detail = "reachable {0, 0.5, 1.5}";
  return o;
}

Outcome grpo_math() {
  Outcome o;
  const std::vector<double> fixed = {1.5, 0.5, 1.5, 0.5};
  if (group_advantages(fixed) != std::vector<double>{1, -1, 1, -1}) o.fail("fixture group");

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-3, 3);
  double worst_mean = 0;
  double worst_std = 0;
  double worst_affine = 0;
  for (int g = 0; g < 1000; ++g) {
    std::vector<double> r(16);
    for (auto& v : r) v = u(rng);
    const auto adv = group_advantages(r);
    long double mean = 0;
    for (double a : adv) mean += a;
    mean /= 16;
    long double var = 0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(static_cast<double>(var / 16));
    worst_mean = std::max(worst_mean, std::fabs(static_cast<double>(mean)));
    worst_std = std::max(worst_std, std::fabs(sd - 1.0));
    const double scale = std::uniform_real_distribution<double>(0.1, 10)(rng);
    const double shift = u(rng);
    std::vector<double> moved(16);
    for (int i = 0; i < 16; ++i) moved[i] = scale * r[i] + shift;
    const auto adv2 = group_advantages(moved);
    for (int i = 0; i < 16; ++i) worst_affine = std::max(worst_affine, std::fabs(adv[i] - adv2[i]));
  }
  if (worst_mean > 1e-9) o.fail("mean off by " + fmt(worst_mean));
  if (worst_std > 1e-9) o.fail("std off by " + fmt(worst_std));
  if (worst_affine > 1e-9) o.fail("affine drift " + fmt(worst_affine));

  GrpoConfig cfg;
  const std::vector<std::vector<double>> no_kl = {{0.0}};
  const std::vector<GroupSample> up = {{1.5, {2.0}}};
  const std::vector<double> plus = {1.0};
  const double hi = grpo_objective(up, plus, no_kl, cfg);
  const std::vector<GroupSample> down = {{0.5, {0.5}}};
  const std::vector<double> minus = {-1.0};
  const double lo = grpo_objective(down, minus, no_kl, cfg);
  if (std::fabs(hi - 1.28) > 1e-12) o.fail("r=2 gave " + fmt(hi));
  if (std::fabs(lo - (-0.8)) > 1e-12) o.fail("r=0.5 gave " + fmt(lo));
  if (o.pass) {
    o.detail = "max |mean|=" + fmt(worst_mean) + " max |std-1|=" + fmt(worst_std) +
               " clip fixtures " + fmt(hi) + ", " + fmt(lo);
  }
  return o;
}

Outcome filter_thresholds() {
  Outcome o;
  const ScreenSize screen{1000, 1000};
  const RgbImage shot = testing::noise_image(screen.width, screen.height, 5);
  FilterConfig cfg;
  auto reason = [&](BBox b, const FilterConfig& c) {
    UiElement leaf;
    leaf.bbox = b;
    return static_reject_reason(leaf, screen, shot, c);
  };
  auto want = [&](const char* what, BBox b, std::optional<RejectReason> expected,
                  const FilterConfig& c) {
    const auto got = reason(b, c);
    if (got != expected) {
      o.fail(std::string(what) + " gave " + (got ? std::string(to_string(*got)) : "kept"));
    }
  };
  // 5999 = 7 x 857; the aspect rule is lifted for this pair.
  FilterConfig area_only = cfg;
  area_only.max_aspect = 1000;
  want("area 5999", {0, 0, 7, 857}, RejectReason::kArea, area_only);
  want("area 6006", {0, 0, 7, 858}, std::nullopt, area_only);
  want("area 60x100", {0, 0, 60, 100}, std::nullopt, cfg);
  want("area 60x99", {0, 0, 60, 99}, RejectReason::kArea, cfg);
  want("aspect 13.5", {0, 0, 297, 22}, std::nullopt, cfg);
  want("aspect 13.545", {0, 0, 298, 22}, RejectReason::kAspect, cfg);
  want("aspect 1/13.5", {0, 0, 22, 297}, std::nullopt, cfg);
  want("aspect 1/13.545", {0, 0, 22, 298}, RejectReason::kAspect, cfg);
  want("coverage 15%", {0, 0, 300, 500}, std::nullopt, cfg);
  want("coverage 15.05%", {0, 0, 301, 500}, RejectReason::kScreenCoverage, cfg);

  FilterConfig exact = cfg;
  exact.min_area = 5999;
  want("area exactly at a 5999 minimum", {0, 0, 7, 857}, std::nullopt, [&] {
    FilterConfig c = exact;
    c.max_aspect = 1000;
    return c;
  }());

  UiElement root;
  root.bbox = {0, 0, screen.width, screen.height};
  UiElement leaf;
  leaf.bbox = {100, 100, 200, 200};
  leaf.resource_id = "row";
  leaf.text = "item";
  root.children.push_back(leaf);
  std::unordered_set<std::uint64_t> seen{element_signature(leaf)};
  PipelineRng rng(2024);
  const int trials = 10000;
  int kept = 0;
  for (int i = 0; i < trials; ++i) {
    kept += static_cast<int>(filter_elements(root, screen, shot, cfg, seen, rng).size());
  }
  const double p = cfg.seen_keep_prob;
  const double sigma = std::sqrt(trials * p * (1 - p));
  const double dev = std::fabs(kept - trials * p);
  if (dev > 3 * sigma) {
    o.fail("kept " + std::to_string(kept) + " of " + std::to_string(trials) + ", 3 sigma is " +
           fmt(3 * sigma));
  }
  if (o.pass) {
    o.detail = "boundaries hold; repeated kept " + std::to_string(kept) + "/" +
               std::to_string(trials) + " (|dev| " + fmt(dev) + " <= " + fmt(3 * sigma) + ")";
  }
  return o;
}

Outcome gr2nav_self_consistency() {
  Outcome o;
  std::mt19937_64 rng(19);
  const int n = 10000;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<int> x(0, 1079);
    std::uniform_int_distribution<int> y(0, 2399);
    int x0 = x(rng), x1 = x(rng), y0 = y(rng), y1 = y(rng);
    if (x0 == x1) ++x1;
    if (y0 == y1) ++y1;
    GroundingSample g;
    g.id = "g" + std::to_string(i);
    g.instruction = "tap the element";
    g.screenshot = "s.png";
    g.target = {std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)};
    const Episode e = gr2nav(g);
    const std::vector<GoldChoice> source = {ClickTarget{g.target}};
    if (e.steps.size() == 1 && match_action(e.steps[0].primary_action, source) &&
        match_action(e.steps[0].primary_action, e.steps[0].gold_choices)) {
      ++hits;
    } else if (o.pass) {
      o.fail("bbox " + gold_choice_to_json(source[0]).dump() + " missed");
    }
  }
  if (o.pass) o.detail = std::to_string(hits) + "/" + std::to_string(n) + " self-matched";
  return o;
}

Outcome efficiency_direction() {
  Outcome o;
  TempDir dir;
  testing::write_synthetic_dataset(dir.path(), 1, 10, 303);
  const Dataset ds = load_dataset(dir.path(), LoadOptions{true});

  testing::MockChatOptions opts;
  opts.respond = [](const Json&) { return make_triplet_text("c", "t", Wait{1}); };
  // The mock reports usage the way a server would: its own count of the text
  // it received plus a fixed cost per attached 448x448 image.
  opts.usage_for = [](const Json& request) {
    std::string text;
    std::int64_t images = 0;
    for (const auto& m : request["messages"]) {
      if (m["content"].is_string()) {
        text += m["content"].get<std::string>();
        continue;
      }
      for (const auto& part : m["content"]) {
        if (part["type"] == "image_url") {
          ++images;
        } else {
          text += part.value("text", "");
        }
      }
    }
    const std::int64_t vision = images * 256;
    const std::int64_t prompt = static_cast<std::int64_t>(text.size() / 4) + vision;
    return Json{{"prompt_tokens", prompt},
                {"completion_tokens", 10},
                {"prompt_tokens_details", {{"image_tokens", vision}}}};
  };
  testing::MockChatServer server(opts);
  HttpBackendConfig http;
  http.endpoint = server.endpoint();
  auto mean_itc = [&](HistoryConfig h) {
    EvalOptions eo;
    eo.history = h;
    const auto results = evaluate_dataset(
        ds, [&](const Episode&) { return std::make_unique<HttpBackend>(http); }, eo, 1);
    return aggregate(results).efficiency.mean_itc;
  };
  std::vector<double> itc;
  std::string line = "ITC";
  for (int n : {0, 1, 2, 5}) {
    itc.push_back(mean_itc(n == 0 ? HistoryConfig::none() : HistoryConfig::raw_history(n)));
    line += " N=" + std::to_string(n) + ":" + fmt(itc.back());
  }
  for (std::size_t i = 1; i < itc.size(); ++i) {
    if (!(itc[i] > itc[i - 1])) o.fail("ITC not increasing: " + line);
  }
  const double sc = mean_itc(HistoryConfig::semantic_context(1));
  line += " SC(1):" + fmt(sc);
  if (!(sc > itc[0])) o.fail("ITC(SC,1) <= ITC(0): " + line);

  testing::MockChatOptions delayed;
  delayed.pre_delay = std::chrono::milliseconds(50);
  delayed.tokens = 5;
  delayed.respond = opts.respond;
  server.set_options(delayed);
  HttpBackend backend(http);
  AgentTurnInput in;
  in.instruction = "open the settings";
  write_png(dir / "probe.png", testing::noise_image(56, 56, 1));
  in.current_screenshot = ImageRef{dir / "probe.png", std::nullopt};
  const PromptBundle bundle = build_prompt(in, HistoryConfig::none());
  double lo = 1e9;
  double hi = 0;
  for (int run = 0; run < 20; ++run) {
    const double ttft = backend.complete(bundle).timing.ttft;
    lo = std::min(lo, ttft);
    hi = std::max(hi, ttft);
    if (std::fabs(ttft - 0.050) > 0.020) {
      o.fail("run " + std::to_string(run) + " TTFT " + fmt(ttft * 1000) + " ms");
    }
  }
  if (o.pass) {
    o.detail = line + "; TTFT " + fmt(lo * 1000) + ".." + fmt(hi * 1000) + " ms over 20 runs";
  }
  return o;
}

// Levenshtein distance over code points, independent of the library's.
std::size_t edit_distance(const std::string& a, const std::string& b) {
  auto decode = [](const std::string& s) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < s.size();) {
      const auto c = static_cast<unsigned char>(s[i]);
      const std::size_t len = c < 0x80 ? 1 : c < 0xE0 ? 2 : c < 0xF0 ? 3 : 4;
      std::uint32_t cp = len == 1 ? c : c & (0x3F >> (len - 1));
      for (std::size_t k = 1; k < len && i + k < s.size(); ++k) {
        cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
      }
      out.push_back(cp);
      i += len;
    }
    return out;
  };
  const auto x = decode(a);
  const auto y = decode(b);
  std::vector<std::vector<std::size_t>> d(x.size() + 1, std::vector<std::size_t>(y.size() + 1));
  for (std::size_t i = 0; i <= x.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= y.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= x.size(); ++i) {
    for (std::size_t j = 1; j <= y.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1,
                          d[i - 1][j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1)});
    }
  }
  return d[x.size()][y.size()];
}

bool same_step(const StepRecord& a, const StepRecord& b) {
  return step_to_json(a) == step_to_json(b);
}

Outcome truncation_and_dedup() {
  Outcome o;
  std::mt19937_64 rng(29);
  int truncations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    AnnotatedEpisode a;
    a.header.id = "t" + std::to_string(trial);
    a.header.instruction = "do it";
    const int n = std::uniform_int_distribution<int>(1, 12)(rng);
    for (int t = 1; t <= n; ++t) {
      AnnotatedStep s;
      s.step = testing::random_step(rng, t, "s" + std::to_string(t) + ".png", {1080, 2400});
      s.correct = std::uniform_int_distribution<int>(0, 3)(rng) != 0;
      if (!s.correct && std::uniform_int_distribution<int>(0, 1)(rng) == 0) {
        const Action fix = testing::random_action(rng);
        std::optional<BBox> box;
        if (const auto* c = std::get_if<Click>(&fix)) {
          box = BBox{std::max(0, c->coordinate.x - 5), std::max(0, c->coordinate.y - 5),
                     c->coordinate.x + 5, c->coordinate.y + 5};
        }
        s.correction = Correction{fix, box};
      }
      a.steps.push_back(s);
    }
    std::size_t first_bad = a.steps.size();
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
      if (!a.steps[i].correct) {
        first_bad = i;
        break;
      }
    }
    const bool corrected = first_bad < a.steps.size() && a.steps[first_bad].correction;
    const std::size_t expected_len = first_bad + (corrected ? 1 : 0);
    Episode out;
    try {
      out = truncate_after_first_error(a);
    } catch (const EmptyResult&) {
      if (expected_len != 0) o.fail("trial " + std::to_string(trial) + ": unexpected EmptyResult");
      continue;
    }
    ++truncations;
    if (out.steps.size() != expected_len) {
      o.fail("trial " + std::to_string(trial) + ": length " + std::to_string(out.steps.size()));
      continue;
    }
    for (std::size_t i = 0; i < first_bad && i < out.steps.size(); ++i) {
      if (!same_step(out.steps[i], a.steps[i].step)) o.fail("prefix differs");
    }
    if (corrected) {
      const auto& last = out.steps.back();
      const auto& fix = *a.steps[first_bad].correction;
      if (!(last.primary_action == fix.action) ||
          last.gold_choices != std::vector<GoldChoice>{choice_for_action(fix.action, fix.bbox)} ||
          last.screenshot != a.steps[first_bad].step.screenshot) {
        o.fail("correction step differs in trial " + std::to_string(trial));
      }
    }
    try {
      validate_episode(out);
    } catch (const std::exception& e) {
      o.fail(std::string("truncated episode invalid: ") + e.what());
    }
  }

  const std::vector<std::string> words = {"open", "close", "the", "app", "settings", "wifi",
                                          "\xE8\xAE\xBE\xE7\xBD\xAE", "now", "send", "mail"};
  std::size_t kept_total = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> in;
    const int n = std::uniform_int_distribution<int>(0, 20)(rng);
    for (int i = 0; i < n; ++i) {
      std::string s;
      const int k = std::uniform_int_distribution<int>(1, 5)(rng);
      for (int w = 0; w < k; ++w) {
        if (w) s += ' ';
        s += words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)];
      }
      in.push_back(s);
    }
    const auto kept = dedup_instructions(in, 6);
    kept_total += kept.size();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (edit_distance(in[kept[i]], in[kept[j]]) < 6) {
          o.fail("kept \"" + in[kept[i]] + "\" and \"" + in[kept[j]] + "\"");
        }
      }
    }
  }
  if (o.pass) {
    o.detail = std::to_string(truncations) + " truncations checked; 1000 dedup sets, " +
               std::to_string(kept_total) + " kept instructions pairwise >= 6";
  }
  return o;
}

// ---------------------------------------------------------------------------

struct ServeRequest {
  std::string episode;
  std::string path;
  Json body;
};

int port_of(const std::string& line) { return std::stoi(line.substr(line.rfind(':') + 1)); }

Outcome annotation_durability() {
  Outcome o;
  TempDir src, data, out;
  const int n_episodes = 6;
  std::vector<std::string> ids;
  {
    std::ofstream raw(src / "raw.jsonl");
    for (int i = 0; i < n_episodes; ++i) {
      RawEpisode e;
      e.id = "d" + std::to_string(i);
      e.app = i % 2 ? "mail" : "clock";
      e.instruction = "finish task " + std::to_string(i);
      const std::vector<Action> actions = {Click{{30, 40}}, Type{"hello"}, Terminate{}};
      for (int k = 1; k <= 3; ++k) {
        const std::string name = e.id + "_" + std::to_string(k) + ".png";
        write_png(src / name, testing::noise_image(300, 600, static_cast<std::uint64_t>(i * 10 + k)));
        e.steps.push_back({name, actions[k - 1], "ctx " + std::to_string(k), "why"});
      }
      raw << raw_episode_to_json(e).dump() << "\n";
      ids.push_back(e.id);
    }
  }
  std::vector<ServeRequest> batch;
  for (int i = 0; i < n_episodes; ++i) {
    const std::string base = "/api/episodes/" + ids[i];
    batch.push_back({ids[i], base + "/verdicts",
                     {{"step", 1}, {"judgment", "correct"}, {"bbox", {0, 0, 100, 100}},
                      {"annotator", "ann"}}});
    if (i % 3 == 2) {
      batch.push_back({ids[i], base + "/steps/1/alternatives",
                       {{"annotator", "ann"}, {"choice", {{"type", "swipe"}, {"direction", "up"}}}}});
    }
    if (i % 3 == 1) {
      batch.push_back({ids[i], base + "/verdicts",
                       {{"step", 2}, {"judgment", "incorrect"},
                        {"corrected_action", serialize_action(Type{"hello world"})},
                        {"annotator", "ann"}}});
      continue;
    }
    batch.push_back({ids[i], base + "/verdicts",
                     {{"step", 2}, {"judgment", "correct"}, {"annotator", "ann"}}});
    batch.push_back({ids[i], base + "/verdicts",
                     {{"step", 3}, {"judgment", "correct"}, {"annotator", "ann"}}});
  }

  const std::vector<std::string> args = {"serve", "--data-dir", data.path().string(), "--import",
                                         (src / "raw.jsonl").string()};
  auto claim = [](httplib::Client& c, const std::string& id) {
    c.Post("/api/episodes/" + id + "/claim", R"({"annotator":"ann"})", "application/json");
  };
  auto send = [&](httplib::Client& c, const ServeRequest& r) {
    auto res = c.Post(r.path, r.body.dump(), "application/json");
    if (!res || res->status != 200) {
      o.fail("request " + r.path + " failed: " + (res ? res->body : std::string("no response")));
    }
  };
  auto state_of = [&](httplib::Client& c) {
    Json all = Json::object();
    for (const auto& id : ids) {
      auto res = c.Get("/api/episodes/" + id);
      all[id] = res ? Json::parse(res->body) : Json();
    }
    auto flags = c.Get("/api/flags");
    all["flags"] = flags ? Json::parse(flags->body) : Json();
    return all;
  };

  const std::size_t kill_after = batch.size() / 2;
  Json before;
  try {
    testing::ChildProcess first(SECAGENT_CLI_PATH, args);
    httplib::Client c("127.0.0.1", port_of(first.wait_for_line("listening on",
                                                               std::chrono::seconds(30))));
    std::set<std::string> claimed;
    for (std::size_t i = 0; i < kill_after; ++i) {
      if (claimed.insert(batch[i].episode).second) claim(c, batch[i].episode);
      send(c, batch[i]);
    }
    before = state_of(c);
    first.signal(SIGKILL);
    if (first.wait() != 128 + SIGKILL) o.fail("server did not die from SIGKILL");
  } catch (const std::exception& e) {
    o.fail(std::string("first server: ") + e.what());
    return o;
  }

  try {
    testing::ChildProcess second(SECAGENT_CLI_PATH, args);
    httplib::Client c("127.0.0.1", port_of(second.wait_for_line("listening on",
                                                                std::chrono::seconds(30))));
    if (state_of(c) != before) o.fail("state after restart differs from state before the kill");
    std::set<std::string> claimed;
    for (std::size_t i = kill_after; i < batch.size(); ++i) {
      if (claimed.insert(batch[i].episode).second) claim(c, batch[i].episode);
      send(c, batch[i]);
    }
    second.signal(SIGTERM);
    if (second.wait() != 0) o.fail("graceful shutdown exit code nonzero");
  } catch (const std::exception& e) {
    o.fail(std::string("second server: ") + e.what());
    return o;
  }

  const auto exported = testing::run_process(
      SECAGENT_CLI_PATH, {"annotate", "export", "--data-dir", data.path().string(), "--out",
                          out.path().string()});
  if (exported.exit_code != 0) {
    o.fail("export exit " + std::to_string(exported.exit_code) + ": " + exported.err);
    return o;
  }
  Dataset ds;
  try {
    ds = load_dataset(out.path(), LoadOptions{true});
  } catch (const std::exception& e) {
    o.fail(std::string("exported dataset rejected: ") + e.what());
    return o;
  }
  if (ds.episodes.size() != static_cast<std::size_t>(n_episodes)) {
    o.fail("exported " + std::to_string(ds.episodes.size()) + " episodes");
  }
  const EvalReport r = aggregate(evaluate_dataset(ds, replay_factory(), EvalOptions{}, 1));
  if (r.step_accuracy.value() != 1.0 || r.task_accuracy.value() != 1.0) {
    o.fail("replay SA=" + fmt(r.step_accuracy.value()) + " TA=" + fmt(r.task_accuracy.value()));
  }
  if (o.pass) {
    o.detail = "killed after " + std::to_string(kill_after) + "/" + std::to_string(batch.size()) +
               " requests; state identical; export of " + std::to_string(ds.episodes.size()) +
               " episodes replays at SA=TA=1";
  }
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"replay oracle", replay_oracle},
      {"corruption exactness", corruption_exactness},
      {"multi-choice semantics", multi_choice_matrix},
      {"action grammar", action_grammar},
      {"reward lattice", reward_lattice},
      {"GRPO math", grpo_math},
      {"filter thresholds", filter_thresholds},
      {"Gr2Nav self-consistency", gr2nav_self_consistency},
      {"efficiency direction", efficiency_direction},
      {"truncation and dedup", truncation_and_dedup},
      {"annotation durability", annotation_durability},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed,
              criteria.size());
  return failed == 0 ? 0 : 1;
}
