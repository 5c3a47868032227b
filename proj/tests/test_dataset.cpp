#include <doctest.h>

#include <fstream>

#include "secagent/dataset.hpp"
#include "test_support.hpp"

using namespace secagent;
using testing::TempDir;

namespace {

Episode small_episode() {
  Episode e;
  e.id = "e1";
  e.app = "clock";
  e.instruction = "set an alarm for seven";
  e.source = "human";
  StepRecord s1;
  s1.index = 1;
  s1.screenshot = "a.png";
  s1.primary_action = Click{{150, 120}};
  s1.gold_choices = {ClickTarget{BBox{100, 100, 200, 150}}, SwipeTarget{SwipeDirection::kLeft}};
  s1.annotated_context = "opened clock";
  StepRecord s2;
  s2.index = 2;
  s2.screenshot = "b.png";
  s2.primary_action = Terminate{TerminateStatus::kSuccess};
  s2.gold_choices = {TerminateTarget{TerminateStatus::kSuccess}};
  e.steps = {s1, s2};
  return e;
}

void write_lines(const std::filesystem::path& dir, const std::vector<std::string>& lines) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "manifest.json")
      << R"({"format":"secagent-episodes","version":1,"episodes":"episodes.jsonl","image_root":"."})";
  std::ofstream out(dir / "episodes.jsonl");
  for (const auto& l : lines) out << l << "\n";
}

std::string load_error(const std::filesystem::path& dir, LoadOptions opts = {}) {
  try {
    load_dataset(dir, opts);
  } catch (const DatasetError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("gold choice JSON shapes") {
  CHECK(gold_choice_to_json(ClickTarget{BBox{1, 2, 3, 4}}).dump() ==
        R"({"type":"click","bbox":[1,2,3,4]})");
  CHECK(gold_choice_to_json(SwipeTarget{SwipeDirection::kLeft}).dump() ==
        R"({"type":"swipe","direction":"left"})");
  CHECK(gold_choice_to_json(TypeTarget{"hi"}).dump() == R"({"type":"type","text":"hi"})");
  CHECK(gold_choice_to_json(TerminateTarget{TerminateStatus::kFailure}).dump() ==
        R"({"type":"terminate","status":"failure"})");
  const GoldChoice exact = ExactTarget{SystemButton{SystemButtonKind::kBack}};
  CHECK(gold_choice_from_json(gold_choice_to_json(exact)) == exact);
  CHECK_THROWS(gold_choice_from_json(Json::parse(R"({"type":"click","bbox":[5,5,1,1]})")));
  CHECK_THROWS(gold_choice_from_json(Json::parse(R"({"type":"swipe","direction":"north"})")));
}

TEST_CASE("choice_for_action") {
  CHECK(choice_for_action(Click{{5, 5}}, BBox{0, 0, 10, 10}) ==
        GoldChoice{ClickTarget{BBox{0, 0, 10, 10}}});
  CHECK_THROWS(choice_for_action(Click{{5, 5}}, std::nullopt));
  CHECK(choice_for_action(Swipe{{0, 100}, {0, 0}}, std::nullopt) ==
        GoldChoice{SwipeTarget{SwipeDirection::kUp}});
  CHECK(choice_for_action(Wait{2}, std::nullopt) == GoldChoice{ExactTarget{Wait{2}}});
}

TEST_CASE("write then load preserves episodes") {
  TempDir tmp;
  const Episode e = small_episode();
  write_dataset(tmp.path(), {e});
  const Dataset ds = load_dataset(tmp.path());
  REQUIRE(ds.episodes.size() == 1);
  CHECK(episode_to_json(ds.episodes[0]) == episode_to_json(e));
  CHECK(ds.resolve("a.png") == (tmp.path() / "a.png").lexically_normal());
  // Loading through the manifest path works as well.
  CHECK(load_dataset(tmp.path() / "manifest.json").episodes.size() == 1);
}

TEST_CASE("invariant violations name the line") {
  TempDir tmp;
  Json good = episode_to_json(small_episode());
  SUBCASE("bad JSON") {
    write_lines(tmp.path(), {good.dump(), "{not json"});
    CHECK(load_error(tmp.path()).rfind("episodes.jsonl:2", 0) == 0);
  }
  SUBCASE("primary action outside its own choices") {
    Json bad = good;
    bad["steps"][0]["primary_action"]["arguments"]["coordinate"] = {500, 500};
    write_lines(tmp.path(), {bad.dump()});
    const auto err = load_error(tmp.path());
    CHECK(err.find("episodes.jsonl:1") == 0);
    CHECK(err.find("matches none") != std::string::npos);
  }
  SUBCASE("non-contiguous indices") {
    Json bad = good;
    bad["steps"][1]["index"] = 3;
    write_lines(tmp.path(), {bad.dump()});
    CHECK(load_error(tmp.path()).find("contiguous") != std::string::npos);
  }
  SUBCASE("duplicate choices") {
    Json bad = good;
    bad["steps"][1]["gold_choices"].push_back(bad["steps"][1]["gold_choices"][0]);
    write_lines(tmp.path(), {bad.dump()});
    CHECK(load_error(tmp.path()).find("duplicate gold choice") != std::string::npos);
  }
  SUBCASE("empty choices") {
    Json bad = good;
    bad["steps"][1]["gold_choices"] = Json::array();
    write_lines(tmp.path(), {bad.dump()});
    CHECK(load_error(tmp.path()).find("no gold choices") != std::string::npos);
  }
  SUBCASE("duplicate ids") {
    write_lines(tmp.path(), {good.dump(), good.dump()});
    CHECK(load_error(tmp.path()).find("episodes.jsonl:2") == 0);
  }
  SUBCASE("empty dataset") {
    write_lines(tmp.path(), {});
    CHECK(load_error(tmp.path()).find("no episodes") != std::string::npos);
  }
  SUBCASE("missing images when checked") {
    write_lines(tmp.path(), {good.dump()});
    CHECK(load_error(tmp.path()).empty());
    CHECK(load_error(tmp.path(), LoadOptions{true}).find("missing screenshot") !=
          std::string::npos);
  }
}

TEST_CASE("agent-driven episodes are capped at 30 steps") {
  Episode e;
  e.id = "long";
  e.instruction = "wander around";
  for (int t = 1; t <= 31; ++t) {
    StepRecord s;
    s.index = t;
    s.screenshot = "x.png";
    s.primary_action = Wait{1};
    s.gold_choices = {ExactTarget{Wait{1}}};
    e.steps.push_back(s);
  }
  e.source = "human";
  CHECK_NOTHROW(validate_episode(e));
  e.source = "agent";
  CHECK_THROWS_AS(validate_episode(e), DatasetError);
  e.steps.pop_back();
  CHECK_NOTHROW(validate_episode(e));
}
