#include <doctest.h>

#include <httplib.h>

#include <csignal>
#include <fstream>

#include "secagent/annotation.hpp"
#include "secagent/model_client.hpp"
#include "secagent/pipeline.hpp"
#include "test_support.hpp"

using namespace secagent;
using testing::ProcessResult;
using testing::TempDir;

namespace {

ProcessResult cli(const std::vector<std::string>& args) {
  return testing::run_process(SECAGENT_CLI_PATH, args);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<Json> read_lines(const std::filesystem::path& p) {
  std::vector<Json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(Json::parse(line));
  }
  return out;
}

void write_raw_episodes(const TempDir& dir, int n) {
  std::ofstream out(dir / "raw.jsonl");
  for (int i = 0; i < n; ++i) {
    RawEpisode e;
    e.id = "r" + std::to_string(i);
    e.instruction = "turn on airplane mode";
    for (int k = 1; k <= 2; ++k) {
      const std::string name = "r" + std::to_string(i) + "_" + std::to_string(k) + ".png";
      write_png(dir / name, testing::noise_image(300, 600, static_cast<std::uint64_t>(i * 10 + k)));
      e.steps.push_back({name, k == 1 ? Action{Click{{30, 40}}} : Action{Terminate{}},
                         "ctx", "why"});
    }
    out << raw_episode_to_json(e).dump() << "\n";
  }
}

}  // namespace

TEST_CASE("top-level usage") {
  CHECK(cli({"--version"}).exit_code == 0);
  CHECK(cli({"--help"}).exit_code == 0);
  CHECK(cli({}).exit_code == 4);
  CHECK(cli({"evaluate"}).exit_code == 4);
  CHECK(cli({"frobnicate"}).exit_code == 4);
}

TEST_CASE("evaluate with the replay backend") {
  TempDir data, out1, out2;
  testing::write_synthetic_dataset(data.path(), 4, 3, 5);
  const auto r1 = cli({"evaluate", "--dataset", data.path().string(), "--backend", "replay",
                       "--out", out1.path().string()});
  INFO(r1.err);
  REQUIRE(r1.exit_code == 0);
  CHECK(r1.out.find("SA") != std::string::npos);
  const Json report = Json::parse(slurp(out1 / "report.json"));
  CHECK(report["step_accuracy"]["value"] == 1.0);
  CHECK(report["task_accuracy"]["value"] == 1.0);
  CHECK(report["config"]["mode"] == "semantic_context");
  CHECK(std::filesystem::exists(out1 / "report.telemetry.json"));
  REQUIRE(cli({"evaluate", "--dataset", data.path().string(), "--backend", "replay", "--out",
               out2.path().string(), "--parallelism", "3"})
              .exit_code == 0);
  CHECK(slurp(out1 / "report.json") == slurp(out2 / "report.json"));
}

TEST_CASE("evaluate exit codes") {
  TempDir data, out;
  testing::write_synthetic_dataset(data.path(), 2, 2, 6);
  const std::string ds = data.path().string();
  SUBCASE("bad mode is a config error") {
    CHECK(cli({"evaluate", "--dataset", ds, "--backend", "replay", "--mode", "telepathy", "--out",
               out.path().string()})
              .exit_code == 4);
    CHECK(cli({"evaluate", "--dataset", ds, "--backend", "replay", "--mode", "semantic_context",
               "--n", "3", "--out", out.path().string()})
              .exit_code == 4);
    CHECK(cli({"evaluate", "--dataset", ds, "--backend", "scripted", "--out",
               out.path().string()})
              .exit_code == 4);
  }
  SUBCASE("corrupt dataset names the line") {
    std::ofstream(data / "episodes.jsonl", std::ios::app) << "{\"id\": 3\n";
    const auto r = cli({"evaluate", "--dataset", ds, "--backend", "replay", "--out",
                        out.path().string()});
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("episodes.jsonl:3") != std::string::npos);
  }
  SUBCASE("missing screenshot") {
    std::filesystem::remove_all(data / "images");
    CHECK(cli({"evaluate", "--dataset", ds, "--backend", "replay", "--out", out.path().string()})
              .exit_code == 2);
  }
  SUBCASE("unreachable endpoint is a backend error") {
    const auto r = cli({"evaluate", "--dataset", ds, "--backend", "http", "--endpoint",
                        "http://127.0.0.1:1/v1/chat/completions", "--timeout", "1", "--out",
                        out.path().string()});
    CHECK(r.exit_code == 3);
  }
}

TEST_CASE("evaluate with scripted answers and an HTTP endpoint") {
  TempDir data, out;
  const auto eps = testing::write_synthetic_dataset(data.path(), 1, 2, 8);
  SUBCASE("scripted") {
    Json script = Json::object();
    script["ep0"] = {make_triplet_text("a", "b", eps[0].steps[0].primary_action),
                     make_triplet_text("a", "b", testing::guaranteed_wrong(eps[0].steps[1]))};
    std::ofstream(data / "script.json") << script.dump();
    const auto r = cli({"evaluate", "--dataset", data.path().string(), "--backend", "scripted",
                        "--script", (data / "script.json").string(), "--out",
                        out.path().string()});
    REQUIRE(r.exit_code == 0);
    const Json report = Json::parse(slurp(out / "report.json"));
    CHECK(report["step_accuracy"]["numerator"] == 1);
    CHECK(report["task_accuracy"]["numerator"] == 0);
  }
  SUBCASE("http via environment") {
    testing::MockChatOptions opts;
    opts.respond = [](const Json&) { return make_triplet_text("c", "t", Wait{1}); };
    testing::MockChatServer server(opts);
    ::setenv("SECAGENT_ENDPOINT", server.endpoint().c_str(), 1);
    const auto r = cli({"evaluate", "--dataset", data.path().string(), "--backend", "http",
                        "--mode", "raw_history", "--n", "2", "--out", out.path().string()});
    ::unsetenv("SECAGENT_ENDPOINT");
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    CHECK(server.requests().size() == 2);
    // Step 2 carries the step-1 screenshot and its own.
    CHECK(server.requests()[1]["messages"][1]["content"].size() == 3);
  }
}

TEST_CASE("pipeline commands") {
  TempDir dir;
  SUBCASE("qc then gr2nav") {
    std::ofstream(dir / "g.jsonl")
        << R"({"id":"g1","app":"a","instruction":"tap the blue send button","rationale":"the send button is the blue arrow at the bottom right of the chat","screenshot":"p.png","bbox":[0,0,3,3]})"
        << "\n"
        << R"({"id":"g2","app":"a","instruction":"tap send","rationale":"short","screenshot":"p.png","bbox":[0,0,9,9]})"
        << "\n";
    write_png(dir / "p.png", testing::noise_image(50, 50, 1));
    REQUIRE(cli({"pipeline", "qc", "--input", (dir / "g.jsonl").string(), "--out",
                 (dir / "qc").string()})
                .exit_code == 0);
    const auto kept = read_lines(dir / "qc" / "samples.jsonl");
    REQUIRE(kept.size() == 1);
    const Json qc_manifest = Json::parse(slurp(dir / "qc" / "manifest.json"));
    CHECK(qc_manifest["rejected"]["instruction_too_short"] == 1);
    REQUIRE(cli({"pipeline", "gr2nav", "--input", (dir / "qc" / "samples.jsonl").string(),
                 "--out", (dir / "nav").string()})
                .exit_code == 0);
    const Dataset ds = load_dataset(dir / "nav", LoadOptions{true});
    REQUIRE(ds.episodes.size() == 1);
    CHECK(ds.episodes[0].steps[0].primary_action == Action{Click{{1, 1}}});
  }
  SUBCASE("filter-grounding is reproducible") {
    write_png(dir / "page.png", testing::noise_image(400, 800, 3));
    UiElement root;
    root.bbox = {0, 0, 400, 800};
    for (int i = 0; i < 6; ++i) {
      UiElement c;
      c.bbox = {10, 10 + i * 120, 110, 110 + i * 120};
      c.resource_id = "item";
      c.text = "row";
      root.children.push_back(c);
    }
    UiElement tiny;
    tiny.bbox = {0, 0, 5, 5};
    root.children.push_back(tiny);
    std::ofstream(dir / "pages.jsonl")
        << Json{{"id", "p1"}, {"app", "a"}, {"screenshot", "page.png"},
                {"hierarchy", ui_element_to_json(root)}}
               .dump()
        << "\n";
    for (const char* out : {"f1", "f2"}) {
      REQUIRE(cli({"pipeline", "filter-grounding", "--input", (dir / "pages.jsonl").string(),
                   "--out", (dir / out).string(), "--seed", "9"})
                  .exit_code == 0);
    }
    CHECK(slurp(dir / "f1" / "candidates.jsonl") == slurp(dir / "f2" / "candidates.jsonl"));
    CHECK(slurp(dir / "f1" / "manifest.json") == slurp(dir / "f2" / "manifest.json"));
    const Json m = Json::parse(slurp(dir / "f1" / "manifest.json"));
    CHECK(m["stats"]["leaves"] == 7);
    CHECK(m["stats"]["rejected"]["area"] == 1);
  }
  SUBCASE("truncate") {
    const Json wait = action_to_json(Wait{1});
    auto step = [&](int index, bool correct) {
      return Json{{"index", index}, {"screenshot", "s.png"}, {"primary_action", wait},
                  {"gold_choices", {{{"type", "exact"}, {"action", wait}}}},
                  {"correct", correct}};
    };
    std::ofstream(dir / "a.jsonl")
        << Json{{"id", "a"}, {"instruction", "x"}, {"steps", {step(1, true), step(2, false)}}}.dump()
        << "\n"
        << Json{{"id", "b"}, {"instruction", "y"}, {"steps", {step(1, false)}}}.dump() << "\n";
    const auto r = cli({"pipeline", "truncate", "--input", (dir / "a.jsonl").string(), "--out",
                        (dir / "t").string()});
    INFO(r.err);
    REQUIRE(r.exit_code == 0);
    const Dataset ds = load_dataset(dir / "t");
    REQUIRE(ds.episodes.size() == 1);
    CHECK(ds.episodes[0].steps.size() == 1);
  }
  SUBCASE("dedup") {
    std::ofstream(dir / "i.jsonl") << R"({"instruction":"open the settings"})" << "\n"
                                   << R"({"instruction":"open the setting"})" << "\n"
                                   << R"({"instruction":"close all windows"})" << "\n";
    REQUIRE(cli({"pipeline", "dedup", "--input", (dir / "i.jsonl").string(), "--out",
                 (dir / "d").string()})
                .exit_code == 0);
    const auto kept = read_lines(dir / "d" / "records.jsonl");
    REQUIRE(kept.size() == 2);
    CHECK(kept[1]["instruction"] == "close all windows");
  }
}

TEST_CASE("reward command") {
  TempDir dir;
  const Json gold = Json::array({{{"type", "click"}, {"bbox", {0, 0, 10, 10}}}});
  std::ofstream out(dir / "b.jsonl");
  out << Json{{"group", "q"}, {"output", make_triplet_text("c", "t", Click{{5, 5}})},
              {"gold_choices", gold}}
             .dump()
      << "\n"
      << Json{{"group", "q"}, {"output", "nonsense"}, {"gold_choices", gold}}.dump() << "\n"
      << Json{{"group", "lonely"}, {"output", "nonsense"}, {"gold_choices", gold}}.dump() << "\n";
  out.close();
  const auto r = cli({"reward", "--input", (dir / "b.jsonl").string()});
  REQUIRE(r.exit_code == 0);
  std::vector<Json> rows;
  std::istringstream lines(r.out);
  for (std::string line; std::getline(lines, line);) rows.push_back(Json::parse(line));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0]["reward"] == 1.5);
  CHECK(rows[1]["reward"] == 0.0);
  CHECK(rows[0]["advantage"].get<double>() == doctest::Approx(1.0));
  CHECK(rows[1]["advantage"].get<double>() == doctest::Approx(-1.0));
  CHECK(rows[2]["advantage"].is_null());
  CHECK(r.err.find("GroupTooSmall") != std::string::npos);
}

TEST_CASE("annotate import, export and snapshot") {
  TempDir src, data, out;
  write_raw_episodes(src, 2);
  const std::string dd = data.path().string();
  REQUIRE(cli({"annotate", "import", "--data-dir", dd, "--input", (src / "raw.jsonl").string()})
              .exit_code == 0);
  // Re-importing skips known ids.
  CHECK(cli({"annotate", "import", "--data-dir", dd, "--input", (src / "raw.jsonl").string()})
            .out.find("imported 0") != std::string::npos);
  CHECK(cli({"annotate", "export", "--data-dir", dd, "--out", out.path().string()}).exit_code ==
        2);
  {
    AnnotationStore store(data.path());
    Verdict v;
    v.step = 1;
    v.bbox = BBox{0, 0, 100, 100};
    v.annotator = "a";
    store.submit_verdict("r0", v);
    v.step = 2;
    v.bbox.reset();
    store.submit_verdict("r0", v);
  }
  REQUIRE(cli({"annotate", "export", "--data-dir", dd, "--out", out.path().string()})
              .exit_code == 0);
  CHECK(load_dataset(out.path(), LoadOptions{true}).episodes.size() == 1);
  const auto snap = cli({"annotate", "snapshot", "--data-dir", dd});
  REQUIRE(snap.exit_code == 0);
  CHECK(Json::parse(snap.out).size() == 2);
}

TEST_CASE("serve survives a hard kill") {
  TempDir src, data;
  write_raw_episodes(src, 1);
  const std::vector<std::string> args = {"serve", "--data-dir", data.path().string(), "--import",
                                         (src / "raw.jsonl").string()};
  auto port_of = [](const std::string& line) {
    return std::stoi(line.substr(line.rfind(':') + 1));
  };
  Json before;
  {
    testing::ChildProcess server(SECAGENT_CLI_PATH, args);
    const int port = port_of(server.wait_for_line("listening on", std::chrono::seconds(20)));
    httplib::Client c("127.0.0.1", port);
    REQUIRE(c.Post("/api/episodes/r0/claim", R"({"annotator":"a"})", "application/json")->status ==
            200);
    auto res = c.Post("/api/episodes/r0/verdicts",
                      R"({"step":1,"judgment":"correct","bbox":[0,0,100,100],"annotator":"a"})",
                      "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    before = Json::parse(c.Get("/api/episodes/r0")->body);
    server.signal(SIGKILL);
    CHECK(server.wait() == 128 + SIGKILL);
  }
  testing::ChildProcess again(SECAGENT_CLI_PATH, args);
  const int port = port_of(again.wait_for_line("listening on", std::chrono::seconds(20)));
  httplib::Client c("127.0.0.1", port);
  CHECK(Json::parse(c.Get("/api/episodes/r0")->body) == before);
  again.signal(SIGTERM);
  CHECK(again.wait() == 0);
  CHECK(again.err().find("stopped after 2 events") != std::string::npos);
}
