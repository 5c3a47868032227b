#include "secagent/eval.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <mutex>
#include <sstream>
#include <thread>

namespace secagent {

namespace {

const char* const kActionColumns[] = {"click", "type", "swipe", "terminate"};

Json fraction_json(const Fraction& f) {
  Json j = Json::object();
  j["value"] = f.value();
  j["numerator"] = f.numerator;
  j["denominator"] = f.denominator;
  return j;
}

std::string percent(const Fraction& f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%6.2f%%", 100.0 * f.value());
  return buf;
}

}  // namespace

std::string_view to_string(ContextSource s) {
  return s == ContextSource::kSelf ? "self" : "annotated";
}

std::optional<ContextSource> context_source_from_string(std::string_view s) {
  if (s == "self") return ContextSource::kSelf;
  if (s == "annotated") return ContextSource::kAnnotated;
  return std::nullopt;
}

bool EpisodeResult::all_correct() const {
  for (const auto& s : steps) {
    if (!s.correct) return false;
  }
  return !steps.empty();
}

EpisodeResult evaluate_episode(const Episode& episode, const Dataset& dataset,
                               ModelBackend& backend, const EvalOptions& opts) {
  validate_history_config(opts.history);
  const std::string where = "episode " + episode.id;
  if (opts.check_images) {
    for (const auto& s : episode.steps) {
      if (!std::filesystem::exists(dataset.resolve(s.screenshot))) {
        throw DatasetError(where + " step " + std::to_string(s.index),
                           "missing screenshot " + s.screenshot);
      }
    }
  }

  EpisodeResult result;
  result.episode_id = episode.id;
  result.app = episode.app;
  std::string carried_context(kStartOfTaskContext);
  const int window = opts.history.mode == HistoryMode::kNone ? 0 : opts.history.window;

  for (std::size_t k = 0; k < episode.steps.size(); ++k) {
    const StepRecord& step = episode.steps[k];
    AgentTurnInput input;
    input.step = static_cast<int>(k) + 1;
    input.instruction = episode.instruction;
    input.current_screenshot = ImageRef{dataset.resolve(step.screenshot), std::nullopt};
    for (int back = 1; back <= window && static_cast<int>(k) - back >= 0; ++back) {
      const StepRecord& prev = episode.steps[k - back];
      input.history.push_back({ImageRef{dataset.resolve(prev.screenshot), std::nullopt},
                               prev.primary_action});
    }
    if (k == 0) {
      input.prev_context = std::string(kStartOfTaskContext);
    } else if (opts.context_source == ContextSource::kAnnotated) {
      const auto& annotated = episode.steps[k - 1].annotated_context;
      if (!annotated) {
        throw DatasetError(where + " step " + std::to_string(k),
                           "annotated_context required by context source 'annotated'");
      }
      input.prev_context = *annotated;
    } else {
      input.prev_context = carried_context;
    }

    StepVerdict v;
    v.index = step.index;
    v.gold_kind = kind_of(step.primary_action);
    try {
      TurnResult r = run_turn(backend, input, opts.history, opts.max_retries,
                              *opts.prompt_template);
      v.correct = match_action(r.output.action, step.gold_choices, opts.match);
      v.predicted = r.output.action;
      v.telemetry = std::move(r.telemetry);
      carried_context = std::move(r.output.semantic_context);
    } catch (const StepFailure& f) {
      v.correct = false;
      v.parse_failure = true;
      v.telemetry = f.telemetry();
    }
    result.steps.push_back(std::move(v));
  }
  return result;
}

EvalReport aggregate(const std::vector<EpisodeResult>& results) {
  if (results.empty()) throw EmptyDatasetError();
  EvalReport r;
  for (const char* col : kActionColumns) r.per_action[col] = {};
  double itc_sum = 0, ttft_sum = 0, tps_sum = 0, completion_sum = 0;
  for (const auto& ep : results) {
    auto& app = r.per_app[ep.app];
    const bool ok = ep.all_correct();
    r.task_accuracy.denominator += 1;
    r.task_accuracy.numerator += ok ? 1 : 0;
    app.episodes.denominator += 1;
    app.episodes.numerator += ok ? 1 : 0;
    for (const auto& s : ep.steps) {
      r.step_accuracy.denominator += 1;
      r.step_accuracy.numerator += s.correct ? 1 : 0;
      app.steps.denominator += 1;
      app.steps.numerator += s.correct ? 1 : 0;
      r.parse_failures.denominator += 1;
      r.parse_failures.numerator += s.parse_failure ? 1 : 0;
      const auto name = std::string(action_name(s.gold_kind));
      if (auto it = r.per_action.find(name); it != r.per_action.end()) {
        it->second.denominator += 1;
        it->second.numerator += s.correct ? 1 : 0;
      }
      for (const auto& call : s.telemetry.calls) {
        r.efficiency.calls += 1;
        itc_sum += static_cast<double>(call.usage.itc());
        completion_sum += static_cast<double>(call.usage.completion_tokens);
        ttft_sum += call.timing.ttft;
        tps_sum += call.timing.tps;
      }
    }
  }
  if (r.efficiency.calls > 0) {
    const auto n = static_cast<double>(r.efficiency.calls);
    r.efficiency.mean_itc = itc_sum / n;
    r.efficiency.mean_completion_tokens = completion_sum / n;
    r.efficiency.mean_ttft = ttft_sum / n;
    r.efficiency.mean_tps = tps_sum / n;
  }
  r.episodes = results;
  return r;
}

std::vector<EpisodeResult> evaluate_dataset(const Dataset& dataset, const BackendFactory& factory,
                                            const EvalOptions& opts, int parallelism) {
  const std::size_t n = dataset.episodes.size();
  std::vector<EpisodeResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        auto backend = factory(dataset.episodes[i]);
        results[i] = evaluate_episode(dataset.episodes[i], dataset, *backend, opts);
      } catch (...) {
        errors[i] = std::current_exception();
        failed.store(true);
      }
    }
  };
  const int threads = std::max(1, std::min<int>(parallelism, static_cast<int>(n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

Json report_to_json(const EvalReport& r, bool include_timing) {
  Json j = Json::object();
  j["step_accuracy"] = fraction_json(r.step_accuracy);
  j["task_accuracy"] = fraction_json(r.task_accuracy);
  Json per_action = Json::object();
  for (const char* col : kActionColumns) per_action[col] = fraction_json(r.per_action.at(col));
  j["per_action"] = std::move(per_action);
  j["parse_failures"] = fraction_json(r.parse_failures);
  Json eff = Json::object();
  eff["calls"] = r.efficiency.calls;
  eff["mean_itc"] = r.efficiency.mean_itc;
  eff["mean_completion_tokens"] = r.efficiency.mean_completion_tokens;
  if (include_timing) {
    eff["mean_ttft_seconds"] = r.efficiency.mean_ttft;
    eff["mean_tps"] = r.efficiency.mean_tps;
  }
  j["efficiency"] = std::move(eff);
  Json apps = Json::object();
  for (const auto& [name, g] : r.per_app) {
    apps[name] = {{"step_accuracy", fraction_json(g.steps)},
                  {"task_accuracy", fraction_json(g.episodes)}};
  }
  j["per_app"] = std::move(apps);
  Json eps = Json::array();
  for (const auto& e : r.episodes) {
    Json verdicts = Json::array();
    Json failures = Json::array();
    for (const auto& s : e.steps) {
      verdicts.push_back(s.correct);
      if (s.parse_failure) failures.push_back(s.index);
    }
    Json ej = Json::object();
    ej["id"] = e.episode_id;
    ej["app"] = e.app;
    ej["all_correct"] = e.all_correct();
    ej["verdicts"] = std::move(verdicts);
    ej["parse_failure_steps"] = std::move(failures);
    eps.push_back(std::move(ej));
  }
  j["episodes"] = std::move(eps);
  return j;
}

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  auto row = [&](const std::string& name, const Fraction& f) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-18s %s  (%lld/%lld)\n", name.c_str(), percent(f).c_str(),
                  static_cast<long long>(f.numerator), static_cast<long long>(f.denominator));
    os << buf;
  };
  row("SA", r.step_accuracy);
  row("TA", r.task_accuracy);
  for (const char* col : kActionColumns) row(std::string("  ") + col, r.per_action.at(col));
  row("parse failures", r.parse_failures);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-18s %.1f\n%-18s %.4f s\n%-18s %.1f\n", "mean ITC",
                r.efficiency.mean_itc, "mean TTFT", r.efficiency.mean_ttft, "mean TPS",
                r.efficiency.mean_tps);
  os << buf;
  for (const auto& [name, g] : r.per_app) row("app " + name, g.steps);
  return os.str();
}

}  // namespace secagent
