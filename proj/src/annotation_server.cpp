#include "secagent/annotation_server.hpp"

#include <httplib.h>

#include <stdexcept>

#include "secagent/image.hpp"

namespace secagent {

namespace {

using Kind = AnnotationError::Kind;

int http_status(Kind k) {
  switch (k) {
    case Kind::kUnknownEpisode:
    case Kind::kUnknownStep:
      return 404;
    case Kind::kMissingBBox:
    case Kind::kMissingCorrection:
    case Kind::kBBoxMismatch:
    case Kind::kInvalidVerdict:
      return 400;
    case Kind::kCorruptLog:
      return 500;
    default:
      return 409;
  }
}

void send_json(httplib::Response& res, const Json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind,
                const std::string& message, const std::string& field = "") {
  Json body = {{"error", kind}, {"message", message}};
  if (!field.empty()) body["field"] = field;
  send_json(res, body, status);
}

Json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return Json::object();
  Json j = Json::parse(req.body);
  if (!j.is_object()) throw std::invalid_argument("request body must be a JSON object");
  return j;
}

int parse_step(const std::string& s) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) {
    throw AnnotationError(Kind::kUnknownStep, "step must be an integer, got '" + s + "'");
  }
  return v;
}

bool valid_export_name(const std::string& name) {
  if (name.empty() || name.size() > 64 || name[0] == '.') return false;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_' || c == '.';
    if (!ok) return false;
  }
  return true;
}

}  // namespace

struct AnnotationServer::Impl {
  AnnotationStore& store;
  ServerConfig config;
  httplib::Server http;
  int bound_port = -1;

  Impl(AnnotationStore& s, ServerConfig c) : store(s), config(std::move(c)) { install(); }

  // Runs a handler, mapping domain exceptions to JSON errors.
  template <typename F>
  httplib::Server::Handler wrap(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const AnnotationError& e) {
        send_error(res, http_status(e.kind()), to_string(e.kind()), e.what());
      } catch (const ActionError& e) {
        send_error(res, 400, "InvalidAction", e.what(), e.field());
      } catch (const DatasetError& e) {
        send_error(res, 400, "DatasetError", e.what());
      } catch (const Json::exception& e) {
        send_error(res, 400, "MalformedJson", e.what());
      } catch (const std::invalid_argument& e) {
        send_error(res, 400, "InvalidRequest", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
      }
    };
  }

  void require_lease(const std::string& id, const std::string& annotator) {
    if (annotator.empty()) throw std::invalid_argument("annotator is required");
    if (!store.holds_lease(id, annotator)) {
      throw AnnotationError(Kind::kLeaseConflict,
                            "annotator " + annotator + " does not hold the lease on " + id);
    }
  }

  Json step_payload(const std::string& id, int t, bool review_view) {
    const RawEpisode raw = store.raw_episode(id);
    if (t < 1 || t > static_cast<int>(raw.steps.size())) {
      throw AnnotationError(Kind::kUnknownStep,
                            "episode " + id + " has no step " + std::to_string(t));
    }
    const auto state = store.state(id);
    const RawStep& step = raw.steps[static_cast<std::size_t>(t - 1)];
    Json j = Json::object();
    j["episode_id"] = id;
    j["instruction"] = raw.instruction;
    j["step"] = t;
    j["total_steps"] = raw.steps.size();
    j["screenshot_url"] = "/api/episodes/" + id + "/steps/" + std::to_string(t) + "/screenshot";
    try {
      const auto size = read_image_size(store.data_dir() / step.screenshot);
      j["screenshot_size"] = {{"width", size.width}, {"height", size.height}};
    } catch (const std::exception&) {
      j["screenshot_size"] = nullptr;
    }
    j["proposed_action"] = action_to_json(step.proposed_action);
    j["context"] = step.context ? Json(*step.context) : Json(nullptr);
    j["thought"] = step.thought ? Json(*step.thought) : Json(nullptr);
    j["state"] = state_to_json(state);
    const bool verified = t < state.cursor;
    j["verified"] = verified;
    if (verified && !review_view) {
      j["verdict"] = verdict_to_json(store.verdicts(id)[static_cast<std::size_t>(t - 1)]);
      const StepRecord r = store.step_record(id, t);
      Json choices = Json::array();
      for (const auto& c : r.gold_choices) choices.push_back(gold_choice_to_json(c));
      j["gold_choices"] = std::move(choices);
    }
    return j;
  }

  void install() {
    http.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (config.bearer_token.empty() || req.path.rfind("/api/", 0) != 0 ||
          req.path == "/api/health") {
        return httplib::Server::HandlerResponse::Unhandled;
      }
      if (req.get_header_value("Authorization") != "Bearer " + config.bearer_token) {
        send_error(res, 401, "Unauthorized", "missing or wrong bearer token");
        return httplib::Server::HandlerResponse::Handled;
      }
      return httplib::Server::HandlerResponse::Unhandled;
    });

    http.Get("/api/health", wrap([this](const httplib::Request&, httplib::Response& res) {
               send_json(res, {{"status", "ok"}, {"episodes", store.episode_ids().size()}});
             }));

    http.Get("/api/episodes", wrap([this](const httplib::Request&, httplib::Response& res) {
               Json arr = Json::array();
               for (const auto& id : store.episode_ids()) {
                 const RawEpisode raw = store.raw_episode(id);
                 Json e = {{"id", id},
                           {"app", raw.app},
                           {"instruction", raw.instruction},
                           {"steps", raw.steps.size()},
                           {"state", state_to_json(store.state(id))}};
                 const auto lease = store.lease(id);
                 e["claimed_by"] = lease ? Json(lease->annotator) : Json(nullptr);
                 arr.push_back(std::move(e));
               }
               send_json(res, arr);
             }));

    http.Get("/api/episodes/:id",
             wrap([this](const httplib::Request& req, httplib::Response& res) {
               send_json(res, store.episode_json(req.path_params.at("id")));
             }));

    http.Post("/api/episodes/:id/claim",
              wrap([this](const httplib::Request& req, httplib::Response& res) {
                const Json body = parse_body(req);
                const auto id = req.path_params.at("id");
                store.claim(id, body.value("annotator", ""), config.lease_ttl);
                send_json(res, {{"episode_id", id},
                                {"annotator", body.value("annotator", "")},
                                {"ttl_seconds", config.lease_ttl.count()}});
              }));

    http.Post("/api/episodes/:id/release",
              wrap([this](const httplib::Request& req, httplib::Response& res) {
                const Json body = parse_body(req);
                store.release(req.path_params.at("id"), body.value("annotator", ""));
                send_json(res, {{"released", true}});
              }));

    http.Get("/api/episodes/:id/steps/:t",
             wrap([this](const httplib::Request& req, httplib::Response& res) {
               const bool review = req.get_param_value("view") == "review";
               send_json(res, step_payload(req.path_params.at("id"),
                                           parse_step(req.path_params.at("t")), review));
             }));

    http.Get("/api/episodes/:id/steps/:t/screenshot",
             wrap([this](const httplib::Request& req, httplib::Response& res) {
               const auto path = store.screenshot_path(req.path_params.at("id"),
                                                       parse_step(req.path_params.at("t")));
               std::string bytes = read_file_bytes(path);
               const std::string type = sniff_media_type(bytes);
               res.set_content(std::move(bytes), type);
             }));

    http.Post("/api/episodes/:id/verdicts",
              wrap([this](const httplib::Request& req, httplib::Response& res) {
                const auto id = req.path_params.at("id");
                Verdict v = verdict_from_json(parse_body(req));
                require_lease(id, v.annotator);
                send_json(res, state_to_json(store.submit_verdict(id, std::move(v))));
              }));

    http.Post("/api/episodes/:id/steps/:t/alternatives",
              wrap([this](const httplib::Request& req, httplib::Response& res) {
                const auto id = req.path_params.at("id");
                const Json body = parse_body(req);
                require_lease(id, body.value("annotator", ""));
                const GoldChoice choice = gold_choice_from_json(body.at("choice"));
                const StepRecord r =
                    store.add_alternative(id, parse_step(req.path_params.at("t")), choice);
                send_json(res, step_to_json(r));
              }));

    http.Post("/api/episodes/:id/reviews",
              wrap([this](const httplib::Request& req, httplib::Response& res) {
                const auto id = req.path_params.at("id");
                Verdict v = verdict_from_json(parse_body(req));
                const int step = v.step;
                const bool flagged = store.submit_review(id, std::move(v));
                send_json(res, {{"episode_id", id}, {"step", step}, {"flagged", flagged}});
              }));

    http.Get("/api/flags", wrap([this](const httplib::Request&, httplib::Response& res) {
               send_json(res, store.flags_json());
             }));

    http.Post("/api/episodes/:id/steps/:t/resolve",
              wrap([this](const httplib::Request& req, httplib::Response& res) {
                const Json body = parse_body(req);
                const std::string annotator = body.value("annotator", "");
                if (annotator.empty()) throw std::invalid_argument("annotator is required");
                store.resolve_flag(req.path_params.at("id"), parse_step(req.path_params.at("t")),
                                   annotator);
                send_json(res, {{"resolved", true}});
              }));

    http.Post("/api/export", wrap([this](const httplib::Request& req, httplib::Response& res) {
                const Json body = parse_body(req);
                ExportOptions opts;
                if (auto s = body.find("statuses"); s != body.end()) {
                  opts.statuses.clear();
                  for (const auto& name : *s) {
                    auto status = annotation_status_from_string(name.get<std::string>());
                    if (!status) {
                      throw std::invalid_argument("unknown status " + name.get<std::string>());
                    }
                    opts.statuses.insert(*status);
                  }
                }
                opts.exclude_flagged = !body.value("include_flagged", false);
                const std::string name =
                    body.value("name", "export-" + std::to_string(store.event_count()));
                if (!valid_export_name(name)) {
                  throw std::invalid_argument("export name must match [A-Za-z0-9._-]{1,64}");
                }
                const auto out = store.data_dir() / "exports" / name;
                const std::size_t n = store.write_export(out, opts);
                Json reply = {{"path", out.string()}, {"episodes", n}};
                if (body.value("inline", false)) {
                  Json eps = Json::array();
                  for (const auto& e : store.export_episodes(opts)) eps.push_back(episode_to_json(e));
                  reply["dataset"] = std::move(eps);
                }
                send_json(res, reply);
              }));

    if (config.ui_dir) {
      if (!http.set_mount_point("/", config.ui_dir->string())) {
        throw std::invalid_argument("ui directory does not exist: " + config.ui_dir->string());
      }
    }
  }
};

AnnotationServer::AnnotationServer(AnnotationStore& store, ServerConfig config)
    : impl_(std::make_unique<Impl>(store, std::move(config))) {}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind() {
  auto& i = *impl_;
  if (i.config.port == 0) {
    i.bound_port = i.http.bind_to_any_port(i.config.host);
  } else if (i.http.bind_to_port(i.config.host, i.config.port)) {
    i.bound_port = i.config.port;
  }
  if (i.bound_port <= 0) {
    throw std::runtime_error("cannot bind " + i.config.host + ":" +
                             std::to_string(i.config.port));
  }
  return i.bound_port;
}

void AnnotationServer::serve() { impl_->http.listen_after_bind(); }

void AnnotationServer::stop() {
  if (impl_) impl_->http.stop();
}

void AnnotationServer::wait_until_ready() const { impl_->http.wait_until_ready(); }

int AnnotationServer::port() const { return impl_->bound_port; }

}  // namespace secagent
