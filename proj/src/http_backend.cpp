#include <httplib.h>

#include <chrono>

#include "secagent/model_client.hpp"
#include "secagent/text.hpp"

namespace secagent {

namespace {

using Clock = std::chrono::steady_clock;

struct StreamState {
  std::string pending;  // bytes not yet split into SSE events
  std::string raw;      // full body, kept for error excerpts
  std::string text;
  std::int64_t deltas = 0;
  bool saw_done = false;
  bool saw_finish = false;
  std::optional<Json> usage;
  std::optional<Clock::time_point> first_token;
};

void consume_event(StreamState& st, std::string_view event, Clock::time_point now) {
  std::string data;
  std::size_t pos = 0;
  while (pos <= event.size()) {
    auto eol = event.find('\n', pos);
    std::string_view line = event.substr(pos, eol == std::string_view::npos ? event.size() - pos
                                                                            : eol - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.rfind("data:", 0) == 0) {
      line.remove_prefix(5);
      if (!line.empty() && line.front() == ' ') line.remove_prefix(1);
      if (!data.empty()) data += '\n';
      data.append(line);
    }
    if (eol == std::string_view::npos) break;
    pos = eol + 1;
  }
  if (data.empty()) return;
  if (data == "[DONE]") {
    st.saw_done = true;
    return;
  }
  Json chunk;
  try {
    chunk = Json::parse(data);
  } catch (const Json::parse_error&) {
    return;
  }
  if (auto it = chunk.find("usage"); it != chunk.end() && it->is_object()) st.usage = *it;
  auto choices = chunk.find("choices");
  if (choices == chunk.end() || !choices->is_array()) return;
  for (const auto& choice : *choices) {
    if (auto fr = choice.find("finish_reason"); fr != choice.end() && !fr->is_null()) {
      st.saw_finish = true;
    }
    auto delta = choice.find("delta");
    if (delta == choice.end()) continue;
    auto content = delta->find("content");
    if (content == delta->end() || !content->is_string()) continue;
    const auto& piece = content->get_ref<const std::string&>();
    if (piece.empty()) continue;
    if (!st.first_token) st.first_token = now;
    st.text += piece;
    ++st.deltas;
  }
}

}  // namespace

Json build_chat_request(const PromptBundle& bundle, const HttpBackendConfig& cfg) {
  Json content = Json::array();
  content.push_back({{"type", "text"}, {"text", bundle.user_text}});
  for (const auto& img : bundle.images) {
    const std::string bytes = read_file_bytes(img.path);
    content.push_back(
        {{"type", "image_url"},
         {"image_url",
          {{"url", "data:" + sniff_media_type(bytes) + ";base64," + base64_encode(bytes)}}}});
  }
  Json req = Json::object();
  req["model"] = cfg.model;
  req["stream"] = true;
  req["stream_options"] = {{"include_usage", true}};
  req["temperature"] = cfg.temperature;
  req["max_tokens"] = cfg.max_tokens;
  if (cfg.seed) req["seed"] = *cfg.seed;
  req["messages"] = Json::array(
      {{{"role", "system"}, {"content", bundle.system_text}},
       {{"role", "user"}, {"content", std::move(content)}}});
  return req;
}

HttpBackend::HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
  const auto scheme_end = cfg_.endpoint.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = cfg_.endpoint.find('/', host_start);
  if (path_start == std::string::npos) {
    scheme_host_port_ = cfg_.endpoint;
    path_ = "/v1/chat/completions";
  } else {
    scheme_host_port_ = cfg_.endpoint.substr(0, path_start);
    path_ = cfg_.endpoint.substr(path_start);
  }
  if (cfg_.max_in_flight < 1) cfg_.max_in_flight = 1;
}

Completion HttpBackend::complete(const PromptBundle& bundle) {
  {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return in_flight_ < cfg_.max_in_flight; });
    ++in_flight_;
  }
  struct Release {
    HttpBackend* self;
    ~Release() {
      {
        std::lock_guard lock(self->mu_);
        --self->in_flight_;
      }
      self->cv_.notify_one();
    }
  } release{this};

  const std::string body = build_chat_request(bundle, cfg_).dump();

  httplib::Client client(scheme_host_port_);
  const auto timeout = std::chrono::duration<double>(cfg_.timeout_seconds);
  const auto timeout_us = std::chrono::duration_cast<std::chrono::microseconds>(timeout);
  client.set_connection_timeout(timeout_us);
  client.set_read_timeout(timeout_us);
  client.set_write_timeout(timeout_us);

  httplib::Request req;
  req.method = "POST";
  req.path = path_;
  req.body = body;
  req.set_header("Content-Type", "application/json");
  req.set_header("Accept", "text/event-stream");
  if (!cfg_.api_key.empty()) req.set_header("Authorization", "Bearer " + cfg_.api_key);

  StreamState st;
  bool timed_out = false;
  const auto t0 = Clock::now();
  req.content_receiver = [&](const char* data, size_t len, uint64_t, uint64_t) {
    const auto now = Clock::now();
    if (now - t0 > timeout) {
      timed_out = true;
      return false;
    }
    st.raw.append(data, len);
    st.pending.append(data, len);
    for (;;) {
      auto sep = st.pending.find("\n\n");
      auto sep_crlf = st.pending.find("\r\n\r\n");
      std::size_t cut = std::min(sep, sep_crlf);
      if (cut == std::string::npos) break;
      const std::size_t skip = (cut == sep_crlf) ? 4 : 2;
      consume_event(st, std::string_view(st.pending).substr(0, cut), now);
      st.pending.erase(0, cut + skip);
    }
    return true;
  };

  httplib::Response res;
  httplib::Error err = httplib::Error::Success;
  const bool ok = client.send(req, res, err);
  const auto t_end = Clock::now();
  if (!st.pending.empty()) consume_event(st, st.pending, t_end);

  if (!ok) {
    if (timed_out || err == httplib::Error::Connection || err == httplib::Error::ConnectionTimeout ||
        err == httplib::Error::Canceled) {
      throw BackendError(BackendError::Kind::kTimeout,
                         "no completion from " + cfg_.endpoint + " (" + httplib::to_string(err) +
                             ")");
    }
    if (err == httplib::Error::Read && !st.raw.empty()) {
      throw BackendError(BackendError::Kind::kStreamInterrupted,
                         "stream from " + cfg_.endpoint + " interrupted");
    }
    throw BackendError(BackendError::Kind::kTimeout,
                       "request to " + cfg_.endpoint + " failed: " + httplib::to_string(err));
  }
  if (res.status != 200) {
    throw BackendError(BackendError::Kind::kHttpError,
                       "HTTP " + std::to_string(res.status) + " from " + cfg_.endpoint + ": " +
                           st.raw.substr(0, 256),
                       res.status);
  }
  if (!st.saw_done && !st.saw_finish) {
    throw BackendError(BackendError::Kind::kStreamInterrupted,
                       "stream from " + cfg_.endpoint + " ended before completion");
  }

  Completion c;
  c.text = std::move(st.text);
  if (st.usage) {
    const Json& u = *st.usage;
    c.usage.source = UsageSource::kServerReported;
    const std::int64_t prompt = u.value("prompt_tokens", std::int64_t{0});
    std::int64_t vision = 0;
    if (auto d = u.find("prompt_tokens_details"); d != u.end() && d->is_object()) {
      vision = d->value("image_tokens", std::int64_t{0});
    }
    c.usage.prompt_vision_tokens = vision;
    c.usage.prompt_text_tokens = prompt - vision;
    c.usage.completion_tokens = u.value("completion_tokens", std::int64_t{0});
  } else {
    c.usage = estimate_prompt_usage(bundle);
    c.usage.completion_tokens = st.deltas;
  }
  const double total = std::chrono::duration<double>(t_end - t0).count();
  const double ttft =
      st.first_token ? std::chrono::duration<double>(*st.first_token - t0).count() : total;
  c.timing = make_timing(ttft, total, c.usage.completion_tokens);
  return c;
}

}  // namespace secagent
