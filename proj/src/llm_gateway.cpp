#include "bdlab/llm_gateway.hpp"

#include <cstdlib>
#include <ctime>
#include <fstream>
#include <thread>

#include "httplib.h"

namespace bdlab {

using nlohmann::json;

std::string_view to_string(Role r) {
  switch (r) {
    case Role::kSystem:
      return "system";
    case Role::kUser:
      return "user";
    case Role::kAssistant:
      return "assistant";
  }
  return "user";
}

Role role_from_string(std::string_view s) {
  if (s == "system") return Role::kSystem;
  if (s == "user") return Role::kUser;
  if (s == "assistant") return Role::kAssistant;
  throw ResponseError("unknown chat role '" + std::string(s) + "'");
}

json message_to_json(const ChatMessage& m) {
  return {{"role", std::string(to_string(m.role))}, {"content", m.content}};
}

ChatMessage message_from_json(const json& j) {
  return {role_from_string(j.at("role").get<std::string>()),
          j.at("content").get<std::string>()};
}

json usage_to_json(const TokenUsage& u) {
  return {{"prompt_tokens", u.prompt_tokens},
          {"completion_tokens", u.completion_tokens},
          {"total_tokens", u.total_tokens}};
}

std::string build_request_body(const std::vector<ChatMessage>& messages,
                               const ChatParams& params) {
  json msgs = json::array();
  for (const auto& m : messages) msgs.push_back(message_to_json(m));
  json body = {{"model", params.model},
               {"messages", msgs},
               {"temperature", params.temperature},
               {"max_tokens", params.max_tokens}};
  if (params.seed) body["seed"] = *params.seed;
  return body.dump();
}

ChatReply parse_response_body(std::string_view body) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error& e) {
    throw ResponseError(std::string("response is not JSON: ") + e.what());
  }
  try {
    ChatReply reply;
    const auto& msg = doc.at("choices").at(0).at("message");
    reply.message.role = msg.contains("role")
                             ? role_from_string(msg["role"].get<std::string>())
                             : Role::kAssistant;
    reply.message.content =
        msg.at("content").is_null() ? "" : msg["content"].get<std::string>();
    if (doc.contains("usage") && doc["usage"].is_object()) {
      const auto& u = doc["usage"];
      reply.usage.prompt_tokens = u.value("prompt_tokens", std::int64_t{0});
      reply.usage.completion_tokens =
          u.value("completion_tokens", std::int64_t{0});
      reply.usage.total_tokens = reply.usage.prompt_tokens +
                                 reply.usage.completion_tokens;
      if (u.contains("total_tokens") &&
          u["total_tokens"].get<std::int64_t>() != reply.usage.total_tokens) {
        throw ResponseError("usage total_tokens != prompt + completion");
      }
    }
    if (reply.message.content.empty()) throw ResponseError("empty reply content");
    return reply;
  } catch (const json::exception& e) {
    throw ResponseError(std::string("unexpected response shape: ") + e.what());
  }
}

HttpTransport::HttpTransport(HttpEndpoint endpoint)
    : endpoint_(std::move(endpoint)) {
  const auto& url = endpoint_.url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("LLM endpoint must be an absolute http(s) URL: " + url);
  }
  const std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw ConfigError("unsupported LLM endpoint scheme '" + scheme + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  origin_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  const char* key = std::getenv(endpoint_.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw ConfigError("LLM credential missing: set " + endpoint_.api_key_env);
  }
  api_key_ = key;
}

std::string HttpTransport::post(const std::string& request_body) {
  httplib::Client client(origin_);
  client.set_bearer_token_auth(api_key_);
  client.set_connection_timeout(endpoint_.timeout_seconds, 0);
  client.set_read_timeout(endpoint_.timeout_seconds, 0);
  auto res = client.Post(path_, request_body, "application/json");
  if (!res) {
    throw TransportError("request failed: " + httplib::to_string(res.error()),
                         true);
  }
  if (res->status != 200) {
    const bool retryable = res->status == 429 || res->status >= 500;
    throw TransportError("HTTP " + std::to_string(res->status) + ": " +
                             res->body.substr(0, 200),
                         retryable);
  }
  return res->body;
}

MockTransport::MockTransport(std::vector<Step> steps)
    : steps_(steps.begin(), steps.end()) {}

MockTransport::MockTransport(MockTransport&& other) noexcept {
  std::lock_guard lock(other.mu_);
  steps_ = std::move(other.steps_);
}

MockTransport MockTransport::from_json(const json& fixture) {
  const json& list = fixture.is_object() ? fixture.at("steps") : fixture;
  if (!list.is_array()) throw ParseError("mock fixture must be a JSON array");
  std::vector<Step> steps;
  try {
    for (const auto& s : list) {
      Step step;
      if (s.contains("expect_substring")) {
        step.expect_substring = s["expect_substring"].get<std::string>();
      }
      if (s.contains("fail")) {
        step.fail = s["fail"].get<std::string>();
      } else {
        step.reply = s.at("reply").get<std::string>();
        const auto& u = s.at("usage");
        step.usage = TokenUsage::of(u.at("prompt_tokens").get<std::int64_t>(),
                                    u.at("completion_tokens").get<std::int64_t>());
      }
      steps.push_back(std::move(step));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad mock fixture: ") + e.what());
  }
  return MockTransport(std::move(steps));
}

MockTransport MockTransport::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mock fixture " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string MockTransport::post(const std::string& request_body) {
  Step step;
  {
    std::lock_guard lock(mu_);
    if (steps_.empty()) throw TransportError("mock fixture exhausted", false);
    step = std::move(steps_.front());
    steps_.pop_front();
  }
  if (step.fail) throw TransportError(*step.fail, true);
  if (step.expect_substring &&
      request_body.find(*step.expect_substring) == std::string::npos) {
    throw TransportError(
        "mock fixture expected request containing '" + *step.expect_substring + "'",
        false);
  }
  json body = {
      {"choices",
       json::array({{{"index", 0},
                     {"message", {{"role", "assistant"}, {"content", step.reply}}},
                     {"finish_reason", "stop"}}})},
      {"usage", usage_to_json(step.usage)}};
  return body.dump();
}

std::size_t MockTransport::remaining() const {
  std::lock_guard lock(mu_);
  return steps_.size();
}

void Transcript::append(Exchange e) {
  std::lock_guard lock(mu_);
  exchanges_.push_back(std::move(e));
}

std::vector<Exchange> Transcript::exchanges() const {
  std::lock_guard lock(mu_);
  return exchanges_;
}

std::size_t Transcript::size() const {
  std::lock_guard lock(mu_);
  return exchanges_.size();
}

std::string Transcript::to_jsonl(bool with_timestamps) const {
  std::string out;
  for (const auto& e : exchanges()) {
    json request = json::array();
    for (const auto& m : e.request) request.push_back(message_to_json(m));
    json row = {{"index", e.index}, {"attempt", e.attempt}};
    if (with_timestamps) row["timestamp"] = e.timestamp;
    row["request"] = request;
    row["reply"] = e.reply ? message_to_json(*e.reply) : json(nullptr);
    row["usage"] = usage_to_json(e.usage);
    row["error"] = e.error;
    out += row.dump() + "\n";
  }
  return out;
}

void Transcript::write(const std::filesystem::path& path,
                       bool with_timestamps) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write transcript " + path.string());
  out << to_jsonl(with_timestamps);
}

TokenUsage accumulate_usage(const std::vector<Exchange>& exchanges) {
  TokenUsage total;
  for (const auto& e : exchanges) total += e.usage;
  return total;
}

TokenUsage accumulate_usage(const Transcript& t) {
  return accumulate_usage(t.exchanges());
}

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  const auto millis = std::chrono::duration_cast<std::chrono::milliseconds>(
                          now.time_since_epoch())
                          .count() %
                      1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof(out), "%s.%03lldZ", buf,
                static_cast<long long>(millis));
  return out;
}

}  // namespace

ChatClient::ChatClient(std::shared_ptr<Transport> transport, RetryPolicy retry,
                       std::ptrdiff_t max_in_flight, Sleeper sleeper)
    : transport_(std::move(transport)),
      retry_(retry),
      sleeper_(std::move(sleeper)),
      in_flight_(max_in_flight) {
  if (!transport_) throw ConfigError("chat client needs a transport");
  if (retry_.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  if (max_in_flight < 1 || max_in_flight > kMaxInFlight) {
    throw ConfigError("max_in_flight must be in [1, 64]");
  }
  if (!sleeper_) {
    sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  }
}

ChatReply ChatClient::chat(const std::vector<ChatMessage>& messages,
                           const ChatParams& params) {
  if (messages.empty()) throw ConfigError("chat needs at least one message");
  for (const auto& m : messages) {
    if (m.content.empty()) throw ConfigError("chat message content is empty");
  }
  std::size_t index;
  {
    std::lock_guard lock(index_mu_);
    index = next_index_++;
  }
  const std::string body = build_request_body(messages, params);
  auto backoff = retry_.initial_backoff;

  for (int attempt = 1;; ++attempt) {
    Exchange ex;
    ex.index = index;
    ex.attempt = attempt;
    ex.request = messages;
    ex.timestamp = utc_timestamp();
    try {
      std::string raw;
      in_flight_.acquire();
      try {
        raw = transport_->post(body);
      } catch (...) {
        in_flight_.release();
        throw;
      }
      in_flight_.release();
      ChatReply reply = parse_response_body(raw);
      ex.reply = reply.message;
      ex.usage = reply.usage;
      transcript_.append(std::move(ex));
      return reply;
    } catch (const TransportError& e) {
      ex.error = e.what();
      transcript_.append(std::move(ex));
      if (!e.retryable() || attempt >= retry_.max_attempts) {
        throw TransportError("chat failed after " + std::to_string(attempt) +
                                 " attempt(s): " + e.what(),
                             false);
      }
      sleeper_(backoff);
      backoff = std::chrono::milliseconds(static_cast<std::int64_t>(
          static_cast<double>(backoff.count()) * retry_.multiplier));
    } catch (const ResponseError& e) {
      ex.error = e.what();
      transcript_.append(std::move(ex));
      throw;
    }
  }
}

}  // namespace bdlab
