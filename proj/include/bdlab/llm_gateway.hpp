#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "bdlab/error.hpp"
#include "json.hpp"

namespace bdlab {

enum class Role { kSystem, kUser, kAssistant };

std::string_view to_string(Role r);
Role role_from_string(std::string_view s);

struct ChatMessage {
  Role role = Role::kUser;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct TokenUsage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  std::int64_t total_tokens = 0;

  static TokenUsage of(std::int64_t prompt, std::int64_t completion) {
    return {prompt, completion, prompt + completion};
  }
  TokenUsage& operator+=(const TokenUsage& o) {
    prompt_tokens += o.prompt_tokens;
    completion_tokens += o.completion_tokens;
    total_tokens += o.total_tokens;
    return *this;
  }
  bool operator==(const TokenUsage&) const = default;
};

struct ChatParams {
  std::string model = "default";
  double temperature = 0.0;
  int max_tokens = 512;
  std::optional<std::uint64_t> seed;
};

struct ChatReply {
  ChatMessage message;
  TokenUsage usage;
};

nlohmann::json message_to_json(const ChatMessage& m);
ChatMessage message_from_json(const nlohmann::json& j);
nlohmann::json usage_to_json(const TokenUsage& u);

// Chat-completions request: {model, messages[], temperature, max_tokens[, seed]}.
std::string build_request_body(const std::vector<ChatMessage>& messages,
                               const ChatParams& params);
// Reads choices[0].message and usage. Throws ResponseError on a malformed body
// or an empty reply.
ChatReply parse_response_body(std::string_view body);

class ResponseError : public Error {
 public:
  using Error::Error;
};

// Transport-level failure. Retryable failures (connection errors, 429, 5xx)
// are retried by ChatClient with backoff.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, bool retryable)
      : Error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

 private:
  bool retryable_;
};

class Transport {
 public:
  virtual ~Transport() = default;
  // Sends one request body, returns the raw response body.
  virtual std::string post(const std::string& request_body) = 0;
};

struct HttpEndpoint {
  // Full URL of the chat-completions route, e.g.
  // https://llm.example.org/v1/chat/completions
  std::string url;
  std::string api_key_env = "BDLAB_LLM_API_KEY";
  int timeout_seconds = 120;
};

class HttpTransport : public Transport {
 public:
  // Throws ConfigError if the URL is malformed or the key variable is unset.
  explicit HttpTransport(HttpEndpoint endpoint);
  std::string post(const std::string& request_body) override;

 private:
  HttpEndpoint endpoint_;
  std::string origin_;
  std::string path_;
  std::string api_key_;
};

// Replays a scripted fixture in order. Each step is
// {"expect_substring": "...", "reply": "...",
//  "usage": {"prompt_tokens": p, "completion_tokens": c}}
// or {"fail": "message"} for a retryable transport failure.
class MockTransport : public Transport {
 public:
  struct Step {
    std::optional<std::string> expect_substring;
    std::string reply;
    TokenUsage usage;
    std::optional<std::string> fail;
  };

  explicit MockTransport(std::vector<Step> steps);
  MockTransport(MockTransport&& other) noexcept;
  static MockTransport from_json(const nlohmann::json& fixture);
  static MockTransport from_file(const std::filesystem::path& path);

  std::string post(const std::string& request_body) override;
  std::size_t remaining() const;

 private:
  mutable std::mutex mu_;
  std::deque<Step> steps_;
};

// One request attempt and its outcome.
struct Exchange {
  std::size_t index = 0;
  int attempt = 1;
  std::string timestamp;
  std::vector<ChatMessage> request;
  std::optional<ChatMessage> reply;
  TokenUsage usage;
  std::string error;
};

class Transcript {
 public:
  void append(Exchange e);
  std::vector<Exchange> exchanges() const;
  std::size_t size() const;
  // One JSON object per exchange.
  std::string to_jsonl(bool with_timestamps = true) const;
  void write(const std::filesystem::path& path, bool with_timestamps = true) const;

 private:
  mutable std::mutex mu_;
  std::vector<Exchange> exchanges_;
};

// Element-wise sum over every exchange (failed attempts contribute zero).
TokenUsage accumulate_usage(const Transcript& t);
TokenUsage accumulate_usage(const std::vector<Exchange>& exchanges);

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
};

class ChatClient {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;
  static constexpr std::ptrdiff_t kMaxInFlight = 64;

  ChatClient(std::shared_ptr<Transport> transport, RetryPolicy retry = {},
             std::ptrdiff_t max_in_flight = 4, Sleeper sleeper = {});

  // Sends the conversation and returns the assistant reply. Every attempt is
  // appended to the transcript.
  ChatReply chat(const std::vector<ChatMessage>& messages,
                 const ChatParams& params);

  const Transcript& transcript() const { return transcript_; }
  TokenUsage usage() const { return accumulate_usage(transcript_); }

 private:
  std::shared_ptr<Transport> transport_;
  RetryPolicy retry_;
  Sleeper sleeper_;
  std::counting_semaphore<kMaxInFlight> in_flight_;
  Transcript transcript_;
  std::mutex index_mu_;
  std::size_t next_index_ = 0;
};

}  // namespace bdlab
