#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gmner/error.hpp"
#include "gmner/hash.hpp"

namespace gmner {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Requests

struct ContentPart {
  enum class Kind { kText, kImage };

  Kind kind = Kind::kText;
  std::string text;
  std::string image_path;    // image by reference, read at send time
  std::string image_base64;  // or inline payload
  std::string mime = "image/jpeg";

  static ContentPart of_text(std::string t) {
    ContentPart p;
    p.text = std::move(t);
    return p;
  }
  static ContentPart of_image_path(std::string path) {
    ContentPart p;
    p.kind = Kind::kImage;
    p.image_path = std::move(path);
    return p;
  }
};

struct ChatMessage {
  std::string role;
  std::vector<ContentPart> parts;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 1024;

  /// Semantic fields only. Images by path are keyed by path, inline images
  /// by the hash of their payload. Object keys serialize sorted.
  json canonical() const {
    json msgs = json::array();
    for (const auto& m : messages) {
      json parts = json::array();
      for (const auto& p : m.parts) {
        if (p.kind == ContentPart::Kind::kText) {
          parts.push_back(json{{"type", "text"}, {"text", p.text}});
        } else if (!p.image_path.empty()) {
          parts.push_back(json{{"type", "image"}, {"path", p.image_path}});
        } else {
          parts.push_back(json{{"type", "image"}, {"sha256", sha256_hex(p.image_base64)}});
        }
      }
      msgs.push_back(json{{"role", m.role}, {"content", parts}});
    }
    return json{{"model", model}, {"messages", msgs}, {"temperature", temperature}, {"max_tokens", max_tokens}};
  }

  std::string request_key() const { return sha256_hex(canonical().dump()); }

  static ChatRequest user_text(std::string model, std::string text, double temperature = 0.0) {
    ChatRequest r;
    r.model = std::move(model);
    r.temperature = temperature;
    r.messages.push_back(ChatMessage{"user", {ContentPart::of_text(std::move(text))}});
    return r;
  }
};

// ---------------------------------------------------------------------------
// Transcript cache

struct Transcript {
  std::string request_key;
  std::string response;
  double latency_ms = 0.0;
  std::string timestamp;
  std::string provider;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Append-only JSON-lines file, one response per request key. The first
/// record for a key wins.
class TranscriptCache {
 public:
  TranscriptCache() = default;

  explicit TranscriptCache(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    if (!in) return;  // a missing cache is an empty cache
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = json::parse(line);
        Transcript t{j.at("request_key").get<std::string>(), j.at("response").get<std::string>(),
                     j.value("latency_ms", 0.0), j.value("timestamp", std::string()),
                     j.value("provider", std::string())};
        entries_.emplace(t.request_key, std::move(t));
      } catch (const std::exception& e) {
        throw Error(ErrorKind::kFormat, path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  std::optional<Transcript> find(const std::string& key) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  /// Returns false when the key is already present.
  bool append(const Transcript& t) {
    std::lock_guard lock(mutex_);
    if (entries_.contains(t.request_key)) return false;
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app | std::ios::binary);
      if (!out) throw Error(ErrorKind::kIo, "cannot append to '" + path_.string() + "'");
      out << json{{"request_key", t.request_key},
                  {"response", t.response},
                  {"latency_ms", t.latency_ms},
                  {"timestamp", t.timestamp},
                  {"provider", t.provider}}
                 .dump()
          << '\n';
    }
    entries_.emplace(t.request_key, t);
    return true;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, Transcript> entries_;
};

// ---------------------------------------------------------------------------
// Transport

struct HttpReply {
  int status = 0;  // 0: transport-level failure (connect, timeout)
  std::string body;
  std::string error;
  std::optional<double> retry_after_s;
};

/// Provider adapter point: posts one chat-completions body.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual HttpReply post(const std::string& body) = 0;
  virtual std::string provider_id() const = 0;
};

// ---------------------------------------------------------------------------
// Gateway

enum class GatewayMode { kLive, kReplay, kRecord };

inline GatewayMode gateway_mode_from_string(std::string_view s) {
  if (s == "live") return GatewayMode::kLive;
  if (s == "replay") return GatewayMode::kReplay;
  if (s == "record") return GatewayMode::kRecord;
  throw Error(ErrorKind::kConfig, "gateway.mode must be live, replay or record, got '" + std::string(s) + "'");
}

inline std::string_view to_string(GatewayMode m) {
  switch (m) {
    case GatewayMode::kLive: return "live";
    case GatewayMode::kReplay: return "replay";
    case GatewayMode::kRecord: return "record";
  }
  return "?";
}

struct GatewayConfig {
  GatewayMode mode = GatewayMode::kReplay;
  int max_in_flight = 4;
  int max_retries = 3;
  double timeout_s = 120.0;
  std::chrono::milliseconds backoff_initial{500};
  std::chrono::milliseconds backoff_max{8000};
  std::size_t image_size_cap = 4u << 20;
  std::filesystem::path image_root;  // relative image paths resolve here when read
};

struct GatewayMetrics {
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> cache_hits{0};
  std::atomic<std::uint64_t> network_calls{0};
  std::atomic<std::uint64_t> retries{0};
  std::atomic<std::uint64_t> failures{0};
};

namespace detail {

inline std::string read_image_base64(const std::string& path, std::size_t cap) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read image '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() > cap) {
    throw Error(ErrorKind::kInvalidArgument, "image '" + path + "' is " + std::to_string(bytes.size()) +
                                                 " bytes, cap is " + std::to_string(cap));
  }
  return base64_encode(bytes);
}

inline std::string guess_mime(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".webp") return "image/webp";
  if (ext == ".gif") return "image/gif";
  return "image/jpeg";
}

}  // namespace detail

/// Chat-completions wire body for a request; images are inlined as data URLs.
/// Relative image paths are read from `image_root` but keyed as written.
inline json provider_body(const ChatRequest& request, std::size_t image_cap,
                          const std::filesystem::path& image_root = {}) {
  json msgs = json::array();
  for (const auto& m : request.messages) {
    json content = json::array();
    for (const auto& p : m.parts) {
      if (p.kind == ContentPart::Kind::kText) {
        content.push_back(json{{"type", "text"}, {"text", p.text}});
        continue;
      }
      std::string payload = p.image_base64;
      std::string mime = p.mime;
      if (!p.image_path.empty()) {
        const std::filesystem::path path(p.image_path);
        payload = detail::read_image_base64((path.is_relative() ? image_root / path : path).string(), image_cap);
        mime = detail::guess_mime(p.image_path);
      } else if (payload.size() / 4 * 3 > image_cap) {
        throw Error(ErrorKind::kInvalidArgument, "inline image exceeds the size cap");
      }
      content.push_back(json{{"type", "image_url"}, {"image_url", {{"url", "data:" + mime + ";base64," + payload}}}});
    }
    msgs.push_back(json{{"role", m.role}, {"content", content}});
  }
  return json{{"model", request.model},
              {"messages", msgs},
              {"temperature", request.temperature},
              {"max_tokens", request.max_tokens},
              {"stream", false}};
}

/// Extracts the assistant text from a chat-completions response body.
inline std::string parse_provider_reply(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kProviderPayload, std::string("reply is not JSON: ") + e.what());
  }
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) return content.get<std::string>();
    if (content.is_array()) {
      std::string out;
      for (const auto& part : content) {
        if (part.value("type", "") == "text") out += part.at("text").get<std::string>();
      }
      return out;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProviderPayload, std::string("unexpected reply shape: ") + e.what());
  }
  throw Error(ErrorKind::kProviderPayload, "reply content is neither string nor parts");
}

inline bool retryable_status(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

/// Uniform chat client. LIVE always calls the transport; RECORD serves
/// cached keys and stores new live responses; REPLAY never touches the
/// network. Thread-safe.
class LlmGateway {
 public:
  LlmGateway(GatewayConfig config, std::shared_ptr<TranscriptCache> cache, std::shared_ptr<ChatTransport> transport)
      : config_(config),
        cache_(cache ? std::move(cache) : std::make_shared<TranscriptCache>()),
        transport_(std::move(transport)),
        in_flight_(std::clamp(config.max_in_flight, 1, 64)) {}

  std::string complete(const ChatRequest& request) { return complete(request, config_.mode); }

  std::string complete(const ChatRequest& request, GatewayMode mode) {
    ++metrics_.requests;
    const auto key = request.request_key();
    if (mode != GatewayMode::kLive) {
      if (auto hit = cache_->find(key)) {
        ++metrics_.cache_hits;
        return hit->response;
      }
      if (mode == GatewayMode::kReplay) {
        ++metrics_.failures;
        throw Error(ErrorKind::kCacheMiss, "no transcript for request key " + key);
      }
    }
    if (!transport_) {
      ++metrics_.failures;
      throw Error(ErrorKind::kConfig, "gateway has no endpoint configured for " + std::string(to_string(mode)) + " mode");
    }

    const auto body = provider_body(request, config_.image_size_cap, config_.image_root).dump();
    const auto started = std::chrono::steady_clock::now();
    std::string text = call_with_retries(body);
    const double latency =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    if (mode == GatewayMode::kRecord) {
      cache_->append(Transcript{key, text, latency, utc_timestamp(), transport_->provider_id()});
    }
    return text;
  }

  const GatewayMetrics& metrics() const { return metrics_; }
  const GatewayConfig& config() const { return config_; }
  TranscriptCache& cache() { return *cache_; }

 private:
  std::string call_with_retries(const std::string& body) {
    auto delay = config_.backoff_initial;
    std::string last_error;
    for (int attempt = 0;; ++attempt) {
      HttpReply reply;
      {
        in_flight_.acquire();
        struct Release {
          std::counting_semaphore<64>& s;
          ~Release() { s.release(); }
        } release{in_flight_};
        ++metrics_.network_calls;
        reply = transport_->post(body);
      }
      if (reply.status >= 200 && reply.status < 300) {
        try {
          return parse_provider_reply(reply.body);
        } catch (const Error&) {
          ++metrics_.failures;
          throw;
        }
      }
      last_error = reply.status == 0 ? reply.error : "HTTP " + std::to_string(reply.status) + ": " + reply.body.substr(0, 200);
      if (!retryable_status(reply.status) || attempt >= config_.max_retries) {
        ++metrics_.failures;
        throw Error(ErrorKind::kHttp, last_error + " (after " + std::to_string(attempt) + " retries)");
      }
      ++metrics_.retries;
      auto wait = delay;
      if (reply.retry_after_s) {
        wait = std::chrono::milliseconds(static_cast<long long>(*reply.retry_after_s * 1000.0));
      }
      std::this_thread::sleep_for(std::min(wait, config_.backoff_max));
      delay = std::min(delay * 2, config_.backoff_max);
    }
  }

  GatewayConfig config_;
  std::shared_ptr<TranscriptCache> cache_;
  std::shared_ptr<ChatTransport> transport_;
  std::counting_semaphore<64> in_flight_;
  GatewayMetrics metrics_;
};

}  // namespace gmner
