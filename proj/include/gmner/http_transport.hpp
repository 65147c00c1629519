#pragma once

// Kept out of gmner.hpp: pulls in cpp-httplib and OpenSSL.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <cstdlib>
#include <memory>
#include <string>

#include "gmner/llm_gateway.hpp"

namespace gmner {

/// Posts to `<endpoint>/chat/completions`, e.g. endpoint
/// "https://dashscope.example.com/compatible-mode/v1".
class HttpChatTransport : public ChatTransport {
 public:
  HttpChatTransport(const std::string& endpoint, std::string api_key, double timeout_s,
                    std::string provider = "chat-completions")
      : api_key_(std::move(api_key)), provider_(std::move(provider)) {
    const auto scheme_end = endpoint.find("://");
    if (scheme_end == std::string::npos) {
      throw Error(ErrorKind::kConfig, "endpoint '" + endpoint + "' lacks a scheme");
    }
    const auto path_start = endpoint.find('/', scheme_end + 3);
    origin_ = endpoint.substr(0, path_start);
    path_ = (path_start == std::string::npos ? std::string() : endpoint.substr(path_start));
    while (!path_.empty() && path_.back() == '/') path_.pop_back();
    path_ += "/chat/completions";
    client_ = std::make_unique<httplib::Client>(origin_);
    const auto secs = static_cast<time_t>(timeout_s);
    const auto usecs = static_cast<time_t>((timeout_s - static_cast<double>(secs)) * 1e6);
    client_->set_connection_timeout(secs, usecs);
    client_->set_read_timeout(secs, usecs);
    client_->set_write_timeout(secs, usecs);
  }

  HttpReply post(const std::string& body) override {
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = client_->Post(path_, headers, body, "application/json");
    HttpReply reply;
    if (!res) {
      reply.error = "request to " + origin_ + path_ + " failed: " + httplib::to_string(res.error());
      return reply;
    }
    reply.status = res->status;
    reply.body = res->body;
    if (res->has_header("Retry-After")) {
      char* end = nullptr;
      const auto value = res->get_header_value("Retry-After");
      const double secs = std::strtod(value.c_str(), &end);
      if (end != value.c_str() && secs >= 0) reply.retry_after_s = secs;
    }
    return reply;
  }

  std::string provider_id() const override { return provider_; }

 private:
  std::string origin_;
  std::string path_;
  std::string api_key_;
  std::string provider_;
  std::unique_ptr<httplib::Client> client_;
};

inline std::string api_key_from_env(const std::string& var) {
  const char* v = std::getenv(var.c_str());
  return v ? std::string(v) : std::string();
}

}  // namespace gmner
