#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "gmner/error.hpp"

namespace gmner {

using json = nlohmann::json;

/// Substitutes `{name}` placeholders. Braces that do not enclose a bare
/// identifier (JSON examples in templates) are left alone; an identifier
/// placeholder with no value is an error.
inline std::string render(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tmpl.size() * 2);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      std::size_t j = i + 1;
      while (j < tmpl.size() && (std::isalnum(static_cast<unsigned char>(tmpl[j])) || tmpl[j] == '_')) ++j;
      if (j < tmpl.size() && tmpl[j] == '}' && j > i + 1) {
        const std::string name(tmpl.substr(i + 1, j - i - 1));
        auto it = vars.find(name);
        if (it == vars.end()) throw Error(ErrorKind::kFormat, "template placeholder {" + name + "} has no value");
        out += it->second;
        i = j + 1;
        continue;
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

/// Prompt templates read from `<dir>/<name>.txt`. Thread-safe.
class PromptTemplates {
 public:
  PromptTemplates() = default;
  explicit PromptTemplates(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const std::string& get(const std::string& name) const {
    std::lock_guard lock(mu_);
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const auto path = dir_ / (name + ".txt");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::kIo, "prompt template '" + path.string() + "' not found");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return cache_.emplace(name, std::move(text)).first->second;
  }

  std::string render(const std::string& name, const std::map<std::string, std::string>& vars) const {
    return gmner::render(get(name), vars);
  }

  void set(const std::string& name, std::string text) {
    std::lock_guard lock(mu_);
    cache_[name] = std::move(text);
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mu_;
  mutable std::map<std::string, std::string> cache_;  // node-based: references stay valid
};

/// Pulls the JSON payload out of a model reply: the last ```json fenced
/// block, else the last fenced block, else the outermost {...} or [...].
inline std::optional<json> extract_json(std::string_view reply) {
  auto try_parse = [](std::string_view s) -> std::optional<json> {
    try {
      return json::parse(s);
    } catch (const json::parse_error&) {
      return std::nullopt;
    }
  };
  for (std::string_view fence : {std::string_view("```json"), std::string_view("```")}) {
    std::size_t pos = reply.rfind(fence);
    while (pos != std::string_view::npos) {
      const auto body_start = pos + fence.size();
      const auto close = reply.find("```", body_start);
      if (close != std::string_view::npos) {
        if (auto j = try_parse(reply.substr(body_start, close - body_start))) return j;
      }
      if (pos == 0) break;
      pos = reply.rfind(fence, pos - 1);
    }
  }
  const auto first = reply.find_first_of("{[");
  if (first == std::string_view::npos) return std::nullopt;
  const char close_char = reply[first] == '{' ? '}' : ']';
  const auto last = reply.rfind(close_char);
  if (last == std::string_view::npos || last < first) return std::nullopt;
  return try_parse(reply.substr(first, last - first + 1));
}

}  // namespace gmner
