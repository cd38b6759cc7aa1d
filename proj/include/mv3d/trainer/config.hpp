#pragma once

// key=value configuration shared by every command. One entry per line, '#' starts a comment,
// surrounding whitespace is ignored. Keys outside the command's schema are rejected.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mv3d/core/error.hpp"

namespace mv3d {

struct KeyDef {
  std::string name;
  std::string default_value;
  std::string help;
};

using ConfigSchema = std::vector<KeyDef>;

class Config {
 public:
  Config() = default;
  explicit Config(ConfigSchema schema) : schema_(std::move(schema)) {
    for (const auto& k : schema_) values_[k.name] = k.default_value;
  }

  const ConfigSchema& schema() const { return schema_; }
  bool known(const std::string& key) const {
    return std::any_of(schema_.begin(), schema_.end(), [&](const KeyDef& k) { return k.name == key; });
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  long long integer(const std::string& key) const {
    const std::string& s = str(key);
    long long v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("config key '" + key + "' expects an integer, got '" + s + "'");
    return v;
  }

  double real(const std::string& key) const {
    const std::string& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
  }

  bool boolean(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + s + "'");
  }

  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    std::string s = str(key);
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) {
      int v = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size())
        throw ConfigError("config key '" + key + "' expects integers, got '" + tok + "'");
      out.push_back(v);
    }
    return out;
  }

  void parse(const std::string& text, const std::string& origin = "config") {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    parse(ss.str(), path.string());
  }

  std::string dump() const {
    std::string out;
    for (const auto& k : schema_) out += k.name + "=" + values_.at(k.name) + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  ConfigSchema schema_;
  std::map<std::string, std::string> values_;
};

}  // namespace mv3d
