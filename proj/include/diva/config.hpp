#pragma once

#include <fstream>
#include <sstream>

#include "diva/common.hpp"

namespace diva {

// ---------------------------------------------------------------------------
// Structured-text experiment config:
//
//   # comment (also ';')
//   [section]
//   key = value
//
// Section and key order is preserved; the canonical form (comments and
// whitespace stripped) is what the run-directory hash covers, so formatting
// changes do not re-run an experiment but any value change does.
// ---------------------------------------------------------------------------

struct Config {
  using Section = std::vector<std::pair<std::string, std::string>>;
  std::vector<std::pair<std::string, Section>> sections;

  bool has(const std::string& sec) const {
    for (const auto& [name, s] : sections)
      if (name == sec) return true;
    return false;
  }

  const std::string* find(const std::string& sec, const std::string& key) const {
    const std::string* hit = nullptr;
    for (const auto& [name, s] : sections) {
      if (name != sec) continue;
      for (const auto& [k, v] : s)
        if (k == key) hit = &v;  // last occurrence wins
    }
    return hit;
  }

  std::string get(const std::string& sec, const std::string& key,
                  const std::string& fallback) const {
    const std::string* v = find(sec, key);
    return v ? *v : fallback;
  }

  std::string require(const std::string& sec, const std::string& key) const {
    const std::string* v = find(sec, key);
    if (!v) throw ConfigError("config is missing [" + sec + "] " + key);
    return *v;
  }

  long get_i(const std::string& sec, const std::string& key, long fallback) const {
    const std::string* v = find(sec, key);
    if (!v) return fallback;
    try {
      size_t pos = 0;
      long r = std::stol(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("");
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config [" + sec + "] " + key + ": not an integer: " + *v);
    }
  }

  float get_f(const std::string& sec, const std::string& key, float fallback) const {
    const std::string* v = find(sec, key);
    if (!v) return fallback;
    try {
      size_t pos = 0;
      float r = std::stof(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("");
      return r;
    } catch (const std::exception&) {
      throw ConfigError("config [" + sec + "] " + key + ": not a number: " + *v);
    }
  }

  bool get_b(const std::string& sec, const std::string& key, bool fallback) const {
    const std::string* v = find(sec, key);
    if (!v) return fallback;
    if (*v == "on" || *v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "off" || *v == "false" || *v == "0" || *v == "no") return false;
    throw ConfigError("config [" + sec + "] " + key + ": not a flag: " + *v);
  }

  std::vector<float> get_float_list(const std::string& sec, const std::string& key) const {
    const std::string* v = find(sec, key);
    std::vector<float> out;
    if (!v) return out;
    std::string item;
    std::istringstream ss(*v);
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      out.push_back(std::stof(item));
    }
    return out;
  }

  void set(const std::string& sec, const std::string& key, const std::string& value) {
    for (auto& [name, s] : sections) {
      if (name != sec) continue;
      for (auto& [k, v] : s)
        if (k == key) {
          v = value;
          return;
        }
      s.emplace_back(key, value);
      return;
    }
    sections.push_back({sec, {{key, value}}});
  }

  std::string canonical() const {
    std::ostringstream out;
    for (const auto& [name, s] : sections) {
      out << '[' << name << "]\n";
      for (const auto& [k, v] : s) out << k << '=' << v << '\n';
    }
    return out.str();
  }

  uint64_t hash() const {
    std::string c = canonical();
    return fnv1a(c.data(), c.size());
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline Config parse_config_text(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    size_t hash_pos = line.find_first_of("#;");
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      if (!cfg.has(section)) cfg.sections.push_back({section, {}});
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": key before any section");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    for (auto& [name, s] : cfg.sections)
      if (name == section) {
        s.emplace_back(key, value);
        break;
      }
  }
  return cfg;
}

inline Config parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace diva
