#pragma once

#include "rftlab/common.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace rftlab {

enum class ValueType { Int, Real, Bool, String, IntList, RealList, StringList };

/// section -> key -> expected type. Keys before any [section] header live
/// in section "".
using Schema = std::map<std::string, std::map<std::string, ValueType>>;

/// INI-style configuration: `key = value` lines, `[section]` headers,
/// `#` or `;` comments. Lists are comma-separated.
class Config {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };

  static Config parse(const std::string& text, const std::string& source = "<config>") {
    Config c;
    c.source_ = source;
    std::istringstream in(text);
    std::string raw, section;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
      ++lineno;
      std::string line = trim(strip_comment(raw));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw c.error(lineno, "malformed section header '" + line + "'");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw c.error(lineno, "empty section name");
        c.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw c.error(lineno, "expected 'key = value', got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw c.error(lineno, "missing key before '='");
      auto& sec = c.sections_[section];
      if (sec.count(key)) throw c.error(lineno, "duplicate key '" + key + "'" + where(section));
      sec[key] = {trim(line.substr(eq + 1)), lineno};
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  /// Rejects unknown sections and keys and values of the wrong type.
  void validate(const Schema& schema) const {
    for (const auto& [section, keys] : sections_) {
      auto s = schema.find(section);
      if (s == schema.end()) {
        const std::size_t line = keys.empty() ? 0 : keys.begin()->second.line;
        throw error(line, "unknown section [" + section + "]");
      }
      for (const auto& [key, entry] : keys) {
        auto k = s->second.find(key);
        if (k == s->second.end()) throw error(entry.line, "unknown key '" + key + "'" + where(section));
        check_type(section, key, entry, k->second);
      }
    }
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key);
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = {value, 0};
  }

  std::string get_string(const std::string& section, const std::string& key, const std::string& def) const {
    const Entry* e = find(section, key);
    return e ? e->value : def;
  }

  long long get_int(const std::string& section, const std::string& key, long long def) const {
    const Entry* e = find(section, key);
    if (!e) return def;
    try {
      return parse_int(e->value);
    } catch (const Error& ex) {
      throw error(e->line, std::string(ex.what()) + " for key '" + key + "'" + where(section));
    }
  }

  double get_real(const std::string& section, const std::string& key, double def) const {
    const Entry* e = find(section, key);
    if (!e) return def;
    try {
      return parse_double(e->value);
    } catch (const Error& ex) {
      throw error(e->line, std::string(ex.what()) + " for key '" + key + "'" + where(section));
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool def) const {
    const Entry* e = find(section, key);
    if (!e) return def;
    if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
    if (e->value == "false" || e->value == "0" || e->value == "no") return false;
    throw error(e->line, "expected a boolean for key '" + key + "'" + where(section));
  }

  std::vector<std::string> get_strings(const std::string& section, const std::string& key,
                                       const std::vector<std::string>& def) const {
    const Entry* e = find(section, key);
    if (!e) return def;
    std::vector<std::string> out;
    for (const auto& p : split(e->value, ',')) {
      auto t = trim(p);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

  std::vector<double> get_reals(const std::string& section, const std::string& key,
                                const std::vector<double>& def) const {
    const Entry* e = find(section, key);
    if (!e) return def;
    std::vector<double> out;
    try {
      for (const auto& s : get_strings(section, key, {})) out.push_back(parse_double(s));
    } catch (const Error& ex) {
      throw error(e->line, std::string(ex.what()) + " in list '" + key + "'" + where(section));
    }
    return out;
  }

  std::vector<long long> get_ints(const std::string& section, const std::string& key,
                                  const std::vector<long long>& def) const {
    const Entry* e = find(section, key);
    if (!e) return def;
    std::vector<long long> out;
    try {
      for (const auto& s : get_strings(section, key, {})) out.push_back(parse_int(s));
    } catch (const Error& ex) {
      throw error(e->line, std::string(ex.what()) + " in list '" + key + "'" + where(section));
    }
    return out;
  }

  /// Deterministic text form: sorted `section.key=value` lines.
  std::string canonical() const {
    std::string out;
    for (const auto& [section, keys] : sections_)
      for (const auto& [key, e] : keys) out += (section.empty() ? "" : section + ".") + key + "=" + e.value + "\n";
    return out;
  }

  const std::string& source() const { return source_; }

  ConfigError error(std::size_t line, const std::string& msg) const {
    return ConfigError(source_ + (line ? ":" + std::to_string(line) : std::string()) + ": " + msg);
  }

 private:
  static std::string strip_comment(const std::string& s) {
    const auto p = s.find_first_of("#;");
    return p == std::string::npos ? s : s.substr(0, p);
  }

  static std::string where(const std::string& section) {
    return section.empty() ? std::string(" at top level") : " in [" + section + "]";
  }

  const Entry* find(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return nullptr;
    auto k = s->second.find(key);
    return k == s->second.end() ? nullptr : &k->second;
  }

  void check_type(const std::string& section, const std::string& key, const Entry& e, ValueType t) const {
    switch (t) {
      case ValueType::Int: (void)get_int(section, key, 0); break;
      case ValueType::Real: (void)get_real(section, key, 0); break;
      case ValueType::Bool: (void)get_bool(section, key, false); break;
      case ValueType::IntList: (void)get_ints(section, key, {}); break;
      case ValueType::RealList: (void)get_reals(section, key, {}); break;
      case ValueType::String:
        if (e.value.empty()) throw error(e.line, "empty value for key '" + key + "'" + where(section));
        break;
      case ValueType::StringList: break;
    }
  }

  std::string source_ = "<defaults>";
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

}  // namespace rftlab
