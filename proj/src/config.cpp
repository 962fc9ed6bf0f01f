#include "cvcorr/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace cvcorr {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

Ini Ini::parse_string(const std::string& text, const std::string& origin) {
  Ini ini;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // strip comments (values never contain '#')
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const size_t semi = line.find(';');
    if (semi != std::string::npos) line.erase(semi);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header '" +
                          line + "'");
      section = trim(line.substr(1, line.size() - 2));
      ini.set(section, "", "");  // ensure the section exists even if empty
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                        line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    ini.set(section, key, value);
  }
  return ini;
}

Ini Ini::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path);
}

void Ini::set(const std::string& section, const std::string& key, const std::string& value) {
  for (auto& sec : sections_) {
    if (sec.first != section) continue;
    if (key.empty()) return;
    for (auto& kv : sec.second) {
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    }
    sec.second.emplace_back(key, value);
    return;
  }
  sections_.emplace_back(section,
                         std::vector<std::pair<std::string, std::string>>{});
  if (!key.empty()) sections_.back().second.emplace_back(key, value);
}

const std::string* Ini::find(const std::string& section, const std::string& key) const {
  for (const auto& sec : sections_)
    if (sec.first == section)
      for (const auto& kv : sec.second)
        if (kv.first == key) return &kv.second;
  return nullptr;
}

bool Ini::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

std::string Ini::get(const std::string& section, const std::string& key,
                     const std::string& fallback) const {
  const std::string* v = find(section, key);
  return v ? *v : fallback;
}

int64_t Ini::get_int(const std::string& section, const std::string& key, int64_t fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  char* end = nullptr;
  const long long r = std::strtoll(v->c_str(), &end, 10);
  if (end == v->c_str() || *end != '\0')
    throw ConfigError("[" + section + "] " + key + ": not an integer: '" + *v + "'");
  return r;
}

double Ini::get_double(const std::string& section, const std::string& key,
                       double fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  char* end = nullptr;
  const double r = std::strtod(v->c_str(), &end);
  if (end == v->c_str() || *end != '\0')
    throw ConfigError("[" + section + "] " + key + ": not a number: '" + *v + "'");
  return r;
}

bool Ini::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const std::string* v = find(section, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("[" + section + "] " + key + ": not a boolean: '" + *v + "'");
}

std::string Ini::serialize() const {
  std::ostringstream out;
  bool first = true;
  for (const auto& sec : sections_) {
    if (!first) out << "\n";
    first = false;
    out << "[" << sec.first << "]\n";
    for (const auto& kv : sec.second) out << kv.first << " = " << kv.second << "\n";
  }
  return out.str();
}

}  // namespace cvcorr
