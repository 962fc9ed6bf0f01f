#pragma once

// Sectioned key=value config files:
//
//   # comment
//   [data]
//   height = 64        # inline comment
//
// Sections and keys keep insertion order so a parse -> serialize round
// trip is stable. Lookups are string-based with typed getters; a missing
// key falls back to the supplied default, a malformed value raises
// ConfigError.

#include <string>
#include <utility>
#include <vector>

#include "cvcorr/common.hpp"

namespace cvcorr {

class Ini {
 public:
  static Ini parse_string(const std::string& text, const std::string& origin = "<string>");
  static Ini parse_file(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  void set(const std::string& section, const std::string& key, const std::string& value);
  std::string serialize() const;

  const std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>>&
  sections() const {
    return sections_;
  }

 private:
  const std::string* find(const std::string& section, const std::string& key) const;
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections_;
};

}  // namespace cvcorr
