#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "modelzoo/error.hpp"

namespace modelzoo {

// A config problem tied to one section (and key, when there is one).
class ConfigKeyError : public ConfigError {
 public:
  ConfigKeyError(std::string section, std::string key, const std::string& what)
      : ConfigError("config", "[" + section + "]" + (key.empty() ? "" : " " + key) + ": " + what),
        section_(std::move(section)),
        key_(std::move(key)) {}
  const std::string& section() const { return section_; }
  const std::string& key() const { return key_; }

 private:
  std::string section_;
  std::string key_;
};

/// Plain-text config: `[section]` headers, `key = value` lines, `#` comments.
/// Booleans are true/false and lists are comma-separated (`none` for empty). Every lookup marks
/// the key as read so leftovers can be rejected as typos.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& source = "<string>");
  static Config load(const std::filesystem::path& path);

  bool has_section(const std::string& section) const;
  bool has(const std::string& section, const std::string& key) const;
  void require_section(const std::string& section) const;

  std::string str(const std::string& section, const std::string& key) const;
  std::string str(const std::string& section, const std::string& key, const std::string& fallback) const;
  double real(const std::string& section, const std::string& key) const;
  double real(const std::string& section, const std::string& key, double fallback) const;
  long integer(const std::string& section, const std::string& key, long fallback) const;
  std::size_t count(const std::string& section, const std::string& key, std::size_t fallback) const;
  std::uint64_t u64(const std::string& section, const std::string& key) const;
  bool flag(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<std::size_t> counts(const std::string& section, const std::string& key,
                                  std::vector<std::size_t> fallback) const;

  // Throws on the first key that was never looked up.
  void reject_unread() const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
    mutable bool read = false;
  };
  const Entry* find(const std::string& section, const std::string& key) const;
  const Entry& need(const std::string& section, const std::string& key) const;

  std::string source_;
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

}  // namespace modelzoo
