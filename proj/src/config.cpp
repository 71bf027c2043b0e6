#include "modelzoo/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace modelzoo {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

}  // namespace

Config Config::parse(const std::string& text, const std::string& source) {
  Config cfg;
  cfg.source_ = source;
  std::istringstream in(text);
  std::string raw, section;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigKeyError(section, "", source + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!valid_name(section)) fail("bad section name '" + section + "'");
      if (cfg.sections_.contains(section)) fail("duplicate section");
      cfg.sections_[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    if (section.empty()) fail("key outside any section");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!valid_name(key)) fail("bad key '" + key + "'");
    if (value.empty()) fail("empty value for '" + key + "'");
    auto& keys = cfg.sections_[section];
    if (keys.contains(key)) fail("duplicate key '" + key + "'");
    keys[key] = Entry{value, line_no, false};
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigKeyError("", "", "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

bool Config::has_section(const std::string& section) const { return sections_.contains(section); }

bool Config::has(const std::string& section, const std::string& key) const { return find(section, key) != nullptr; }

void Config::require_section(const std::string& section) const {
  if (!has_section(section)) throw ConfigKeyError(section, "", "missing section");
}

const Config::Entry* Config::find(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  if (k == s->second.end()) return nullptr;
  k->second.read = true;
  return &k->second;
}

const Config::Entry& Config::need(const std::string& section, const std::string& key) const {
  const Entry* e = find(section, key);
  if (!e) throw ConfigKeyError(section, key, "required key missing");
  return *e;
}

std::string Config::str(const std::string& section, const std::string& key) const { return need(section, key).value; }

std::string Config::str(const std::string& section, const std::string& key, const std::string& fallback) const {
  const Entry* e = find(section, key);
  return e ? e->value : fallback;
}

double Config::real(const std::string& section, const std::string& key) const {
  double v = 0.0;
  if (!parse_number(need(section, key).value, v)) throw ConfigKeyError(section, key, "expected a number");
  return v;
}

double Config::real(const std::string& section, const std::string& key, double fallback) const {
  return has(section, key) ? real(section, key) : fallback;
}

long Config::integer(const std::string& section, const std::string& key, long fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  long v = 0;
  if (!parse_number(e->value, v)) throw ConfigKeyError(section, key, "expected an integer");
  return v;
}

std::size_t Config::count(const std::string& section, const std::string& key, std::size_t fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  std::size_t v = 0;
  if (!parse_number(e->value, v)) throw ConfigKeyError(section, key, "expected a nonnegative integer");
  return v;
}

std::uint64_t Config::u64(const std::string& section, const std::string& key) const {
  std::uint64_t v = 0;
  if (!parse_number(need(section, key).value, v)) throw ConfigKeyError(section, key, "expected a nonnegative integer");
  return v;
}

bool Config::flag(const std::string& section, const std::string& key, bool fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  if (e->value == "true") return true;
  if (e->value == "false") return false;
  throw ConfigKeyError(section, key, "expected true or false");
}

std::vector<std::size_t> Config::counts(const std::string& section, const std::string& key,
                                        std::vector<std::size_t> fallback) const {
  const Entry* e = find(section, key);
  if (!e) return fallback;
  std::vector<std::size_t> out;
  if (e->value == "none") return out;
  std::stringstream ss(e->value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    std::size_t v = 0;
    if (!parse_number(item, v)) throw ConfigKeyError(section, key, "expected a comma-separated list of integers");
    out.push_back(v);
  }
  return out;
}

void Config::reject_unread() const {
  for (const auto& [section, keys] : sections_)
    for (const auto& [key, entry] : keys)
      if (!entry.read)
        throw ConfigKeyError(section, key,
                             "unknown key (" + source_ + ":" + std::to_string(entry.line) + ")");
}

}  // namespace modelzoo
