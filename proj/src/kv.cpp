#include "fusekd/kv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "fusekd/error.hpp"

namespace fkd {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& value, char sep) {
  std::vector<std::string> out;
  if (trim(value).empty()) return out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

KeyValueFile KeyValueFile::parse(const std::string& text, const std::string& origin) {
  KeyValueFile kv;
  kv.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::ParseError,
                  origin + ":" + std::to_string(lineno) + ": expected `key = value`, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) {
      throw Error(ErrorCode::ParseError, origin + ":" + std::to_string(lineno) + ": empty key");
    }
    if (kv.entries_.count(key)) {
      throw Error(ErrorCode::ParseError,
                  origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    kv.entries_[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string KeyValueFile::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

void KeyValueFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << serialize();
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

std::optional<std::string> KeyValueFile::find(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

namespace {

[[noreturn]] void bad_value(const KeyValueFile& kv, const std::string& key, const std::string& v,
                            const char* expected) {
  throw Error(ErrorCode::ParseError,
              kv.origin() + ": key '" + key + "': expected " + expected + ", got '" + v + "'");
}

template <typename I>
I parse_integer(const KeyValueFile& kv, const std::string& key, const std::string& v) {
  I out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) bad_value(kv, key, v, "an integer");
  return out;
}

}  // namespace

std::string KeyValueFile::get_string(const std::string& key) const {
  auto v = find(key);
  if (!v) throw Error(ErrorCode::ParseError, origin_ + ": missing key '" + key + "'");
  return *v;
}

std::string KeyValueFile::get_string(const std::string& key, const std::string& fallback) const {
  return find(key).value_or(fallback);
}

double KeyValueFile::get_double(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) bad_value(*this, key, v, "a number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(*this, key, v, "a number");
  }
}

double KeyValueFile::get_double(const std::string& key, double fallback) const {
  return contains(key) ? get_double(key) : fallback;
}

std::int64_t KeyValueFile::get_int(const std::string& key) const {
  return parse_integer<std::int64_t>(*this, key, get_string(key));
}

std::int64_t KeyValueFile::get_int(const std::string& key, std::int64_t fallback) const {
  return contains(key) ? get_int(key) : fallback;
}

std::uint64_t KeyValueFile::get_u64(const std::string& key, std::uint64_t fallback) const {
  return contains(key) ? parse_integer<std::uint64_t>(*this, key, get_string(key)) : fallback;
}

bool KeyValueFile::get_bool(const std::string& key, bool fallback) const {
  if (!contains(key)) return fallback;
  const std::string v = get_string(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(*this, key, v, "a boolean");
}

std::vector<std::string> KeyValueFile::get_list(const std::string& key) const {
  return split_list(get_string(key));
}

std::vector<std::string> KeyValueFile::get_list(const std::string& key,
                                                const std::vector<std::string>& fallback) const {
  return contains(key) ? get_list(key) : fallback;
}

}  // namespace fkd
