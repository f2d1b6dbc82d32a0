#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fkd {

// Flat UTF-8 `key = value` file, one entry per line. `#` starts a comment
// line. Shared by bundle manifests and run configs.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValueFile load(const std::filesystem::path& path);

  void save(const std::filesystem::path& path) const;
  std::string serialize() const;

  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  std::optional<std::string> find(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

  // Typed accessors. All throw ParseError naming the key on a bad value.
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& fallback) const;

  const std::string& origin() const { return origin_; }

 private:
  std::map<std::string, std::string> entries_;
  std::string origin_;
};

std::vector<std::string> split_list(const std::string& value, char sep = ',');
std::string trim(const std::string& s);

}  // namespace fkd
