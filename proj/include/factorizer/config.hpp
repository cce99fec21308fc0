#pragma once

#include <map>
#include <string>

#include "factorizer/network.hpp"

namespace factorizer {

// Line-oriented `key = value` configuration. `#` starts a comment; dotted
// keys express nesting (e.g. nmf.rank = 1).
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
KvMap load_kv_file(const std::string& path);
std::string serialize_kv(const KvMap& map);  // sorted keys, stable output

/// Typed access with defaults; malformed values raise ConfigError naming the key.
class KvView {
 public:
  explicit KvView(const KvMap& map) : map_(map) {}
  bool has(const std::string& key) const { return map_.count(key) != 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

 private:
  const KvMap& map_;
};

KvMap to_kv(const FactorizerConfig& cfg);
FactorizerConfig factorizer_config_from_kv(const KvMap& map);

}  // namespace factorizer
