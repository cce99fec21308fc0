#include "factorizer/config.hpp"

#include <fstream>
#include <sstream>

namespace factorizer {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvMap parse_kv_text(const std::string& text) {
  KvMap out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " has no '=': " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + " has an empty key");
    out[key] = value;
  }
  return out;
}

KvMap load_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_kv_text(buf.str());
}

std::string serialize_kv(const KvMap& map) {
  std::ostringstream os;
  for (const auto& [k, v] : map) os << k << " = " << v << '\n';
  return os.str();
}

std::string KvView::get_str(const std::string& key, const std::string& fallback) const {
  auto it = map_.find(key);
  return it == map_.end() ? fallback : it->second;
}

int64_t KvView::get_int(const std::string& key, int64_t fallback) const {
  auto it = map_.find(key);
  if (it == map_.end()) return fallback;
  try {
    size_t pos = 0;
    int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects an integer, got '" + it->second + "'");
  }
}

double KvView::get_double(const std::string& key, double fallback) const {
  auto it = map_.find(key);
  if (it == map_.end()) return fallback;
  try {
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got '" + it->second + "'");
  }
}

bool KvView::get_bool(const std::string& key, bool fallback) const {
  auto it = map_.find(key);
  if (it == map_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "' expects a boolean, got '" + v + "'");
}

KvMap to_kv(const FactorizerConfig& cfg) {
  KvMap m;
  m["model.in_channels"] = std::to_string(cfg.in_channels);
  m["model.base_channels"] = std::to_string(cfg.base_channels);
  m["model.out_channels"] = std::to_string(cfg.out_channels);
  m["model.mode"] = to_string(cfg.mode);
  m["model.head_dim"] = std::to_string(cfg.head_dim);
  m["model.patch"] = std::to_string(cfg.patch);
  m["model.blocks_per_stage"] = std::to_string(cfg.blocks_per_stage);
  m["model.deep_supervision"] = cfg.deep_supervision ? "true" : "false";
  m["model.positional_embedding"] = cfg.positional_embedding ? "true" : "false";
  m["model.patch_size"] = std::to_string(cfg.patch_size);
  m["nmf.rank"] = std::to_string(cfg.nmf.rank);
  m["nmf.iterations"] = std::to_string(cfg.nmf.iterations);
  m["nmf.solver"] = to_string(cfg.nmf.solver);
  {
    std::ostringstream os;
    os.precision(17);
    os << cfg.nmf.eps;
    m["nmf.eps"] = os.str();
  }
  return m;
}

FactorizerConfig factorizer_config_from_kv(const KvMap& map) {
  KvView v(map);
  FactorizerConfig cfg;
  cfg.in_channels = v.get_int("model.in_channels", cfg.in_channels);
  cfg.base_channels = v.get_int("model.base_channels", cfg.base_channels);
  cfg.out_channels = v.get_int("model.out_channels", cfg.out_channels);
  cfg.mode = matricize_mode_from_string(v.get_str("model.mode", to_string(cfg.mode)));
  cfg.head_dim = v.get_int("model.head_dim", cfg.head_dim);
  cfg.patch = v.get_int("model.patch", cfg.patch);
  cfg.blocks_per_stage = v.get_int("model.blocks_per_stage", cfg.blocks_per_stage);
  cfg.deep_supervision = v.get_bool("model.deep_supervision", cfg.deep_supervision);
  cfg.positional_embedding = v.get_bool("model.positional_embedding", cfg.positional_embedding);
  cfg.patch_size = v.get_int("model.patch_size", cfg.patch_size);
  cfg.nmf.rank = v.get_int("nmf.rank", cfg.nmf.rank);
  cfg.nmf.iterations = v.get_int("nmf.iterations", cfg.nmf.iterations);
  cfg.nmf.solver = nmf_solver_from_string(v.get_str("nmf.solver", to_string(cfg.nmf.solver)));
  cfg.nmf.eps = v.get_double("nmf.eps", cfg.nmf.eps);
  return cfg;
}

}  // namespace factorizer
