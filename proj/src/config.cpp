#include "vmscan/config.hpp"

#include <fstream>

#include "vmscan/errors.hpp"

namespace vmscan {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  Config cfg;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected key = value at line " +
                        std::to_string(lineno));
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    try {
      if (key == "spill_dir") {
        cfg.spill_dir = value;
      } else if (key == "block_size") {
        cfg.block_size = static_cast<uint32_t>(std::stoul(value));
      } else if (key == "fs_offset") {
        cfg.fs_offset = std::stoull(value);
      } else if (key == "hash_truncation") {
        cfg.hash_truncation = std::stoul(value);
      } else {
        throw ConfigError("config: unknown key '" + key + "' at line " +
                          std::to_string(lineno));
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("config: bad value for '" + key + "' at line " +
                        std::to_string(lineno));
    }
  }
  return cfg;
}

}  // namespace vmscan
