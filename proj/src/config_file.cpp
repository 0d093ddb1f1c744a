#include "nmd/config_file.hpp"

#include <fstream>
#include <sstream>

namespace nmd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_config_text(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto fail = [&](const std::string& m) {
      throw ConfigFileError(origin + ":" + std::to_string(lineno) + ": " + m);
    };
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail("missing key before '='");
    if (key.find_first_of(" \t") != std::string::npos) fail("key '" + key + "' contains whitespace");
    if (!kv.emplace(key, value).second) fail("key '" + key + "' given twice");
  }
  return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigFileError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

void write_config_file(const std::filesystem::path& path, const KeyValues& kv) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace nmd
