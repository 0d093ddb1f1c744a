#pragma once

#include <filesystem>
#include <string>

#include "nmd/model.hpp"

namespace nmd {

/// Parses `key = value` lines. Blank lines and `#` comments are skipped; a
/// malformed or repeated key throws ConfigFileError naming `origin:line`.
KeyValues parse_config_text(const std::string& text, const std::string& origin);
KeyValues read_config_file(const std::filesystem::path& path);
/// Writes keys in sorted order, one `key = value` per line.
void write_config_file(const std::filesystem::path& path, const KeyValues& kv);

class ConfigFileError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace nmd
