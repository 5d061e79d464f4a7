#pragma once

#include <map>
#include <string>

namespace hcache {

// Flat key=value text files ('#' starts a comment line).
std::map<std::string, std::string> read_kv_file(const std::string& path);
std::map<std::string, std::string> parse_kv_text(const std::string& text);
void write_kv_file(const std::string& path,
                   const std::map<std::string, std::string>& kv);

}  // namespace hcache
