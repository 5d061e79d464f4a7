#include "hcache/config_file.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hcache {

namespace {
std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line without '=': " + line);
    out[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_kv_text(ss.str());
}

void write_kv_file(const std::string& path,
                   const std::map<std::string, std::string>& kv) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("config: cannot write " + path);
  for (const auto& [k, v] : kv) f << k << "=" << v << "\n";
}

}  // namespace hcache
