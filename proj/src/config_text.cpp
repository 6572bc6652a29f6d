#include "aquadiff/config_text.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "aquadiff/image.hpp"

namespace aquadiff {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value) {
  throw ParameterError("config: bad value for " + key + ": '" + value + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) bad(key, text);
  return v;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::string s = trim(text);
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, item));
  return out;
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError("config line " + std::to_string(n) + ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

void read_value(const KeyValues& kv, const std::string& key, int& out) {
  if (auto it = kv.find(key); it != kv.end()) out = parse_number<int>(key, it->second);
}

void read_value(const KeyValues& kv, const std::string& key, double& out) {
  if (auto it = kv.find(key); it != kv.end()) out = parse_number<double>(key, it->second);
}

void read_value(const KeyValues& kv, const std::string& key, std::uint64_t& out) {
  if (auto it = kv.find(key); it != kv.end()) out = parse_number<std::uint64_t>(key, it->second);
}

void read_value(const KeyValues& kv, const std::string& key, bool& out) {
  auto it = kv.find(key);
  if (it == kv.end()) return;
  const std::string& v = it->second;
  if (v == "1" || v == "true") {
    out = true;
  } else if (v == "0" || v == "false") {
    out = false;
  } else {
    bad(key, v);
  }
}

void read_value(const KeyValues& kv, const std::string& key, std::string& out) {
  if (auto it = kv.find(key); it != kv.end()) out = it->second;
}

void read_value(const KeyValues& kv, const std::string& key, std::vector<int>& out) {
  if (auto it = kv.find(key); it != kv.end()) out = parse_list<int>(key, it->second);
}

void read_value(const KeyValues& kv, const std::string& key, std::vector<double>& out) {
  if (auto it = kv.find(key); it != kv.end()) out = parse_list<double>(key, it->second);
}

}  // namespace aquadiff
