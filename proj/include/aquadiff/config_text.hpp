#pragma once

// Flat key=value configuration text.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace aquadiff {

using KeyValues = std::map<std::string, std::string>;

/// Parses "key = value" lines. Blank lines and '#' comments are skipped.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Shortest text that parses back to the same double.
std::string format_double(double v);
std::string join_ints(const std::vector<int>& v);
std::string join_doubles(const std::vector<double>& v);

// Each reader leaves `out` unchanged when the key is absent and throws
// ParameterError on a malformed value.
void read_value(const KeyValues& kv, const std::string& key, int& out);
void read_value(const KeyValues& kv, const std::string& key, double& out);
void read_value(const KeyValues& kv, const std::string& key, bool& out);
void read_value(const KeyValues& kv, const std::string& key, std::uint64_t& out);
void read_value(const KeyValues& kv, const std::string& key, std::string& out);
void read_value(const KeyValues& kv, const std::string& key, std::vector<int>& out);
void read_value(const KeyValues& kv, const std::string& key, std::vector<double>& out);

}  // namespace aquadiff
