#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace keyrestore {

/// Parses "key = value" lines; '#' starts a comment, blank lines are
/// ignored. Throws ConfigError with the line number on malformed input.
std::vector<std::pair<std::string, std::string>> read_key_values(const std::filesystem::path& path);
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& origin);

std::size_t parse_size(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& value);

}  // namespace keyrestore
