#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fsens {

// Flat key=value text: one pair per line, `#` starts a comment, blank lines
// ignored, surrounding whitespace trimmed. Duplicate keys are rejected.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text,
                                                                  const std::string& origin);

// Strict scalar parsers; the message names the key on failure.
std::uint64_t parse_u64(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

}  // namespace fsens
