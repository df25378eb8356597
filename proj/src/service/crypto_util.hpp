#pragma once

#include <string>
#include <vector>

namespace tumorseg::detail {

std::vector<unsigned char> random_bytes(std::size_t n);
std::string to_hex(const std::vector<unsigned char>& bytes);
/// Empty on malformed input.
std::vector<unsigned char> from_hex(const std::string& text);
/// Hex HMAC-SHA256 of `message` under `key`.
std::string hmac_sha256_hex(const std::string& key, const std::string& message);

}  // namespace tumorseg::detail
