#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace rsvqa {

/// Lowercase hex SHA-256 digest of a byte buffer.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& bytes);
std::string sha256_hex(const std::vector<unsigned char>& bytes);

}  // namespace rsvqa
