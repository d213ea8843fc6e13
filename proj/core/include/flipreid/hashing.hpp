#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace flipreid {

/// Lowercase hex SHA-1 of `data`.
std::string sha1_hex(std::span<const std::uint8_t> data);
std::string sha1_hex(std::string_view text);

/// Git blob object id: SHA-1 over "blob <size>\0" followed by the content.
std::string git_blob_hash(std::span<const std::uint8_t> data);

} // namespace flipreid
