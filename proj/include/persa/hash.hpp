#pragma once

#include <span>
#include <string>
#include <string_view>

#include "persa/tensor.hpp"

namespace persa {

// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::string& path);
// Hash over the shape and raw little-endian value bytes of a tensor.
std::string content_hash(const ad::Tensor& tensor);

}  // namespace persa
