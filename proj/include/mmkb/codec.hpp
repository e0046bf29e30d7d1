#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmkb {

/// Decodes UTF-8 into Unicode scalar values. Invalid sequences decode to U+FFFD.
std::u32string utf8_decode(std::string_view text);
std::string utf8_encode(std::u32string_view text);
std::string utf8_encode(char32_t cp);

/// Number of Unicode scalar values in a UTF-8 string.
std::size_t utf8_length(std::string_view text);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

/// 64-bit FNV-1a. Stable across platforms, used for seeding.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string trim(std::string_view s);
/// ASCII case fold; non-ASCII bytes pass through.
std::string ascii_lower(std::string_view s);

/// Rounds numerator/denominator to `decimals` places, half-up, with exact integer arithmetic.
double ratio_half_up(std::uint64_t numerator, std::uint64_t denominator, int decimals);

/// Formats a value with a fixed number of decimals ("6.27", "35.0").
std::string format_fixed(double value, int decimals);

} // namespace mmkb
