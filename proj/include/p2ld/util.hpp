#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace p2ld {

/// Uniform integer in [0, bound) by rejection sampling, so results do not depend on
/// the standard library's distribution implementation.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t bound);

/// Fisher–Yates shuffle driven by uniform_index.
void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng);

/// Writes to `<path>.tmp` and renames over `path`.
void write_text_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace p2ld
