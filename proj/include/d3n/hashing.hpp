#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include <torch/torch.h>

namespace d3n {

using Sha256 = std::array<std::uint8_t, 32>;

Sha256 sha256(std::span<const std::uint8_t> bytes);
Sha256 sha256_file(const std::filesystem::path& path);

std::string to_hex(const Sha256& digest);
Sha256 from_hex(const std::string& hex);

/// Digest of every named parameter and buffer of a module, in name order.
/// Stable across save/load; used for frozen-state checks.
Sha256 module_state_hash(const torch::nn::Module& module);

/// 64-bit mix of a digest, for seeding per-image RNG streams.
std::uint64_t seed_from_hash(const Sha256& digest, std::uint64_t salt = 0);

/// Decorrelated child seed for (base, stream) pairs.
std::uint64_t seed_mix(std::uint64_t base, std::uint64_t stream);

}  // namespace d3n
