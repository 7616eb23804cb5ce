#pragma once

#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "vendor_json.hpp"

namespace d3n {

/// Single-file checkpoint: magic (4 bytes), u32 header length, UTF-8 JSON
/// header, then a libtorch archive with the module state.
void save_checkpoint(const std::filesystem::path& path, const std::string& magic,
                     const nlohmann::json& header, const torch::nn::Module& module);

/// Reads the header and restores parameters/buffers into `module`
/// (which must already have the right architecture).
nlohmann::json load_checkpoint(const std::filesystem::path& path, const std::string& magic,
                               torch::nn::Module& module);

/// Header only, without touching any module.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path, const std::string& magic);

}  // namespace d3n
