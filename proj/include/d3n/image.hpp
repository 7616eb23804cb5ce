#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "d3n/hashing.hpp"

namespace d3n {

/// Grayscale 8-bit image, row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // height * width

    std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

Image load_image(const std::filesystem::path& path);
void save_png(const Image& img, const std::filesystem::path& path);

/// Direct rescale to size x size (no letterboxing), bilinear.
Image rescale(const Image& img, int size);

/// [1, H, W] float tensor scaled to [-1, 1].
torch::Tensor to_tensor(const Image& img);

/// Content key: SHA-256 of the decoded canonical pixel bytes
/// (width, height, then raw grayscale rows), independent of file encoding.
Sha256 content_key(const Image& img);

}  // namespace d3n
