#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "deepsnake/image.hpp"

namespace deepsnake {

// 8-bit gray or RGB, PNG or binary PGM (P5) / PPM (P6). Samples are mapped
// to [0, 1] by dividing by 255. Format is detected from the file content.

RasterImage read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const RasterImage& image);

/// Masks are images thresholded at 0.5 (gray level 128).
BinaryMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);

RasterImage decode_image(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const RasterImage& image);
std::vector<std::uint8_t> encode_pnm(const RasterImage& image);

}  // namespace deepsnake
