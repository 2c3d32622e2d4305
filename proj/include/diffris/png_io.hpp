#pragma once

#include <filesystem>

#include "diffris/types.hpp"

namespace diffris::png {

// 8-bit RGB; pixel values are rounded to the nearest of 256 levels.
void write_image(const std::filesystem::path& path, const Image& image);
Image read_image(const std::filesystem::path& path);

// 1-bit grayscale.
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);
BinaryMask read_mask(const std::filesystem::path& path);

}  // namespace diffris::png
