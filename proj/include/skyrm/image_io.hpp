#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "skyrm/image.hpp"

namespace skyrm {

/// Raw 8-bit greyscale raster.
using Gray8 = Grid<std::uint8_t>;

/// Reads a binary PGM (P5, maxval 255) or an 8-bit greyscale PNG, chosen by
/// file signature. Throws FormatError naming the file for anything else.
Gray8 read_gray8(const std::filesystem::path& path);

/// Writes PNG or PGM depending on the extension (".pgm" -> P5, else PNG).
void write_gray8(const std::filesystem::path& path, const Gray8& pixels);

/// Pixel v -> v / 255.
Image load_image(const std::filesystem::path& path);
/// Quantizes round(clamp(v, 0, 1) * 255).
void save_image(const std::filesystem::path& path, const Image& image);

Gray8 quantize(const Image& image);
Image dequantize(const Gray8& pixels);

// Mask files are greyscale: 0 background, 128 skyrmion, 255 defect.
inline constexpr std::uint8_t kMaskLevels[3] = {0, 128, 255};

/// Throws DataError with the first offending pixel's coordinates on a value
/// outside {0, 128, 255} or a class index >= num_classes.
ClassMask load_mask(const std::filesystem::path& path, int num_classes);
void save_mask(const std::filesystem::path& path, const ClassMask& mask);

}  // namespace skyrm
