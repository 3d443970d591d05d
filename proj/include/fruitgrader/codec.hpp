#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fruitgrader/image.hpp"

namespace fruitgrader::imaging {

enum class ImageFormat { Png, Ppm };

/// Decodes 8-bit PNG (gray, gray+alpha, RGB, RGBA, palette) or binary PPM (P6).
/// Alpha is dropped; samples become v/255.
Image decode_image(std::span<const std::uint8_t> bytes, ImageFormat format);

/// Sniffs the signature and dispatches to decode_image.
Image decode_image(std::span<const std::uint8_t> bytes);

/// 8-bit PNG, gray or RGB according to channel count. Samples are rounded
/// to the nearest 1/255 step.
std::vector<std::uint8_t> encode_png(const Image& img);

std::vector<std::uint8_t> encode_ppm(const Image& img);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

Image load_image(const std::filesystem::path& path);
void save_png(const Image& img, const std::filesystem::path& path);

/// Cheap decodability check: signature and header only.
bool probe_image(const std::filesystem::path& path);

/// True for extensions the loader understands (.png, .ppm).
bool is_image_path(const std::filesystem::path& path);

}  // namespace fruitgrader::imaging
