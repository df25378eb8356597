#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tumorseg/geometry.hpp"

namespace tumorseg {

inline constexpr int kMinImageSide = 16;

/// 8-bit intensity image, interleaved channels (1 = gray, 3 = RGB).
struct Image {
  int rows = 0;
  int cols = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int r, int c, int ch, std::uint8_t fill = 0)
      : rows(r), cols(c), channels(ch), pixels(static_cast<std::size_t>(r) * c * ch, fill) {}

  std::uint8_t& at(int r, int c, int ch = 0) {
    return pixels[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
  }
  std::uint8_t at(int r, int c, int ch = 0) const {
    return pixels[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Throws ValidationError unless the image satisfies the scan invariants
/// (both sides >= 16, 1 or 3 channels, buffer size consistent).
void validate_image(const Image& image, const std::string& context = "image");

/// Gray images are replicated to three channels; RGB images are returned as is.
Image to_three_channels(const Image& image);

/// Decodes PNG or JPEG bytes. 4-channel inputs lose their alpha plane and
/// 16-bit inputs are scaled to 8 bits. Throws IoError on undecodable data.
Image decode_image(std::span<const std::uint8_t> bytes, const std::string& context = "image");
Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);

/// Foreground = any non-zero pixel of a single-channel 8-bit PNG.
BinaryMask read_mask_png(const std::filesystem::path& path);
/// Writes 0 / 255.
void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);

/// True when the bytes start with a PNG or JPEG signature.
bool looks_like_png(std::span<const std::uint8_t> bytes);
bool looks_like_jpeg(std::span<const std::uint8_t> bytes);

}  // namespace tumorseg
