#pragma once

#include <filesystem>
#include <stdexcept>

#include "unglass/image.hpp"

namespace unglass {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit PNG with 1 (gray), 2 (gray+alpha), 3 (RGB) or 4 (RGBA) channels.
/// Values are mapped to [0, 1].
Image read_png(const std::filesystem::path& path);

/// Writes [0, 1] values, rounded to 8 bits. The channel count selects the
/// PNG color type.
void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace unglass
