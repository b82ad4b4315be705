#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "unglass/tensor.hpp"

namespace unglass {

/// Single image or mask: a (1, C, H, W) float tensor. Synthesis works on
/// [0, 1] values; network-facing images are [-1, 1].
using Image = Tensor<float>;

inline Image make_image(int channels, int height, int width, float fill = 0.f) {
  return Image::constant(1, channels, height, width, fill);
}

inline Image to_signed(const Image& unit) {
  Image out = unit;
  out.values() = unit.values().array() * 2.f - 1.f;
  return out;
}

inline Image to_unit(const Image& signed_image) {
  Image out = signed_image;
  out.values() = ((signed_image.values().array() + 1.f) * 0.5f).cwiseMax(0.f).cwiseMin(1.f);
  return out;
}

/// Channels [first, first+count) of a single image.
inline Image channel_slice(const Image& img, int first, int count = 1) {
  Image out(1, count, img.height(), img.width());
  out.sample(0) = img.sample(0).middleRows(first, count);
  return out;
}

/// Bilinear sample of channel `c` at continuous pixel-center coordinates,
/// clamping to the border. Written in lerp form so constant regions are
/// reproduced exactly.
inline float sample_bilinear(const Image& img, int c, double x, double y) {
  const int w = img.width(), h = img.height();
  x = std::clamp(x, 0.0, double(w - 1));
  y = std::clamp(y, 0.0, double(h - 1));
  const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const float fx = float(x - x0), fy = float(y - y0);
  const float a = img(0, c, y0, x0), b = img(0, c, y0, x1);
  const float d = img(0, c, y1, x0), e = img(0, c, y1, x1);
  const float top = a + fx * (b - a);
  const float bottom = d + fx * (e - d);
  return top + fy * (bottom - top);
}

/// Bilinear sample treating everything outside the image as zero.
inline float sample_bilinear_zero(const Image& img, int c, double x, double y) {
  const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
  const float fx = float(x - x0), fy = float(y - y0);
  auto at = [&](int yy, int xx) -> float {
    if (xx < 0 || yy < 0 || xx >= img.width() || yy >= img.height()) return 0.f;
    return img(0, c, yy, xx);
  };
  const float a = at(y0, x0), b = at(y0, x0 + 1), d = at(y0 + 1, x0), e = at(y0 + 1, x0 + 1);
  const float top = a + fx * (b - a);
  const float bottom = d + fx * (e - d);
  return top + fy * (bottom - top);
}

/// Square-neighbourhood (Chebyshev) dilation of a binary mask.
inline Image dilate(const Image& mask, int radius) {
  Image out = make_image(1, mask.height(), mask.width());
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (mask(0, 0, y, x) < 0.5f) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && xx >= 0 && yy < mask.height() && xx < mask.width()) out(0, 0, yy, xx) = 1.f;
        }
      }
    }
  }
  return out;
}

/// `base` with `patch` pasted wherever dilate(mask > 0.5, radius) is set.
inline Image paste_inside_mask(const Image& base, const Image& patch, const Image& mask, int radius) {
  base.require_same(patch, "paste_inside_mask");
  Image hard = make_image(1, mask.height(), mask.width());
  hard.values() = (mask.sample(0).row(0).transpose().array() > 0.5f).cast<float>();
  const Image region = dilate(hard, radius);
  Image out = base;
  for (int c = 0; c < base.channels(); ++c) {
    out.sample(0).row(c) = (region.sample(0).row(0).array() > 0.5f).select(patch.sample(0).row(c), base.sample(0).row(c));
  }
  return out;
}

}  // namespace unglass
