#pragma once

#include <vector>

#include "unglass/synthkit.hpp"

namespace unglass::synth_detail {

/// 4-connected components of a binary mask. Labels are -1 outside the mask.
struct Components {
  std::vector<int> label;  // row-major, size h*w
  int count = 0;
  int width = 0;

  int at(int y, int x) const { return label[std::size_t(y) * width + x]; }
};

Components connected_components(const Image& mask);

struct ComponentStats {
  Point centroid = Point::Zero();
  int min_x = 0, max_x = 0, min_y = 0, max_y = 0;
  int pixels = 0;
  int width() const { return max_x - min_x + 1; }
};

std::vector<ComponentStats> component_stats(const Components& comps, int height);

}  // namespace unglass::synth_detail
