#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>

#include "internal.hpp"

namespace unglass {
namespace synth_detail {

Components connected_components(const Image& mask) {
  const int h = mask.height(), w = mask.width();
  Components out;
  out.width = w;
  out.label.assign(std::size_t(h) * w, -1);
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask(0, 0, y, x) < 0.5f || out.at(y, x) >= 0) continue;
      const int id = out.count++;
      out.label[std::size_t(y) * w + x] = id;
      queue.emplace_back(y, x);
      while (!queue.empty()) {
        auto [cy, cx] = queue.front();
        queue.pop_front();
        const int ny[4] = {cy - 1, cy + 1, cy, cy};
        const int nx[4] = {cx, cx, cx - 1, cx + 1};
        for (int k = 0; k < 4; ++k) {
          if (ny[k] < 0 || nx[k] < 0 || ny[k] >= h || nx[k] >= w) continue;
          auto& l = out.label[std::size_t(ny[k]) * w + nx[k]];
          if (l >= 0 || mask(0, 0, ny[k], nx[k]) < 0.5f) continue;
          l = id;
          queue.emplace_back(ny[k], nx[k]);
        }
      }
    }
  }
  return out;
}

std::vector<ComponentStats> component_stats(const Components& comps, int height) {
  std::vector<ComponentStats> stats(comps.count);
  for (auto& s : stats) {
    s.min_x = s.min_y = 1 << 30;
    s.max_x = s.max_y = -1;
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < comps.width; ++x) {
      const int l = comps.at(y, x);
      if (l < 0) continue;
      auto& s = stats[l];
      s.centroid += Point(x, y);
      ++s.pixels;
      s.min_x = std::min(s.min_x, x);
      s.max_x = std::max(s.max_x, x);
      s.min_y = std::min(s.min_y, y);
      s.max_y = std::max(s.max_y, y);
    }
  }
  for (auto& s : stats) s.centroid /= double(std::max(s.pixels, 1));
  return stats;
}

}  // namespace synth_detail

using synth_detail::component_stats;
using synth_detail::connected_components;

double refraction_displacement(double strength, double rim_distance, double band_width) {
  if (band_width <= 0 || rim_distance >= band_width) return 0.0;
  const double t = std::clamp(rim_distance / band_width, 0.0, 1.0);
  return strength * (1.0 - t * t * (3.0 - 2.0 * t));
}

Image apply_refraction(const Image& face, const Image& lens_mask, double strength) {
  Image out = face;
  if (strength == 0.0) return out;
  const int h = face.height(), w = face.width();
  const auto comps = connected_components(lens_mask);
  const auto stats = component_stats(comps, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int l = comps.at(y, x);
      if (l < 0) continue;
      const auto& s = stats[l];
      const double band = 0.25 * s.width();
      const int reach = int(std::ceil(band)) + 1;
      // Distance from this pixel center to the nearest center outside the lens.
      double rim = reach + 1.0;
      for (int dy = -reach; dy <= reach; ++dy) {
        for (int dx = -reach; dx <= reach; ++dx) {
          const int yy = y + dy, xx = x + dx;
          const bool outside = yy < 0 || xx < 0 || yy >= h || xx >= w || comps.at(yy, xx) != l;
          if (outside) rim = std::min(rim, std::hypot(double(dx), double(dy)));
        }
      }
      const double d = refraction_displacement(strength, rim, band);
      if (d == 0.0) continue;
      Point dir = Point(x, y) - s.centroid;
      const double len = dir.norm();
      if (len == 0.0) continue;
      const Point src = Point(x, y) + d * dir / len;
      for (int c = 0; c < face.channels(); ++c) out(0, c, y, x) = sample_bilinear(face, c, src.x(), src.y());
    }
  }
  return out;
}

namespace {

// Porter-Duff over of (rgb, a_src) onto the RGBA pixel at (y, x).
void over_pixel(Image& rgba, int y, int x, const Eigen::Vector3d& rgb, double a_src) {
  const double a_dst = rgba(0, 3, y, x);
  const double a_out = a_src + a_dst * (1.0 - a_src);
  if (a_out <= 0) return;
  for (int c = 0; c < 3; ++c) {
    const double v = (a_src * rgb[c] + a_dst * (1.0 - a_src) * rgba(0, c, y, x)) / a_out;
    rgba(0, c, y, x) = float(v);
  }
  rgba(0, 3, y, x) = float(a_out);
}

}  // namespace

GlassesTemplate apply_tint(const GlassesTemplate& t, const Eigen::Vector3d& color, double alpha) {
  GlassesTemplate out = t;
  if (alpha == 0.0) return out;
  for (int y = 0; y < t.lens_mask.height(); ++y) {
    for (int x = 0; x < t.lens_mask.width(); ++x) {
      if (t.lens_mask(0, 0, y, x) >= 0.5f) over_pixel(out.color_layer, y, x, color, alpha);
    }
  }
  return out;
}

GlassesTemplate add_glare_spot(const GlassesTemplate& t, const GlareSpot& spot) {
  GlassesTemplate out = t;
  const int h = t.lens_mask.height(), w = t.lens_mask.width();
  const int cx = int(std::lround(spot.center.x())), cy = int(std::lround(spot.center.y()));
  if (cx < 0 || cy < 0 || cx >= w || cy >= h || t.lens_mask(0, 0, cy, cx) < 0.5f) return out;
  const auto comps = connected_components(t.lens_mask);
  const int target = comps.at(cy, cx);
  constexpr double kSigma = 0.15;  // edge falloff, in units of the spot radius
  const double ca = std::cos(spot.angle), sa = std::sin(spot.angle);
  const Eigen::Vector3d white(1, 1, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (comps.at(y, x) != target) continue;
      const double dx = x - spot.center.x(), dy = y - spot.center.y();
      const double u = (ca * dx + sa * dy) / spot.radius_x;
      const double v = (-sa * dx + ca * dy) / spot.radius_y;
      const double r = std::sqrt(u * u + v * v);
      double a = spot.peak_alpha;
      if (r > 1.0) a *= std::exp(-(r - 1.0) * (r - 1.0) / (2.0 * kSigma * kSigma));
      if (a < 1e-4) continue;
      over_pixel(out.color_layer, y, x, white, a);
    }
  }
  return out;
}

GlassesTemplate apply_glare(const GlassesTemplate& t, Rng& rng, const SynthesisConfig& cfg) {
  if (!rng.bernoulli(cfg.glare_probability)) return t;
  const int count = rng.integer(cfg.glare_count_min, cfg.glare_count_max);
  std::vector<std::pair<int, int>> lens_pixels;
  for (int y = 0; y < t.lens_mask.height(); ++y) {
    for (int x = 0; x < t.lens_mask.width(); ++x) {
      if (t.lens_mask(0, 0, y, x) >= 0.5f) lens_pixels.emplace_back(y, x);
    }
  }
  if (lens_pixels.empty()) return t;
  const auto comps = connected_components(t.lens_mask);
  const auto stats = component_stats(comps, t.lens_mask.height());
  GlassesTemplate out = t;
  for (int k = 0; k < count; ++k) {
    const auto [y, x] = lens_pixels[rng.integer(0, int(lens_pixels.size()) - 1)];
    const double width = stats[comps.at(y, x)].width();
    GlareSpot spot;
    spot.center = Point(x, y);
    spot.radius_x = std::max(0.75, rng.uniform(0.12, 0.3) * width);
    spot.radius_y = std::max(0.75, rng.uniform(0.08, 0.2) * width);
    spot.angle = rng.uniform(0.0, std::numbers::pi);
    spot.peak_alpha = rng.uniform(0.3, 0.8);
    out = add_glare_spot(out, spot);
  }
  return out;
}

}  // namespace unglass
