#include <cmath>
#include <functional>

#include "unglass/synthkit.hpp"

namespace unglass {
namespace {

using Rgb = Eigen::Vector3d;

// Geometry is described in the 256-pixel frame and mapped to the output size.
double to_pixels(double v, int size) { return (v + 0.5) * size / 256.0 - 0.5; }
double to_frame(double p, int size) { return (p + 0.5) * 256.0 / size - 0.5; }

bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double u = (x - cx) / rx, v = (y - cy) / ry;
  return u * u + v * v <= 1.0;
}

struct IdentityLook {
  Rgb skin, hair, background, iris, lips, brow;
  double head_rx, head_ry, head_cy;
  double eye_half_spacing, eye_y, eye_rx, eye_ry;
  double brow_lift, brow_len;
  double nose_len, mouth_half_width, mouth_y, mouth_ry;
  double hair_line;
};

IdentityLook sample_look(Rng& rng) {
  IdentityLook l;
  const double tone = rng.uniform(0.35, 0.95);
  l.skin = Rgb(tone, tone * rng.uniform(0.7, 0.85), tone * rng.uniform(0.55, 0.75));
  const double h = rng.uniform(0.05, 0.6);
  l.hair = Rgb(h, h * rng.uniform(0.6, 1.0), h * rng.uniform(0.3, 0.9));
  l.background = Rgb(rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9));
  l.iris = Rgb(rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.6));
  l.lips = Rgb(rng.uniform(0.55, 0.85), rng.uniform(0.15, 0.4), rng.uniform(0.2, 0.4));
  l.brow = l.hair * 0.8;
  l.head_rx = rng.uniform(80, 92);
  l.head_ry = rng.uniform(104, 116);
  l.head_cy = rng.uniform(134, 142);
  l.eye_half_spacing = rng.uniform(36, 44);
  l.eye_y = rng.uniform(114, 122);
  l.eye_rx = rng.uniform(10, 13);
  l.eye_ry = rng.uniform(5, 8);
  l.brow_lift = rng.uniform(14, 20);
  l.brow_len = rng.uniform(14, 20);
  l.nose_len = rng.uniform(36, 48);
  l.mouth_half_width = rng.uniform(24, 34);
  l.mouth_y = rng.uniform(200, 212);
  l.mouth_ry = rng.uniform(5, 9);
  l.hair_line = rng.uniform(60, 80);
  return l;
}

// Shading of one face in the 256 frame; `dx` shifts the nose and mouth to
// suggest a turned head.
Rgb shade(const IdentityLook& l, double dx, double x, double y) {
  const double cx = 127.5;
  if (!in_ellipse(x, y, cx, l.head_cy, l.head_rx, l.head_ry)) {
    if (in_ellipse(x, y, cx, l.head_cy - 10, l.head_rx + 10, l.head_ry + 4) && y < l.head_cy) return l.hair;
    return l.background;
  }
  if (y < l.hair_line) return l.hair;
  for (double side : {-1.0, 1.0}) {
    const double ex = cx + side * l.eye_half_spacing;
    if (in_ellipse(x, y, ex, l.eye_y, l.eye_rx, l.eye_ry)) {
      if (in_ellipse(x, y, ex, l.eye_y, l.eye_ry, l.eye_ry)) return l.iris;
      return Rgb(0.95, 0.95, 0.95);
    }
    const double by = l.eye_y - l.brow_lift;
    if (std::abs(x - ex) <= l.brow_len && std::abs(y - by) <= 2.5) return l.brow;
  }
  const double ny = l.eye_y + l.nose_len;
  if (y <= ny && y >= l.eye_y + 6) {
    const double t = (y - (l.eye_y + 6)) / (ny - l.eye_y - 6);
    if (std::abs(x - (cx + dx * t)) <= 2.0 + 8.0 * t) return l.skin * 0.82;
  }
  if (in_ellipse(x, y, cx + 0.5 * dx, l.mouth_y, l.mouth_half_width, l.mouth_ry)) return l.lips;
  // Soft vertical shading keeps the skin from being perfectly flat.
  const double s = 1.0 - 0.08 * std::abs(x - cx - 0.3 * dx) / l.head_rx;
  return l.skin * s;
}

}  // namespace

std::vector<FaceRecord> procedural_toy_faces(int n, std::uint64_t seed, int image_size,
                                             int faces_per_identity) {
  if (n < 1) throw std::invalid_argument("procedural_toy_faces: n must be >= 1");
  if (image_size < 16) throw std::invalid_argument("procedural_toy_faces: image_size must be >= 16");
  if (faces_per_identity < 1) throw std::invalid_argument("faces_per_identity must be >= 1");
  constexpr int kSuper = 3;
  std::vector<FaceRecord> faces;
  faces.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    const int identity = i / faces_per_identity;
    Rng id_rng(mix_seed(seed, std::uint64_t(identity)));
    const IdentityLook look = sample_look(id_rng);
    Rng face_rng(mix_seed(seed ^ 0x5DEECE66Dull, std::uint64_t(i)));
    const double r = face_rng.uniform();
    const double dx = r < 0.6 ? 0.0 : (r < 0.8 ? -18.0 : 18.0);
    const double scale = face_rng.uniform(0.97, 1.03);
    const double tx = face_rng.uniform(-3, 3), ty = face_rng.uniform(-3, 3);
    // Face frame -> 256 frame: p = scale * (q - c) + c + t.
    auto forward = [&](double qx, double qy) {
      return Point(scale * (qx - 127.5) + 127.5 + tx, scale * (qy - 127.5) + 127.5 + ty);
    };
    auto backward = [&](double px, double py) {
      return Point((px - 127.5 - tx) / scale + 127.5, (py - 127.5 - ty) / scale + 127.5);
    };

    FaceRecord f;
    f.identity_id = identity;
    f.image = make_image(3, image_size, image_size);
    f.face_shape_mask = make_image(1, image_size, image_size);
    for (int py = 0; py < image_size; ++py) {
      for (int px = 0; px < image_size; ++px) {
        Rgb acc = Rgb::Zero();
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double fx = px - 0.5 + (sx + 0.5) / kSuper, fy = py - 0.5 + (sy + 0.5) / kSuper;
            const Point q = backward(to_frame(fx, image_size), to_frame(fy, image_size));
            acc += shade(look, dx, q.x(), q.y());
          }
        }
        acc /= double(kSuper * kSuper);
        for (int c = 0; c < 3; ++c) f.image(0, c, py, px) = float(std::clamp(acc[c], 0.0, 1.0));
        const Point q = backward(to_frame(px, image_size), to_frame(py, image_size));
        f.face_shape_mask(0, 0, py, px) = in_ellipse(q.x(), q.y(), 127.5, look.head_cy, look.head_rx, look.head_ry);
      }
    }
    const std::array<Point, 5> frame = {
        Point(127.5 - look.eye_half_spacing, look.eye_y),
        Point(127.5 + look.eye_half_spacing, look.eye_y),
        Point(127.5 + dx, look.eye_y + look.nose_len),
        Point(127.5 + 0.5 * dx - look.mouth_half_width, look.mouth_y),
        Point(127.5 + 0.5 * dx + look.mouth_half_width, look.mouth_y)};
    for (int k = 0; k < 5; ++k) {
      const Point p = forward(frame[k].x(), frame[k].y());
      f.landmarks[k] = Point(to_pixels(p.x(), image_size), to_pixels(p.y(), image_size));
    }
    f.pose = classify_pose(f.landmarks);
    faces.push_back(std::move(f));
  }
  return faces;
}

namespace {

double superellipse(double x, double y, double rx, double ry, double e) {
  return std::pow(std::abs(x / rx), e) + std::pow(std::abs(y / ry), e);
}

}  // namespace

std::vector<GlassesTemplate> procedural_glasses_pool(int n, std::uint64_t seed, int image_size) {
  if (n < 1) throw std::invalid_argument("procedural_glasses_pool: n must be >= 1");
  if (image_size < 16) throw std::invalid_argument("procedural_glasses_pool: image_size must be >= 16");
  const Landmarks canon = canonical_landmarks(256);
  std::vector<GlassesTemplate> pool;
  pool.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, std::uint64_t(i)));
    const FacePose pose = FacePose(i % 3);
    const double rx = rng.uniform(24, 30), ry = rng.uniform(17, 23), expo = rng.uniform(2.2, 4.5);
    const double thick = rng.uniform(7, 10);
    const double shade_v = rng.uniform();
    Rgb frame = Rgb::Constant(rng.uniform(0.0, 0.15));
    if (shade_v >= 0.5) frame = Rgb(rng.uniform(), rng.uniform(), rng.uniform()) * 0.7;
    const Rgb lens = Rgb(rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0));
    const double lens_alpha = 0.06;
    const double bridge_y = rng.uniform(-6, 0);
    const double temple_len = rng.uniform(10, 18);
    // Thin parts stay at least about a pixel thick at small sizes.
    const double bar = std::max(thick * 0.4, 0.6 * 256.0 / image_size);
    // Turning the head foreshortens the lens on the side it turns toward.
    const double squeeze_left = pose == FacePose::kLeftFront ? 0.85 : 1.0;
    const double squeeze_right = pose == FacePose::kRightFront ? 0.85 : 1.0;

    GlassesTemplate t;
    t.pose = pose;
    t.name = "procedural-" + std::to_string(i);
    t.color_layer = make_image(4, image_size, image_size);
    t.lens_mask = make_image(1, image_size, image_size);
    for (int py = 0; py < image_size; ++py) {
      for (int px = 0; px < image_size; ++px) {
        const double x = to_frame(px, image_size), y = to_frame(py, image_size);
        bool is_frame = false, is_lens = false;
        for (int side = 0; side < 2; ++side) {
          const Point c = canon[side];
          const double sq = side == 0 ? squeeze_left : squeeze_right;
          const double ox = rx * sq + thick / 2, oy = ry + thick / 2;
          const double ix = rx * sq - thick / 2, iy = ry - thick / 2;
          const double u = x - c.x(), v = y - c.y();
          if (superellipse(u, v, ix, iy, expo) <= 1.0) is_lens = true;
          else if (superellipse(u, v, ox, oy, expo) <= 1.0) is_frame = true;
          // Temple arm leaving the outer edge of each lens.
          const double outer = side == 0 ? c.x() - ox : c.x() + ox;
          const double along = side == 0 ? outer - x : x - outer;
          if (along >= -thick && along <= temple_len && std::abs(y - (c.y() - ry * 0.4)) <= bar) {
            is_frame = is_frame || !is_lens;
          }
        }
        const double inner_l = canon[0].x() + rx * squeeze_left, inner_r = canon[1].x() - rx * squeeze_right;
        if (!is_lens && x >= inner_l && x <= inner_r && std::abs(y - (canon[0].y() - ry + 6 + bridge_y)) <= bar) {
          is_frame = true;
        }
        if (is_frame) {
          for (int c = 0; c < 3; ++c) t.color_layer(0, c, py, px) = float(frame[c]);
          t.color_layer(0, 3, py, px) = 1.f;
        } else if (is_lens) {
          for (int c = 0; c < 3; ++c) t.color_layer(0, c, py, px) = float(lens[c]);
          t.color_layer(0, 3, py, px) = float(lens_alpha);
          t.lens_mask(0, 0, py, px) = 1.f;
        }
      }
    }
    t.refresh_mask();
    const Landmarks eyes = canonical_landmarks(image_size);
    t.anchor_points = {eyes[0], eyes[1]};
    pool.push_back(std::move(t));
  }
  return pool;
}

}  // namespace unglass
