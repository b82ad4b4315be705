#include <cmath>

#include "unglass/synthkit.hpp"

namespace unglass {

std::string to_string(FacePose pose) {
  switch (pose) {
    case FacePose::kFrontal: return "frontal";
    case FacePose::kLeftFront: return "left-front";
    case FacePose::kRightFront: return "right-front";
  }
  return "frontal";
}

FacePose pose_from_string(const std::string& s) {
  if (s == "frontal") return FacePose::kFrontal;
  if (s == "left-front") return FacePose::kLeftFront;
  if (s == "right-front") return FacePose::kRightFront;
  throw std::invalid_argument("unknown pose '" + s + "'");
}

void SynthesisConfig::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (image_size < 16) throw std::invalid_argument("image_size must be >= 16");
  if (!unit(tint_alpha_min) || !unit(tint_alpha_max) || tint_alpha_min > tint_alpha_max) {
    throw std::invalid_argument("tint_alpha_range must be a non-empty sub-interval of [0,1]");
  }
  if (!unit(tint_probability) || !unit(glare_probability)) {
    throw std::invalid_argument("probabilities must lie in [0,1]");
  }
  if (refraction_strength_min < 0 || refraction_strength_min > refraction_strength_max) {
    throw std::invalid_argument("refraction_strength_range must be non-empty and >= 0");
  }
  if (glare_count_min < 0 || glare_count_min > glare_count_max) {
    throw std::invalid_argument("glare_count_range must be non-empty and >= 0");
  }
  if (r_dilate < 0) throw std::invalid_argument("r_dilate must be >= 0");
  if (!(pose_tolerance >= 0)) throw std::invalid_argument("pose_tolerance must be >= 0");
}

Similarity Similarity::inverse() const {
  const double s2 = a * a + b * b;
  Similarity inv;
  inv.a = a / s2;
  inv.b = -b / s2;
  inv.tx = -(inv.a * tx - inv.b * ty);
  inv.ty = -(inv.b * tx + inv.a * ty);
  return inv;
}

Similarity fit_similarity(const std::vector<Point>& src, const std::vector<Point>& dst) {
  if (src.size() != dst.size() || src.size() < 2) {
    throw AlignmentError("similarity fit needs >= 2 matched points");
  }
  Point ms = Point::Zero(), md = Point::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= double(src.size());
  md /= double(dst.size());
  double num_a = 0, num_b = 0, den = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Point p = src[i] - ms, q = dst[i] - md;
    num_a += p.x() * q.x() + p.y() * q.y();
    num_b += p.x() * q.y() - p.y() * q.x();
    den += p.squaredNorm();
  }
  if (!(den > 0)) throw AlignmentError("degenerate point set");
  Similarity s;
  s.a = num_a / den;
  s.b = num_b / den;
  s.tx = md.x() - (s.a * ms.x() - s.b * ms.y());
  s.ty = md.y() - (s.b * ms.x() + s.a * ms.y());
  return s;
}

Landmarks canonical_landmarks(int size) {
  // Reference positions for a 256 crop, mirror-symmetric about x = 127.5.
  static const Landmarks kBase{Point(87.5, 118.0), Point(167.5, 118.0), Point(127.5, 163.0),
                               Point(95.5, 210.0), Point(159.5, 210.0)};
  const double k = double(size) / 256.0;
  Landmarks out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (kBase[i].array() + 0.5) * k - 0.5;
  }
  return out;
}

Image align_face(const Image& image, const Landmarks& landmarks, int size) {
  for (const auto& p : landmarks) {
    if (!(p.x() >= -0.5 && p.y() >= -0.5 && p.x() <= image.width() - 0.5 &&
          p.y() <= image.height() - 0.5)) {
      throw AlignmentError("landmark outside image");
    }
  }
  const Point eye_axis = landmarks[1] - landmarks[0];
  const double iod = eye_axis.norm();
  if (iod < 1e-6) throw AlignmentError("eye landmarks coincide");
  const Point to_nose = landmarks[2] - landmarks[0];
  const double off_line = std::abs(eye_axis.x() * to_nose.y() - eye_axis.y() * to_nose.x()) / iod;
  if (off_line < 0.05 * iod) throw AlignmentError("eyes and nose are collinear");

  const Landmarks canon = canonical_landmarks(size);
  const Similarity to_canon = fit_similarity({landmarks.begin(), landmarks.end()},
                                             {canon.begin(), canon.end()});
  const Similarity back = to_canon.inverse();
  Image out = make_image(image.channels(), size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Point p = back.apply(Point(x, y));
      for (int c = 0; c < image.channels(); ++c) {
        out(0, c, y, x) = sample_bilinear_zero(image, c, p.x(), p.y());
      }
    }
  }
  return out;
}

FacePose classify_pose(const Landmarks& landmarks, double tolerance) {
  const double mid_x = 0.5 * (landmarks[0].x() + landmarks[1].x());
  const double iod = (landmarks[1] - landmarks[0]).norm();
  const double dx = landmarks[2].x() - mid_x;
  if (std::abs(dx) <= tolerance * iod) return FacePose::kFrontal;
  return dx < 0 ? FacePose::kLeftFront : FacePose::kRightFront;
}

}  // namespace unglass

namespace unglass {

FaceRecord align_record(const FaceRecord& face, int size) {
  FaceRecord out = face;
  out.image = align_face(face.image, face.landmarks, size);
  out.face_shape_mask = align_face(face.face_shape_mask, face.landmarks, size);
  out.face_shape_mask.values() = (out.face_shape_mask.values().array() >= 0.5f).cast<float>();
  const Landmarks canon = canonical_landmarks(size);
  const Similarity to_canon = fit_similarity({face.landmarks.begin(), face.landmarks.end()},
                                             {canon.begin(), canon.end()});
  for (auto& p : out.landmarks) p = to_canon.apply(p);
  return out;
}

}  // namespace unglass
