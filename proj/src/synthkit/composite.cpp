#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "internal.hpp"
#include "json.hpp"
#include "unglass/image_io.hpp"

namespace unglass {

void GlassesTemplate::refresh_mask() {
  mask = make_image(1, color_layer.height(), color_layer.width());
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      mask(0, 0, y, x) = color_layer(0, 3, y, x) > 0.f ? 1.f : 0.f;
    }
  }
}

void GlassesTemplate::validate() const {
  if (color_layer.channels() != 4) throw std::invalid_argument("template color layer must be RGBA");
  if (!mask.same_shape(make_image(1, color_layer.height(), color_layer.width())) ||
      !lens_mask.same_shape(mask)) {
    throw std::invalid_argument("template masks must match the color layer size");
  }
  int min_x = mask.width(), max_x = -1, min_y = mask.height(), max_y = -1;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      const bool on = mask(0, 0, y, x) >= 0.5f;
      if (on != (color_layer(0, 3, y, x) > 0.f)) {
        throw std::invalid_argument("template mask differs from alpha > 0");
      }
      if (lens_mask(0, 0, y, x) >= 0.5f && !on) throw std::invalid_argument("lens outside mask");
      if (on) {
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
    }
  }
  if (max_x < 0) return;
  for (const auto& a : anchor_points) {
    if (a.x() < min_x || a.x() > max_x || a.y() < min_y || a.y() > max_y) {
      throw std::invalid_argument("anchor point outside mask bounding box");
    }
  }
}

namespace {

struct WarpedTemplate {
  Image rgba;  // straight alpha
  Image mask;
  Image lens;
};

WarpedTemplate warp_template(const GlassesTemplate& t, const Similarity& to_face, int h, int w) {
  for (int y = 0; y < t.mask.height(); ++y) {
    for (int x = 0; x < t.mask.width(); ++x) {
      if (t.mask(0, 0, y, x) < 0.5f) continue;
      const Point p = to_face.apply(Point(x, y));
      if (p.x() < -0.5 || p.y() < -0.5 || p.x() > w - 0.5 || p.y() > h - 0.5) {
        throw CompositeError(CompositeError::Kind::kOutOfBounds,
                             "template '" + t.name + "' leaves the image after warping");
      }
    }
  }
  Image premul = t.color_layer;
  for (int c = 0; c < 3; ++c) {
    premul.sample(0).row(c).array() *= t.color_layer.sample(0).row(3).array();
  }
  const Similarity back = to_face.inverse();
  WarpedTemplate out{make_image(4, h, w), make_image(1, h, w), make_image(1, h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Point p = back.apply(Point(x, y));
      const float a = sample_bilinear_zero(premul, 3, p.x(), p.y());
      if (a > 0.f) {
        for (int c = 0; c < 3; ++c) {
          out.rgba(0, c, y, x) = std::clamp(sample_bilinear_zero(premul, c, p.x(), p.y()) / a, 0.f, 1.f);
        }
        out.rgba(0, 3, y, x) = std::min(a, 1.f);
      }
      // Ties at exactly 0.5 binarize to 1.
      const bool m = sample_bilinear_zero(t.mask, 0, p.x(), p.y()) >= 0.5f;
      out.mask(0, 0, y, x) = m ? 1.f : 0.f;
      out.lens(0, 0, y, x) = (m && sample_bilinear_zero(t.lens_mask, 0, p.x(), p.y()) >= 0.5f) ? 1.f : 0.f;
    }
  }
  return out;
}

bool any_set(const Image& mask) { return (mask.values().array() >= 0.5f).any(); }

}  // namespace

PairedSample composite_glasses(const FaceRecord& face, const GlassesTemplate& t,
                               const SynthesisConfig& cfg, Rng& rng) {
  if (t.pose != face.pose) {
    throw CompositeError(CompositeError::Kind::kPoseMismatch,
                         "template pose " + to_string(t.pose) + " does not match face pose " +
                             to_string(face.pose));
  }
  const int h = face.image.height(), w = face.image.width();
  GlassesTemplate aug = t;
  if (rng.bernoulli(cfg.tint_probability)) {
    const Eigen::Vector3d color(rng.uniform(), rng.uniform(), rng.uniform());
    aug = apply_tint(aug, color, rng.uniform(cfg.tint_alpha_min, cfg.tint_alpha_max));
  }
  aug = apply_glare(aug, rng, cfg);

  const Similarity to_face =
      fit_similarity({t.anchor_points[0], t.anchor_points[1]}, {face.landmarks[0], face.landmarks[1]});
  const WarpedTemplate warped = warp_template(aug, to_face, h, w);

  const double strength = rng.uniform(cfg.refraction_strength_min, cfg.refraction_strength_max);
  const Image refracted = any_set(warped.lens) ? apply_refraction(face.image, warped.lens, strength)
                                               : face.image;
  const Image region = dilate(warped.mask, cfg.r_dilate);
  Image x = face.image;
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      if (region(0, 0, y, xx) < 0.5f) continue;
      const float a = warped.rgba(0, 3, y, xx);
      for (int c = 0; c < 3; ++c) {
        x(0, c, y, xx) = a * warped.rgba(0, c, y, xx) + (1.f - a) * refracted(0, c, y, xx);
      }
    }
  }

  PairedSample s;
  s.x = to_signed(x);
  s.y = to_signed(face.image);
  s.m = make_image(2, h, w);
  s.m.sample(0).row(0) = warped.mask.sample(0).row(0);
  s.m.sample(0).row(1) = (face.face_shape_mask.sample(0).row(0).array() >= 0.5f).cast<float>();
  s.pose = face.pose;
  s.identity_id = face.identity_id;
  return s;
}

PairedSample synthesize_record(const FaceRecord& face, const std::vector<GlassesTemplate>& pool,
                               const SynthesisConfig& cfg, int index, int* template_id) {
  std::vector<int> candidates;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].pose == face.pose) candidates.push_back(int(i));
  }
  if (candidates.empty()) {
    throw DatasetError("no template with pose " + to_string(face.pose) + " for face " +
                       std::to_string(index));
  }
  Rng rng(mix_seed(cfg.rng_seed, std::uint64_t(index)));
  constexpr int kAttempts = 8;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const int id = candidates[rng.integer(0, int(candidates.size()) - 1)];
    try {
      PairedSample s = composite_glasses(face, pool[id], cfg, rng);
      if (template_id) *template_id = id;
      return s;
    } catch (const CompositeError& e) {
      if (e.kind() != CompositeError::Kind::kOutOfBounds) throw;
    }
  }
  throw DatasetError("face " + std::to_string(index) + ": every sampled template left the image");
}

namespace {

std::string record_id(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

nlohmann::json to_json(const ManifestRecord& r) {
  return {{"x_path", r.x_path},           {"y_path", r.y_path}, {"mask_path", r.mask_path},
          {"identity_id", r.identity_id}, {"pose", to_string(r.pose)},
          {"template_id", r.template_id}, {"seed", r.seed}};
}

void write_manifest(const DatasetManifest& m) {
  std::ofstream out(m.root / "manifest.jsonl", std::ios::binary);
  if (!out) throw DatasetError("cannot write " + (m.root / "manifest.jsonl").string());
  for (const auto& r : m.records) out << to_json(r).dump() << "\n";
  if (!out) throw DatasetError("failed writing manifest");
}

}  // namespace

DatasetManifest emit_dataset(const std::vector<FaceRecord>& faces,
                             const std::vector<GlassesTemplate>& pool, const SynthesisConfig& cfg,
                             const std::filesystem::path& out_dir) {
  cfg.validate();
  for (std::size_t i = 0; i < faces.size(); ++i) {
    bool ok = false;
    for (const auto& t : pool) ok = ok || t.pose == faces[i].pose;
    if (!ok) throw DatasetError("no template with pose " + to_string(faces[i].pose) + " for face " +
                                std::to_string(i));
  }
  DatasetManifest manifest;
  manifest.root = out_dir;
  try {
    for (const char* sub : {"x", "y", "m"}) std::filesystem::create_directories(out_dir / sub);
    for (std::size_t i = 0; i < faces.size(); ++i) {
      int template_id = 0;
      const PairedSample s = synthesize_record(faces[i], pool, cfg, int(i), &template_id);
      ManifestRecord r;
      const std::string id = record_id(i);
      r.x_path = "x/" + id + ".png";
      r.y_path = "y/" + id + ".png";
      r.mask_path = "m/" + id + ".png";
      r.identity_id = s.identity_id;
      r.pose = s.pose;
      r.template_id = template_id;
      r.seed = mix_seed(cfg.rng_seed, i);
      write_png(out_dir / r.x_path, to_unit(s.x));
      write_png(out_dir / r.y_path, to_unit(s.y));
      write_png(out_dir / r.mask_path, s.m);
      manifest.records.push_back(r);
    }
  } catch (const std::exception& e) {
    std::string report = "dataset emission aborted after " + std::to_string(manifest.records.size()) +
                         " of " + std::to_string(faces.size()) + " records: " + e.what();
    try {
      write_manifest(manifest);
    } catch (const std::exception&) {
      report += " (partial manifest could not be written)";
    }
    throw DatasetError(report);
  }
  write_manifest(manifest);
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DatasetError("cannot read manifest " + manifest_path.string());
  DatasetManifest m;
  m.root = manifest_path.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    ManifestRecord r;
    r.x_path = j.at("x_path");
    r.y_path = j.at("y_path");
    r.mask_path = j.at("mask_path");
    r.identity_id = j.at("identity_id");
    r.pose = pose_from_string(j.at("pose"));
    r.template_id = j.value("template_id", 0);
    r.seed = j.value("seed", std::uint64_t{0});
    if (r.identity_id < 0) throw DatasetError("negative identity_id in manifest");
    for (const auto& p : {r.x_path, r.y_path, r.mask_path}) {
      if (!std::filesystem::exists(m.root / p)) throw DatasetError("manifest path missing: " + p);
    }
    m.records.push_back(r);
  }
  return m;
}

PairedSample load_sample(const DatasetManifest& manifest, std::size_t index) {
  const auto& r = manifest.records.at(index);
  PairedSample s;
  s.x = to_signed(read_png(manifest.root / r.x_path));
  s.y = to_signed(read_png(manifest.root / r.y_path));
  Image m = read_png(manifest.root / r.mask_path);
  if (s.x.channels() != 3 || s.y.channels() != 3 || m.channels() != 2) {
    throw DatasetError("record " + std::to_string(index) + " has unexpected channel counts");
  }
  m.values() = (m.values().array() >= 0.5f).cast<float>();
  s.m = m;
  s.pose = r.pose;
  s.identity_id = r.identity_id;
  return s;
}

std::optional<GlassesTemplate> extract_glasses_template(const Image& x, const Image& y_hat,
                                                        const Image& m_hat_g, double threshold,
                                                        FacePose pose) {
  x.require_same(y_hat, "extract_glasses_template");
  const int h = x.height(), w = x.width();
  GlassesTemplate t;
  t.pose = pose;
  t.name = "extracted";
  t.color_layer = make_image(4, h, w);
  t.mask = make_image(1, h, w);
  t.lens_mask = make_image(1, h, w);
  const Image xu = to_unit(x);
  std::vector<Point> pixels;
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      if (m_hat_g(0, 0, y, xx) <= 0.5f) continue;
      float diff = 0.f;
      for (int c = 0; c < 3; ++c) diff = std::max(diff, std::abs(x(0, c, y, xx) - y_hat(0, c, y, xx)));
      if (0.5 * diff <= threshold) continue;
      for (int c = 0; c < 3; ++c) t.color_layer(0, c, y, xx) = xu(0, c, y, xx);
      t.color_layer(0, 3, y, xx) = 1.f;
      t.mask(0, 0, y, xx) = 1.f;
      pixels.emplace_back(xx, y);
    }
  }
  if (pixels.empty()) return std::nullopt;
  double cx = 0;
  for (const auto& p : pixels) cx += p.x();
  cx /= double(pixels.size());
  Point left = Point::Zero(), right = Point::Zero();
  int nl = 0, nr = 0;
  for (const auto& p : pixels) {
    if (p.x() < cx) {
      left += p;
      ++nl;
    } else {
      right += p;
      ++nr;
    }
  }
  if (nl == 0 || nr == 0) return std::nullopt;
  t.anchor_points = {left / nl, right / nr};
  return t;
}

}  // namespace unglass
