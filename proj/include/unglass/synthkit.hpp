#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unglass/image.hpp"
#include "unglass/random.hpp"

namespace unglass {

enum class FacePose { kFrontal, kLeftFront, kRightFront };

std::string to_string(FacePose pose);
FacePose pose_from_string(const std::string& s);

using Point = Eigen::Vector2d;

/// Left eye, right eye, nose tip, left mouth corner, right mouth corner, in
/// pixel-center coordinates.
using Landmarks = std::array<Point, 5>;

class AlignmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CompositeError : public std::runtime_error {
 public:
  enum class Kind { kPoseMismatch, kOutOfBounds };
  CompositeError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthesisConfig {
  int image_size = 256;
  double tint_alpha_min = 0.15;
  double tint_alpha_max = 0.7;
  double tint_probability = 0.5;
  double refraction_strength_min = 0.0;
  double refraction_strength_max = 3.0;
  double glare_probability = 0.5;
  int glare_count_min = 1;
  int glare_count_max = 3;
  int r_dilate = 2;
  // Frontal when |nose_x - eye_mid_x| <= pose_tolerance * inter-ocular distance.
  double pose_tolerance = 0.08;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Eyewear layer. `mask` is exactly the set of pixels with alpha > 0;
/// `lens_mask` marks lens interiors (a subset of `mask`) that tint, glare and
/// refraction act on.
struct GlassesTemplate {
  Image color_layer;  // RGBA in [0, 1]
  Image mask;         // binary
  Image lens_mask;    // binary
  FacePose pose = FacePose::kFrontal;
  std::array<Point, 2> anchor_points;  // left / right lens centers
  std::string name;

  /// Recompute `mask` from the alpha channel.
  void refresh_mask();
  void validate() const;
};

struct FaceRecord {
  Image image;            // RGB in [0, 1]
  Landmarks landmarks;
  Image face_shape_mask;  // binary
  int identity_id = 0;
  FacePose pose = FacePose::kFrontal;
};

struct PairedSample {
  Image x;  // with glasses, [-1, 1]
  Image y;  // glasses-free, [-1, 1]
  Image m;  // 2 channels: glasses, face shape; binary
  FacePose pose = FacePose::kFrontal;
  int identity_id = 0;
};

/// 2-D similarity u = [a -b; b a] p + t.
struct Similarity {
  double a = 1, b = 0, tx = 0, ty = 0;

  Point apply(const Point& p) const { return {a * p.x() - b * p.y() + tx, b * p.x() + a * p.y() + ty}; }
  Similarity inverse() const;
  double scale() const { return std::hypot(a, b); }
};

/// Least-squares similarity mapping `src` onto `dst`.
Similarity fit_similarity(const std::vector<Point>& src, const std::vector<Point>& dst);

/// Canonical five-point template for a square crop of side `size`;
/// symmetric about the vertical center line.
Landmarks canonical_landmarks(int size);

Image align_face(const Image& image, const Landmarks& landmarks, int size);

/// align_face applied to the image and face-shape mask, with the landmarks
/// carried through the same similarity.
FaceRecord align_record(const FaceRecord& face, int size);

FacePose classify_pose(const Landmarks& landmarks, double tolerance = 0.08);

/// Radial inward displacement near the rim of each lens. Band width is a
/// quarter of the lens width; falloff is smoothstep in rim distance.
Image apply_refraction(const Image& face, const Image& lens_mask, double strength);

/// Displacement magnitude used by apply_refraction for a pixel at
/// `rim_distance` from the nearest non-lens pixel.
double refraction_displacement(double strength, double rim_distance, double band_width);

/// Porter-Duff "over" of `color` at `alpha` onto every lens pixel.
GlassesTemplate apply_tint(const GlassesTemplate& t, const Eigen::Vector3d& color, double alpha);

struct GlareSpot {
  Point center;
  double radius_x = 2, radius_y = 2;  // pixels
  double angle = 0;                   // radians
  double peak_alpha = 0.5;            // < 1
};

/// White highlight confined to the lens component containing the spot
/// center; a screen blend for opaque lens pixels.
GlassesTemplate add_glare_spot(const GlassesTemplate& t, const GlareSpot& spot);

GlassesTemplate apply_glare(const GlassesTemplate& t, Rng& rng, const SynthesisConfig& cfg);

/// Warp `t` so its anchors land on the face's eyes, augment, and composite.
PairedSample composite_glasses(const FaceRecord& face, const GlassesTemplate& t,
                               const SynthesisConfig& cfg, Rng& rng);

struct ManifestRecord {
  std::string x_path, y_path, mask_path;
  int identity_id = 0;
  FacePose pose = FacePose::kFrontal;
  int template_id = 0;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  std::filesystem::path root;  // paths in records are relative to this
  std::vector<ManifestRecord> records;
};

/// Synthesize the pair for face `index`. Deterministic in (cfg.rng_seed, index).
PairedSample synthesize_record(const FaceRecord& face, const std::vector<GlassesTemplate>& pool,
                               const SynthesisConfig& cfg, int index, int* template_id = nullptr);

/// Write one pair per face to out_dir/{x,y,m}/<id>.png plus manifest.jsonl.
DatasetManifest emit_dataset(const std::vector<FaceRecord>& faces,
                             const std::vector<GlassesTemplate>& pool, const SynthesisConfig& cfg,
                             const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& manifest_path);
PairedSample load_sample(const DatasetManifest& manifest, std::size_t index);

/// Template from the edited region of a removal result: pixels where
/// m_hat_g > 0.5 and the max-channel |x - y_hat| (on the [0, 1] scale)
/// exceeds `threshold`. Returns nullopt for an empty region.
std::optional<GlassesTemplate> extract_glasses_template(const Image& x, const Image& y_hat,
                                                        const Image& m_hat_g, double threshold,
                                                        FacePose pose = FacePose::kFrontal);

/// Cartoon faces with exact landmarks and face-shape masks. Faces
/// i*faces_per_identity .. share identity i.
std::vector<FaceRecord> procedural_toy_faces(int n, std::uint64_t seed, int image_size = 64,
                                             int faces_per_identity = 2);

/// Procedural eyewear pool; poses cycle frontal, left-front, right-front.
std::vector<GlassesTemplate> procedural_glasses_pool(int n, std::uint64_t seed, int image_size = 64);

void save_face_records(const std::filesystem::path& dir, const std::vector<FaceRecord>& faces);
std::vector<FaceRecord> load_face_records(const std::filesystem::path& dir);

/// Writes glasses_<index>.png, lens_<index>.png and the glasses_<index>.json
/// sidecar.
void save_template(const std::filesystem::path& dir, const GlassesTemplate& t, std::size_t index);
void save_template_pool(const std::filesystem::path& dir, const std::vector<GlassesTemplate>& pool);
std::vector<GlassesTemplate> load_template_pool(const std::filesystem::path& dir);

}  // namespace unglass
