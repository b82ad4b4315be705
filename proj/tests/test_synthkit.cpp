#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "support.hpp"
#include "unglass/image_io.hpp"
#include "unglass/synthkit.hpp"

using namespace unglass;
namespace fs = std::filesystem;

namespace {

// Square lenses joined by a bar, drawn into a size x size RGBA layer.
GlassesTemplate square_glasses(int size, float frame_alpha, float lens_alpha, FacePose pose = FacePose::kFrontal) {
  GlassesTemplate t;
  t.color_layer = make_image(4, size, size);
  t.lens_mask = make_image(1, size, size);
  const Landmarks canon = canonical_landmarks(size);
  const int r = size / 10;
  for (int e = 0; e < 2; ++e) {
    const int cx = int(std::lround(canon[std::size_t(e)].x())), cy = int(std::lround(canon[std::size_t(e)].y()));
    for (int y = cy - r - 1; y <= cy + r + 1; ++y) {
      for (int x = cx - r - 1; x <= cx + r + 1; ++x) {
        const bool lens = std::abs(y - cy) <= r - 1 && std::abs(x - cx) <= r - 1;
        t.color_layer(0, 3, y, x) = lens ? lens_alpha : frame_alpha;
        for (int c = 0; c < 3; ++c) t.color_layer(0, c, y, x) = lens ? 0.5f : 0.f;
        if (lens && lens_alpha > 0) t.lens_mask(0, 0, y, x) = 1;
      }
    }
  }
  t.refresh_mask();
  t.lens_mask.values().array() *= t.mask.values().array();
  t.anchor_points = {canon[0], canon[1]};
  t.pose = pose;
  t.name = "square";
  return t;
}

FaceRecord flat_face(int size, float value) {
  FaceRecord f;
  f.image = make_image(3, size, size, value);
  f.landmarks = canonical_landmarks(size);
  f.face_shape_mask = make_image(1, size, size, 1.f);
  return f;
}

SynthesisConfig plain_config(int size) {
  SynthesisConfig cfg;
  cfg.image_size = size;
  cfg.tint_probability = 0;
  cfg.glare_probability = 0;
  cfg.refraction_strength_max = 0;
  return cfg;
}

}  // namespace

TEST_CASE("similarity fit matches an independent least-squares solve") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Landmarks canon = canonical_landmarks(256);
    const double angle = rng.uniform(-0.4, 0.4), scale = rng.uniform(0.6, 1.5);
    std::vector<Point> src, dst(canon.begin(), canon.end());
    for (const auto& p : canon) {
      const Point q(scale * (std::cos(angle) * p.x() - std::sin(angle) * p.y()) + 20,
                    scale * (std::sin(angle) * p.x() + std::cos(angle) * p.y()) - 10);
      src.push_back(q + Point(rng.uniform(-1, 1), rng.uniform(-1, 1)));
    }
    // Unknowns (a, b, tx, ty) stacked as a 10 x 4 linear system.
    Eigen::MatrixXd A(10, 4);
    Eigen::VectorXd rhs(10);
    for (int i = 0; i < 5; ++i) {
      A.row(2 * i) << src[std::size_t(i)].x(), -src[std::size_t(i)].y(), 1, 0;
      A.row(2 * i + 1) << src[std::size_t(i)].y(), src[std::size_t(i)].x(), 0, 1;
      rhs[2 * i] = dst[std::size_t(i)].x();
      rhs[2 * i + 1] = dst[std::size_t(i)].y();
    }
    const Eigen::Vector4d want = A.colPivHouseholderQr().solve(rhs);
    const Similarity s = fit_similarity(src, dst);
    CHECK(s.a == doctest::Approx(want[0]).epsilon(1e-9));
    CHECK(s.b == doctest::Approx(want[1]).epsilon(1e-9));
    CHECK(s.tx == doctest::Approx(want[2]).epsilon(1e-9));
    CHECK(s.ty == doctest::Approx(want[3]).epsilon(1e-9));
    // No worse than the exact inverse of the transform that made the points.
    double fitted = 0, truth = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      fitted += (s.apply(src[i]) - dst[i]).squaredNorm();
      const Point q = (src[i] - Point(20, -10)) / scale;
      const Point back(std::cos(angle) * q.x() + std::sin(angle) * q.y(), -std::sin(angle) * q.x() + std::cos(angle) * q.y());
      truth += (back - dst[i]).squaredNorm();
    }
    CHECK(fitted <= truth + 1e-9);
  }
}

TEST_CASE("affine-perturbed landmarks land on the template after alignment") {
  Rng rng(2);
  const Landmarks canon = canonical_landmarks(64);
  for (int trial = 0; trial < 10; ++trial) {
    const double angle = rng.uniform(-0.3, 0.3), scale = rng.uniform(0.8, 1.2);
    FaceRecord f = flat_face(64, 0.5f);
    for (std::size_t i = 0; i < 5; ++i) {
      const Point d = canon[i] - Point(31.5, 31.5);
      f.landmarks[i] = Point(31.5, 31.5) + scale * Point(std::cos(angle) * d.x() - std::sin(angle) * d.y(),
                                                        std::sin(angle) * d.x() + std::cos(angle) * d.y());
    }
    const FaceRecord aligned = align_record(f, 64);
    for (std::size_t i = 0; i < 5; ++i) CHECK((aligned.landmarks[i] - canon[i]).norm() < 0.5);
  }
}

TEST_CASE("alignment identity and mirror cases") {
  Rng rng(3);
  Image img = make_image(3, 32, 32);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.values()[i] = float(rng.uniform());
  const Landmarks canon = canonical_landmarks(32);
  const Image same = align_face(img, canon, 32);
  CHECK((same.values() - img.values()).cwiseAbs().maxCoeff() < 1e-5f);

  Image mirrored = img;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) mirrored(0, c, y, x) = img(0, c, y, 31 - x);
    }
  }
  Landmarks flipped;
  const std::size_t swap[5] = {1, 0, 2, 4, 3};
  for (std::size_t i = 0; i < 5; ++i) flipped[i] = Point(31 - canon[swap[i]].x(), canon[swap[i]].y());
  const Image out = align_face(mirrored, flipped, 32);
  CHECK((out.values() - mirrored.values()).cwiseAbs().maxCoeff() < 1e-5f);

  Landmarks degenerate = canon;
  degenerate[1] = degenerate[0];
  CHECK_THROWS_AS(align_face(img, degenerate, 32), AlignmentError);
  Landmarks collinear = canon;
  collinear[2] = 0.5 * (canon[0] + canon[1]);
  CHECK_THROWS_AS(align_face(img, collinear, 32), AlignmentError);
}

TEST_CASE("pose classification") {
  Landmarks lm{Point(50, 100), Point(150, 100), Point(100, 140), Point(70, 180), Point(130, 180)};
  CHECK(classify_pose(lm) == FacePose::kFrontal);
  Landmarks left = lm;
  left[2].x() = 100 - 3 * 8;
  CHECK(classify_pose(left) == FacePose::kLeftFront);
  Landmarks right = lm;
  right[2].x() = 100 + 3 * 8;
  CHECK(classify_pose(right) == FacePose::kRightFront);
  Landmarks boundary = lm;
  boundary[2].x() = 108;
  CHECK(classify_pose(boundary) == FacePose::kFrontal);
  boundary[2].x() = 92;
  CHECK(classify_pose(boundary) == FacePose::kFrontal);

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Landmarks base = lm;
    base[2].x() = 100 + rng.uniform(-30, 30);
    const double k = rng.uniform(0.2, 5.0);
    const Point shift(rng.uniform(-500, 500), rng.uniform(-500, 500));
    Landmarks moved = base;
    for (auto& p : moved) p = k * p + shift;
    CHECK(classify_pose(moved) == classify_pose(base));
  }
  CHECK(pose_from_string(to_string(FacePose::kLeftFront)) == FacePose::kLeftFront);
}

TEST_CASE("refraction") {
  Image lens = make_image(1, 40, 40);
  for (int y = 10; y < 30; ++y) {
    for (int x = 10; x < 30; ++x) lens(0, 0, y, x) = 1;
  }
  Image card = make_image(3, 40, 40);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 40; ++y) {
      for (int x = 0; x < 40; ++x) card(0, c, y, x) = float(x) / 40.f;
    }
  }
  CHECK(apply_refraction(card, lens, 0.0).values() == card.values());
  const Image flat = make_image(3, 40, 40, 0.3f);
  CHECK(apply_refraction(flat, lens, 3.0).values() == flat.values());

  // Square lens: rim distance is the axis distance to the first outside
  // pixel; the card is linear in x so bilinear sampling is exact.
  const double strength = 2.0, band = 5.0;
  const Image out = apply_refraction(card, lens, strength);
  double max_shift = 0;
  for (int y = 0; y < 40; ++y) {
    for (int x = 0; x < 40; ++x) {
      const bool inside = x >= 10 && x < 30 && y >= 10 && y < 30;
      double want_x = x;
      if (inside) {
        const double rim = std::min({x - 9, 30 - x, y - 9, 30 - y});
        double d = 0;
        if (rim < band) {
          const double t = rim / band;
          d = strength * (1 - t * t * (3 - 2 * t));
        }
        const double dx = x - 19.5, dy = y - 19.5;
        want_x = std::clamp(x + d * dx / std::hypot(dx, dy), 0.0, 39.0);
        max_shift = std::max(max_shift, d);
      }
      CHECK(std::abs(out(0, 0, y, x) - want_x / 40.0) < 1e-5);
    }
  }
  CHECK(max_shift <= strength);
  CHECK(refraction_displacement(2.0, 5.0, 5.0) == 0.0);
  CHECK(refraction_displacement(2.0, 0.0, 5.0) == 2.0);
  CHECK(refraction_displacement(2.0, 2.5, 5.0) == doctest::Approx(1.0));
}

TEST_CASE("tint") {
  GlassesTemplate t = square_glasses(64, 1.f, 1.f);
  const GlassesTemplate red = apply_tint(t, Eigen::Vector3d(1, 0, 0), 0.4);
  const Landmarks canon = canonical_landmarks(64);
  const int cx = int(std::lround(canon[0].x())), cy = int(std::lround(canon[0].y()));
  CHECK(red.color_layer(0, 0, cy, cx) == doctest::Approx(0.7));
  CHECK(red.color_layer(0, 1, cy, cx) == doctest::Approx(0.3));
  CHECK(red.color_layer(0, 2, cy, cx) == doctest::Approx(0.3));
  CHECK(apply_tint(t, Eigen::Vector3d(1, 0, 0), 0.0).color_layer.values() == t.color_layer.values());
  const GlassesTemplate black = apply_tint(square_glasses(64, 1.f, 0.06f), Eigen::Vector3d(0, 0, 0), 1.0);
  CHECK(black.color_layer(0, 3, cy, cx) == 1.f);
  CHECK(black.color_layer(0, 0, cy, cx) == 0.f);
  // Frame pixels and masks are untouched.
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (t.lens_mask(0, 0, y, x) >= 0.5f) continue;
      for (int c = 0; c < 4; ++c) CHECK(red.color_layer(0, c, y, x) == t.color_layer(0, c, y, x));
    }
  }
  CHECK(red.mask.values() == t.mask.values());
}

TEST_CASE("glare") {
  GlassesTemplate t = square_glasses(64, 1.f, 1.f);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (t.lens_mask(0, 0, y, x) >= 0.5f) {
        for (int c = 0; c < 3; ++c) t.color_layer(0, c, y, x) = 0.2f;
      }
    }
  }
  const Landmarks canon = canonical_landmarks(64);
  const Point center(std::lround(canon[0].x()), std::lround(canon[0].y()));
  GlareSpot spot{center, 2.5, 1.5, 0.3, 0.6};
  const GlassesTemplate lit = add_glare_spot(t, spot);
  CHECK(lit.color_layer(0, 0, int(center.y()), int(center.x())) == doctest::Approx(0.68));
  // The spot stays inside its own lens.
  const Point other(std::lround(canon[1].x()), std::lround(canon[1].y()));
  CHECK(lit.color_layer(0, 0, int(other.y()), int(other.x())) == 0.2f);
  CHECK(lit.mask.values() == t.mask.values());

  GlareSpot outside{Point(2, 2), 3, 3, 0, 0.6};
  CHECK(add_glare_spot(t, outside).color_layer.values() == t.color_layer.values());
  SynthesisConfig cfg;
  cfg.glare_probability = 0;
  Rng rng(5);
  CHECK(apply_glare(t, rng, cfg).color_layer.values() == t.color_layer.values());
}

TEST_CASE("compositing") {
  const int size = 64;
  const FaceRecord face = flat_face(size, 0.8f);
  const SynthesisConfig cfg = plain_config(size);
  SUBCASE("transparent template leaves the face untouched") {
    GlassesTemplate t = square_glasses(size, 1.f, 1.f);
    t.color_layer.sample(0).row(3).setZero();
    t.refresh_mask();
    t.lens_mask = t.mask;
    Rng rng(1);
    const PairedSample s = composite_glasses(face, t, cfg, rng);
    CHECK(s.x.values() == s.y.values());
  }
  SUBCASE("opaque black frame is black in x") {
    const GlassesTemplate t = square_glasses(size, 1.f, 0.06f);
    Rng rng(2);
    const PairedSample s = composite_glasses(face, t, cfg, rng);
    const Landmarks canon = canonical_landmarks(size);
    const int cx = int(std::lround(canon[0].x())), cy = int(std::lround(canon[0].y()));
    const int fy = cy - size / 10;  // on the frame ring
    CHECK(s.x(0, 0, fy, cx) == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(s.m(0, 0, fy, cx) == 1.f);
    CHECK(s.m(0, 1, fy, cx) == 1.f);
    CHECK(((s.m.values().array() == 0.f) || (s.m.values().array() == 1.f)).all());
  }
  SUBCASE("same seed gives identical samples") {
    SynthesisConfig full;
    full.image_size = size;
    const GlassesTemplate t = square_glasses(size, 1.f, 0.06f);
    Rng a(42), b(42);
    const PairedSample s1 = composite_glasses(face, t, full, a);
    const PairedSample s2 = composite_glasses(face, t, full, b);
    CHECK(s1.x.values() == s2.x.values());
    CHECK(s1.m.values() == s2.m.values());
  }
  SUBCASE("rejections") {
    Rng rng(3);
    const GlassesTemplate side = square_glasses(size, 1.f, 0.06f, FacePose::kLeftFront);
    try {
      composite_glasses(face, side, cfg, rng);
      FAIL("expected a pose mismatch");
    } catch (const CompositeError& e) {
      CHECK(e.kind() == CompositeError::Kind::kPoseMismatch);
    }
    FaceRecord shifted = face;
    for (auto& p : shifted.landmarks) p.x() -= 30;
    try {
      composite_glasses(shifted, square_glasses(size, 1.f, 0.06f), cfg, rng);
      FAIL("expected an out-of-bounds rejection");
    } catch (const CompositeError& e) {
      CHECK(e.kind() == CompositeError::Kind::kOutOfBounds);
    }
  }
}

TEST_CASE("extraction") {
  Rng rng(6);
  Image x = make_image(3, 16, 16);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.values()[i] = float(rng.uniform(-1, 1));
  const Image ones = make_image(1, 16, 16, 1.f);
  CHECK_FALSE(extract_glasses_template(x, x, ones, 0.0).has_value());
  Image y = x;
  y(0, 1, 3, 4) += 0.5f;
  y(0, 2, 3, 12) -= 0.5f;
  y(0, 0, 10, 8) -= 0.02f;
  const auto t = extract_glasses_template(x, y, ones, 0.0);
  REQUIRE(t.has_value());
  CHECK(t->mask.values().sum() == 3.f);
  CHECK(t->mask(0, 0, 3, 4) == 1.f);
  CHECK(t->color_layer(0, 3, 3, 4) == 1.f);
  CHECK(t->color_layer(0, 1, 3, 4) == doctest::Approx((x(0, 1, 3, 4) + 1) / 2));
  // The threshold is on the [0, 1] scale: a 0.02 step in [-1, 1] is 0.01.
  const auto strict = extract_glasses_template(x, y, ones, 0.05);
  REQUIRE(strict.has_value());
  CHECK(strict->mask.values().sum() == 2.f);
  CHECK(strict->anchor_points[0].x() == doctest::Approx(4));
  CHECK(strict->anchor_points[1].x() == doctest::Approx(12));
  Image half = ones;
  half(0, 0, 3, 4) = 0.5f;
  CHECK(extract_glasses_template(x, y, half, 0.0)->mask.values().sum() == 2.f);
  // A single changed pixel cannot anchor two lenses.
  Image one_side = x;
  one_side(0, 0, 5, 5) += 0.5f;
  CHECK_FALSE(extract_glasses_template(x, one_side, ones, 0.0).has_value());
  CHECK(t->lens_mask.values().isZero());
}

TEST_CASE("toy faces and glasses pool") {
  const auto a = procedural_toy_faces(6, 9, 64, 2);
  const auto b = procedural_toy_faces(6, 9, 64, 2);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.values() == b[i].image.values());
    CHECK(a[i].identity_id == int(i / 2));
    CHECK(a[i].pose == classify_pose(a[i].landmarks));
    CHECK(((a[i].face_shape_mask.values().array() == 0.f) || (a[i].face_shape_mask.values().array() == 1.f)).all());
  }
  // Faces of one identity share geometry up to small jitter.
  CHECK((a[0].landmarks[0] - a[1].landmarks[0]).norm() < 6);
  const auto pool = procedural_glasses_pool(6, 3, 64);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(pool[i].pose == FacePose(i % 3));
    CHECK_NOTHROW(pool[i].validate());
    CHECK(pool[i].lens_mask.values().sum() > 0);
  }
}

TEST_CASE("pool and face records round-trip through disk") {
  const auto dir = test::scratch("pool");
  const auto pool = procedural_glasses_pool(4, 5, 64);
  save_template_pool(dir / "glasses", pool);
  const auto back = load_template_pool(dir / "glasses");
  REQUIRE(back.size() == pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(back[i].pose == pool[i].pose);
    CHECK(back[i].mask.values() == pool[i].mask.values());
    CHECK(back[i].lens_mask.values() == pool[i].lens_mask.values());
    CHECK((back[i].anchor_points[0] - pool[i].anchor_points[0]).norm() < 1e-9);
    CHECK((back[i].color_layer.values() - pool[i].color_layer.values()).cwiseAbs().maxCoeff() <= 0.5f / 255.f + 1e-6f);
  }
  const auto faces = procedural_toy_faces(3, 1, 64, 1);
  save_face_records(dir / "faces", faces);
  const auto loaded = load_face_records(dir / "faces");
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[2].identity_id == faces[2].identity_id);
  CHECK(loaded[2].face_shape_mask.values() == faces[2].face_shape_mask.values());
}

TEST_CASE("dataset emission") {
  const auto faces = procedural_toy_faces(12, 2, 64, 2);
  const auto pool = procedural_glasses_pool(6, 4, 64);
  SynthesisConfig cfg;
  cfg.image_size = 64;
  cfg.rng_seed = 7;
  const auto dir = test::scratch("emit");
  const auto manifest = emit_dataset(faces, pool, cfg, dir);
  REQUIRE(manifest.records.size() == 12);
  const auto reloaded = load_manifest(dir / "manifest.jsonl");
  REQUIRE(reloaded.records.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto& r = reloaded.records[i];
    CHECK(r.identity_id == faces[i].identity_id);
    CHECK(r.pose == faces[i].pose);
    CHECK(pool[std::size_t(r.template_id)].pose == r.pose);
    CHECK(r.seed == mix_seed(7, i));
    CHECK(read_png(dir / r.mask_path).channels() == 2);
  }
  // Any record can be rebuilt in isolation.
  const PairedSample again = synthesize_record(faces[5], pool, cfg, 5);
  const PairedSample stored = load_sample(reloaded, 5);
  CHECK(again.m.values() == stored.m.values());
  CHECK((to_unit(again.x).values() - to_unit(stored.x).values()).cwiseAbs().maxCoeff() <= 0.5f / 255.f + 1e-6f);

  SUBCASE("missing pose aborts before writing") {
    std::vector<GlassesTemplate> frontal_only;
    for (const auto& t : pool) {
      if (t.pose == FacePose::kFrontal) frontal_only.push_back(t);
    }
    bool needs_side = false;
    for (const auto& f : faces) needs_side = needs_side || f.pose != FacePose::kFrontal;
    if (needs_side) CHECK_THROWS_AS(emit_dataset(faces, frontal_only, cfg, test::scratch("emit_bad")), DatasetError);
  }
  SUBCASE("write failure leaves a partial manifest and a report") {
    const auto bad = test::scratch("emit_blocked");
    fs::create_directories(bad / "x" / "000003.png");  // a directory where a file must go
    try {
      emit_dataset(faces, pool, cfg, bad);
      FAIL("expected a dataset error");
    } catch (const DatasetError& e) {
      CHECK(std::string(e.what()).find("after 3 of 12") != std::string::npos);
    }
    CHECK(load_manifest(bad / "manifest.jsonl").records.size() == 3);
  }
  SUBCASE("manifest paths are validated") {
    fs::remove(dir / "y" / "000002.png");
    CHECK_THROWS_AS(load_manifest(dir / "manifest.jsonl"), DatasetError);
  }
}
