#include <cmath>
#include <limits>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "unglass/evalkit.hpp"

using namespace unglass;

namespace {

Matrix<double> random_rows(Rng& rng, int n, int d) {
  Matrix<double> m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Manifest with `identities` x `per_identity` records; only the fields the
// protocol builder reads are filled.
DatasetManifest fake_manifest(int identities, int per_identity) {
  DatasetManifest m;
  for (int i = 0; i < identities; ++i) {
    for (int k = 0; k < per_identity; ++k) {
      ManifestRecord r;
      r.identity_id = i;
      m.records.push_back(r);
    }
  }
  return m;
}

}  // namespace

TEST_CASE("gaussian statistics") {
  Rng rng(1);
  const Matrix<double> x = random_rows(rng, 50, 3);
  const auto s = gaussian_stats(x);
  CHECK(s.n == 50);
  for (int j = 0; j < 3; ++j) {
    CHECK(s.mean[j] == doctest::Approx(x.col(j).sum() / 50));
    for (int k = 0; k < 3; ++k) {
      double c = 0;
      for (int i = 0; i < 50; ++i) c += (x(i, j) - s.mean[j]) * (x(i, k) - s.mean[k]);
      CHECK(s.covariance(j, k) == doctest::Approx(c / 49));
    }
  }
  CHECK_THROWS_AS(gaussian_stats(random_rows(rng, 1, 3)), std::invalid_argument);
}

TEST_CASE("frechet distance") {
  Rng rng(2);
  const auto a = gaussian_stats(random_rows(rng, 40, 4));
  Matrix<double> shifted = random_rows(rng, 60, 4) * 1.7;
  shifted.array() += 0.3;
  const auto b = gaussian_stats(shifted);
  CHECK(std::abs(fid(a, a)) <= 1e-10);
  CHECK(fid(a, b) == doctest::Approx(fid(b, a)).epsilon(1e-10));
  CHECK(fid(a, b) > 0);
  // Commuting (diagonal) covariances reduce to per-axis closed forms.
  GaussianStats<double> d1, d2;
  d1.n = d2.n = 5;
  d1.mean = Vector<double>::Zero(3);
  d2.mean = Vector<double>::Constant(3, 1.0);
  d1.covariance = Vector<double>(Eigen::Vector3d(1, 4, 9)).asDiagonal();
  d2.covariance = Vector<double>(Eigen::Vector3d(4, 4, 1)).asDiagonal();
  CHECK(fid(d1, d2) == doctest::Approx(3 + 1 + 0 + 4));
  // Rank-deficient covariances are fine.
  const auto low = gaussian_stats(random_rows(rng, 3, 6));
  CHECK(std::abs(fid(low, low)) <= 1e-10);

  GaussianStats<double> bad = d1;
  bad.covariance(0, 0) = -1;
  CHECK_THROWS_AS(fid(bad, d2), NotPsdError);
  GaussianStats<double> wrong = d1;
  wrong.mean = Vector<double>::Zero(2);
  CHECK_THROWS(fid(wrong, d2));
}

TEST_CASE("random projection embedder") {
  RandomProjectionEmbedder e(8, 5, 3), same(8, 5, 3);
  Rng rng(3);
  std::vector<Image> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(test::random_tensor<float>(rng, 1, 3, 16, 16, 0, 1));
  const auto a = embed_images(imgs, e);
  CHECK(a.rows() == 3);
  CHECK(a.cols() == 5);
  CHECK(a == embed_images(imgs, same));
  CHECK(a.cwiseAbs().maxCoeff() <= 1.0);
  CHECK(resize_image(imgs[0], 16).values() == imgs[0].values());
}

TEST_CASE("score matrix") {
  Rng rng(4);
  const RowMatrix<double> g = random_rows(rng, 4, 6), p = random_rows(rng, 3, 6);
  const auto s = score_matrix(g, p);
  CHECK(s.rows() == 3);
  CHECK(s.cols() == 4);
  CHECK(s.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
  CHECK(s(1, 2) == doctest::Approx(p.row(1).dot(g.row(2)) / (p.row(1).norm() * g.row(2).norm())));
  const RowMatrix<double> scaled = score_matrix(Eigen::MatrixXd(g * 3.5), Eigen::MatrixXd(p * 0.2));
  CHECK((scaled - s).cwiseAbs().maxCoeff() < 1e-12);
  RowMatrix<double> zero = g;
  zero.row(0).setZero();
  CHECK_THROWS(score_matrix(zero, p));
}

TEST_CASE("TAR at FAR") {
  SUBCASE("perfect separation") {
    const std::vector<double> genuine(20, 0.9), impostor(1000, 0.1);
    for (const auto& p : tar_at_far(genuine, impostor, {1e-1, 1e-2, 1e-3})) {
      CHECK(p.computable);
      CHECK(p.tar == 1.0);
    }
  }
  SUBCASE("identical distributions give TAR near FAR") {
    std::vector<double> scores;
    for (int i = 0; i < 1000; ++i) scores.push_back(i / 1000.0);
    const auto pts = tar_at_far(scores, scores, {1e-1, 1e-2, 1e-3, 1e-4});
    CHECK(pts[0].tar == doctest::Approx(0.1));
    CHECK(pts[1].tar == doctest::Approx(0.01));
    CHECK(pts[2].tar == doctest::Approx(0.001));
    CHECK_FALSE(pts[3].computable);
  }
  SUBCASE("threshold convention") {
    const std::vector<double> impostor = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    const auto pts = tar_at_far({0.95, 1.0, 0.5}, impostor, {0.1, 0.3});
    // One impostor may pass at 0.1: accept score >= t with t just above 0.9.
    CHECK(pts[0].threshold > 0.9);
    CHECK(pts[0].threshold <= 1.0);
    CHECK(pts[0].tar == doctest::Approx(2.0 / 3.0));
    CHECK(pts[1].threshold > 0.7);
    CHECK(pts[1].threshold <= 0.8);
  }
  SUBCASE("random 50 x 50 case against a full sweep") {
    Rng rng(5);
    std::vector<double> genuine, impostor;
    for (int i = 0; i < 50; ++i) genuine.push_back(rng.normal() + 1);
    for (int i = 0; i < 50; ++i) impostor.push_back(rng.normal());
    const auto pts = tar_at_far(genuine, impostor, {0.5, 0.1, 0.02});
    for (const auto& p : pts) {
      double best = std::numeric_limits<double>::infinity();
      std::vector<double> cands = impostor;
      cands.insert(cands.end(), genuine.begin(), genuine.end());
      for (double c : cands) {
        for (double t : {c, std::nextafter(c, std::numeric_limits<double>::infinity())}) {
          int acc = 0;
          for (double s : impostor) acc += s >= t;
          if (acc <= p.far_target * 50 && t < best) best = t;
        }
      }
      int hit = 0;
      for (double s : genuine) hit += s >= best;
      CHECK(p.threshold == best);
      CHECK(p.tar == hit / 50.0);
    }
  }
}

TEST_CASE("rank-1 identification") {
  RowMatrix<double> eye = RowMatrix<double>::Identity(4, 4);
  const std::vector<int> ids = {0, 1, 2, 3};
  CHECK(rank1(eye, ids, ids) == 1.0);
  // All-equal scores resolve to gallery 0.
  const RowMatrix<double> flat = RowMatrix<double>::Constant(4, 4, 0.5);
  CHECK(rank1(flat, ids, ids) == 0.25);
  CHECK(rank1(flat, ids, {0, 0, 0, 0}) == 1.0);
  // Negation turns the best match into the worst.
  RowMatrix<double> s(2, 3);
  s << 0.9, 0.1, 0.5, 0.2, 0.8, 0.3;
  CHECK(rank1(s, {7, 8, 9}, {7, 8}) == 1.0);
  CHECK(rank1(-s, {7, 8, 9}, {7, 8}) == 0.0);
  CHECK(rank1(-s, {7, 8, 9}, {8, 7}) == 1.0);
}

TEST_CASE("cosine improvement count") {
  std::vector<EmbeddingTriple> pairs;
  for (int i = 0; i < 20; ++i) {
    EmbeddingTriple t;
    t.with_glasses = Eigen::VectorXd::Random(5);
    t.truth = Eigen::VectorXd::Random(5);
    t.removed = t.truth;
    pairs.push_back(t);
  }
  CHECK(cosine_improvement_count(pairs) == std::pair<int, int>(20, 20));
  for (auto& t : pairs) t.removed = t.with_glasses;
  CHECK(cosine_improvement_count(pairs) == std::pair<int, int>(0, 20));
  int want = 0;
  for (auto& t : pairs) {
    t.removed = Eigen::VectorXd::Random(5);
    const auto dist = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
      return 1 - a.dot(b) / (a.norm() * b.norm());
    };
    want += dist(t.removed, t.truth) < dist(t.with_glasses, t.truth);
  }
  CHECK(cosine_improvement_count(pairs).first == want);
  CHECK(cosine_distance(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 2)) == doctest::Approx(1.0));
}

TEST_CASE("protocol construction") {
  const auto m = fake_manifest(5, 3);
  for (ProtocolKind k : all_protocols()) {
    CHECK(protocol_from_string(to_string(k)) == k);
    const auto a = build_protocol(m, k), b = build_protocol(m, k);
    CHECK(a.gallery.size() == b.gallery.size());
    for (std::size_t i = 0; i < a.probe.size(); ++i) CHECK(a.probe[i].record == b.probe[i].record);
    // Every probe identity is enrolled.
    for (const auto& p : a.probe) {
      bool found = false;
      for (const auto& g : a.gallery) found = found || g.identity_id == p.identity_id;
      CHECK(found);
    }
  }
  CHECK(all_protocols().size() == 7);
  const auto base = build_protocol(m, ProtocolKind::kProbeGlasses);
  CHECK(base.gallery.size() == 5);
  CHECK(base.probe[0].source == ImageSource::kWithGlasses);
  CHECK(base.probe[0].record == 1);
  CHECK(base.gallery[0].source == ImageSource::kGlassesFree);
  CHECK(base.removal_applied_to == RemovalScope::kNone);
  const auto composited = build_protocol(m, ProtocolKind::kProbeGlassesRemovedComposited);
  CHECK(composited.probe[0].remove);
  CHECK(composited.probe[0].composite);
  CHECK_FALSE(composited.gallery[0].remove);
  const auto mixed = build_protocol(m, ProtocolKind::kMixedRemoved);
  CHECK(mixed.gallery.size() == 10);
  CHECK(mixed.probe.size() == 10);
  CHECK(mixed.removal_applied_to == RemovalScope::kBoth);
  for (const auto& e : mixed.gallery) CHECK(e.remove);

  auto uneven = fake_manifest(3, 2);
  uneven.records.pop_back();
  CHECK(build_protocol(uneven, ProtocolKind::kProbeNoGlasses).excluded_identities == std::vector<int>{2});
}

TEST_CASE("verification result helpers") {
  VerificationResult r;
  r.tar_at_far = tar_at_far({0.9, 0.8}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.1, 0.2, 0.3}, kDefaultFarTargets);
  const auto best = r.largest_computable();
  REQUIRE(best.has_value());
  CHECK(best->far_target == 1e-1);
  const auto j = nlohmann::json::parse(report_json({r}));
  CHECK(j.at("rows")[0].at("tar_at_far")[1].at("tar").is_null());
}
