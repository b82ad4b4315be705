#include "unglass/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>

#include "json.hpp"

namespace unglass {

Image resize_image(const Image& img, int size) {
  if (img.height() == size && img.width() == size) return img;
  Image out = make_image(img.channels(), size, size);
  const double sy = double(img.height()) / size, sx = double(img.width()) / size;
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        out(0, c, y, x) = sample_bilinear(img, c, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
      }
    }
  }
  return out;
}

RandomProjectionEmbedder::RandomProjectionEmbedder(int input_size, int dim, std::uint64_t seed)
    : input_size_(input_size) {
  if (input_size < 1 || dim < 1) throw std::invalid_argument("embedder sizes must be positive");
  const int pixels = 3 * input_size * input_size;
  weights_.resize(dim, pixels);
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(double(pixels));
  for (Eigen::Index i = 0; i < weights_.size(); ++i) weights_.data()[i] = rng.normal() * scale;
}

RowMatrix<double> RandomProjectionEmbedder::embed(const std::vector<Image>& images) {
  RowMatrix<double> out(Eigen::Index(images.size()), weights_.rows());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].channels() != 3) throw ShapeError("embedder expects RGB images");
    const Image r = resize_image(images[i], input_size_);
    out.row(Eigen::Index(i)) = (weights_ * r.values().cast<double>()).array().tanh().transpose();
  }
  return out;
}

RowMatrix<double> embed_images(const std::vector<Image>& images, Embedder& embedder) {
  RowMatrix<double> e = embedder.embed(images);
  if (e.rows() != Eigen::Index(images.size()) || e.cols() != embedder.dim()) {
    throw ShapeError("embedder returned the wrong shape");
  }
  return e;
}

std::vector<ProtocolKind> all_protocols() {
  return {ProtocolKind::kProbeNoGlasses,        ProtocolKind::kProbeGlasses,
          ProtocolKind::kProbeGlassesRemoved,   ProtocolKind::kProbeGlassesRemovedComposited,
          ProtocolKind::kProbeNoGlassesRemoved, ProtocolKind::kMixed,
          ProtocolKind::kMixedRemoved};
}

std::string to_string(ProtocolKind kind) {
  switch (kind) {
    case ProtocolKind::kProbeNoGlasses: return "probe-no-glasses";
    case ProtocolKind::kProbeGlasses: return "probe-glasses";
    case ProtocolKind::kProbeGlassesRemoved: return "probe-glasses-removed";
    case ProtocolKind::kProbeGlassesRemovedComposited: return "probe-glasses-removed-composited";
    case ProtocolKind::kProbeNoGlassesRemoved: return "probe-no-glasses-removed";
    case ProtocolKind::kMixed: return "mixed";
    case ProtocolKind::kMixedRemoved: return "mixed-removed";
  }
  return "probe-no-glasses";
}

ProtocolKind protocol_from_string(const std::string& s) {
  for (ProtocolKind k : all_protocols()) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown protocol '" + s + "'");
}

std::string to_string(RemovalScope scope) {
  switch (scope) {
    case RemovalScope::kNone: return "none";
    case RemovalScope::kProbe: return "probe";
    case RemovalScope::kBoth: return "both";
  }
  return "none";
}

ProtocolSpec build_protocol(const DatasetManifest& manifest, ProtocolKind kind) {
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    by_identity[manifest.records[i].identity_id].push_back(i);
  }
  ProtocolSpec spec;
  spec.kind = kind;
  const bool mixed = kind == ProtocolKind::kMixed || kind == ProtocolKind::kMixedRemoved;
  if (kind == ProtocolKind::kMixedRemoved) spec.removal_applied_to = RemovalScope::kBoth;
  else if (kind == ProtocolKind::kProbeGlassesRemoved || kind == ProtocolKind::kProbeGlassesRemovedComposited ||
           kind == ProtocolKind::kProbeNoGlassesRemoved) {
    spec.removal_applied_to = RemovalScope::kProbe;
  }
  const bool composite = kind == ProtocolKind::kProbeGlassesRemovedComposited;
  const bool remove_probe = spec.removal_applied_to != RemovalScope::kNone;
  const bool remove_gallery = spec.removal_applied_to == RemovalScope::kBoth;
  for (const auto& [id, records] : by_identity) {
    if (records.size() < 2) {
      spec.excluded_identities.push_back(id);
      continue;
    }
    const std::size_t a = records[0], b = records[1];
    auto entry = [&](std::size_t r, ImageSource src, bool remove) {
      return ProtocolEntry{id, r, src, remove, remove && composite};
    };
    spec.gallery.push_back(entry(a, ImageSource::kGlassesFree, remove_gallery));
    if (mixed) {
      spec.gallery.push_back(entry(b, ImageSource::kWithGlasses, remove_gallery));
      spec.probe.push_back(entry(b, ImageSource::kGlassesFree, remove_probe));
      spec.probe.push_back(entry(a, ImageSource::kWithGlasses, remove_probe));
      continue;
    }
    const bool glasses = kind == ProtocolKind::kProbeGlasses || kind == ProtocolKind::kProbeGlassesRemoved ||
                         kind == ProtocolKind::kProbeGlassesRemovedComposited;
    spec.probe.push_back(entry(b, glasses ? ImageSource::kWithGlasses : ImageSource::kGlassesFree, remove_probe));
  }
  if (!spec.excluded_identities.empty()) {
    std::cerr << "warning: " << spec.excluded_identities.size()
              << " identities have fewer than two records and were excluded from " << to_string(kind) << "\n";
  }
  return spec;
}

RowMatrix<double> score_matrix(const RowMatrix<double>& gallery, const RowMatrix<double>& probe) {
  if (gallery.cols() != probe.cols()) throw ShapeError("score_matrix: embedding dimensions differ");
  auto normalized = [](const RowMatrix<double>& m) {
    RowMatrix<double> out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double n = m.row(i).norm();
      if (!(n > 0)) throw std::domain_error("score_matrix: zero-norm embedding");
      out.row(i) /= n;
    }
    return out;
  };
  RowMatrix<double> s = normalized(probe) * normalized(gallery).transpose();
  return s.cwiseMax(-1.0).cwiseMin(1.0);
}

std::vector<FarPoint> tar_at_far(const std::vector<double>& genuine, const std::vector<double>& impostor,
                                 const std::vector<double>& far_targets) {
  if (genuine.empty() || impostor.empty()) throw std::invalid_argument("tar_at_far needs non-empty score lists");
  std::vector<double> imp = impostor;
  std::sort(imp.begin(), imp.end(), std::greater<>());
  const double n = double(imp.size());
  std::vector<FarPoint> out;
  for (double f : far_targets) {
    FarPoint p;
    p.far_target = f;
    p.computable = f * n >= 1.0;
    if (p.computable) {
      // At most k impostors may be accepted; accepting none of the ties at
      // imp[k] means the threshold sits just above it.
      const auto k = std::size_t(std::floor(f * n));
      p.threshold = k >= imp.size() ? -std::numeric_limits<double>::infinity()
                                    : std::nextafter(imp[k], std::numeric_limits<double>::infinity());
      const auto accepted = std::count_if(genuine.begin(), genuine.end(), [&](double g) { return g >= p.threshold; });
      p.tar = double(accepted) / double(genuine.size());
    }
    out.push_back(p);
  }
  return out;
}

double rank1(const RowMatrix<double>& scores, const std::vector<int>& gallery_ids,
             const std::vector<int>& probe_ids) {
  if (scores.rows() != Eigen::Index(probe_ids.size()) || scores.cols() != Eigen::Index(gallery_ids.size())) {
    throw ShapeError("rank1: score matrix does not match id lists");
  }
  if (probe_ids.empty() || gallery_ids.empty()) throw std::invalid_argument("rank1 needs probes and gallery");
  int hits = 0;
  for (Eigen::Index p = 0; p < scores.rows(); ++p) {
    Eigen::Index best = 0;
    for (Eigen::Index g = 1; g < scores.cols(); ++g) {
      if (scores(p, g) > scores(p, best)) best = g;
    }
    hits += gallery_ids[std::size_t(best)] == probe_ids[std::size_t(p)];
  }
  return double(hits) / double(probe_ids.size());
}

double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (!(na > 0) || !(nb > 0)) throw std::domain_error("cosine distance of a zero vector");
  return 1.0 - a.dot(b) / (na * nb);
}

std::pair<int, int> cosine_improvement_count(const std::vector<EmbeddingTriple>& pairs) {
  int improved = 0;
  for (const auto& t : pairs) {
    improved += cosine_distance(t.removed, t.truth) < cosine_distance(t.with_glasses, t.truth);
  }
  return {improved, int(pairs.size())};
}

std::optional<FarPoint> VerificationResult::largest_computable() const {
  std::optional<FarPoint> best;
  for (const auto& p : tar_at_far) {
    if (p.computable && (!best || p.far_target > best->far_target)) best = p;
  }
  return best;
}

namespace {

std::vector<Image> materialize(const DatasetManifest& manifest, const std::vector<ProtocolEntry>& entries,
                               const RemovalFn& remove) {
  std::vector<Image> images;
  images.reserve(entries.size());
  for (const auto& e : entries) {
    const PairedSample s = load_sample(manifest, e.record);
    Image img = e.source == ImageSource::kWithGlasses ? s.x : s.y;
    if (e.remove) {
      if (!remove) throw std::invalid_argument("protocol needs a removal model");
      auto [y_hat, m_hat] = remove(img);
      if (e.composite) y_hat = paste_inside_mask(img, y_hat, channel_slice(m_hat, 0), kCompositeRadius);
      img = y_hat;
    }
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace

VerificationResult run_protocol(const DatasetManifest& manifest, const ProtocolSpec& spec, Embedder& embedder,
                                const RemovalFn& remove, const std::vector<double>& far_targets) {
  if (spec.gallery.empty() || spec.probe.empty()) throw std::invalid_argument("protocol has an empty side");
  const RowMatrix<double> g = embed_images(materialize(manifest, spec.gallery, remove), embedder);
  const RowMatrix<double> p = embed_images(materialize(manifest, spec.probe, remove), embedder);
  const RowMatrix<double> s = score_matrix(g, p);
  std::vector<int> gid, pid;
  for (const auto& e : spec.gallery) gid.push_back(e.identity_id);
  for (const auto& e : spec.probe) pid.push_back(e.identity_id);
  std::vector<double> genuine, impostor;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      (pid[std::size_t(i)] == gid[std::size_t(j)] ? genuine : impostor).push_back(s(i, j));
    }
  }
  VerificationResult r;
  r.kind = spec.kind;
  r.gallery_size = int(g.rows());
  r.probe_size = int(p.rows());
  r.genuine_pairs = int(genuine.size());
  r.impostor_pairs = int(impostor.size());
  r.tar_at_far = tar_at_far(genuine, impostor, far_targets);
  r.rank1 = rank1(s, gid, pid);
  return r;
}

std::string report_json(const std::vector<VerificationResult>& results, int indent) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json tar = nlohmann::json::array();
    for (const auto& p : r.tar_at_far) {
      nlohmann::json point = {{"far", p.far_target}, {"computable", p.computable}};
      if (p.computable) {
        point["tar"] = p.tar;
        point["threshold"] = p.threshold;
      } else {
        point["tar"] = nullptr;
      }
      tar.push_back(point);
    }
    rows.push_back({{"protocol", to_string(r.kind)},
                    {"tar_at_far", tar},
                    {"rank1", r.rank1},
                    {"gallery_size", r.gallery_size},
                    {"probe_size", r.probe_size},
                    {"genuine_pairs", r.genuine_pairs},
                    {"impostor_pairs", r.impostor_pairs}});
  }
  return nlohmann::json({{"rows", rows}}).dump(indent);
}

}  // namespace unglass
