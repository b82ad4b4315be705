#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unglass/image.hpp"
#include "unglass/synthkit.hpp"
#include "unglass/tensor.hpp"

namespace unglass {

class NotPsdError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct GaussianStats {
  Vector<Scalar> mean;
  Matrix<Scalar> covariance;
  long n = 0;

  int dim() const { return int(mean.size()); }

  void validate() const {
    if (n < 2) throw std::invalid_argument("GaussianStats needs n >= 2");
    if (covariance.rows() != mean.size() || covariance.cols() != mean.size()) {
      throw ShapeError("covariance does not match the mean dimension");
    }
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-8)) {
      throw std::invalid_argument("covariance is not symmetric");
    }
  }
};

/// Sample mean and unbiased covariance of the rows of `embeddings`.
template <typename Derived>
GaussianStats<typename Derived::Scalar> gaussian_stats(const Eigen::MatrixBase<Derived>& embeddings) {
  using Scalar = typename Derived::Scalar;
  if (embeddings.rows() < 2) throw std::invalid_argument("gaussian_stats needs at least two rows");
  GaussianStats<Scalar> s;
  s.n = embeddings.rows();
  s.mean = embeddings.colwise().mean().transpose();
  const Matrix<Scalar> centered = embeddings.rowwise() - s.mean.transpose();
  s.covariance = centered.transpose() * centered / Scalar(s.n - 1);
  s.covariance = Scalar(0.5) * (s.covariance + s.covariance.transpose()).eval();
  return s;
}

inline constexpr double kPsdTolerance = 1e-8;

namespace detail {

/// Eigenvalues of a symmetric matrix with tiny negatives clipped to zero.
template <typename Scalar>
Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> psd_eigen(const Matrix<Scalar>& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> es(Scalar(0.5) * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NotPsdError(std::string(what) + ": eigendecomposition failed");
  if (es.eigenvalues().size() > 0 && es.eigenvalues().minCoeff() < -Scalar(kPsdTolerance)) {
    throw NotPsdError(std::string(what) + " is not positive semi-definite");
  }
  return es;
}

/// Eigenvalues below the numerical rank cutoff count as exact zeros.
template <typename Scalar>
Vector<Scalar> clipped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Matrix<Scalar>>& es) {
  Vector<Scalar> ev = es.eigenvalues();
  if (ev.size() == 0) return ev;
  const Scalar cutoff = Scalar(ev.size()) * std::numeric_limits<Scalar>::epsilon() * ev.cwiseAbs().maxCoeff();
  return (ev.array() > cutoff).select(ev, Scalar(0));
}

template <typename Scalar>
Matrix<Scalar> psd_sqrt(const Matrix<Scalar>& m, const char* what) {
  const auto es = psd_eigen(m, what);
  const Vector<Scalar> root = clipped_eigenvalues(es).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Trace of (Sa Sb)^{1/2}, as the nuclear norm of Sa^{1/2} Sb^{1/2}.
template <typename Scalar>
Scalar trace_sqrt_product(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  const Matrix<Scalar> ra = detail::psd_sqrt(a, "covariance a");
  const Matrix<Scalar> rb = detail::psd_sqrt(b, "covariance b");
  if (ra.size() == 0) return Scalar(0);
  const Eigen::JacobiSVD<Matrix<Scalar>> svd(ra * rb);
  return svd.singularValues().sum();
}

/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), clipped at zero.
template <typename Scalar>
Scalar fid(const GaussianStats<Scalar>& a, const GaussianStats<Scalar>& b) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw ShapeError("fid: dimension mismatch");
  const Scalar mean_term = (a.mean - b.mean).squaredNorm();
  const Scalar cov_term =
      a.covariance.trace() + b.covariance.trace() - Scalar(2) * trace_sqrt_product(a.covariance, b.covariance);
  return std::max(Scalar(0), mean_term + cov_term);
}

/// Maps a list of images to one embedding row each.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual int dim() const = 0;
  virtual RowMatrix<double> embed(const std::vector<Image>& images) = 0;
};

/// Fixed seeded projection tanh(W vec(image) / sqrt(P)) of a resized input.
class RandomProjectionEmbedder : public Embedder {
 public:
  RandomProjectionEmbedder(int input_size, int dim, std::uint64_t seed);
  int dim() const override { return int(weights_.rows()); }
  RowMatrix<double> embed(const std::vector<Image>& images) override;

 private:
  int input_size_;
  RowMatrix<double> weights_;
};

RowMatrix<double> embed_images(const std::vector<Image>& images, Embedder& embedder);

/// Resample an image to size x size with clamped bilinear interpolation.
Image resize_image(const Image& img, int size);

enum class ProtocolKind {
  kProbeNoGlasses,
  kProbeGlasses,
  kProbeGlassesRemoved,
  kProbeGlassesRemovedComposited,
  kProbeNoGlassesRemoved,
  kMixed,
  kMixedRemoved,
};

std::vector<ProtocolKind> all_protocols();
std::string to_string(ProtocolKind kind);
ProtocolKind protocol_from_string(const std::string& s);

enum class RemovalScope { kNone, kProbe, kBoth };
std::string to_string(RemovalScope scope);

enum class ImageSource { kWithGlasses, kGlassesFree };

struct ProtocolEntry {
  int identity_id = 0;
  std::size_t record = 0;  // manifest index
  ImageSource source = ImageSource::kGlassesFree;
  bool remove = false;       // run glasses removal before embedding
  bool composite = false;    // keep the removal only inside the predicted glasses mask
};

struct ProtocolSpec {
  ProtocolKind kind = ProtocolKind::kProbeNoGlasses;
  std::vector<ProtocolEntry> gallery;
  std::vector<ProtocolEntry> probe;
  RemovalScope removal_applied_to = RemovalScope::kNone;
  std::vector<int> excluded_identities;
};

/// Per identity, the first two manifest records (A, B) supply the images.
/// Base protocols: gallery y_A, probe from B. Mixed: gallery {y_A, x_B},
/// probe {y_B, x_A}.
ProtocolSpec build_protocol(const DatasetManifest& manifest, ProtocolKind kind);

/// P x G cosine similarities.
RowMatrix<double> score_matrix(const RowMatrix<double>& gallery, const RowMatrix<double>& probe);

struct FarPoint {
  double far_target = 0;
  bool computable = false;
  double threshold = 0;  // accept when score >= threshold
  double tar = 0;
};

/// For each target f: t is the smallest score value with
/// #{impostor >= t} <= f * #impostor. Not computable when
/// f * #impostor < 1.
std::vector<FarPoint> tar_at_far(const std::vector<double>& genuine, const std::vector<double>& impostor,
                                 const std::vector<double>& far_targets);

/// Fraction of probes whose best gallery match has the same identity.
/// Ties go to the lowest gallery index.
double rank1(const RowMatrix<double>& scores, const std::vector<int>& gallery_ids,
             const std::vector<int>& probe_ids);

double cosine_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

struct EmbeddingTriple {
  Eigen::VectorXd with_glasses, removed, truth;
};

/// Pairs where removal strictly shortens the cosine distance to the truth.
std::pair<int, int> cosine_improvement_count(const std::vector<EmbeddingTriple>& pairs);

inline const std::vector<double> kDefaultFarTargets = {1e-1, 1e-2, 1e-3, 1e-4, 1e-5};

struct VerificationResult {
  ProtocolKind kind = ProtocolKind::kProbeNoGlasses;
  std::vector<FarPoint> tar_at_far;
  double rank1 = 0;
  int gallery_size = 0, probe_size = 0, genuine_pairs = 0, impostor_pairs = 0;

  /// Largest target that was computable, if any.
  std::optional<FarPoint> largest_computable() const;
};

/// Dilation used when pasting a removal result back inside its mask.
inline constexpr int kCompositeRadius = 2;

/// Glasses removal on a [-1, 1] RGB image; returns (y_hat, m_hat).
using RemovalFn = std::function<std::pair<Image, Image>(const Image&)>;

VerificationResult run_protocol(const DatasetManifest& manifest, const ProtocolSpec& spec,
                                Embedder& embedder, const RemovalFn& remove,
                                const std::vector<double>& far_targets = kDefaultFarTargets);

std::string report_json(const std::vector<VerificationResult>& results, int indent = 2);

}  // namespace unglass
