#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "unglass/tensor.hpp"

namespace unglass {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generator objective weights, in the order
/// global GAN, local GAN, global L1, local L1, segmentation, identity.
struct LossWeights {
  double gan_global = 1;
  double gan_local = 1;
  double l1_global = 100;
  double l1_local = 200;
  double seg = 3;
  double id = 5;

  std::array<double, 6> as_array() const {
    return {gan_global, gan_local, l1_global, l1_local, seg, id};
  }

  void validate() const {
    for (double w : as_array()) {
      if (!(w >= 0) || !std::isfinite(w)) throw std::invalid_argument("loss weights must be finite and >= 0");
    }
  }
};

/// How the identity term measures embedding distance.
enum class IdDistance {
  kMeanSquare,  // mean squared difference over all dimensions
  kL2Norm,      // unsquared Euclidean norm per sample, averaged over the batch
};

/// Unweighted generator terms for one step.
struct LossTerms {
  double g_gan_global = 0;
  double g_gan_local = 0;
  double l1_global = 0;
  double l1_local = 0;
  double seg = 0;
  double id = 0;

  std::array<double, 6> as_array() const {
    return {g_gan_global, g_gan_local, l1_global, l1_local, seg, id};
  }
};

struct LossReport {
  LossTerms terms;
  double total = 0;
  double d_global = 0;
  double d_local = 0;
};

/// total = sum_i w_i * term_i
inline LossReport total_g_loss(const LossTerms& terms, const LossWeights& w) {
  LossReport r;
  r.terms = terms;
  const auto t = terms.as_array();
  const auto l = w.as_array();
  for (std::size_t i = 0; i < t.size(); ++i) r.total += l[i] * t[i];
  return r;
}

template <typename Scalar>
struct ValueGrad {
  Scalar value = 0;
  Tensor<Scalar> grad;
};

template <typename Scalar>
struct DiscriminatorLossGrad {
  Scalar value = 0;
  Tensor<Scalar> grad_real;
  Tensor<Scalar> grad_fake;
};

namespace detail {

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const char* what) {
  if (!t.values().allFinite()) throw NonFiniteError(std::string(what) + ": non-finite input");
}

template <typename Scalar>
Scalar inv_count(const Tensor<Scalar>& t) {
  if (t.size() == 0) throw ShapeError("loss over an empty tensor");
  return Scalar(1) / Scalar(t.size());
}

}  // namespace detail

/// mean((real - 1)^2) + mean(fake^2)
template <typename Scalar>
DiscriminatorLossGrad<Scalar> lsgan_d_loss_grad(const Tensor<Scalar>& real, const Tensor<Scalar>& fake) {
  detail::require_finite(real, "lsgan_d_loss");
  detail::require_finite(fake, "lsgan_d_loss");
  const Scalar ir = detail::inv_count(real), jf = detail::inv_count(fake);
  DiscriminatorLossGrad<Scalar> out;
  auto r = real.values().array() - Scalar(1);
  out.value = r.square().sum() * ir + fake.values().squaredNorm() * jf;
  out.grad_real = real;
  out.grad_real.values() = Scalar(2) * ir * r;
  out.grad_fake = fake;
  out.grad_fake.values() = Scalar(2) * jf * fake.values();
  return out;
}

template <typename Scalar>
Scalar lsgan_d_loss(const Tensor<Scalar>& real, const Tensor<Scalar>& fake) {
  return lsgan_d_loss_grad(real, fake).value;
}

/// mean((fake - 1)^2)
template <typename Scalar>
ValueGrad<Scalar> lsgan_g_loss_grad(const Tensor<Scalar>& fake) {
  detail::require_finite(fake, "lsgan_g_loss");
  const Scalar inv = detail::inv_count(fake);
  ValueGrad<Scalar> out;
  auto r = fake.values().array() - Scalar(1);
  out.value = r.square().sum() * inv;
  out.grad = fake;
  out.grad.values() = Scalar(2) * inv * r;
  return out;
}

template <typename Scalar>
Scalar lsgan_g_loss(const Tensor<Scalar>& fake) {
  return lsgan_g_loss_grad(fake).value;
}

/// Element-wise product of every image channel with a single-channel mask.
template <typename Scalar>
Tensor<Scalar> masked(const Tensor<Scalar>& image, const Tensor<Scalar>& mask) {
  if (mask.channels() != 1 || mask.batch() != image.batch() || mask.height() != image.height() ||
      mask.width() != image.width()) {
    throw ShapeError("masked: mask " + mask.shape_string() + " vs image " + image.shape_string());
  }
  Tensor<Scalar> out = image;
  for (int n = 0; n < image.batch(); ++n) {
    out.sample(n).array().rowwise() *= mask.sample(n).row(0).array();
  }
  return out;
}

/// mean |a - b|, gradient w.r.t. `a`.
template <typename Scalar>
ValueGrad<Scalar> l1_loss_grad(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  a.require_same(b, "l1_loss");
  detail::require_finite(a, "l1_loss");
  detail::require_finite(b, "l1_loss");
  const Scalar inv = detail::inv_count(a);
  ValueGrad<Scalar> out;
  auto diff = (a.values() - b.values()).array();
  out.value = diff.abs().sum() * inv;
  out.grad = a;
  out.grad.values() = diff.sign() * inv;
  return out;
}

template <typename Scalar>
Scalar l1_loss(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return l1_loss_grad(a, b).value;
}

/// l1_loss(masked(y_hat, m), masked(y, m)), gradient w.r.t. `y_hat`.
template <typename Scalar>
ValueGrad<Scalar> l1_local_loss_grad(const Tensor<Scalar>& y_hat, const Tensor<Scalar>& y,
                                     const Tensor<Scalar>& mask) {
  auto out = l1_loss_grad(masked(y_hat, mask), masked(y, mask));
  out.grad = masked(out.grad, mask);
  return out;
}

template <typename Scalar>
Scalar l1_local_loss(const Tensor<Scalar>& y_hat, const Tensor<Scalar>& y, const Tensor<Scalar>& mask) {
  return l1_loss(masked(y_hat, mask), masked(y, mask));
}

inline constexpr double kBceEps = 1e-7;

/// Mean binary cross entropy over every channel and pixel, with the
/// prediction clamped to [eps, 1 - eps]. Gradient w.r.t. `m_hat` (zero where
/// the clamp is active).
template <typename Scalar>
ValueGrad<Scalar> seg_bce_grad(const Tensor<Scalar>& m_hat, const Tensor<Scalar>& m) {
  m_hat.require_same(m, "seg_bce");
  detail::require_finite(m_hat, "seg_bce");
  const Scalar inv = detail::inv_count(m_hat);
  const Scalar eps = Scalar(kBceEps);
  ValueGrad<Scalar> out;
  out.grad = m_hat;
  Scalar total = 0;
  for (Eigen::Index i = 0; i < m_hat.size(); ++i) {
    const Scalar raw = m_hat.values()[i];
    const Scalar p = std::clamp(raw, eps, Scalar(1) - eps);
    const Scalar t = m.values()[i];
    total -= t * std::log(p) + (Scalar(1) - t) * std::log(Scalar(1) - p);
    const bool clamped = raw < eps || raw > Scalar(1) - eps;
    out.grad.values()[i] = clamped ? Scalar(0) : -(t / p - (Scalar(1) - t) / (Scalar(1) - p)) * inv;
  }
  out.value = total * inv;
  return out;
}

template <typename Scalar>
Scalar seg_bce(const Tensor<Scalar>& m_hat, const Tensor<Scalar>& m) {
  return seg_bce_grad(m_hat, m).value;
}

/// Identity distance between batches of embeddings, gradient w.r.t.
/// `emb_hat`.
template <typename Scalar>
ValueGrad<Scalar> id_loss_grad(const Tensor<Scalar>& emb_hat, const Tensor<Scalar>& emb_true,
                               IdDistance kind = IdDistance::kMeanSquare) {
  emb_hat.require_same(emb_true, "id_loss");
  detail::require_finite(emb_hat, "id_loss");
  detail::require_finite(emb_true, "id_loss");
  ValueGrad<Scalar> out;
  out.grad = emb_hat;
  if (kind == IdDistance::kMeanSquare) {
    const Scalar inv = detail::inv_count(emb_hat);
    auto diff = (emb_hat.values() - emb_true.values()).array();
    out.value = diff.square().sum() * inv;
    out.grad.values() = Scalar(2) * inv * diff;
    return out;
  }
  const Scalar inv_n = Scalar(1) / Scalar(emb_hat.batch());
  for (int n = 0; n < emb_hat.batch(); ++n) {
    auto diff = (emb_hat.sample(n) - emb_true.sample(n)).eval();
    const Scalar norm = diff.norm();
    out.value += norm * inv_n;
    if (norm > Scalar(0)) out.grad.sample(n) = diff * (inv_n / norm);
    else out.grad.sample(n).setZero();
  }
  return out;
}

template <typename Scalar>
Scalar id_mse(const Tensor<Scalar>& emb_hat, const Tensor<Scalar>& emb_true) {
  return id_loss_grad(emb_hat, emb_true, IdDistance::kMeanSquare).value;
}

}  // namespace unglass
