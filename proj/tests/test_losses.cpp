#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "unglass/losses.hpp"

using namespace unglass;
using test::random_binary;
using test::random_tensor;
using T = Tensor<double>;

TEST_CASE("least-squares adversarial losses") {
  auto full = [](double v) { return T::constant(1, 1, 5, 5, v); };
  CHECK(lsgan_d_loss(full(1), full(0)) == doctest::Approx(0));
  CHECK(lsgan_d_loss(full(0.5), full(0.5)) == doctest::Approx(0.5));
  CHECK(lsgan_d_loss(full(0), full(1)) == doctest::Approx(2));
  CHECK(lsgan_g_loss(full(1)) == doctest::Approx(0));
  CHECK(lsgan_g_loss(full(0)) == doctest::Approx(1));
  CHECK(lsgan_g_loss(full(0.25)) == doctest::Approx(0.5625));
  // Mean over patches, so map size does not matter.
  CHECK(lsgan_g_loss(T::constant(3, 1, 2, 2, 0.25)) == doctest::Approx(0.5625));
}

TEST_CASE("non-finite inputs are rejected") {
  T bad = T::constant(1, 1, 2, 2, 0);
  bad.values()[1] = std::nan("");
  CHECK_THROWS_AS(lsgan_g_loss(bad), NonFiniteError);
  CHECK_THROWS_AS(lsgan_d_loss(bad, bad), NonFiniteError);
  CHECK_THROWS_AS(l1_loss(bad, bad), NonFiniteError);
}

TEST_CASE("masking") {
  Rng rng(1);
  const T x = random_tensor<double>(rng, 2, 3, 4, 4);
  const T m = random_binary(rng, 2, 1, 4, 4);
  const T once = masked(x, m);
  CHECK(masked(once, m).values() == once.values());
  CHECK(masked(x, T::constant(2, 1, 4, 4, 1)).values() == x.values());
  CHECK(masked(x, T::constant(2, 1, 4, 4, 0)).values().isZero());
  for (int c = 0; c < 3; ++c) CHECK(once(1, c, 2, 3) == x(1, c, 2, 3) * m(1, 0, 2, 3));
  CHECK_THROWS_AS(masked(x, T(2, 2, 4, 4)), ShapeError);
}

TEST_CASE("l1 losses") {
  Rng rng(2);
  const T a = random_tensor<double>(rng, 2, 3, 4, 4);
  const T b = random_tensor<double>(rng, 2, 3, 4, 4);
  T shifted = b;
  shifted.values().array() += 0.5;
  CHECK(l1_loss(b, b) == 0);
  CHECK(l1_loss(shifted, b) == doctest::Approx(0.5));
  CHECK(l1_local_loss(a, b, T::constant(2, 1, 4, 4, 0)) == 0);
  CHECK(l1_local_loss(a, b, T::constant(2, 1, 4, 4, 1)) == l1_loss(a, b));
}

TEST_CASE("segmentation cross entropy") {
  Rng rng(3);
  const T m = random_binary(rng, 2, 2, 4, 4);
  CHECK(seg_bce(m, m) <= -std::log(1 - kBceEps) + 1e-12);
  CHECK(seg_bce(T::constant(1, 2, 3, 3, 0.5), T::constant(1, 2, 3, 3, 1)) == doctest::Approx(std::log(2.0)));
  CHECK(seg_bce(T::constant(1, 2, 3, 3, 0.5), T::constant(1, 2, 3, 3, 0)) == doctest::Approx(std::log(2.0)));
  // Confident wrong answers are clamped, not infinite.
  const T flipped = T::constant(2, 2, 4, 4, 1);
  CHECK(std::isfinite(seg_bce(T::constant(2, 2, 4, 4, 0), flipped)));
  CHECK(seg_bce(T::constant(2, 2, 4, 4, 0), flipped) == doctest::Approx(-std::log(kBceEps)));
}

TEST_CASE("identity distance") {
  Rng rng(4);
  const T e = random_tensor<double>(rng, 2, 512, 1, 1);
  T shifted = e;
  shifted.values().array() += 0.1;
  CHECK(id_mse(e, e) == 0);
  CHECK(id_mse(shifted, e) == doctest::Approx(0.01));
  const auto l2 = id_loss_grad(shifted, e, IdDistance::kL2Norm);
  CHECK(l2.value == doctest::Approx(0.1 * std::sqrt(512.0)));
  T scaled_a = e, scaled_b = shifted;
  scaled_a.values() *= 2.5;
  scaled_b.values() *= 2.5;
  CHECK(id_mse(scaled_b, scaled_a) == doctest::Approx(6.25 * 0.01));
}

TEST_CASE("weighted total") {
  LossTerms terms{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const LossWeights w;
  CHECK(w.as_array() == std::array<double, 6>{1, 1, 100, 200, 3, 5});
  CHECK(total_g_loss(LossTerms{1, 1, 1, 1, 1, 1}, w).total == doctest::Approx(310));
  CHECK(total_g_loss(LossTerms{}, w).total == 0);
  // Linear in each weight.
  for (std::size_t i = 0; i < 6; ++i) {
    LossWeights a, b, sum;
    auto set = [i](LossWeights& lw, double v) {
      double* fields[] = {&lw.gan_global, &lw.gan_local, &lw.l1_global, &lw.l1_local, &lw.seg, &lw.id};
      *fields[i] = v;
    };
    set(a, 2);
    set(b, 7);
    set(sum, 9);
    const double base = total_g_loss(terms, w).total - w.as_array()[i] * terms.as_array()[i];
    CHECK(total_g_loss(terms, sum).total - base ==
          doctest::Approx((total_g_loss(terms, a).total - base) + (total_g_loss(terms, b).total - base)));
  }
  LossWeights bad;
  bad.seg = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("all terms are non-negative on random inputs") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const T a = random_tensor<double>(rng, 2, 3, 4, 4, -3, 3);
    const T b = random_tensor<double>(rng, 2, 3, 4, 4, -3, 3);
    const T m = random_binary(rng, 2, 1, 4, 4);
    CHECK(lsgan_d_loss(a, b) >= 0);
    CHECK(lsgan_g_loss(a) >= 0);
    CHECK(l1_loss(a, b) >= 0);
    CHECK(l1_local_loss(a, b, m) >= 0);
    CHECK(seg_bce(random_tensor<double>(rng, 2, 2, 4, 4, 0, 1), random_binary(rng, 2, 2, 4, 4)) >= 0);
    CHECK(id_mse(a, b) >= 0);
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(6);
  T a = random_tensor<double>(rng, 2, 3, 4, 4);
  const T b = random_tensor<double>(rng, 2, 3, 4, 4);
  const T m = random_binary(rng, 2, 1, 4, 4);
  auto check = [](const Vector<double>& analytic, const Vector<double>& numeric) {
    CHECK(test::relative_error(analytic, numeric) < 1e-4);
  };
  check(lsgan_g_loss_grad(a).grad.values(), test::numeric_grad(a.values(), [&] { return lsgan_g_loss(a); }));
  check(lsgan_d_loss_grad(a, b).grad_real.values(),
        test::numeric_grad(a.values(), [&] { return lsgan_d_loss(a, b); }));
  check(l1_loss_grad(a, b).grad.values(), test::numeric_grad(a.values(), [&] { return l1_loss(a, b); }));
  check(l1_local_loss_grad(a, b, m).grad.values(),
        test::numeric_grad(a.values(), [&] { return l1_local_loss(a, b, m); }));
  T p = random_tensor<double>(rng, 2, 2, 4, 4, 0.05, 0.95);
  const T t = random_binary(rng, 2, 2, 4, 4);
  check(seg_bce_grad(p, t).grad.values(), test::numeric_grad(p.values(), [&] { return seg_bce(p, t); }));
  for (auto kind : {IdDistance::kMeanSquare, IdDistance::kL2Norm}) {
    check(id_loss_grad(a, b, kind).grad.values(),
          test::numeric_grad(a.values(), [&] { return id_loss_grad(a, b, kind).value; }));
  }
}
