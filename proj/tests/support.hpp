#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "unglass/random.hpp"
#include "unglass/tensor.hpp"

namespace unglass::test {

template <typename Scalar>
Tensor<Scalar> random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1, double hi = 1) {
  Tensor<Scalar> t(n, c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.values()[i] = Scalar(rng.uniform(lo, hi));
  return t;
}

inline Tensor<double> random_binary(Rng& rng, int n, int c, int h, int w) {
  Tensor<double> t(n, c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.values()[i] = rng.bernoulli(0.5) ? 1 : 0;
  return t;
}

/// Central differences of f over every entry of `v`.
inline Vector<double> numeric_grad(Vector<double>& v, const std::function<double()>& f, double h = 1e-6) {
  Vector<double> g(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = f();
    v[i] = keep - h;
    const double down = f();
    v[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double relative_error(const Vector<double>& a, const Vector<double>& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

inline std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("unglass_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace unglass::test
