#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "unglass/nn/layers.hpp"

namespace unglass::nn {

struct AdamOptions {
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are stored per parameter in the order
/// of the list handed to the constructor.
template <typename Scalar>
class Adam {
 public:
  Adam() = default;
  Adam(ParameterList<Scalar> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    if (!(opts_.learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    for (auto* p : params_) {
      m_.push_back(Vector<Scalar>::Zero(p->size()));
      v_.push_back(Vector<Scalar>::Zero(p->size()));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, double(t_));
    const auto b1 = Scalar(opts_.beta1), b2 = Scalar(opts_.beta2);
    const auto step_size = Scalar(opts_.learning_rate / c1);
    const auto inv_c2 = Scalar(1.0 / c2);
    const auto eps = Scalar(opts_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& g = params_[i]->grad;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseAbs2();
      params_[i]->value.array() -=
          step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
  }

  void zero_grad() { zero_grads(params_); }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  std::vector<Vector<Scalar>>& first_moments() { return m_; }
  std::vector<Vector<Scalar>>& second_moments() { return v_; }
  const ParameterList<Scalar>& parameters() const { return params_; }
  const AdamOptions& options() const { return opts_; }

 private:
  ParameterList<Scalar> params_;
  AdamOptions opts_;
  std::vector<Vector<Scalar>> m_, v_;
  long t_ = 0;
};

}  // namespace unglass::nn
