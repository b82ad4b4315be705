#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "unglass/random.hpp"
#include "unglass/tensor.hpp"

namespace unglass::nn {

/// Trainable array with its gradient accumulator. `shape` is informational
/// (checkpoints echo it); storage is always flat.
template <typename Scalar>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    Eigen::Index count = 1;
    for (int d : shape) count *= d;
    value = Vector<Scalar>::Zero(count);
    grad = Vector<Scalar>::Zero(count);
  }

  Eigen::Index size() const { return value.size(); }

  void init_normal(Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < value.size(); ++i) value[i] = Scalar(stddev * rng.normal());
  }
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>*>;

template <typename Scalar>
void zero_grads(const ParameterList<Scalar>& params) {
  for (auto* p : params) p->grad.setZero();
}

struct ConvGeometry {
  int kernel = 4;
  int stride = 2;
  int pad = 1;

  int conv_out(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  int transposed_out(int in) const { return (in - 1) * stride - 2 * pad + kernel; }
};

/// Gather a batch into a (channels x batch*plane) matrix, sample-major columns.
template <typename Scalar>
RowMatrix<Scalar> batch_matrix(const Tensor<Scalar>& x) {
  const Eigen::Index p = x.plane();
  RowMatrix<Scalar> m(x.channels(), x.batch() * p);
  for (int n = 0; n < x.batch(); ++n) m.middleCols(n * p, p) = x.sample(n);
  return m;
}

template <typename Scalar>
Tensor<Scalar> from_batch_matrix(const RowMatrix<Scalar>& m, int n, int h, int w) {
  Tensor<Scalar> out(n, int(m.rows()), h, w);
  const Eigen::Index p = out.plane();
  for (int i = 0; i < n; ++i) out.sample(i) = m.middleCols(i * p, p);
  return out;
}

/// Unfold patches: rows are (c, ky, kx), columns are (n, oy, ox).
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, const ConvGeometry& g, int oh, int ow,
            RowMatrix<Scalar>& col) {
  const int k = g.kernel, C = x.channels(), H = x.height(), W = x.width();
  const Eigen::Index P = Eigen::Index(oh) * ow;
  col.setZero(Eigen::Index(C) * k * k, x.batch() * P);
  for (int n = 0; n < x.batch(); ++n) {
    for (int c = 0; c < C; ++c) {
      const Scalar* src = x.data() + (Eigen::Index(n) * C + c) * H * W;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          Scalar* dst = col.data() + ((Eigen::Index(c) * k + ky) * k + kx) * col.cols() + n * P;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= H) continue;
            const Scalar* row = src + Eigen::Index(iy) * W;
            Scalar* out = dst + Eigen::Index(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < W) out[ox] = row[ix];
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add columns back into `x` (already shaped).
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, const ConvGeometry& g, int oh, int ow,
            Tensor<Scalar>& x) {
  const int k = g.kernel, C = x.channels(), H = x.height(), W = x.width();
  const Eigen::Index P = Eigen::Index(oh) * ow;
  x.values().setZero();
  for (int n = 0; n < x.batch(); ++n) {
    for (int c = 0; c < C; ++c) {
      Scalar* dst = x.data() + (Eigen::Index(n) * C + c) * H * W;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const Scalar* src =
              col.data() + ((Eigen::Index(c) * k + ky) * k + kx) * col.cols() + n * P;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= H) continue;
            Scalar* row = dst + Eigen::Index(iy) * W;
            const Scalar* in = src + Eigen::Index(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < W) row[ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, ConvGeometry g, bool bias, Rng& rng,
         double init_std)
      : in_(in), out_(out), geom_(g), has_bias_(bias),
        weight_(name + ".weight", {out, in, g.kernel, g.kernel}),
        bias_(name + ".bias", {bias ? out : 0}) {
    weight_.init_normal(rng, init_std);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    if (x.channels() != in_) {
      throw ShapeError(weight_.name + ": expected " + std::to_string(in_) +
                       " input channels, got " + x.shape_string());
    }
    in_n_ = x.batch();
    in_h_ = x.height();
    in_w_ = x.width();
    out_h_ = geom_.conv_out(in_h_);
    out_w_ = geom_.conv_out(in_w_);
    if (out_h_ < 1 || out_w_ < 1) throw ShapeError(weight_.name + ": input too small");
    im2col(x, geom_, out_h_, out_w_, col_);
    RowMatrix<Scalar> y = weights() * col_;
    if (has_bias_) y.colwise() += bias_.value;
    return from_batch_matrix(y, in_n_, out_h_, out_w_);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) {
    RowMatrix<Scalar> g = batch_matrix(grad_out);
    if (accumulate_grads) {
      MatrixMap<Scalar>(weight_.grad.data(), out_, col_.rows()).noalias() +=
          g * col_.transpose();
      if (has_bias_) bias_.grad += g.rowwise().sum();
    }
    RowMatrix<Scalar> dcol = weights().transpose() * g;
    Tensor<Scalar> dx(in_n_, in_, in_h_, in_w_);
    col2im(dcol, geom_, out_h_, out_w_, dx);
    return dx;
  }

  void parameters(ParameterList<Scalar>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  const ConvGeometry& geometry() const { return geom_; }
  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

  bool accumulate_grads = true;

 private:
  MatrixMap<Scalar> weights() {
    return MatrixMap<Scalar>(weight_.value.data(), out_,
                             Eigen::Index(in_) * geom_.kernel * geom_.kernel);
  }

  int in_ = 0, out_ = 0;
  ConvGeometry geom_;
  bool has_bias_ = true;
  Parameter<Scalar> weight_, bias_;
  RowMatrix<Scalar> col_;
  int in_n_ = 0, in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
};

/// Fractionally strided convolution (the adjoint of Conv2d's data path).
/// Weight layout is (in, out, k, k).
template <typename Scalar>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(const std::string& name, int in, int out, ConvGeometry g, bool bias,
                  Rng& rng, double init_std)
      : in_(in), out_(out), geom_(g), has_bias_(bias),
        weight_(name + ".weight", {in, out, g.kernel, g.kernel}),
        bias_(name + ".bias", {bias ? out : 0}) {
    weight_.init_normal(rng, init_std);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    if (x.channels() != in_) {
      throw ShapeError(weight_.name + ": expected " + std::to_string(in_) +
                       " input channels, got " + x.shape_string());
    }
    in_n_ = x.batch();
    in_h_ = x.height();
    in_w_ = x.width();
    out_h_ = geom_.transposed_out(in_h_);
    out_w_ = geom_.transposed_out(in_w_);
    x_ = batch_matrix(x);
    RowMatrix<Scalar> col = weights().transpose() * x_;
    Tensor<Scalar> y(in_n_, out_, out_h_, out_w_);
    col2im(col, geom_, in_h_, in_w_, y);
    if (has_bias_) {
      for (int n = 0; n < in_n_; ++n) y.sample(n).colwise() += bias_.value;
    }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) {
    RowMatrix<Scalar> gcol;
    im2col(grad_out, geom_, in_h_, in_w_, gcol);
    if (accumulate_grads) {
      MatrixMap<Scalar>(weight_.grad.data(), in_, gcol.rows()).noalias() +=
          x_ * gcol.transpose();
      if (has_bias_) {
        for (int n = 0; n < grad_out.batch(); ++n) bias_.grad += grad_out.sample(n).rowwise().sum();
      }
    }
    RowMatrix<Scalar> dx = weights() * gcol;
    return from_batch_matrix(dx, in_n_, in_h_, in_w_);
  }

  void parameters(ParameterList<Scalar>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }

  bool accumulate_grads = true;

 private:
  MatrixMap<Scalar> weights() {
    return MatrixMap<Scalar>(weight_.value.data(), in_,
                             Eigen::Index(out_) * geom_.kernel * geom_.kernel);
  }

  int in_ = 0, out_ = 0;
  ConvGeometry geom_;
  bool has_bias_ = true;
  Parameter<Scalar> weight_, bias_;
  RowMatrix<Scalar> x_;
  int in_n_ = 0, in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
};

/// Per-sample, per-channel normalization without affine parameters.
template <typename Scalar>
class InstanceNorm {
 public:
  explicit InstanceNorm(Scalar eps = Scalar(1e-5)) : eps_(eps) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    normalized_ = Tensor<Scalar>(x.batch(), x.channels(), x.height(), x.width());
    inv_std_.resize(Eigen::Index(x.batch()) * x.channels());
    for (int n = 0; n < x.batch(); ++n) {
      auto in = x.sample(n);
      auto out = normalized_.sample(n);
      for (int c = 0; c < x.channels(); ++c) {
        const Scalar mean = in.row(c).mean();
        const Scalar var = (in.row(c).array() - mean).square().mean();
        const Scalar inv = Scalar(1) / std::sqrt(var + eps_);
        inv_std_[n * x.channels() + c] = inv;
        out.row(c) = (in.row(c).array() - mean) * inv;
      }
    }
    return normalized_;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) {
    Tensor<Scalar> dx(grad_out.batch(), grad_out.channels(), grad_out.height(),
                      grad_out.width());
    for (int n = 0; n < grad_out.batch(); ++n) {
      auto g = grad_out.sample(n);
      auto xh = normalized_.sample(n);
      auto out = dx.sample(n);
      for (int c = 0; c < grad_out.channels(); ++c) {
        const Scalar g_mean = g.row(c).mean();
        const Scalar gx_mean = (g.row(c).array() * xh.row(c).array()).mean();
        out.row(c) = inv_std_[n * grad_out.channels() + c] *
                     (g.row(c).array() - g_mean - xh.row(c).array() * gx_mean);
      }
    }
    return dx;
  }

 private:
  Scalar eps_;
  Tensor<Scalar> normalized_;
  Vector<Scalar> inv_std_;
};

template <typename Scalar>
class LeakyRelu {
 public:
  explicit LeakyRelu(Scalar slope = Scalar(0.2)) : slope_(slope) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    input_ = x;
    Tensor<Scalar> y = x;
    y.values() = (x.values().array() > Scalar(0))
                     .select(x.values().array(), x.values().array() * slope_);
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const {
    Tensor<Scalar> dx = grad_out;
    dx.values() = (input_.values().array() > Scalar(0))
                      .select(grad_out.values().array(), grad_out.values().array() * slope_);
    return dx;
  }

 private:
  Scalar slope_;
  Tensor<Scalar> input_;
};

template <typename Scalar>
class Relu {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    input_ = x;
    Tensor<Scalar> y = x;
    y.values() = x.values().cwiseMax(Scalar(0));
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const {
    Tensor<Scalar> dx = grad_out;
    dx.values() = (input_.values().array() > Scalar(0)).select(grad_out.values().array(), Scalar(0));
    return dx;
  }

 private:
  Tensor<Scalar> input_;
};

template <typename Scalar>
class Tanh {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    output_ = x;
    output_.values() = x.values().array().tanh();
    return output_;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const {
    Tensor<Scalar> dx = grad_out;
    dx.values() = grad_out.values().array() * (Scalar(1) - output_.values().array().square());
    return dx;
  }

 private:
  Tensor<Scalar> output_;
};

template <typename Scalar>
class Sigmoid {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    output_ = x;
    output_.values() = (Scalar(1) + (-x.values().array()).exp()).inverse();
    return output_;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const {
    Tensor<Scalar> dx = grad_out;
    dx.values() = grad_out.values().array() * output_.values().array() *
                  (Scalar(1) - output_.values().array());
    return dx;
  }

 private:
  Tensor<Scalar> output_;
};

/// Fully connected layer over (N, in, 1, 1) tensors.
template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng, double init_std)
      : in_(in), out_(out), weight_(name + ".weight", {out, in}), bias_(name + ".bias", {out}) {
    weight_.init_normal(rng, init_std);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    if (x.sample_size() != in_) throw ShapeError(weight_.name + ": bad input " + x.shape_string());
    x_ = ConstMatrixMap<Scalar>(x.data(), x.batch(), in_);
    Tensor<Scalar> y(x.batch(), out_, 1, 1);
    MatrixMap<Scalar> ym(y.data(), x.batch(), out_);
    ym.noalias() = x_ * weights().transpose();
    ym.rowwise() += bias_.value.transpose();
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) {
    ConstMatrixMap<Scalar> g(grad_out.data(), grad_out.batch(), out_);
    if (accumulate_grads) {
      MatrixMap<Scalar>(weight_.grad.data(), out_, in_).noalias() += g.transpose() * x_;
      bias_.grad += g.colwise().sum().transpose();
    }
    Tensor<Scalar> dx(grad_out.batch(), in_, 1, 1);
    MatrixMap<Scalar>(dx.data(), grad_out.batch(), in_).noalias() = g * weights();
    return dx;
  }

  void parameters(ParameterList<Scalar>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  bool accumulate_grads = true;

 private:
  MatrixMap<Scalar> weights() { return MatrixMap<Scalar>(weight_.value.data(), out_, in_); }

  int in_ = 0, out_ = 0;
  Parameter<Scalar> weight_, bias_;
  RowMatrix<Scalar> x_;
};

template <typename Scalar>
class GlobalAvgPool {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    h_ = x.height();
    w_ = x.width();
    Tensor<Scalar> y(x.batch(), x.channels(), 1, 1);
    for (int n = 0; n < x.batch(); ++n) y.sample(n) = x.sample(n).rowwise().mean();
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out) const {
    Tensor<Scalar> dx(grad_out.batch(), grad_out.channels(), h_, w_);
    const Scalar scale = Scalar(1) / Scalar(h_ * w_);
    for (int n = 0; n < dx.batch(); ++n) {
      dx.sample(n).colwise() = grad_out.sample(n).col(0) * scale;
    }
    return dx;
  }

 private:
  int h_ = 0, w_ = 0;
};

}  // namespace unglass::nn
