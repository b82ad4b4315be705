#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unglass {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense batch of feature maps in NCHW order.
///
/// Each sample is a contiguous (channels x height*width) row-major block so it
/// can be viewed as an Eigen matrix without copying.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w)
      : n_(n), c_(c), h_(h), w_(w),
        data_(Vector<Scalar>::Zero(Eigen::Index(n) * c * h * w)) {
    if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  }

  static Tensor constant(int n, int c, int h, int w, Scalar value) {
    Tensor t(n, c, h, w);
    t.data_.setConstant(value);
    return t;
  }

  int batch() const { return n_; }
  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  Eigen::Index plane() const { return Eigen::Index(h_) * w_; }
  Eigen::Index sample_size() const { return plane() * c_; }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector<Scalar>& values() { return data_; }
  const Vector<Scalar>& values() const { return data_; }

  Scalar& operator()(int n, int c, int y, int x) {
    return data_[((Eigen::Index(n) * c_ + c) * h_ + y) * w_ + x];
  }
  Scalar operator()(int n, int c, int y, int x) const {
    return data_[((Eigen::Index(n) * c_ + c) * h_ + y) * w_ + x];
  }

  /// channels x (height*width) view of one sample.
  MatrixMap<Scalar> sample(int n) {
    return MatrixMap<Scalar>(data() + n * sample_size(), c_, plane());
  }
  ConstMatrixMap<Scalar> sample(int n) const {
    return ConstMatrixMap<Scalar>(data() + n * sample_size(), c_, plane());
  }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << "[" << n_ << "," << c_ << "," << h_ << "," << w_ << "]";
    return os.str();
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(n_, c_, h_, w_);
    out.values() = data_.template cast<Other>();
    return out;
  }

  /// Copy of samples [first, first+count).
  Tensor slice(int first, int count) const {
    Tensor out(count, c_, h_, w_);
    out.data_ = data_.segment(first * sample_size(), count * sample_size());
    return out;
  }

  void set_sample(int n, const Tensor& src, int src_n = 0) {
    data_.segment(n * sample_size(), sample_size()) =
        src.data_.segment(src_n * src.sample_size(), src.sample_size());
  }

  Tensor& operator+=(const Tensor& o) {
    require_same(o, "+=");
    data_ += o.data_;
    return *this;
  }

  void require_same(const Tensor& o, const char* what) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_string() +
                       " vs " + o.shape_string());
    }
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  Vector<Scalar> data_;
};

/// Stack tensors along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(std::initializer_list<const Tensor<Scalar>*> parts) {
  auto first = *parts.begin();
  int total = 0;
  for (auto p : parts) {
    if (p->batch() != first->batch() || p->height() != first->height() ||
        p->width() != first->width()) {
      throw ShapeError("concat_channels: " + p->shape_string() + " vs " +
                       first->shape_string());
    }
    total += p->channels();
  }
  Tensor<Scalar> out(first->batch(), total, first->height(), first->width());
  for (int n = 0; n < out.batch(); ++n) {
    int row = 0;
    for (auto p : parts) {
      out.sample(n).middleRows(row, p->channels()) = p->sample(n);
      row += p->channels();
    }
  }
  return out;
}

/// Inverse of concat_channels: split `t` into chunks of the given widths.
template <typename Scalar>
std::vector<Tensor<Scalar>> split_channels(const Tensor<Scalar>& t,
                                           const std::vector<int>& widths) {
  std::vector<Tensor<Scalar>> out;
  int row = 0;
  for (int c : widths) {
    Tensor<Scalar> part(t.batch(), c, t.height(), t.width());
    for (int n = 0; n < t.batch(); ++n) part.sample(n) = t.sample(n).middleRows(row, c);
    out.push_back(std::move(part));
    row += c;
  }
  if (row != t.channels()) throw ShapeError("split_channels: widths do not cover tensor");
  return out;
}

/// Stack tensors along the batch axis.
template <typename Scalar>
Tensor<Scalar> concat_batch(std::initializer_list<const Tensor<Scalar>*> parts) {
  auto first = *parts.begin();
  int total = 0;
  for (auto p : parts) {
    if (p->channels() != first->channels() || p->height() != first->height() ||
        p->width() != first->width()) {
      throw ShapeError("concat_batch: " + p->shape_string() + " vs " + first->shape_string());
    }
    total += p->batch();
  }
  Tensor<Scalar> out(total, first->channels(), first->height(), first->width());
  Eigen::Index offset = 0;
  for (auto p : parts) {
    out.values().segment(offset, p->size()) = p->values();
    offset += p->size();
  }
  return out;
}

}  // namespace unglass
