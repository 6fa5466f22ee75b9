#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "cmf/rng.hpp"
#include "cmf/util.hpp"

namespace cmf {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class Scalar>
struct DTypeName;
template <>
struct DTypeName<float> {
  static constexpr const char* value = "float32";
};
template <>
struct DTypeName<double> {
  static constexpr const char* value = "float64";
};

// Dense row-major n-d array. Images follow the NCHW convention.
template <class Scalar>
class Tensor {
 public:
  using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using ConstVecMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using MatrixRM =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<MatrixRM>;
  using ConstMatMap = Eigen::Map<const MatrixRM>;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(static_cast<size_t>(check_shape(shape_)), Scalar(0)) {}
  Tensor(Shape shape, std::vector<Scalar> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != check_shape(shape_))
      fail("Tensor: data length ", data_.size(), " does not match shape ",
           shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), Scalar(1)); }

  static Tensor uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
  }
  static Tensor normal(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<Scalar>(stddev * rng.normal());
    return t;
  }
  // Kaiming-uniform: bound = sqrt(6 / fan_in).
  static Tensor kaiming(Shape shape, int64_t fan_in, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return uniform(std::move(shape), rng, -bound, bound);
  }

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& raw() { return data_; }
  const std::vector<Scalar>& raw() const { return data_; }

  Scalar& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const Scalar& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW accessor.
  Scalar& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  const Scalar& at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  Scalar& at2(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * dim(1) + c)]; }
  const Scalar& at2(int64_t r, int64_t c) const {
    return data_[static_cast<size_t>(r * dim(1) + c)];
  }

  VecMap vec() { return VecMap(data_.data(), size()); }
  ConstVecMap vec() const { return ConstVecMap(data_.data(), size()); }
  MatMap mat(int64_t rows, int64_t cols) {
    if (rows * cols != size())
      fail("Tensor::mat: ", rows, "x", cols, " view of ", size(), " elements");
    return MatMap(data_.data(), rows, cols);
  }
  ConstMatMap mat(int64_t rows, int64_t cols) const {
    if (rows * cols != size())
      fail("Tensor::mat: ", rows, "x", cols, " view of ", size(), " elements");
    return ConstMatMap(data_.data(), rows, cols);
  }
  // 2-d tensors viewed with their own shape.
  MatMap mat2() { return mat(dim(0), size() / dim(0)); }
  ConstMatMap mat2() const { return mat(dim(0), size() / dim(0)); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (Scalar v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
  // Index of the first non-finite element, -1 if all finite.
  int64_t first_non_finite() const {
    for (int64_t i = 0; i < size(); ++i)
      if (!std::isfinite(static_cast<double>(data_[static_cast<size_t>(i)]))) return i;
    return -1;
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    for (int64_t i = 0; i < size(); ++i)
      out[i] = static_cast<Other>(data_[static_cast<size_t>(i)]);
    return out;
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != size())
      fail("Tensor::reshaped: ", shape_str(s), " has ", numel(s),
           " elements, tensor has ", size());
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

 private:
  static int64_t check_shape(const Shape& s) {
    for (int64_t d : s)
      if (d <= 0) fail("Tensor: non-positive dimension in shape ", shape_str(s));
    return numel(s);
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b))
    fail("max_abs_diff: shape mismatch ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()));
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <class S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<size_t>(a.size())) == 0;
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cmf
