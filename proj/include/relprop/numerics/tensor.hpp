#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "relprop/errors.hpp"

namespace relprop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    os << (i ? "," : "") << dims[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array. Rank-2 is the working case for every model op;
/// rank-1 holds biases and gains.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape dims, T fill = T{0}) : dims_(std::move(dims)), data_(shape_size(dims_), fill) {
    check_dims();
  }

  BasicTensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match dims " +
                       shape_string(dims_));
    }
  }

  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) {
        throw ShapeError("ragged matrix literal");
      }
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(data));
  }

  static BasicTensor vector(std::initializer_list<T> values) {
    return BasicTensor({values.size()}, std::vector<T>(values));
  }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Product of all dims except the last.
  std::size_t rows() const {
    if (dims_.empty()) {
      return 0;
    }
    return dims_.size() == 1 ? 1 : data_.size() / dims_.back();
  }
  std::size_t cols() const { return dims_.empty() ? 0 : dims_.back(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (std::size_t d : dims_) {
      if (d == 0) {
        throw ShapeError("tensor dims must be positive, got " + shape_string(dims_));
      }
    }
  }

  Shape dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMajor<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMajor<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const BasicTensor<T>& t) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> as_matrix(BasicTensor<T>& t) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// Plain matrix product of two rank-2 tensors.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " + shape_string(a.dims()) + " and " +
                     shape_string(b.dims()));
  }
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dims disagree: " + shape_string(a.dims()) + " x " + shape_string(b.dims()));
  }
  BasicTensor<T> out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

/// Softmax along `axis`, max-subtracted, with a 64-bit denominator.
template <typename T>
BasicTensor<T> stable_softmax(const BasicTensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " + shape_string(x.dims()));
  }
  const auto& dims = x.dims();
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < dims.size(); ++i) {
    inner *= dims[i];
  }
  const std::size_t n = dims[axis];
  const std::size_t outer = x.size() / (n * inner);
  BasicTensor<T> out(dims);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < n; ++k) {
        mx = std::max(mx, x[base + k * inner]);
      }
      double denom = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        denom += std::exp(static_cast<double>(x[base + k * inner] - mx));
      }
      for (std::size_t k = 0; k < n; ++k) {
        out[base + k * inner] = static_cast<T>(std::exp(static_cast<double>(x[base + k * inner] - mx)) / denom);
      }
    }
  }
  return out;
}

namespace detail {

// Shared by the free function and the tape op so both produce identical bits.
template <typename T>
BasicTensor<T> layer_norm_impl(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                               double eps, std::vector<double>* means, std::vector<double>* rstds) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm gain/bias " + shape_string(gain.dims()) + "/" + shape_string(bias.dims()) +
                     " do not match last dim of " + shape_string(x.dims()));
  }
  BasicTensor<T> out(x.dims());
  if (means) {
    means->assign(x.rows(), 0.0);
    rstds->assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (T v : in) {
      mean += v;
    }
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (T v : in) {
      var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      o[c] = static_cast<T>(gain[c] * ((in[c] - mean) * rstd) + bias[c]);
    }
    if (means) {
      (*means)[r] = mean;
      (*rstds)[r] = rstd;
    }
  }
  return out;
}

}  // namespace detail

/// Row-wise layer normalization: gain * (x - mean) / sqrt(var + eps) + bias.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                          double eps) {
  return detail::layer_norm_impl(x, gain, bias, eps, nullptr, nullptr);
}

}  // namespace relprop
