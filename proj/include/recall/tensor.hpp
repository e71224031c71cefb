#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "recall/error.hpp"

namespace recall {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major float32 array. No strides, no views.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0f) {}

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (numel(shape_) != data_.size()) {
      fail(ErrorKind::dimension, "shape " + shape_string(shape_) + " holds " +
                                     std::to_string(numel(shape_)) + " elements but " +
                                     std::to_string(data_.size()) + " were given");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  // Last extent, and the number of vectors of that length.
  std::size_t cols() const noexcept { return shape_.back(); }
  std::size_t rows() const noexcept { return data_.size() / shape_.back(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static void check_shape(const Shape& s) {
    if (s.empty()) fail(ErrorKind::dimension, "tensor rank must be at least 1");
    for (auto e : s)
      if (e == 0) fail(ErrorKind::dimension, "zero extent in shape " + shape_string(s));
  }

  Shape shape_;
  std::vector<float> data_;
};

// Bitwise equality including NaN payloads and signed zeros.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  return std::equal(x.begin(), x.end(), y.begin(),
                    [](float p, float q) { return std::bit_cast<std::uint32_t>(p) == std::bit_cast<std::uint32_t>(q); });
}

// a[M x K] * b[K x N]. Each output element accumulates in double over k in
// ascending order, then rounds once to float.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorKind::dimension,
         "matmul of " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const float* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = static_cast<float>(acc[j]);
  }
  return out;
}

template <std::floating_point T>
std::vector<T> softmax(std::span<const T> x) {
  if (x.empty()) fail(ErrorKind::input, "softmax of an empty vector");
  for (T v : x)
    if (!std::isfinite(v)) fail(ErrorKind::numeric_domain, "softmax input is not finite");
  const T hi = *std::max_element(x.begin(), x.end());
  std::vector<T> out(x.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = std::exp(static_cast<double>(x[i]) - static_cast<double>(hi));
    out[i] = static_cast<T>(e);
    total += e;
  }
  for (auto& v : out) v = static_cast<T>(static_cast<double>(v) / total);
  return out;
}

template <std::floating_point T>
std::vector<T> softmax(const std::vector<T>& x) {
  return softmax(std::span<const T>(x));
}

// Every length-E vector v becomes v / sqrt(mean(v^2) + eps) * gain.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  if (gain.size() != x.cols()) {
    fail(ErrorKind::dimension, "rms_norm gain " + shape_string(gain.shape()) +
                                   " does not match last extent of " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  const std::size_t e = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double ss = 0.0;
    for (float v : in) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(e) + static_cast<double>(eps));
    auto o = out.row(r);
    for (std::size_t j = 0; j < e; ++j) {
      o[j] = static_cast<float>(static_cast<double>(in[j]) * inv * static_cast<double>(gain[j]));
    }
  }
  return out;
}

inline void add_inplace(Tensor& acc, const Tensor& x) {
  if (acc.shape() != x.shape()) {
    fail(ErrorKind::dimension,
         "cannot add " + shape_string(x.shape()) + " to " + shape_string(acc.shape()));
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

}  // namespace recall
