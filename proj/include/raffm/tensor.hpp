#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "raffm/error.hpp"

namespace raffm {

// Dense row-major matrix of doubles. Operations below return new values and
// leave their arguments untouched.
class Tensor2 {
 public:
  Tensor2() = default;

  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError(detail::concat("Tensor2: ", data_.size(), " values do not fill a ", rows_,
                                      "x", cols_, " matrix"));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw NumericError("Tensor2: non-finite entry");
    }
  }

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Tensor2::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor2(r, c, std::move(data));
  }

  static Tensor2 identity(std::size_t n) {
    Tensor2 out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::string shape_string() const { return detail::concat("(", rows_, "x", cols_, ")"); }

  // Bit-exact value equality including shape.
  friend bool operator==(const Tensor2& a, const Tensor2& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Tensor2& t) {
  os << "Tensor2" << t.shape_string() << "[";
  for (std::size_t r = 0; r < t.rows(); ++r) {
    os << (r ? "; " : "");
    for (std::size_t c = 0; c < t.cols(); ++c) os << (c ? ", " : "") << t(r, c);
  }
  return os << "]";
}

using TensorMap = std::map<std::string, Tensor2>;

// A bijection on [0, n). Entry j names the source index that lands at j.
class Permutation {
 public:
  Permutation() = default;

  explicit Permutation(std::vector<std::size_t> order) : order_(std::move(order)) {
    std::vector<bool> seen(order_.size(), false);
    for (std::size_t v : order_) {
      if (v >= order_.size() || seen[v]) {
        throw ValidationError(detail::concat("Permutation: index ", v, " repeated or out of [0, ",
                                             order_.size(), ")"));
      }
      seen[v] = true;
    }
  }

  static Permutation identity(std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    return Permutation(std::move(order));
  }

  Permutation inverse() const {
    std::vector<std::size_t> inv(order_.size());
    for (std::size_t j = 0; j < order_.size(); ++j) inv[order_[j]] = j;
    return Permutation(std::move(inv));
  }

  bool is_identity() const noexcept {
    for (std::size_t j = 0; j < order_.size(); ++j) {
      if (order_[j] != j) return false;
    }
    return true;
  }

  std::size_t size() const noexcept { return order_.size(); }
  std::size_t operator[](std::size_t j) const noexcept { return order_[j]; }
  std::span<const std::size_t> indices() const noexcept { return order_; }

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<std::size_t> order_;
};

namespace detail {

inline void require_finite(const Tensor2& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(concat(op, ": result has a non-finite entry"));
  }
}

inline void require_same_shape(const Tensor2& a, const Tensor2& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(concat(op, ": shape mismatch ", a.shape_string(), " vs ", b.shape_string()));
  }
}

}  // namespace detail

inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError(detail::concat("matmul: cannot multiply ", a.shape_string(), " by ",
                                    b.shape_string()));
  }
  Tensor2 out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  detail::require_finite(out, "matmul");
  return out;
}

inline Tensor2 transpose(const Tensor2& a) {
  Tensor2 out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

inline Tensor2 add(const Tensor2& a, const Tensor2& b) {
  detail::require_same_shape(a, b, "add");
  Tensor2 out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i];
  detail::require_finite(out, "add");
  return out;
}

inline Tensor2 sub(const Tensor2& a, const Tensor2& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor2 out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= v[i];
  detail::require_finite(out, "sub");
  return out;
}

inline Tensor2 scale(const Tensor2& a, double s) {
  Tensor2 out = a;
  for (double& v : out.values()) v *= s;
  detail::require_finite(out, "scale");
  return out;
}

inline Tensor2 hadamard(const Tensor2& a, const Tensor2& b) {
  detail::require_same_shape(a, b, "hadamard");
  Tensor2 out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= v[i];
  return out;
}

// Adds a 1 x cols row vector to every row of a.
inline Tensor2 add_row(const Tensor2& a, const Tensor2& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError(detail::concat("add_row: cannot broadcast ", row.shape_string(), " onto ",
                                    a.shape_string()));
  }
  Tensor2 out = a;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) dst[c] += row(0, c);
  }
  detail::require_finite(out, "add_row");
  return out;
}

// Column sums as a 1 x cols row.
inline Tensor2 sum_rows(const Tensor2& a) {
  Tensor2 out(1, a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(0, c) += a(r, c);
  return out;
}

inline Tensor2 softmax_rows(const Tensor2& a) {
  if (a.empty()) throw ShapeError("softmax_rows: empty input " + a.shape_string());
  Tensor2 out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto src = a.row(r);
    auto dst = out.row(r);
    const double m = *std::max_element(src.begin(), src.end());
    double total = 0.0;
    for (std::size_t c = 0; c < src.size(); ++c) {
      dst[c] = std::exp(src[c] - m);
      total += dst[c];
    }
    for (double& v : dst) v /= total;
  }
  detail::require_finite(out, "softmax_rows");
  return out;
}

inline Tensor2 slice_cols(const Tensor2& a, std::size_t k) {
  if (k < 1 || k > a.cols()) {
    throw BoundsError(detail::concat("slice_cols: k=", k, " outside [1, ", a.cols(), "]"));
  }
  Tensor2 out(a.rows(), k);
  for (std::size_t r = 0; r < a.rows(); ++r)
    std::copy_n(a.row(r).begin(), k, out.row(r).begin());
  return out;
}

inline Tensor2 slice_rows(const Tensor2& a, std::size_t k) {
  if (k < 1 || k > a.rows()) {
    throw BoundsError(detail::concat("slice_rows: k=", k, " outside [1, ", a.rows(), "]"));
  }
  std::vector<double> data(a.values().begin(), a.values().begin() + k * a.cols());
  return Tensor2(k, a.cols(), std::move(data));
}

// Rows [begin, begin + count).
inline Tensor2 row_block(const Tensor2& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) {
    throw BoundsError(detail::concat("row_block: rows [", begin, ", ", begin + count,
                                     ") exceed ", a.rows()));
  }
  std::vector<double> data(a.values().begin() + begin * a.cols(),
                           a.values().begin() + (begin + count) * a.cols());
  return Tensor2(count, a.cols(), std::move(data));
}

// Columns [begin, begin + count).
inline Tensor2 col_block(const Tensor2& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) {
    throw BoundsError(detail::concat("col_block: columns [", begin, ", ", begin + count,
                                     ") exceed ", a.cols()));
  }
  Tensor2 out(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r)
    std::copy_n(a.row(r).begin() + begin, count, out.row(r).begin());
  return out;
}

inline Tensor2 concat_rows(std::span<const Tensor2> blocks) {
  if (blocks.empty()) return {};
  const std::size_t cols = blocks.front().cols();
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& b : blocks) {
    if (b.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    data.insert(data.end(), b.values().begin(), b.values().end());
    rows += b.rows();
  }
  return Tensor2(rows, cols, std::move(data));
}

inline Tensor2 concat_cols(std::span<const Tensor2> blocks) {
  if (blocks.empty()) return {};
  const std::size_t rows = blocks.front().rows();
  std::size_t cols = 0;
  for (const auto& b : blocks) {
    if (b.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += b.cols();
  }
  Tensor2 out(rows, cols);
  std::size_t offset = 0;
  for (const auto& b : blocks) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + offset);
    offset += b.cols();
  }
  return out;
}

inline Tensor2 permute_cols(const Tensor2& a, const Permutation& p) {
  if (p.size() != a.cols()) {
    throw ValidationError(detail::concat("permute_cols: permutation of length ", p.size(),
                                         " for ", a.cols(), " columns"));
  }
  Tensor2 out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t j = 0; j < a.cols(); ++j) out(r, j) = a(r, p[j]);
  return out;
}

inline Tensor2 permute_rows(const Tensor2& a, const Permutation& p) {
  if (p.size() != a.rows()) {
    throw ValidationError(detail::concat("permute_rows: permutation of length ", p.size(),
                                         " for ", a.rows(), " rows"));
  }
  Tensor2 out(a.rows(), a.cols());
  for (std::size_t j = 0; j < a.rows(); ++j)
    std::copy(a.row(p[j]).begin(), a.row(p[j]).end(), out.row(j).begin());
  return out;
}

inline double max_abs(const Tensor2& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

// Largest entrywise |a - b| / max(|a|, |b|); entries that are both zero count as equal.
inline double max_relative_diff(const Tensor2& a, const Tensor2& b) {
  detail::require_same_shape(a, b, "max_relative_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.values()[i];
    const double y = b.values()[i];
    const double denom = std::max(std::abs(x), std::abs(y));
    if (denom > 0.0) worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

// max |a - b| normalised by the largest magnitude in the reference a.
inline double max_scaled_diff(const Tensor2& a, const Tensor2& b) {
  detail::require_same_shape(a, b, "max_scaled_diff");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    diff = std::max(diff, std::abs(a.values()[i] - b.values()[i]));
  const double ref = max_abs(a);
  return ref > 0.0 ? diff / ref : diff;
}

}  // namespace raffm
