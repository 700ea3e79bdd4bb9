#pragma once

// Dense 64-bit vectors/matrices whose buffers are tracked by a process-wide
// allocation meter, plus the stable reductions used by the loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pomp/error.hpp"

namespace pomp {

/// Byte counts of every Vector/Matrix buffer alive in the process.
struct AllocationMeter {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
};

namespace detail {

struct MeterState {
  std::mutex mutex;
  std::size_t live = 0;
  std::size_t peak = 0;
  bool window_open = false;
};

inline MeterState& meter_state() {
  static MeterState state;
  return state;
}

inline void meter_add(std::size_t bytes) {
  auto& s = meter_state();
  std::lock_guard lock(s.mutex);
  s.live += bytes;
  s.peak = std::max(s.peak, s.live);
}

inline void meter_sub(std::size_t bytes) {
  auto& s = meter_state();
  std::lock_guard lock(s.mutex);
  s.live -= bytes;
}

}  // namespace detail

inline AllocationMeter meter_snapshot() {
  auto& s = detail::meter_state();
  std::lock_guard lock(s.mutex);
  return {s.live, s.peak};
}

/// Zeroes the meter. Only legal while nothing metered is alive.
inline void meter_reset() {
  auto& s = detail::meter_state();
  std::lock_guard lock(s.mutex);
  if (s.live != 0) {
    throw MeterStateError("meter_reset with " + std::to_string(s.live) + " live bytes");
  }
  s.peak = 0;
}

/// Scoped measurement window: on entry the peak is lowered to the current
/// live count, so `peak_delta()` reports the high-water mark reached by
/// allocations made inside the window. Windows do not nest.
class MeterWindow {
 public:
  MeterWindow() {
    auto& s = detail::meter_state();
    std::lock_guard lock(s.mutex);
    if (s.window_open) throw MeterStateError("a meter window is already open; meter not reset");
    s.window_open = true;
    s.peak = s.live;
    baseline_ = s.live;
  }
  MeterWindow(const MeterWindow&) = delete;
  MeterWindow& operator=(const MeterWindow&) = delete;
  ~MeterWindow() {
    auto& s = detail::meter_state();
    std::lock_guard lock(s.mutex);
    s.window_open = false;
  }

  std::size_t baseline() const noexcept { return baseline_; }
  std::size_t peak_delta() const {
    const auto snap = meter_snapshot();
    return snap.peak_bytes - baseline_;
  }

 private:
  std::size_t baseline_ = 0;
};

template <class T>
struct MeteredAllocator {
  using value_type = T;

  MeteredAllocator() noexcept = default;
  template <class U>
  MeteredAllocator(const MeteredAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = std::allocator<T>{}.allocate(n);
    detail::meter_add(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::meter_sub(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }

  template <class U>
  bool operator==(const MeteredAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<double, MeteredAllocator<double>>;

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::span<const double> values) : data_(values.begin(), values.end()) {}

  std::size_t dim() const noexcept { return data_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  operator std::span<const double>() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool operator==(const Vector& other) const { return data_ == other.data_; }

 private:
  Storage data_;
};

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
      : rows_(rows), cols_(cols), data_(values) {
    if (data_.size() != rows * cols) throw ContractError("Matrix: initializer size mismatch");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }

  bool operator==(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Storage data_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("dot: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double squared_norm(std::span<const double> v) { return dot(v, v); }

inline double norm(std::span<const double> v) { return std::sqrt(squared_norm(v)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("squared_distance: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ContractError("axpy: dimension mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vector l2_normalize(std::span<const double> v) {
  if (v.empty()) throw DegenerateInputError("l2_normalize: empty vector");
  const double n = norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw DegenerateInputError("l2_normalize: norm is " + std::to_string(n));
  }
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

/// log(sum(exp(vals))) evaluated with a max shift.
inline double log_sum_exp(std::span<const double> vals) {
  if (vals.empty()) throw ContractError("log_sum_exp: empty input");
  if (!all_finite(vals)) throw ContractError("log_sum_exp: non-finite input");
  const double peak = *std::max_element(vals.begin(), vals.end());
  double acc = 0.0;
  for (double v : vals) acc += std::exp(v - peak);
  return peak + std::log(acc);
}

inline Vector stable_softmax(std::span<const double> vals) {
  if (vals.empty()) throw ContractError("stable_softmax: empty input");
  if (!all_finite(vals)) throw ContractError("stable_softmax: non-finite input");
  const double peak = *std::max_element(vals.begin(), vals.end());
  Vector out(vals.size());
  double total = 0.0;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    out[i] = std::exp(vals[i] - peak);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

/// out = m * x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
  if (m.cols() != x.size()) throw ContractError("matvec: dimension mismatch");
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), x);
  return out;
}

/// out = m^T * x
inline Vector matvec_transposed(const Matrix& m, std::span<const double> x) {
  if (m.rows() != x.size()) throw ContractError("matvec_transposed: dimension mismatch");
  Vector out(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(x[r], m.row(r), out.span());
  return out;
}

}  // namespace pomp
