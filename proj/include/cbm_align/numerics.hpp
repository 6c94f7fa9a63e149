#pragma once

// Dense row-major matrices, normalization, Adam, and a central-difference
// gradient checker. Training arithmetic is binary64; bundles store binary32.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cbm_align/error.hpp"

namespace cbm_align {

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    CBM_ALIGN_CHECK(data_.size() == rows_ * cols_, ErrorKind::kShapeMismatch,
                    "matrix data length " + std::to_string(data_.size()) + " != " +
                        std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Mat = Matrix<double>;
using Mat32 = Matrix<float>;

/// Compares shapes and the raw bytes of every element.
template <typename T>
bool bitwise_equal(const Matrix<T>& a, const Matrix<T>& b) {
  return a.same_shape(b) &&
         (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0);
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](T v) { return std::isfinite(v); });
}

/// Intra-run parallelism cap from CBM_ALIGN_THREADS (default 1).
inline unsigned thread_count() {
  const char* env = std::getenv("CBM_ALIGN_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || v < 1) return 1;
  return static_cast<unsigned>(std::min<long>(v, 256));
}

namespace detail {

// Partitions [0, n) into contiguous chunks; each output element is still
// produced by exactly one sequential loop.
template <typename Fn>
void parallel_rows(std::size_t n, std::size_t work_per_row, Fn&& fn) {
  unsigned threads = thread_count();
  if (threads <= 1 || n < 2 || n * work_per_row < (1u << 16)) {
    fn(std::size_t{0}, n);
    return;
  }
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::vector<std::jthread> pool;
  std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    std::size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
}

}  // namespace detail

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  CBM_ALIGN_CHECK(a.cols() == b.rows(), ErrorKind::kShapeMismatch,
                  "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                      " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t inner = a.cols();
  detail::parallel_rows(a.rows(), inner * b.cols(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t j = 0; j < b.cols(); ++j) {
        T acc{};
        for (std::size_t p = 0; p < inner; ++p) acc += a(i, p) * b(p, j);
        out(i, j) = acc;
      }
    }
  });
  return out;
}

/// a * b^T without materializing the transpose.
template <typename T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b) {
  CBM_ALIGN_CHECK(a.cols() == b.cols(), ErrorKind::kShapeMismatch,
                  "matmul_bt: inner dims " + std::to_string(a.cols()) + " vs " +
                      std::to_string(b.cols()));
  Matrix<T> out(a.rows(), b.rows());
  const std::size_t inner = a.cols();
  detail::parallel_rows(a.rows(), inner * b.rows(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto ra = a.row(i);
      for (std::size_t j = 0; j < b.rows(); ++j) {
        auto rb = b.row(j);
        T acc{};
        for (std::size_t p = 0; p < inner; ++p) acc += ra[p] * rb[p];
        out(i, j) = acc;
      }
    }
  });
  return out;
}

/// a^T * b.
template <typename T>
Matrix<T> matmul_at(const Matrix<T>& a, const Matrix<T>& b) {
  CBM_ALIGN_CHECK(a.rows() == b.rows(), ErrorKind::kShapeMismatch,
                  "matmul_at: row counts " + std::to_string(a.rows()) + " vs " +
                      std::to_string(b.rows()));
  Matrix<T> out(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T acc{};
      for (std::size_t p = 0; p < a.rows(); ++p) acc += a(p, i) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
Matrix<T> hconcat(const Matrix<T>& a, const Matrix<T>& b) {
  CBM_ALIGN_CHECK(a.rows() == b.rows(), ErrorKind::kShapeMismatch,
                  "hconcat: row counts " + std::to_string(a.rows()) + " vs " +
                      std::to_string(b.rows()));
  Matrix<T> out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

template <typename T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const std::size_t> indices) {
  Matrix<T> out(indices.size(), m.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    CBM_ALIGN_CHECK(indices[i] < m.rows(), ErrorKind::kInvalidArgument,
                    "gather_rows: index " + std::to_string(indices[i]) + " out of range");
    std::copy(m.row(indices[i]).begin(), m.row(indices[i]).end(), out.row(i).begin());
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline constexpr double kLayerNormEps = 1e-5;

/// Zero mean, unit (population) variance; no affine parameters.
inline std::vector<double> layer_norm(std::span<const double> v, double eps = kLayerNormEps) {
  CBM_ALIGN_CHECK(!v.empty(), ErrorKind::kInvalidArgument, "layer_norm: empty input");
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) * inv;
  return out;
}

/// Row-wise layer_norm.
inline Mat layer_norm_rows(const Mat& m, double eps = kLayerNormEps) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = layer_norm(m.row(i), eps);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

inline double log_sum_exp(std::span<const double> v) {
  double mx = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

inline std::vector<double> softmax(std::span<const double> v) {
  CBM_ALIGN_CHECK(!v.empty(), ErrorKind::kInvalidArgument, "softmax: empty input");
  double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  CBM_ALIGN_CHECK(a.size() == b.size(), ErrorKind::kShapeMismatch, "cosine_sim: length mismatch");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  CBM_ALIGN_CHECK(na > 0.0 && nb > 0.0, ErrorKind::kNumeric, "cosine_sim: zero-norm input");
  return dot(a, b) / (na * nb);
}

/// First index of the maximum entry.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// Solves a * x = b by Gaussian elimination with partial pivoting.
inline Mat solve(Mat a, Mat b, double singular_tol = 1e-12) {
  CBM_ALIGN_CHECK(a.rows() == a.cols() && a.rows() == b.rows(), ErrorKind::kShapeMismatch,
                  "solve: incompatible shapes");
  const std::size_t n = a.rows();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    CBM_ALIGN_CHECK(std::abs(a(pivot, col)) > singular_tol, ErrorKind::kNumeric,
                    "solve: matrix is singular to working precision");
    if (pivot != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(pivot, j));
      for (std::size_t j = 0; j < b.cols(); ++j) std::swap(b(col, j), b(pivot, j));
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col) / a(col, col);
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a(r, j) -= f * a(col, j);
      for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) -= f * b(col, j);
    }
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < b.cols(); ++j) b(r, j) /= a(r, r);
  return b;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Mat first_moment;
  Mat second_moment;
  std::int64_t step_count = 0;
  AdamConfig config;

  static AdamState for_param(const Mat& param, AdamConfig config = {}) {
    return {Mat(param.rows(), param.cols()), Mat(param.rows(), param.cols()), 0, config};
  }
};

/// One bias-corrected Adam update (no weight decay).
inline std::pair<Mat, AdamState> adam_step(Mat param, const Mat& grad, AdamState state) {
  CBM_ALIGN_CHECK(param.same_shape(grad) && param.same_shape(state.first_moment) &&
                      param.same_shape(state.second_moment),
                  ErrorKind::kShapeMismatch, "adam_step: parameter, gradient and moment shapes differ");
  const AdamConfig& cfg = state.config;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  auto& m = state.first_moment.data();
  auto& v = state.second_moment.data();
  auto& p = param.data();
  const auto& g = grad.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    p[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
  return {std::move(param), std::move(state)};
}

/// Central differences (f(x + h e_ij) - f(x - h e_ij)) / 2h for every entry.
inline Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& at, double h = 1e-5) {
  CBM_ALIGN_CHECK(h > 0.0, ErrorKind::kInvalidArgument, "finite_diff_grad: step must be positive");
  Mat x = at;
  Mat grad(at.rows(), at.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double plus = f(x);
    x.data()[i] = orig - h;
    const double minus = f(x);
    x.data()[i] = orig;
    CBM_ALIGN_CHECK(std::isfinite(plus) && std::isfinite(minus), ErrorKind::kNumeric,
                    "finite_diff_grad: non-finite function value at entry " + std::to_string(i));
    grad.data()[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

/// Largest per-entry |a - b| / max(|a|, |b|, floor). The floor keeps
/// entries that are zero up to rounding from dominating.
inline double max_relative_error(const Mat& analytic, const Mat& numeric, double floor = 1e-6) {
  CBM_ALIGN_CHECK(analytic.same_shape(numeric), ErrorKind::kShapeMismatch,
                  "max_relative_error: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

/// Seeded generator with distribution code pinned here, so draws are
/// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform in [0, n) by rejection, no modulo bias.
  std::size_t index(std::size_t n) {
    CBM_ALIGN_CHECK(n > 0, ErrorKind::kInvalidArgument, "Rng::index: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cbm_align
