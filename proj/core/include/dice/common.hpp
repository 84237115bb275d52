#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dice {

/// Raised for invalid user-facing configuration (bad dims, unknown preset, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a caller violates an operation's preconditions (shape mismatch etc).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when activations become non-finite.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, int step = -1, int layer = -1)
      : std::runtime_error(what), step_(step), layer_(layer) {}
  int step() const noexcept { return step_; }
  int layer() const noexcept { return layer_; }

 private:
  int step_;
  int layer_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// out = a * b, accumulated left to right over the inner dimension.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Exact (erf-based) GELU.
double gelu(double x) noexcept;

/// Bit-level equality, NaN-aware (two NaNs with equal payload compare equal).
bool bit_equal(const Matrix& a, const Matrix& b) noexcept;

/// splitmix64 generator. First output for seed 0 is 0xE220A8397B1DCDAF.
class SplitMix64 {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    state_ += kGamma;
    return mix(state_);
  }

  /// Uniform double in [0, 1) built from the top 53 bits.
  double next_unit() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform double in [-a, a).
  double next_symmetric(double a) noexcept { return a * (2.0 * next_unit() - 1.0); }

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Order-sensitive hash combination for counter-based draws.
constexpr std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) noexcept {
  return SplitMix64::mix(h ^ (v + SplitMix64::kGamma + (h << 6) + (h >> 2)));
}

/// FNV-1a over the bytes of a double span; used for model/sample fingerprints.
std::uint64_t fingerprint(std::span<const double> values, std::uint64_t h = 0xCBF29CE484222325ULL) noexcept;

}  // namespace dice
