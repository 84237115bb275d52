#include "dice/common.hpp"

#include <bit>
#include <cmath>
#include <cstring>

namespace dice {

bool Matrix::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double s = a(i, p);
      auto src = b.row(p);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += s * src[j];
    }
  }
  return out;
}

double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

bool bit_equal(const Matrix& a, const Matrix& b) noexcept {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  auto fa = a.flat();
  auto fb = b.flat();
  return fa.empty() || std::memcmp(fa.data(), fb.data(), fa.size_bytes()) == 0;
}

std::uint64_t fingerprint(std::span<const double> values, std::uint64_t h) noexcept {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFFU;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace dice
