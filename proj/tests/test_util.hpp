#pragma once
// Shared helpers for the unit tests: random tensors and naive-loop oracles.

#include <random>

#include "scm/tensor.hpp"

namespace scm::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ud(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = ud(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Six-loop direct convolution with zero padding.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
                           std::int64_t pad, bool replicate = false) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{N, O, Ho, Wo});
  auto od = out.mutable_data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t xx = 0; xx < Wo; ++xx) {
          double acc = b[o];
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < kh; ++i)
              for (std::int64_t j = 0; j < kw; ++j) {
                std::int64_t iy = y * stride - pad + i, ix = xx * stride - pad + j;
                if (replicate) {
                  iy = std::clamp<std::int64_t>(iy, 0, H - 1);
                  ix = std::clamp<std::int64_t>(ix, 0, W - 1);
                } else if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
                  continue;
                }
                acc += x[((n * C + c) * H + iy) * W + ix] * w[((o * C + c) * kh + i) * kw + j];
              }
          od[((n * O + o) * Ho + y) * Wo + xx] = acc;
        }
  return out;
}

}  // namespace scm::testing
