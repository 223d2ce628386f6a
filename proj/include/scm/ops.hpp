#pragma once
// Differentiable operations over scm::Tensor.

#include <Eigen/Core>

#include <array>

#include "scm/tensor.hpp"

namespace scm {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Correctly rounded floating-point sum (Shewchuk's partials with a final
// round-half-even fix-up). The result is independent of the order of terms.
class ExactSum {
 public:
  void clear() { partials_.clear(); }
  void add(double x) {
    std::size_t i = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[i++] = lo;
      x = hi;
    }
    partials_.resize(i);
    partials_.push_back(x);
  }
  double value() const {
    std::size_t n = partials_.size();
    if (n == 0) return 0.0;
    double hi = partials_[--n], lo = 0.0;
    while (n > 0) {
      const double x = hi, y = partials_[--n];
      hi = x + y;
      lo = y - (hi - x);
      if (lo != 0.0) break;
    }
    if (n > 0 && ((lo < 0 && partials_[n - 1] < 0) || (lo > 0 && partials_[n - 1] > 0))) {
      const double y = lo * 2, x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline std::int64_t norm_axis(const Tensor& t, std::int64_t axis) {
  if (axis < 0) axis += t.ndim();
  if (axis < 0 || axis >= t.ndim()) throw DimensionError("axis out of range for " + shape_str(t.shape()));
  return axis;
}

// outer * axis_len * inner decomposition of a shape around one axis.
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_at(const Shape& shape, std::int64_t axis) {
  AxisSplit s;
  for (std::int64_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class F, class G>
Tensor unary(const Tensor& x, const char* name, F fwd, G dfdx) {
  Tensor out(x.shape());
  auto xd = x.data();
  auto od = out.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  require_finite(out, name);
  Tape::record(name, {x}, out, [x, out, dfdx]() mutable {
    auto g = out.grad();
    auto xd = x.data();
    auto od = out.data();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * dfdx(xd[i], od[i]);
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
  require_finite(out, "add");
  Tape::record("add", {a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) a.mutable_grad()[i] += g[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) b.mutable_grad()[i] += g[i];
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
  require_finite(out, "sub");
  Tape::record("sub", {a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) a.mutable_grad()[i] += g[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) b.mutable_grad()[i] -= g[i];
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  require_finite(out, "mul");
  Tape::record("mul", {a, b}, out, [a, b, out]() mutable {
    auto g = out.grad();
    if (a.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) a.mutable_grad()[i] += g[i] * b.data()[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < g.size(); ++i) b.mutable_grad()[i] += g[i] * a.data()[i];
  });
  return out;
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor leaky_relu(const Tensor& x, double alpha = 0.2) {
  auto* bt = BranchTrace::current();
  return detail::unary(
      x, "leaky_relu", [alpha, bt](double v) { return (bt ? bt->sign(v) > 0 : v > 0) ? v : alpha * v; },
      [alpha](double v, double) { return v > 0 ? 1.0 : alpha; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

// log(sigmoid(x)), stable for large |x|.
inline Tensor log_sigmoid(const Tensor& x) {
  return detail::unary(
      x, "log_sigmoid", [](double v) { return std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        if (v >= 0) {
          double e = std::exp(-v);
          return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(v));
      });
}

inline Tensor abs(const Tensor& x) {
  auto* bt = BranchTrace::current();
  return detail::unary(
      x, "abs", [bt](double v) { return bt ? bt->sign(v) * v : std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  require_finite(out, "sum");
  Tape::record("sum", {x}, out, [x, out]() mutable {
    double g = out.grad()[0];
    for (auto& v : x.mutable_grad()) v += g;
  });
  return out;
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// L1 norm: sum of absolute values.
inline Tensor abs_sum(const Tensor& x) {
  auto* bt = BranchTrace::current();
  double s = 0;
  for (double v : x.data()) s += bt ? bt->sign(v) * v : std::abs(v);
  Tensor out = Tensor::scalar(s);
  require_finite(out, "abs_sum");
  Tape::record("abs_sum", {x}, out, [x, out]() mutable {
    double g = out.grad()[0];
    auto xd = x.data();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < xd.size(); ++i) xg[i] += g * (xd[i] > 0 ? 1.0 : (xd[i] < 0 ? -1.0 : 0.0));
  });
  return out;
}

// Mean absolute difference.
inline Tensor l1_mean(const Tensor& a, const Tensor& b) {
  return scale(abs_sum(sub(a, b)), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------- shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  Tape::record("reshape", {x}, out, [x, out]() mutable {
    auto g = out.grad();
    auto xg = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
  });
  return out;
}

// Swaps the last two axes.
inline Tensor transpose_last2(const Tensor& x) {
  if (x.ndim() < 2) throw DimensionError("transpose_last2 needs ndim >= 2");
  Shape s = x.shape();
  std::int64_t r = s[s.size() - 2], c = s[s.size() - 1];
  std::int64_t batch = x.numel() / std::max<std::int64_t>(r * c, 1);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor out(s);
  for (std::int64_t b = 0; b < batch; ++b) {
    detail::CMapMat in(x.ptr() + b * r * c, r, c);
    detail::MapMat o(out.mutable_ptr() + b * r * c, c, r);
    o = in.transpose();
  }
  Tape::record("transpose", {x}, out, [x, out, r, c, batch]() mutable {
    for (std::int64_t b = 0; b < batch; ++b) {
      detail::CMapMat g(out.grad().data() + b * r * c, c, r);
      detail::MapMat xg(x.mutable_grad().data() + b * r * c, r, c);
      xg += g.transpose();
    }
  });
  return out;
}

inline Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis) {
  if (xs.empty()) throw DimensionError("concat of nothing");
  axis = detail::norm_axis(xs[0], axis);
  Shape s = xs[0].shape();
  std::int64_t total = 0;
  for (auto& x : xs) {
    if (x.ndim() != xs[0].ndim()) throw DimensionError("concat rank mismatch");
    for (std::int64_t d = 0; d < x.ndim(); ++d)
      if (d != axis && x.shape()[d] != s[d])
        throw DimensionError("concat shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(s));
    total += x.shape()[axis];
  }
  s[axis] = total;
  Tensor out(s);
  auto sp = detail::split_at(s, axis);
  std::int64_t offset = 0;
  for (auto& x : xs) {
    std::int64_t len = x.shape()[axis];
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.ptr() + o * len * sp.inner, len * sp.inner,
                  out.mutable_ptr() + (o * total + offset) * sp.inner);
    offset += len;
  }
  Tape::record("concat", xs, out, [xs, out, sp, axis, total]() mutable {
    std::int64_t offset = 0;
    for (auto x : xs) {
      std::int64_t len = x.shape()[axis];
      if (x.requires_grad()) {
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const double* g = out.grad().data() + (o * total + offset) * sp.inner;
          double* xg = x.mutable_grad().data() + o * len * sp.inner;
          for (std::int64_t i = 0; i < len * sp.inner; ++i) xg[i] += g[i];
        }
      }
      offset += len;
    }
  });
  return out;
}

// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t begin, std::int64_t end) {
  axis = detail::norm_axis(x, axis);
  std::int64_t n = x.shape()[axis];
  if (begin < 0 || end > n || begin > end)
    throw DimensionError("slice range out of bounds on " + shape_str(x.shape()));
  Shape s = x.shape();
  s[axis] = end - begin;
  Tensor out(s);
  auto sp = detail::split_at(x.shape(), axis);
  std::int64_t len = end - begin;
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.ptr() + (o * n + begin) * sp.inner, len * sp.inner, out.mutable_ptr() + o * len * sp.inner);
  Tape::record("slice", {x}, out, [x, out, sp, n, begin, len]() mutable {
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      const double* g = out.grad().data() + o * len * sp.inner;
      double* xg = x.mutable_grad().data() + (o * n + begin) * sp.inner;
      for (std::int64_t i = 0; i < len * sp.inner; ++i) xg[i] += g[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------- linear algebra

// Batched product of [B,M,K] and [B,K,N] (operands optionally transposed in
// their last two axes).
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
    throw DimensionError("bmm expects [B,.,.] operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::int64_t B = a.dim(0);
  const std::int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const std::int64_t M = trans_a ? ac : ar, K = trans_a ? ar : ac;
  const std::int64_t K2 = trans_b ? bc : br, N = trans_b ? br : bc;
  if (K != K2)
    throw DimensionError("bmm inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out(Shape{B, M, N});
  for (std::int64_t i = 0; i < B; ++i) {
    detail::CMapMat A(a.ptr() + i * ar * ac, ar, ac);
    detail::CMapMat Bm(b.ptr() + i * br * bc, br, bc);
    detail::MapMat O(out.mutable_ptr() + i * M * N, M, N);
    if (!trans_a && !trans_b) O.noalias() = A * Bm;
    else if (trans_a && !trans_b) O.noalias() = A.transpose() * Bm;
    else if (!trans_a && trans_b) O.noalias() = A * Bm.transpose();
    else O.noalias() = A.transpose() * Bm.transpose();
  }
  require_finite(out, "bmm");
  Tape::record("bmm", {a, b}, out, [a, b, out, B, ar, ac, br, bc, M, N, trans_a, trans_b]() mutable {
    for (std::int64_t i = 0; i < B; ++i) {
      detail::CMapMat A(a.ptr() + i * ar * ac, ar, ac);
      detail::CMapMat Bm(b.ptr() + i * br * bc, br, bc);
      detail::CMapMat G(out.grad().data() + i * M * N, M, N);
      if (a.requires_grad()) {
        detail::MapMat GA(a.mutable_grad().data() + i * ar * ac, ar, ac);
        // op(A) = G op(B)^T
        if (!trans_a && !trans_b) GA.noalias() += G * Bm.transpose();
        else if (!trans_a && trans_b) GA.noalias() += G * Bm;
        else if (trans_a && !trans_b) GA.noalias() += Bm * G.transpose();
        else GA.noalias() += Bm.transpose() * G.transpose();
      }
      if (b.requires_grad()) {
        detail::MapMat GB(b.mutable_grad().data() + i * br * bc, br, bc);
        // op(B) = op(A)^T G
        if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
        else if (trans_a && !trans_b) GB.noalias() += A * G;
        else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
        else GB.noalias() += G.transpose() * A.transpose();
      }
    }
  });
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw DimensionError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul inner dimension mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor r = bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}));
  return reshape(r, {a.dim(0), b.dim(1)});
}

// ---------------------------------------------------------------- softmax & friends

inline Tensor softmax(const Tensor& x, std::int64_t axis = -1) {
  axis = detail::norm_axis(x, axis);
  auto sp = detail::split_at(x.shape(), axis);
  if (sp.len < 1) throw DimensionError("softmax over empty axis");
  Tensor out(x.shape());
  const double* xd = x.ptr();
  double* od = out.mutable_ptr();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.len * sp.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < sp.len; ++k) m = std::max(m, xd[base + k * sp.inner]);
      double z = 0;
      for (std::int64_t k = 0; k < sp.len; ++k) {
        double e = std::exp(xd[base + k * sp.inner] - m);
        od[base + k * sp.inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < sp.len; ++k) od[base + k * sp.inner] /= z;
    }
  }
  require_finite(out, "softmax");
  Tape::record("softmax", {x}, out, [x, out, sp]() mutable {
    const double* y = out.ptr();
    const double* g = out.grad().data();
    double* xg = x.mutable_grad().data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.len * sp.inner + in;
        double dot = 0;
        for (std::int64_t k = 0; k < sp.len; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::int64_t k = 0; k < sp.len; ++k) {
          auto idx = base + k * sp.inner;
          xg[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
  return out;
}

// Subtracts, from every vector along `axis`, that vector's own mean.
inline Tensor center(const Tensor& x, std::int64_t axis) {
  axis = detail::norm_axis(x, axis);
  auto sp = detail::split_at(x.shape(), axis);
  Tensor out(x.shape());
  const double* xd = x.ptr();
  double* od = out.mutable_ptr();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.len * sp.inner + in;
      double m = 0;
      for (std::int64_t k = 0; k < sp.len; ++k) m += xd[base + k * sp.inner];
      m *= inv;
      for (std::int64_t k = 0; k < sp.len; ++k) od[base + k * sp.inner] = xd[base + k * sp.inner] - m;
    }
  }
  Tape::record("center", {x}, out, [x, out, sp, inv]() mutable {
    const double* g = out.grad().data();
    double* xg = x.mutable_grad().data();
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.len * sp.inner + in;
        double gm = 0;
        for (std::int64_t k = 0; k < sp.len; ++k) gm += g[base + k * sp.inner];
        gm *= inv;
        for (std::int64_t k = 0; k < sp.len; ++k) xg[base + k * sp.inner] += g[base + k * sp.inner] - gm;
      }
    }
  });
  return out;
}

// Cosine similarity between column vectors: q [B,C,M], k [B,C,N] -> [B,M,N],
// s_ij = <q_i, k_j> / max(|q_i| |k_j|, eps). Exactly scale invariant away from
// zero vectors, which give 0.
inline Tensor cosine_similarity(const Tensor& q, const Tensor& k, double eps) {
  if (q.ndim() != 3 || k.ndim() != 3 || q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1))
    throw DimensionError("cosine_similarity expects [B,C,M] and [B,C,N], got " + shape_str(q.shape()) +
                         " and " + shape_str(k.shape()));
  const std::int64_t B = q.dim(0), C = q.dim(1), M = q.dim(2), N = k.dim(2);
  Tensor out(Shape{B, M, N});
  // dots and norms are recomputed in backward.
  auto norms = [C](const double* p, std::int64_t cols) {
    Eigen::VectorXd n(cols);
    detail::CMapMat m(p, C, cols);
    for (std::int64_t j = 0; j < cols; ++j) n[j] = m.col(j).norm();
    return n;
  };
  for (std::int64_t b = 0; b < B; ++b) {
    detail::CMapMat Q(q.ptr() + b * C * M, C, M);
    detail::CMapMat K(k.ptr() + b * C * N, C, N);
    detail::MapMat O(out.mutable_ptr() + b * M * N, M, N);
    O.noalias() = Q.transpose() * K;
    Eigen::VectorXd nq = norms(Q.data(), M), nk = norms(K.data(), N);
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) O(i, j) = std::clamp(O(i, j) / std::max(nq[i] * nk[j], eps), -1.0, 1.0);
  }
  require_finite(out, "cosine_similarity");
  Tape::record("cosine_similarity", {q, k}, out, [q, k, out, B, C, M, N, eps, norms]() mutable {
    for (std::int64_t b = 0; b < B; ++b) {
      detail::CMapMat Q(q.ptr() + b * C * M, C, M);
      detail::CMapMat K(k.ptr() + b * C * N, C, N);
      detail::CMapMat G(out.grad().data() + b * M * N, M, N);
      detail::RowMat dots = Q.transpose() * K;
      Eigen::VectorXd nq = norms(Q.data(), M), nk = norms(K.data(), N);
      // s = d / D, D = max(nq nk, eps).
      // ds/dq_i = k_j / D - d nk_j q_i / (nq_i D^2)   (second term only when D = nq nk > eps)
      detail::RowMat A(M, N);   // coefficient on k_j for dq_i
      Eigen::VectorXd aq = Eigen::VectorXd::Zero(M);  // coefficient on q_i for dq_i
      Eigen::VectorXd ak = Eigen::VectorXd::Zero(N);  // coefficient on k_j for dk_j
      for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t j = 0; j < N; ++j) {
          const double D = std::max(nq[i] * nk[j], eps);
          const double g = G(i, j);
          A(i, j) = g / D;
          if (nq[i] * nk[j] <= eps) continue;
          const double common = g * dots(i, j) / (D * D);
          aq[i] -= common * nk[j] / nq[i];
          ak[j] -= common * nq[i] / nk[j];
        }
      }
      if (q.requires_grad()) {
        detail::MapMat QG(q.mutable_grad().data() + b * C * M, C, M);
        QG.noalias() += K * A.transpose();
        QG += Q * aq.asDiagonal();
      }
      if (k.requires_grad()) {
        detail::MapMat KG(k.mutable_grad().data() + b * C * N, C, N);
        KG.noalias() += Q * A;
        KG += K * ak.asDiagonal();
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- convolution

enum class PadMode { kZero, kReplicate };

namespace detail {

struct ConvGeom {
  std::int64_t N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo;
  PadMode mode;
  std::int64_t K() const { return Cin * kh * kw; }
  std::int64_t P() const { return Ho * Wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Source index along one axis for every output position and kernel tap;
// -1 marks a zero-padded read.
inline std::vector<std::int64_t> tap_table(std::int64_t n, std::int64_t out, std::int64_t k, std::int64_t stride,
                                           std::int64_t pad, PadMode mode) {
  std::vector<std::int64_t> t(static_cast<std::size_t>(k * out));
  for (std::int64_t j = 0; j < k; ++j)
    for (std::int64_t o = 0; o < out; ++o) {
      std::int64_t i = o * stride - pad + j;
      if (i < 0 || i >= n) i = mode == PadMode::kReplicate ? std::clamp<std::int64_t>(i, 0, n - 1) : -1;
      t[static_cast<std::size_t>(j * out + o)] = i;
    }
  return t;
}

struct ConvTables {
  std::vector<std::int64_t> ty, tx;
  explicit ConvTables(const ConvGeom& g)
      : ty(tap_table(g.H, g.Ho, g.kh, g.stride, g.pad, g.mode)), tx(tap_table(g.W, g.Wo, g.kw, g.stride, g.pad, g.mode)) {}
};

// Unfolds one sample x [Cin,H,W] into columns: row (c,ky,kx), column (oy,ox),
// written with leading dimension ld.
inline void im2col(const ConvGeom& g, const ConvTables& t, const double* x, double* col, std::int64_t ld) {
  for (std::int64_t c = 0; c < g.Cin; ++c) {
    const double* plane = x + c * g.H * g.W;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      const std::int64_t* tyr = t.ty.data() + ky * g.Ho;
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const std::int64_t* txr = t.tx.data() + kx * g.Wo;
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          double* dst = row + oy * g.Wo;
          const std::int64_t iy = tyr[oy];
          if (iy < 0) {
            std::fill(dst, dst + g.Wo, 0.0);
            continue;
          }
          const double* src = plane + iy * g.W;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const std::int64_t ix = txr[ox];
            dst[ox] = ix < 0 ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into dx [Cin,H,W].
inline void col2im(const ConvGeom& g, const ConvTables& t, const double* col, std::int64_t ld, double* dx) {
  for (std::int64_t c = 0; c < g.Cin; ++c) {
    double* plane = dx + c * g.H * g.W;
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      const std::int64_t* tyr = t.ty.data() + ky * g.Ho;
      for (std::int64_t kx = 0; kx < g.kw; ++kx) {
        const std::int64_t* txr = t.tx.data() + kx * g.Wo;
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * ld;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const std::int64_t iy = tyr[oy];
          if (iy < 0) continue;
          const double* src = row + oy * g.Wo;
          double* dst = plane + iy * g.W;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const std::int64_t ix = txr[ox];
            if (ix >= 0) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Unfolds samples [n0, n0+ns) into a column matrix [K, ns*P].
inline void chunk_columns(const ConvGeom& g, const ConvTables& t, const double* x, std::int64_t n0, std::int64_t ns,
                          double* col) {
  const std::int64_t K = g.K(), P = g.P(), ld = ns * P;
  for (std::int64_t i = 0; i < ns; ++i) {
    const double* xn = x + (n0 + i) * g.Cin * g.H * g.W;
    if (g.pointwise()) {
      for (std::int64_t k = 0; k < K; ++k) std::copy_n(xn + k * P, P, col + k * ld + i * P);
    } else {
      im2col(g, t, xn, col + i * P, ld);
    }
  }
}

// Samples per GEMM so that one column chunk stays cache-sized.
inline std::int64_t conv_chunk(const ConvGeom& g) {
  constexpr std::int64_t kTarget = std::int64_t{1} << 19;  // doubles
  return std::clamp<std::int64_t>(kTarget / std::max<std::int64_t>(g.K() * g.P(), 1), 1, g.N);
}

inline std::vector<double>& scratch(int slot) {
  thread_local std::array<std::vector<double>, 3> buf;
  return buf[static_cast<std::size_t>(slot)];
}

inline double* scratch_ptr(int slot, std::int64_t n) {
  auto& v = scratch(slot);
  if (static_cast<std::int64_t>(v.size()) < n) v.resize(static_cast<std::size_t>(n));
  return v.data();
}

}  // namespace detail

// Output extent of a strided window: floor((n + 2 pad - k) / stride) + 1.
inline std::int64_t conv_out_size(std::int64_t n, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  if (stride < 1) throw ConfigError("conv stride must be >= 1");
  if (pad < 0) throw ConfigError("conv padding must be >= 0");
  if (n + 2 * pad < k)
    throw ConfigError("conv window " + std::to_string(k) + " larger than padded input " + std::to_string(n + 2 * pad));
  return (n + 2 * pad - k) / stride + 1;
}

// Cross-correlation of x [N,Cin,H,W] with w [Cout,Cin,kh,kw] plus bias [Cout].
// The whole batch is unfolded into one column matrix and multiplied at once.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride, std::int64_t pad,
                     PadMode mode = PadMode::kZero) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw DimensionError("conv2d expects 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
  if (w.dim(1) != x.dim(1))
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()));
  if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0) throw ConfigError("conv2d kernel sizes must be odd");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != w.dim(0)))
    throw DimensionError("conv2d bias must be [Cout]");
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0, mode};
  g.Ho = conv_out_size(g.H, g.kh, stride, pad);
  g.Wo = conv_out_size(g.W, g.kw, stride, pad);

  Tensor out(Shape{g.N, g.Cout, g.Ho, g.Wo});
  const std::int64_t K = g.K(), P = g.P(), chunk = detail::conv_chunk(g);
  auto tables = std::make_shared<detail::ConvTables>(g);
  detail::CMapMat Wm(w.ptr(), g.Cout, K);
  if (g.pointwise()) {
    // Pointwise: the same accumulation sequence at every position, so the
    // result is exactly equivariant to spatial permutations.
    for (std::int64_t n = 0; n < g.N; ++n)
      for (std::int64_t o = 0; o < g.Cout; ++o) {
        double* dst = out.mutable_ptr() + (n * g.Cout + o) * P;
        const double b = bias.defined() ? bias[o] : 0.0;
        std::fill_n(dst, P, 0.0);
        for (std::int64_t c = 0; c < g.Cin; ++c) {
          const double wv = w[o * g.Cin + c];
          const double* src = x.ptr() + (n * g.Cin + c) * P;
          for (std::int64_t p = 0; p < P; ++p) dst[p] += wv * src[p];
        }
        for (std::int64_t p = 0; p < P; ++p) dst[p] += b;
      }
  }
  for (std::int64_t n0 = 0; n0 < g.N && !g.pointwise(); n0 += chunk) {
    const std::int64_t ns = std::min(chunk, g.N - n0), ld = ns * P;
    double* col = detail::scratch_ptr(0, K * ld);
    double* o = detail::scratch_ptr(1, g.Cout * ld);
    detail::chunk_columns(g, *tables, x.ptr(), n0, ns, col);
    detail::MapMat O(o, g.Cout, ld);
    O.noalias() = Wm * detail::CMapMat(col, K, ld);
    for (std::int64_t i = 0; i < ns; ++i)
      for (std::int64_t c = 0; c < g.Cout; ++c) {
        double* dst = out.mutable_ptr() + ((n0 + i) * g.Cout + c) * P;
        const double* src = o + c * ld + i * P;
        const double b = bias.defined() ? bias[c] : 0.0;
        for (std::int64_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
  }
  require_finite(out, "conv2d");

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  Tape::record("conv2d", std::move(inputs), out, [x, w, bias, out, g, tables]() mutable {
    const std::int64_t K = g.K(), P = g.P(), chunk = detail::conv_chunk(g);
    detail::CMapMat Wm(w.ptr(), g.Cout, K);
    for (std::int64_t n0 = 0; n0 < g.N; n0 += chunk) {
      const std::int64_t ns = std::min(chunk, g.N - n0), ld = ns * P;
      double* gp = detail::scratch_ptr(1, g.Cout * ld);
      for (std::int64_t i = 0; i < ns; ++i)
        for (std::int64_t c = 0; c < g.Cout; ++c)
          std::copy_n(out.grad().data() + ((n0 + i) * g.Cout + c) * P, P, gp + c * ld + i * P);
      detail::CMapMat G(gp, g.Cout, ld);
      if (bias.defined() && bias.requires_grad()) {
        auto bg = bias.mutable_grad();
        for (std::int64_t c = 0; c < g.Cout; ++c) bg[c] += G.row(c).sum();
      }
      if (w.requires_grad()) {
        double* col = detail::scratch_ptr(0, K * ld);
        detail::chunk_columns(g, *tables, x.ptr(), n0, ns, col);
        detail::MapMat WG(w.mutable_grad().data(), g.Cout, K);
        WG.noalias() += G * detail::CMapMat(col, K, ld).transpose();
      }
      if (x.requires_grad()) {
        double* dc = detail::scratch_ptr(2, K * ld);
        detail::MapMat DC(dc, K, ld);
        DC.noalias() = Wm.transpose() * G;
        for (std::int64_t i = 0; i < ns; ++i) {
          double* dxn = x.mutable_grad().data() + (n0 + i) * g.Cin * g.H * g.W;
          if (g.pointwise()) {
            for (std::int64_t k = 0; k < K; ++k) {
              const double* src = dc + k * ld + i * P;
              double* dst = dxn + k * P;
              for (std::int64_t p = 0; p < P; ++p) dst[p] += src[p];
            }
          } else {
            detail::col2im(g, *tables, dc + i * P, ld, dxn);
          }
        }
      }
    }
  });
  return out;
}

// Nearest-neighbour 2x upsampling of [N,C,H,W].
inline Tensor upsample_nearest2x(const Tensor& x) {
  if (x.ndim() != 4) throw DimensionError("upsample expects [N,C,H,W]");
  const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W});
  for (std::int64_t p = 0; p < NC; ++p) {
    const double* in = x.ptr() + p * H * W;
    double* o = out.mutable_ptr() + p * 4 * H * W;
    for (std::int64_t y = 0; y < 2 * H; ++y)
      for (std::int64_t xx = 0; xx < 2 * W; ++xx) o[y * 2 * W + xx] = in[(y / 2) * W + xx / 2];
  }
  Tape::record("upsample_nearest2x", {x}, out, [x, out, NC, H, W]() mutable {
    for (std::int64_t p = 0; p < NC; ++p) {
      const double* g = out.grad().data() + p * 4 * H * W;
      double* xg = x.mutable_grad().data() + p * H * W;
      for (std::int64_t y = 0; y < 2 * H; ++y)
        for (std::int64_t xx = 0; xx < 2 * W; ++xx) xg[(y / 2) * W + xx / 2] += g[y * 2 * W + xx];
    }
  });
  return out;
}

// For features [N,C,H,W] and binary masks [N,R,H,W], returns [N,R,C]: the mean
// feature vector over each region's positions, or zeros for an empty region.
// The mask is treated as a constant.
inline Tensor region_avg_pool(const Tensor& features, const Tensor& mask) {
  if (features.ndim() != 4 || mask.ndim() != 4 || features.dim(0) != mask.dim(0) ||
      features.dim(2) != mask.dim(2) || features.dim(3) != mask.dim(3))
    throw DimensionError("region_avg_pool: features " + shape_str(features.shape()) + " vs mask " +
                         shape_str(mask.shape()));
  const std::int64_t N = features.dim(0), C = features.dim(1), R = mask.dim(1);
  const std::int64_t HW = features.dim(2) * features.dim(3);
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0) throw ValidationError("region_avg_pool mask must be binary");
  Tensor out(Shape{N, R, C});
  std::vector<double> counts(static_cast<std::size_t>(N * R), 0.0);
  for (std::int64_t n = 0; n < N; ++n) {
    detail::CMapMat F(features.ptr() + n * C * HW, C, HW);
    detail::CMapMat Mk(mask.ptr() + n * R * HW, R, HW);
    detail::MapMat O(out.mutable_ptr() + n * R * C, R, C);
    O.noalias() = Mk * F.transpose();
    for (std::int64_t r = 0; r < R; ++r) {
      double cnt = Mk.row(r).sum();
      counts[n * R + r] = cnt;
      if (cnt > 0) O.row(r) /= cnt;
      else O.row(r).setZero();
    }
  }
  Tape::record("region_avg_pool", {features}, out, [features, mask, out, counts, N, C, R, HW]() mutable {
    for (std::int64_t n = 0; n < N; ++n) {
      detail::CMapMat Mk(mask.ptr() + n * R * HW, R, HW);
      detail::CMapMat G(out.grad().data() + n * R * C, R, C);
      detail::RowMat Gs = G;
      for (std::int64_t r = 0; r < R; ++r) {
        double cnt = counts[n * R + r];
        if (cnt > 0) Gs.row(r) /= cnt;
        else Gs.row(r).setZero();
      }
      detail::MapMat FG(features.mutable_grad().data() + n * C * HW, C, HW);
      FG.noalias() += Gs.transpose() * Mk;
    }
  });
  return out;
}

// Non-differentiable k x k max pooling with stride k.
inline Tensor max_pool(const Tensor& x, std::int64_t k) {
  if (x.ndim() != 4 || x.dim(2) % k != 0 || x.dim(3) % k != 0)
    throw DimensionError("max_pool needs [N,C,H,W] with H, W divisible by " + std::to_string(k));
  const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), Ho = H / k, Wo = W / k;
  Tensor out(Shape{x.dim(0), x.dim(1), Ho, Wo});
  for (std::int64_t p = 0; p < NC; ++p)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx) m = std::max(m, x[p * H * W + (y * k + dy) * W + xx * k + dx]);
        out.mutable_data()[p * Ho * Wo + y * Wo + xx] = m;
      }
  return out;
}

}  // namespace scm
