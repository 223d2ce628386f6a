#pragma once
// Training objectives: adversarial, reconstruction, perceptual, style and
// body-structure terms, with the frozen feature pyramid they share.

#include <array>

#include "scm/encoders.hpp"
#include "scm/translator.hpp"

namespace scm {

inline constexpr std::uint64_t kDefaultPyramidSeed = 0x5059524Dull;

// Frozen random conv stack (widths 16/32/64, stride 2 each) standing in for
// pretrained perceptual features.
class FeaturePyramid {
 public:
  static constexpr int kStages = 3;
  static constexpr int kGraphStage = 1;  // zero-based index of stage 2

  explicit FeaturePyramid(std::uint64_t seed = kDefaultPyramidSeed) : seed_(seed) {
    std::mt19937_64 rng(splitmix64(seed));
    const std::int64_t widths[kStages + 1] = {3, 16, 32, 64};
    for (int s = 0; s < kStages; ++s) convs_[s] = Conv(widths[s], widths[s + 1], 3, 2, PadMode::kZero, rng);
  }

  std::uint64_t seed() const { return seed_; }
  const Conv& stage(int s) const { return convs_[static_cast<std::size_t>(s)]; }

  // Activations of every stage for images [N,3,H,W].
  std::vector<Tensor> features(const Tensor& image) const {
    std::vector<Tensor> out;
    Tensor x = image;
    for (const auto& c : convs_) {
      x = conv_lrelu(c, x);
      out.push_back(x);
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::array<Conv, kStages> convs_;
};

struct LossWeights {
  double adv = 5.0;
  double rec = 1.0;
  double perc = 1.0;
  double style = 150.0;
  double graph = 1.0;
};

// Mean absolute difference over all elements.
inline Tensor l_rec(const Tensor& fake, const Tensor& real) {
  detail::check_same_shape(fake, real, "l_rec");
  return l1_mean(fake, real);
}

inline Tensor l_perc(const Tensor& fake, const Tensor& real, const FeaturePyramid& pyr) {
  detail::check_same_shape(fake, real, "l_perc");
  auto a = pyr.features(fake), b = pyr.features(real);
  Tensor total = l1_mean(a[0], b[0]);
  for (std::size_t l = 1; l < a.size(); ++l) total = add(total, l1_mean(a[l], b[l]));
  return total;
}

// Gram matrices [N,C,C] of features [N,C,H,W], normalized by C*H*W.
inline Tensor gram(const Tensor& f) {
  if (f.ndim() != 4) throw DimensionError("gram expects [N,C,H,W], got " + shape_str(f.shape()));
  const std::int64_t N = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
  const double inv = 1.0 / static_cast<double>(C * HW);
  Tensor out(Shape{N, C, C});
  detail::ExactSum acc;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < C; ++i)
      for (std::int64_t j = i; j < C; ++j) {
        const double* a = f.ptr() + (n * C + i) * HW;
        const double* b = f.ptr() + (n * C + j) * HW;
        acc.clear();
        for (std::int64_t k = 0; k < HW; ++k) acc.add(a[k] * b[k]);
        const double v = acc.value() * inv;
        out.mutable_ptr()[(n * C + i) * C + j] = v;
        out.mutable_ptr()[(n * C + j) * C + i] = v;
      }
  require_finite(out, "gram");
  Tape::record("gram", {f}, out, [f, out, N, C, HW, inv]() mutable {
    for (std::int64_t n = 0; n < N; ++n) {
      detail::CMapMat A(f.ptr() + n * C * HW, C, HW);
      detail::CMapMat G(out.grad().data() + n * C * C, C, C);
      detail::MapMat GA(f.mutable_grad().data() + n * C * HW, C, HW);
      GA.noalias() += inv * (G + G.transpose()) * A;
    }
  });
  return out;
}

// Sum over stages of the L1 distance between Gram matrices, averaged over the batch.
inline Tensor l_style(const Tensor& fake, const Tensor& real, const FeaturePyramid& pyr) {
  detail::check_same_shape(fake, real, "l_style");
  auto a = pyr.features(fake), b = pyr.features(real);
  const double inv_n = 1.0 / static_cast<double>(fake.dim(0));
  Tensor total;
  for (std::size_t l = 0; l < a.size(); ++l) {
    Tensor t = scale(abs_sum(sub(gram(a[l]), gram(b[l]))), inv_n);
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

// Scales each vector along the last axis to unit length: y = x / sqrt(|x|^2 + eps^2).
// Zero vectors stay zero.
inline Tensor l2_normalize_last(const Tensor& x, double eps = 1e-12) {
  if (x.ndim() < 1) throw DimensionError("l2_normalize_last needs ndim >= 1");
  const std::int64_t D = x.dim(-1), rows = D ? x.numel() / D : 0;
  Tensor out(x.shape());
  std::vector<double> inv(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* v = x.ptr() + r * D;
    double n2 = eps * eps;
    for (std::int64_t d = 0; d < D; ++d) n2 += v[d] * v[d];
    inv[r] = 1.0 / std::sqrt(n2);
    for (std::int64_t d = 0; d < D; ++d) out.mutable_ptr()[r * D + d] = v[d] * inv[r];
  }
  Tape::record("l2_normalize", {x}, out, [x, out, inv, D, rows]() mutable {
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = out.ptr() + r * D;
      const double* g = out.grad().data() + r * D;
      double* xg = x.mutable_grad().data() + r * D;
      double dot = 0;
      for (std::int64_t d = 0; d < D; ++d) dot += g[d] * y[d];
      for (std::int64_t d = 0; d < D; ++d) xg[d] += inv[r] * (g[d] - y[d] * dot);
    }
  });
  return out;
}

struct BodyGraph {
  Tensor nodes;      // [N,8,C2] per-region pooled stage-2 features
  Tensor adjacency;  // [N,8,8] cosine similarities between nodes
};

// Region masks [N,8,H,W] downsampled to the graph stage by max pooling.
inline Tensor graph_mask(const Tensor& mask, const Tensor& stage_features) {
  if (mask.ndim() != 4 || mask.dim(2) % stage_features.dim(2) != 0)
    throw DimensionError("graph mask " + shape_str(mask.shape()) + " incompatible with features " +
                         shape_str(stage_features.shape()));
  return max_pool(mask, mask.dim(2) / stage_features.dim(2));
}

inline BodyGraph build_body_graph(const Tensor& image, const Tensor& mask, const FeaturePyramid& pyr) {
  auto feats = pyr.features(image);
  const Tensor& f = feats[FeaturePyramid::kGraphStage];
  BodyGraph g;
  g.nodes = region_avg_pool(f, graph_mask(mask, f));
  Tensor unit = l2_normalize_last(g.nodes);
  g.adjacency = bmm(unit, unit, false, true);
  return g;
}

// ||nodes(I) - nodes(I^)||_1 + w ||adj(I) - adj(I^)||_1 per sample, averaged over the batch.
inline Tensor l_bsr(const Tensor& fake, const Tensor& real, const Tensor& mask, const FeaturePyramid& pyr,
                    double adjacency_weight = 1.0) {
  detail::check_same_shape(fake, real, "l_bsr");
  BodyGraph a = build_body_graph(fake, mask, pyr), b = build_body_graph(real, mask, pyr);
  Tensor t = add(abs_sum(sub(a.nodes, b.nodes)), scale(abs_sum(sub(a.adjacency, b.adjacency)), adjacency_weight));
  return scale(t, 1.0 / static_cast<double>(fake.dim(0)));
}

// Discriminator loss from patch logits: -mean[log D_s(I) + log D_p(I,P)
// + log(1 - D_s(I^)) + log(1 - D_p(I^,P))], each term averaged over its grid.
inline Tensor l_adv_d(const Tensor& real_style, const Tensor& real_pose, const Tensor& fake_style,
                      const Tensor& fake_pose) {
  Tensor t = add(add(mean(log_sigmoid(real_style)), mean(log_sigmoid(real_pose))),
                 add(mean(log_sigmoid(scale(fake_style, -1.0))), mean(log_sigmoid(scale(fake_pose, -1.0)))));
  return scale(t, -1.0);
}

// Non-saturating generator loss: -mean[log D_s(I^) + log D_p(I^,P)].
inline Tensor l_adv_g(const Tensor& fake_style, const Tensor& fake_pose) {
  return scale(add(mean(log_sigmoid(fake_style)), mean(log_sigmoid(fake_pose))), -1.0);
}

struct LossTerms {
  Tensor adv_g, rec, perc, style, graph;
};

inline Tensor l_total(const LossTerms& t, const LossWeights& w) {
  return add(add(add(scale(t.adv_g, w.adv), scale(t.rec, w.rec)), add(scale(t.perc, w.perc), scale(t.style, w.style))),
             scale(t.graph, w.graph));
}

}  // namespace scm
