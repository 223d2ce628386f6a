#pragma once
// Finite-difference verification of every differentiable operation and of
// the end-to-end pipeline on a reduced-resolution configuration.

#include "scm/gradcheck.hpp"
#include "scm/trainer.hpp"

namespace scm {

struct GradSuiteEntry {
  std::string name;
  double max_rel_error = 0;
  std::int64_t checked = 0;
  std::string worst;
};

struct GradSuiteOptions {
  std::uint64_t seed = 1;
  std::int64_t pipeline_image_res = 32;  // 8x8 features
  std::int64_t max_elements = 8;         // per parameter tensor in pipeline checks
  double eps = 1e-5;
  // Pipeline losses are large (~1e3) next to small parameter gradients; a
  // wider step keeps rounding noise below tolerance.
  double pipeline_eps = 1e-4;
};

namespace detail {

inline Tensor suite_tensor(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_real_distribution<double> ud(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = ud(rng);
  return t;
}

// Random projection of a tensor to a scalar so every output element matters.
inline Tensor probe(const Tensor& y, std::uint64_t seed) { return sum(mul(y, suite_tensor(y.shape(), seed))); }

inline Tensor binary_mask(Shape shape, std::uint64_t seed) {
  Tensor m(shape);
  const std::int64_t N = shape[0], R = shape[1], HW = shape[2] * shape[3];
  std::mt19937_64 rng(splitmix64(seed));
  std::uniform_int_distribution<std::int64_t> pick(0, R - 1);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t i = 0; i < HW; ++i) m.mutable_data()[(n * R + pick(rng)) * HW + i] = 1.0;
  return m;
}

}  // namespace detail

// Batch of `n` synthetic samples subsampled to `image_res`.
inline Batch reduced_batch(std::int64_t n, std::int64_t image_res, std::uint64_t seed) {
  auto data = synth::generate_dataset(n, seed, 0.5);
  for (auto& s : data) s = synth::downsample(s, synth::kImageSize / image_res);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(data, idx);
}

inline TrainConfig reduced_config(std::int64_t image_res, std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.model.image_res = image_res;
  cfg.model.feature_res = image_res / 4;
  cfg.model.seed = seed;
  cfg.clip_norm = 0.0;
  cfg.steps = 0;
  return cfg;
}

inline std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& opt = {},
                                                      const std::function<void(const GradSuiteEntry&)>& report = {}) {
  using detail::probe;
  using detail::suite_tensor;
  std::vector<GradSuiteEntry> out;
  std::uint64_t s = opt.seed * 1000;
  GradCheckOptions gco;
  gco.eps = opt.eps;
  auto check = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                   std::int64_t max_el = 0, double eps = 0) {
    GradCheckOptions o = gco;
    o.max_elements = max_el;
    if (eps > 0) o.eps = eps;
    auto r = check_gradients(f, std::move(wrt), o);
    out.push_back({name, r.max_rel_error, r.checked, r.worst});
    if (report) report(out.back());
  };

  // Elementwise and reductions.
  Tensor a = suite_tensor({3, 4}, ++s), b = suite_tensor({3, 4}, ++s);
  check("add", [&] { return probe(add(a, b), 1); }, {a, b});
  check("sub", [&] { return probe(sub(a, b), 2); }, {a, b});
  check("mul", [&] { return probe(mul(a, b), 3); }, {a, b});
  check("scale", [&] { return probe(scale(a, -1.7), 4); }, {a});
  check("add_scalar", [&] { return probe(add_scalar(a, 0.3), 5); }, {a});
  check("leaky_relu", [&] { return probe(leaky_relu(a), 6); }, {a});
  check("sigmoid", [&] { return probe(sigmoid(a), 7); }, {a});
  check("tanh", [&] { return probe(tanh(a), 8); }, {a});
  check("log_sigmoid", [&] { return probe(log_sigmoid(a), 9); }, {a});
  check("abs", [&] { return probe(abs(a), 10); }, {a});
  check("sum", [&] { return sum(a); }, {a});
  check("mean", [&] { return mean(a); }, {a});
  check("abs_sum", [&] { return abs_sum(a); }, {a});
  check("l1_mean", [&] { return l1_mean(a, b); }, {a, b});

  // Shape ops.
  Tensor c = suite_tensor({2, 3, 4}, ++s), d = suite_tensor({2, 2, 4}, ++s);
  check("reshape", [&] { return probe(reshape(c, {6, 4}), 11); }, {c});
  check("transpose", [&] { return probe(transpose_last2(c), 12); }, {c});
  check("concat", [&] { return probe(concat({c, d}, 1), 13); }, {c, d});
  check("slice", [&] { return probe(slice(c, 2, 1, 3), 14); }, {c});
  Tensor u = suite_tensor({1, 2, 3, 3}, ++s);
  check("upsample_nearest2x", [&] { return probe(upsample_nearest2x(u), 15); }, {u});

  // Linear algebra, softmax, similarity.
  Tensor m1 = suite_tensor({2, 3, 4}, ++s), m2 = suite_tensor({2, 4, 5}, ++s), m3 = suite_tensor({2, 5, 4}, ++s);
  check("bmm", [&] { return probe(bmm(m1, m2), 16); }, {m1, m2});
  check("bmm_transposed", [&] { return probe(bmm(m1, m3, false, true), 17); }, {m1, m3});
  Tensor p1 = suite_tensor({3, 4}, ++s), p2 = suite_tensor({4, 2}, ++s);
  check("matmul", [&] { return probe(matmul(p1, p2), 18); }, {p1, p2});
  check("softmax", [&] { return probe(softmax(c, 1), 19); }, {c});
  check("center", [&] { return probe(center(c, 1), 20); }, {c});
  Tensor q = suite_tensor({2, 4, 3}, ++s), k = suite_tensor({2, 4, 5}, ++s);
  check("cosine_similarity", [&] { return probe(cosine_similarity(q, k, kCosineEps), 21); }, {q, k});
  check("l2_normalize", [&] { return probe(l2_normalize_last(c), 22); }, {c});

  // Convolution and pooling.
  Tensor x = suite_tensor({2, 3, 6, 6}, ++s), w = suite_tensor({4, 3, 3, 3}, ++s, -0.5, 0.5),
         bias = suite_tensor({4}, ++s);
  check("conv2d", [&] { return probe(conv2d(x, w, bias, 1, 1), 23); }, {x, w, bias});
  check("conv2d_stride2_replicate", [&] { return probe(conv2d(x, w, bias, 2, 1, PadMode::kReplicate), 24); },
      {x, w, bias});
  Tensor w1 = suite_tensor({4, 3, 1, 1}, ++s);
  check("conv2d_pointwise", [&] { return probe(conv2d(x, w1, bias, 1, 0), 25); }, {x, w1, bias});
  Tensor feat = suite_tensor({2, 3, 4, 4}, ++s), rmask = detail::binary_mask({2, 3, 4, 4}, ++s);
  check("region_avg_pool", [&] { return probe(region_avg_pool(feat, rmask), 26); }, {feat});
  Tensor img = suite_tensor({1, 3, 8, 8}, ++s, 0.0, 1.0), imask = detail::binary_mask({1, 8, 8, 8}, ++s);
  check("decompose", [&] { return probe(decompose(img, imask), 27); }, {img});

  // Correlation field and rearrangement.
  Tensor fs = suite_tensor({1, 6, 3, 3}, ++s), fp = suite_tensor({1, 6, 3, 3}, ++s);
  check("build_field+rearrange", [&] { return probe(rearrange(build_field(fs, fp, 0.5), fs), 28); }, {fs, fp});
  check("build_field_style_query",
      [&] { return probe(rearrange(build_field(fs, fp, 0.5, FieldDirection::kStyleQuery), fs), 29); }, {fs, fp});

  // Losses on small images.
  FeaturePyramid pyr(kDefaultPyramidSeed);
  Tensor fake = suite_tensor({2, 3, 16, 16}, ++s, 0.05, 0.95), real = suite_tensor({2, 3, 16, 16}, ++s, 0.0, 1.0);
  Tensor lmask = detail::binary_mask({2, 8, 16, 16}, ++s);
  check("gram", [&] { return probe(gram(feat), 30); }, {feat});
  check("l_rec", [&] { return l_rec(fake, real); }, {fake});
  check("l_perc", [&] { return l_perc(fake, real, pyr); }, {fake});
  check("l_style", [&] { return l_style(fake, real, pyr); }, {fake});
  check("l_bsr", [&] { return l_bsr(fake, real, lmask, pyr); }, {fake});
  Tensor lg1 = suite_tensor({2, 1, 4, 4}, ++s), lg2 = suite_tensor({2, 1, 4, 4}, ++s),
         lg3 = suite_tensor({2, 1, 4, 4}, ++s), lg4 = suite_tensor({2, 1, 4, 4}, ++s);
  check("l_adv_d", [&] { return l_adv_d(lg1, lg2, lg3, lg4); }, {lg1, lg2, lg3, lg4});
  check("l_adv_g", [&] { return l_adv_g(lg3, lg4); }, {lg3, lg4});

  // End-to-end pipeline at reduced resolution.
  const std::int64_t res = opt.pipeline_image_res;
  TrainState st(reduced_config(res, opt.seed));
  Batch batch = reduced_batch(1, res, opt.seed + 17);
  Tensor image = batch.image.detach();
  batch.image = image;
  auto pipeline_total = [&] { return st.generator_losses(st.net().forward(image, batch.mask, batch.pose).output, batch).total; };
  {
    Tensor fstar;
    {
      Tape::NoGrad ng;
      fstar = st.net().forward(image, batch.mask, batch.pose).rearranged.detach();
    }
    check("generator", [&] { return probe(st.net().generator()(fstar), 31); }, {fstar}, opt.max_elements * 4,
          opt.pipeline_eps);
  }
  std::vector<Tensor> gparams{image};
  for (auto& [n, t] : st.net().generator_params().entries()) gparams.push_back(t);
  check("pipeline total loss (generator side)", pipeline_total, gparams, opt.max_elements, opt.pipeline_eps);
  std::vector<Tensor> dparams;
  for (auto& [n, t] : st.net().discriminator_params().entries()) dparams.push_back(t);
  Tensor fixed_fake;
  {
    Tape::NoGrad ng;
    fixed_fake = st.net().forward(image, batch.mask, batch.pose).output.detach();
  }
  check("pipeline discriminator loss", [&] { return st.discriminator_loss(fixed_fake, batch); }, dparams,
        opt.max_elements, opt.pipeline_eps);
  return out;
}

}  // namespace scm
