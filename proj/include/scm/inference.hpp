#pragma once
// Inference paths: pose transfer, region editing, and the color statistics
// used to judge them.

#include <array>
#include <cmath>

#include "scm/model.hpp"
#include "scm/synthfig.hpp"
#include "scm/trainer.hpp"

namespace scm {

namespace detail {
inline Tensor batched(const Tensor& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return Tensor(s, std::vector<double>(t.data().begin(), t.data().end()));
}
}  // namespace detail

// Renders `source` under `target_skeleton` [14,H,W]. Returns [3,H,W].
inline Tensor transfer(const ScmNet& net, const synth::FigureSample& source, const Tensor& target_skeleton) {
  Tape::NoGrad ng;
  ForwardResult r =
      net.forward(detail::batched(source.image), detail::batched(source.mask), detail::batched(target_skeleton));
  return batch_item(r.output, 0);
}

// Skeleton of `source` with its joint angles perturbed by a seeded jitter.
inline Tensor perturbed_skeleton(const synth::FigureSample& source, std::uint64_t seed) {
  return synth::render_skeleton(synth::perturb_pose(source.spec, seed));
}

// Swaps the pre-fusion block of `region` from `ref` into `source`, then
// finishes the pipeline under the source pose. Returns [3,H,W].
inline Tensor edit(const ScmNet& net, const synth::FigureSample& source, const synth::FigureSample& ref, int region) {
  if (region < 0 || region >= synth::kRegions) throw UsageError("region index out of range");
  Tape::NoGrad ng;
  Tensor src_raw = net.encode_style_raw(detail::batched(source.image), detail::batched(source.mask));
  Tensor ref_raw = net.encode_style_raw(detail::batched(ref.image), detail::batched(ref.mask));
  StyleFeatures s;
  s.raw = net.config().no_dse ? src_raw : swap_region_block(src_raw, ref_raw, region);
  s.fused = net.fuse(s.raw);
  return batch_item(net.merge(s, net.encode_pose(detail::batched(source.skeleton))).output, 0);
}

using synth::Rgb;

inline double color_distance(const Rgb& a, const Rgb& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

inline Rgb pixel_color(const Tensor& image, std::int64_t x, std::int64_t y) {
  const std::int64_t H = image.dim(1), W = image.dim(2);
  return {image[(0 * H + y) * W + x], image[(1 * H + y) * W + x], image[(2 * H + y) * W + x]};
}

// Mean color of `image` [3,H,W] over mask channel `region` of `mask` [8,H,W];
// nullopt for an empty region.
inline std::optional<Rgb> region_mean_color(const Tensor& image, const Tensor& mask, int region) {
  const std::int64_t P = image.dim(1) * image.dim(2);
  Rgb acc{0, 0, 0};
  double n = 0;
  for (std::int64_t i = 0; i < P; ++i) {
    const double m = mask[region * P + i];
    if (m == 0) continue;
    for (int c = 0; c < 3; ++c) acc[c] += m * image[c * P + i];
    n += m;
  }
  if (n == 0) return std::nullopt;
  for (auto& v : acc) v /= n;
  return acc;
}

// Fraction of visible target joints whose output pixel is farther than
// `threshold` (Euclidean RGB) from the source background color.
inline constexpr double kBackgroundDistance = 0.15;

inline double joints_off_background(const Tensor& output, const synth::FigureSpec& target,
                                    const Rgb& background, double threshold = kBackgroundDistance) {
  auto px = synth::joint_pixels(target);
  int visible = 0, hit = 0;
  for (auto& p : px) {
    if (!p) continue;
    ++visible;
    if (color_distance(pixel_color(output, (*p)[0], (*p)[1]), background) > threshold) ++hit;
  }
  return visible ? static_cast<double>(hit) / visible : 0.0;
}

}  // namespace scm
