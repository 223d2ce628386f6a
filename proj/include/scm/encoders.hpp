#pragma once
// Pose encoder, decomposed style encoder (DSE) and cross channel fusion (CCF).

#include "scm/nn.hpp"

namespace scm {

inline constexpr std::int64_t kPoseChannels = 14;
inline constexpr std::int64_t kRegionCount = 8;
inline constexpr std::int64_t kRegionWidth = 8;
inline constexpr std::int64_t kFeatureChannels = kRegionCount * kRegionWidth;

namespace detail {

inline void check_nchw(const Tensor& x, std::int64_t channels, const char* what) {
  if (x.ndim() != 4 || x.dim(1) != channels || x.dim(2) != x.dim(3) || x.dim(2) % 4 != 0)
    throw DimensionError(std::string(what) + ": expected [N," + std::to_string(channels) +
                         ",H,H] with H divisible by 4, got " + shape_str(x.shape()));
}

}  // namespace detail

// Three conv + leaky-ReLU blocks with strides 1, 2, 2; output is input / 4.
class DownEncoder {
 public:
  DownEncoder() = default;
  DownEncoder(std::int64_t cin, std::int64_t cout, std::mt19937_64& rng)
      : c1_(cin, 32, 3, 1, PadMode::kReplicate, rng),
        c2_(32, 64, 3, 2, PadMode::kReplicate, rng),
        c3_(64, cout, 3, 2, PadMode::kReplicate, rng) {}

  void register_into(ParamSet& ps, const std::string& prefix) {
    c1_.register_into(ps, prefix + "conv1");
    c2_.register_into(ps, prefix + "conv2");
    c3_.register_into(ps, prefix + "conv3");
  }

  Tensor operator()(const Tensor& x) const { return conv_lrelu(c3_, conv_lrelu(c2_, conv_lrelu(c1_, x))); }
  std::int64_t in_channels() const { return c1_.weight.dim(1); }

 private:
  Conv c1_, c2_, c3_;
};

// Skeleton heatmaps [N,14,H,W] -> pose features F_p [N,64,H/4,W/4].
class PoseEncoder {
 public:
  PoseEncoder() = default;
  explicit PoseEncoder(std::mt19937_64& rng) : net_(kPoseChannels, kFeatureChannels, rng) {}
  void register_into(ParamSet& ps, const std::string& prefix) { net_.register_into(ps, prefix); }
  Tensor operator()(const Tensor& pose) const {
    detail::check_nchw(pose, kPoseChannels, "encode_pose");
    return net_(pose);
  }

 private:
  DownEncoder net_;
};

// Masked parts: image [N,3,H,W] and binary mask [N,R,H,W] -> [N,R,3,H,W] with
// part_r = I * S_r. Differentiable in the image; the mask is constant.
inline Tensor decompose(const Tensor& image, const Tensor& mask) {
  detail::check_nchw(image, 3, "decompose image");
  if (mask.ndim() != 4 || mask.dim(0) != image.dim(0) || mask.dim(2) != image.dim(2) ||
      mask.dim(3) != image.dim(3))
    throw DimensionError("decompose: mask " + shape_str(mask.shape()) + " does not match image " +
                         shape_str(image.shape()));
  for (double v : mask.data())
    if (v != 0.0 && v != 1.0) throw ValidationError("decompose: mask must be binary");
  const std::int64_t N = image.dim(0), R = mask.dim(1), HW = image.dim(2) * image.dim(3);
  Tensor out(Shape{N, R, 3, image.dim(2), image.dim(3)});
  double* o = out.mutable_ptr();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t r = 0; r < R; ++r) {
      const double* m = mask.ptr() + (n * R + r) * HW;
      for (std::int64_t c = 0; c < 3; ++c) {
        const double* x = image.ptr() + (n * 3 + c) * HW;
        double* dst = o + ((n * R + r) * 3 + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) dst[i] = x[i] * m[i];
      }
    }
  Tape::record("decompose", {image}, out, [image, mask, out, N, R, HW]() mutable {
    const double* g = out.grad().data();
    double* xg = image.mutable_grad().data();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t r = 0; r < R; ++r) {
        const double* m = mask.ptr() + (n * R + r) * HW;
        for (std::int64_t c = 0; c < 3; ++c) {
          const double* src = g + ((n * R + r) * 3 + c) * HW;
          double* dst = xg + (n * 3 + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) dst[i] += src[i] * m[i];
        }
      }
  });
  return out;
}

// Shared-weight encoder over masked parts: [N,R,3,H,W] -> [N,R*8,H/4,W/4],
// channel block r holding the features of part r.
class StyleEncoder {
 public:
  StyleEncoder() = default;
  explicit StyleEncoder(std::mt19937_64& rng) : net_(3, kRegionWidth, rng) {}
  void register_into(ParamSet& ps, const std::string& prefix) { net_.register_into(ps, prefix); }

  Tensor operator()(const Tensor& parts) const {
    if (parts.ndim() != 5 || parts.dim(2) != 3)
      throw DimensionError("encode_style expects [N,R,3,H,W], got " + shape_str(parts.shape()));
    const std::int64_t N = parts.dim(0), R = parts.dim(1), H = parts.dim(3), W = parts.dim(4);
    Tensor flat = reshape(parts, {N * R, 3, H, W});
    Tensor f = net_(flat);
    return reshape(f, {N, R * kRegionWidth, f.dim(2), f.dim(3)});
  }

  // The shared encoder on a single batch of parts [M,3,H,W].
  Tensor encode_part(const Tensor& part) const { return net_(part); }

 private:
  DownEncoder net_;
};

// Ablation stand-in for the DSE: one encoder over the whole image.
class GlobalStyleEncoder {
 public:
  GlobalStyleEncoder() = default;
  explicit GlobalStyleEncoder(std::mt19937_64& rng) : net_(3, kFeatureChannels, rng) {}
  void register_into(ParamSet& ps, const std::string& prefix) { net_.register_into(ps, prefix); }
  Tensor operator()(const Tensor& image) const {
    detail::check_nchw(image, 3, "global style encoder");
    return net_(image);
  }

 private:
  DownEncoder net_;
};

// Two 1x1 conv + leaky-ReLU blocks mixing channels per position.
class CrossChannelFusion {
 public:
  CrossChannelFusion() = default;
  explicit CrossChannelFusion(std::mt19937_64& rng)
      : c1_(kFeatureChannels, kFeatureChannels, 1, 1, PadMode::kZero, rng),
        c2_(kFeatureChannels, kFeatureChannels, 1, 1, PadMode::kZero, rng) {}
  void register_into(ParamSet& ps, const std::string& prefix) {
    c1_.register_into(ps, prefix + "conv1");
    c2_.register_into(ps, prefix + "conv2");
  }
  Tensor operator()(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != kFeatureChannels)
      throw DimensionError("ccf expects [N,64,h,w], got " + shape_str(x.shape()));
    return conv_lrelu(c2_, conv_lrelu(c1_, x));
  }

 private:
  Conv c1_, c2_;
};

struct StyleFeatures {
  Tensor raw;    // pre-CCF concatenation [N,64,h,w]
  Tensor fused;  // after CCF (equal to raw when CCF is disabled)
};

// Extracts region r's 8-channel block from features [N,64,h,w].
inline Tensor region_block(const Tensor& features, std::int64_t r) {
  return slice(features, 1, r * kRegionWidth, (r + 1) * kRegionWidth);
}

// Replaces region r's channel block of `dst` with that of `src`.
inline Tensor swap_region_block(const Tensor& dst, const Tensor& src, std::int64_t r) {
  std::vector<Tensor> blocks;
  for (std::int64_t q = 0; q < kRegionCount; ++q) blocks.push_back(region_block(q == r ? src : dst, q));
  return concat(blocks, 1);
}

}  // namespace scm
