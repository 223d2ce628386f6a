#pragma once
// U-Net translation generator and PatchGAN discriminators.

#include "scm/encoders.hpp"

namespace scm {

// Rearranged features [N,64,h,w] -> image [N,3,4h,4w] in (0,1).
// Encoder: 64 -> 128 (h/2) -> 128 (h/4). Decoder: four nearest-neighbour
// upsamplings with skips from the matching encoder stages.
class Generator {
 public:
  Generator() = default;
  explicit Generator(std::mt19937_64& rng)
      : e1_(kFeatureChannels, 128, 3, 2, PadMode::kReplicate, rng),
        e2_(128, 128, 3, 2, PadMode::kReplicate, rng),
        d1_(256, 128, 3, 1, PadMode::kReplicate, rng),
        d2_(128 + kFeatureChannels, 64, 3, 1, PadMode::kReplicate, rng),
        d3_(64, 32, 3, 1, PadMode::kReplicate, rng),
        d4_(32, 16, 3, 1, PadMode::kReplicate, rng),
        head_(16, 3, 3, 1, PadMode::kReplicate, rng) {}

  void register_into(ParamSet& ps, const std::string& prefix) {
    e1_.register_into(ps, prefix + "enc1");
    e2_.register_into(ps, prefix + "enc2");
    d1_.register_into(ps, prefix + "dec1");
    d2_.register_into(ps, prefix + "dec2");
    d3_.register_into(ps, prefix + "dec3");
    d4_.register_into(ps, prefix + "dec4");
    head_.register_into(ps, prefix + "head");
  }

  Tensor operator()(const Tensor& f) const {
    if (f.ndim() != 4 || f.dim(1) != kFeatureChannels || f.dim(2) % 4 != 0 || f.dim(3) % 4 != 0)
      throw DimensionError("generator expects [N,64,h,w] with h, w divisible by 4, got " + shape_str(f.shape()));
    Tensor x1 = conv_lrelu(e1_, f);
    Tensor x2 = conv_lrelu(e2_, x1);
    Tensor y = conv_lrelu(d1_, concat({upsample_nearest2x(x2), x1}, 1));
    y = conv_lrelu(d2_, concat({upsample_nearest2x(y), f}, 1));
    y = conv_lrelu(d3_, upsample_nearest2x(y));
    y = conv_lrelu(d4_, upsample_nearest2x(y));
    return sigmoid(head_(y));
  }

 private:
  Conv e1_, e2_, d1_, d2_, d3_, d4_, head_;
};

// Four stride-2 conv blocks producing a patch logit grid [N,1,H/16,W/16].
class PatchDiscriminator {
 public:
  PatchDiscriminator() = default;
  PatchDiscriminator(std::int64_t cin, std::mt19937_64& rng)
      : c1_(cin, 32, 3, 2, PadMode::kZero, rng),
        c2_(32, 64, 3, 2, PadMode::kZero, rng),
        c3_(64, 128, 3, 2, PadMode::kZero, rng),
        c4_(128, 1, 3, 2, PadMode::kZero, rng) {}

  void register_into(ParamSet& ps, const std::string& prefix) {
    c1_.register_into(ps, prefix + "conv1");
    c2_.register_into(ps, prefix + "conv2");
    c3_.register_into(ps, prefix + "conv3");
    c4_.register_into(ps, prefix + "conv4");
  }

  Tensor logits(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != c1_.weight.dim(1))
      throw DimensionError("discriminator expects " + std::to_string(c1_.weight.dim(1)) + " channels, got " +
                           shape_str(x.shape()));
    return c4_(conv_lrelu(c3_, conv_lrelu(c2_, conv_lrelu(c1_, x))));
  }
  Tensor operator()(const Tensor& x) const { return sigmoid(logits(x)); }

 private:
  Conv c1_, c2_, c3_, c4_;
};

// D_s: judges images alone.
class StyleDiscriminator {
 public:
  StyleDiscriminator() = default;
  explicit StyleDiscriminator(std::mt19937_64& rng) : net_(3, rng) {}
  void register_into(ParamSet& ps, const std::string& prefix) { net_.register_into(ps, prefix); }
  Tensor logits(const Tensor& image) const { return net_.logits(image); }
  Tensor operator()(const Tensor& image) const { return net_(image); }

 private:
  PatchDiscriminator net_;
};

// D_p: judges an image together with its skeleton heatmaps.
class PoseDiscriminator {
 public:
  PoseDiscriminator() = default;
  explicit PoseDiscriminator(std::mt19937_64& rng) : net_(3 + kPoseChannels, rng) {}
  void register_into(ParamSet& ps, const std::string& prefix) { net_.register_into(ps, prefix); }
  Tensor logits(const Tensor& image, const Tensor& pose) const { return net_.logits(concat({image, pose}, 1)); }
  Tensor operator()(const Tensor& image, const Tensor& pose) const { return sigmoid(logits(image, pose)); }

 private:
  PatchDiscriminator net_;
};

}  // namespace scm
