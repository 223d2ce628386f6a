#pragma once
// The full network: encoders, correlation mining, generator and discriminators.

#include "scm/corrfield.hpp"
#include "scm/encoders.hpp"
#include "scm/losses.hpp"
#include "scm/translator.hpp"

namespace scm {

struct ModelConfig {
  std::int64_t image_res = 64;
  std::int64_t feature_res = 16;
  double temperature = kDefaultTemperature;
  FieldDirection direction = FieldDirection::kPoseQuery;
  bool no_dse = false;
  bool no_ccf = false;
  std::uint64_t seed = 1;

  void validate() const {
    if (image_res < 16 || image_res % 16 != 0) throw ConfigError("image_res must be a positive multiple of 16");
    if (feature_res * 4 != image_res) throw ConfigError("image_res must equal 4 x feature_res");
    if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
  }
};

struct ForwardResult {
  Tensor pose;        // F_p [N,64,h,w]
  StyleFeatures style;
  Tensor field;       // C [N,hw,hw]
  Tensor rearranged;  // F*_s [N,64,h,w]
  Tensor output;      // I^ [N,3,H,W]
};

class ScmNet {
 public:
  explicit ScmNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    auto rng_for = [&](std::uint64_t tag) { return std::mt19937_64(splitmix64(cfg.seed * 0x100000001B3ull + tag)); };
    auto r1 = rng_for(1), r2 = rng_for(2), r3 = rng_for(3), r4 = rng_for(4), r5 = rng_for(5), r6 = rng_for(6),
         r7 = rng_for(7);
    pose_ = PoseEncoder(r1);
    pose_.register_into(gen_params_, "pose.");
    if (cfg.no_dse) {
      global_ = GlobalStyleEncoder(r3);
      global_.register_into(gen_params_, "global.");
    } else {
      dse_ = StyleEncoder(r2);
      dse_.register_into(gen_params_, "dse.");
    }
    if (!cfg.no_ccf) {
      ccf_ = CrossChannelFusion(r4);
      ccf_.register_into(gen_params_, "ccf.");
    }
    gen_ = Generator(r5);
    gen_.register_into(gen_params_, "gen.");
    d_style_ = StyleDiscriminator(r6);
    d_style_.register_into(disc_params_, "d_style.");
    d_pose_ = PoseDiscriminator(r7);
    d_pose_.register_into(disc_params_, "d_pose.");
  }

  ScmNet(const ScmNet&) = delete;
  ScmNet& operator=(const ScmNet&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamSet& generator_params() { return gen_params_; }
  ParamSet& discriminator_params() { return disc_params_; }
  const ParamSet& generator_params() const { return gen_params_; }
  const ParamSet& discriminator_params() const { return disc_params_; }

  // Every parameter under its group prefix.
  ParamSet all_params() const {
    ParamSet ps;
    ps.append("G.", gen_params_);
    ps.append("D.", disc_params_);
    return ps;
  }

  const PoseEncoder& pose_encoder() const { return pose_; }
  const StyleEncoder& style_encoder() const { return dse_; }
  const CrossChannelFusion& ccf() const { return ccf_; }
  const Generator& generator() const { return gen_; }
  const StyleDiscriminator& d_style() const { return d_style_; }
  const PoseDiscriminator& d_pose() const { return d_pose_; }

  Tensor encode_pose(const Tensor& pose) const {
    check_res(pose);
    return pose_(pose);
  }

  // Pre-CCF style features.
  Tensor encode_style_raw(const Tensor& image, const Tensor& mask) const {
    check_res(image);
    if (cfg_.no_dse) return global_(image);
    return dse_(decompose(image, mask));
  }

  Tensor fuse(const Tensor& raw) const { return cfg_.no_ccf ? raw : ccf_(raw); }

  StyleFeatures encode_style(const Tensor& image, const Tensor& mask) const {
    StyleFeatures s;
    s.raw = encode_style_raw(image, mask);
    s.fused = fuse(s.raw);
    return s;
  }

  // Merge fused style features under pose features and translate to an image.
  ForwardResult merge(StyleFeatures style, Tensor pose_features) const {
    ForwardResult r;
    r.pose = std::move(pose_features);
    r.style = std::move(style);
    r.field = build_field(r.style.fused, r.pose, cfg_.temperature, cfg_.direction);
    r.rearranged = rearrange(r.field, r.style.fused);
    r.output = gen_(r.rearranged);
    return r;
  }

  // Style from (image, mask), structure from `pose`.
  ForwardResult forward(const Tensor& image, const Tensor& mask, const Tensor& pose) const {
    return merge(encode_style(image, mask), encode_pose(pose));
  }

 private:
  void check_res(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(2) != cfg_.image_res || x.dim(3) != cfg_.image_res)
      throw DimensionError("expected spatial size " + std::to_string(cfg_.image_res) + ", got " +
                           shape_str(x.shape()));
  }

  ModelConfig cfg_;
  PoseEncoder pose_;
  StyleEncoder dse_;
  GlobalStyleEncoder global_;
  CrossChannelFusion ccf_;
  Generator gen_;
  StyleDiscriminator d_style_;
  PoseDiscriminator d_pose_;
  ParamSet gen_params_, disc_params_;
};

}  // namespace scm
