#pragma once
// Correlation mining: a dense softmax field between pose and style positions,
// and the feature rearrangement it drives.

#include "scm/ops.hpp"

namespace scm {

inline constexpr double kCosineEps = 1e-8;
inline constexpr double kDefaultTemperature = 0.01;

enum class FieldDirection {
  kPoseQuery,   // rows indexed by pose positions, softmax over style positions
  kStyleQuery,  // literal reading: C(i,j) = softmax_i cos(style_i, pose_j), columns sum to one
};

// Flattens [N,C,h,w] to [N,C,h*w].
inline Tensor flatten_spatial(const Tensor& f) {
  if (f.ndim() != 4) throw DimensionError("expected [N,C,h,w], got " + shape_str(f.shape()));
  return reshape(f, {f.dim(0), f.dim(1), f.dim(2) * f.dim(3)});
}

// Centered cosine similarity between the position vectors of q [N,C,M] and
// k [N,C,K] -> [N,M,K].
inline Tensor similarity(const Tensor& q, const Tensor& k, double eps = kCosineEps) {
  return cosine_similarity(center(q, 1), center(k, 1), eps);
}

// Correlation field C [N,HW,HW]. C(i,j) weights style position j for output
// position i; with the default direction every row sums to one.
inline Tensor build_field(const Tensor& style, const Tensor& pose, double temperature = kDefaultTemperature,
                          FieldDirection dir = FieldDirection::kPoseQuery) {
  if (style.ndim() != 4 || pose.ndim() != 4 || style.shape() != pose.shape())
    throw DimensionError("build_field: style " + shape_str(style.shape()) + " vs pose " +
                         shape_str(pose.shape()));
  if (!(temperature > 0)) throw ConfigError("correlation temperature must be > 0");
  Tensor fs = flatten_spatial(style), fp = flatten_spatial(pose);
  if (dir == FieldDirection::kPoseQuery) return softmax(scale(similarity(fp, fs), 1.0 / temperature), 2);
  return softmax(scale(similarity(fs, fp), 1.0 / temperature), 1);
}

// F*_s(i) = sum_j C(i,j) F_s(j): style [N,C,h,w], field [N,HW,HW] -> [N,C,h,w].
inline Tensor rearrange(const Tensor& field, const Tensor& style) {
  Tensor fs = flatten_spatial(style);
  if (field.ndim() != 3 || field.dim(0) != fs.dim(0) || field.dim(1) != fs.dim(2) || field.dim(2) != fs.dim(2))
    throw DimensionError("rearrange: field " + shape_str(field.shape()) + " vs style " +
                         shape_str(style.shape()));
  return reshape(bmm(fs, field, false, true), style.shape());
}

}  // namespace scm
