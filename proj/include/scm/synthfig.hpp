#pragma once
// Procedural articulated 2-D figures with exact semantic masks and joint
// heatmaps, plus the binary dataset format ("SCMF").

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string_view>

#include "scm/image_io.hpp"
#include "scm/nn.hpp"
#include "scm/tensor.hpp"

namespace scm::synth {

inline constexpr std::int64_t kImageSize = 64;
inline constexpr std::int64_t kRegions = 8;
inline constexpr std::int64_t kJoints = 14;
inline constexpr std::int64_t kAngles = 10;
inline constexpr double kJointSigma = 1.5;
inline constexpr double kHalfBodyFraction = 0.6;

enum Region : int { kHair, kFace, kUpperClothes, kArmsSkin, kPants, kLegsSkin, kShoes, kBackground };
inline constexpr std::array<std::string_view, kRegions> kRegionNames = {
    "hair", "face", "upper_clothes", "arms_skin", "pants", "legs_skin", "shoes", "background"};

inline std::optional<int> region_from_name(std::string_view name) {
  for (int r = 0; r < kRegions; ++r)
    if (kRegionNames[r] == name) return r;
  return std::nullopt;
}

enum Joint : int {
  kHead, kLShoulder, kRShoulder, kLElbow, kRElbow, kLWrist, kRWrist,
  kLHip, kRHip, kLKnee, kRKnee, kLAnkle, kRAnkle, kPelvis
};
inline constexpr std::array<std::string_view, kJoints> kJointNames = {
    "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle", "pelvis"};

// Angle slots of FigureSpec::joint_angles.
enum Angle : int { kLShoulderA, kRShoulderA, kLElbowA, kRElbowA, kLHipA, kRHipA, kLKneeA, kRKneeA, kNeckA, kLeanA };

constexpr double deg(double d) { return d * std::numbers::pi / 180.0; }

inline constexpr std::array<std::array<double, 2>, kAngles> kAngleBounds = {{
    {deg(-60), deg(60)}, {deg(-60), deg(60)},  // shoulders
    {deg(0), deg(120)},  {deg(0), deg(120)},   // elbows
    {deg(-40), deg(40)}, {deg(-40), deg(40)},  // hips
    {deg(0), deg(90)},   {deg(0), deg(90)},    // knees
    {deg(-15), deg(15)},                       // neck tilt
    {deg(-10), deg(10)},                       // torso lean
}};

using Rgb = std::array<double, 3>;

// Disjoint per-region palettes; entries are at least 0.2 apart in L-inf.
inline constexpr std::array<std::array<Rgb, 4>, kRegions> kPalettes = {{
    {{{0.02, 0.06, 0.07}, {0.49, 0.17, 0.05}, {0.88, 0.67, 0.18}, {0.47, 0.56, 0.75}}},
    {{{0.97, 0.96, 0.67}, {0.73, 0.70, 0.56}, {0.64, 0.49, 0.23}, {0.96, 0.67, 0.59}}},
    {{{0.12, 0.39, 0.93}, {0.98, 0.92, 0.17}, {0.07, 0.57, 0.33}, {0.97, 0.98, 0.91}}},
    {{{0.98, 0.58, 0.79}, {0.59, 0.44, 0.44}, {0.24, 0.30, 0.31}, {0.96, 0.42, 0.33}}},
    {{{0.87, 0.04, 0.08}, {0.02, 0.08, 0.47}, {0.45, 0.43, 0.02}, {0.15, 0.49, 0.54}}},
    {{{0.74, 0.93, 0.50}, {0.68, 0.71, 0.35}, {0.21, 0.30, 0.10}, {0.98, 0.45, 0.53}}},
    {{{0.44, 0.42, 0.24}, {0.71, 0.31, 0.02}, {0.91, 0.28, 0.73}, {0.25, 0.03, 0.34}}},
    {{{0.68, 0.96, 0.72}, {0.54, 0.68, 0.98}, {0.98, 0.78, 0.89}, {0.66, 0.98, 0.92}}},
}};
inline constexpr double kColorJitter = 0.04;
// Palette entry carrying a 2-px horizontal stripe texture.
inline constexpr int kStripedRegion = kUpperClothes;
inline constexpr int kStripedEntry = 3;
inline constexpr double kStripeShade = 0.75;

enum class Crop : std::uint8_t { kFullBody = 0, kHalfBody = 1 };

struct FigureSpec {
  std::array<double, kAngles> joint_angles{};
  std::array<Rgb, kRegions> region_colors{};
  double scale = 1.0;
  Crop crop = Crop::kFullBody;

  bool operator==(const FigureSpec&) const = default;
};

struct FigureSample {
  Tensor image;     // [3,64,64]
  Tensor mask;      // [8,64,64]
  Tensor skeleton;  // [14,64,64]
  FigureSpec spec;
};

inline bool spec_valid(const FigureSpec& s) {
  for (int i = 0; i < kAngles; ++i)
    if (!(s.joint_angles[i] >= kAngleBounds[i][0] - 1e-6 && s.joint_angles[i] <= kAngleBounds[i][1] + 1e-6))
      return false;
  for (auto& c : s.region_colors)
    for (double v : c)
      if (!(v >= 0.0 && v <= 1.0)) return false;
  return s.scale >= 0.7 - 1e-6 && s.scale <= 1.0 + 1e-6;
}

// Index of the palette entry nearest to `color` for region r.
inline int palette_entry(int r, const Rgb& color) {
  int best = 0;
  double bd = 1e9;
  for (int i = 0; i < 4; ++i) {
    double d = 0;
    for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(color[c] - kPalettes[r][i][c]));
    if (d < bd) bd = d, best = i;
  }
  return best;
}

inline FigureSpec sample_spec(std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed));
  FigureSpec s;
  for (int i = 0; i < kAngles; ++i) {
    std::uniform_real_distribution<double> ud(kAngleBounds[i][0], kAngleBounds[i][1]);
    s.joint_angles[i] = ud(rng);
  }
  std::uniform_int_distribution<int> pick(0, 3);
  std::uniform_real_distribution<double> jit(-kColorJitter, kColorJitter);
  for (int r = 0; r < kRegions; ++r) {
    const Rgb& base = kPalettes[r][pick(rng)];
    for (int c = 0; c < 3; ++c) s.region_colors[r][c] = std::clamp(base[c] + jit(rng), 0.0, 1.0);
  }
  std::uniform_real_distribution<double> sd(0.7, 1.0);
  s.scale = sd(rng);
  return s;
}

// Jitters every angle uniformly by up to +/- jitter_deg, clamped to bounds.
inline FigureSpec perturb_pose(const FigureSpec& spec, std::uint64_t seed, double jitter_deg = 10.0) {
  FigureSpec out = spec;
  if (jitter_deg <= 0) return out;
  std::mt19937_64 rng(splitmix64(seed ^ 0x5045525455524245ull));
  std::uniform_real_distribution<double> ud(-deg(jitter_deg), deg(jitter_deg));
  for (int i = 0; i < kAngles; ++i)
    out.joint_angles[i] = std::clamp(spec.joint_angles[i] + ud(rng), kAngleBounds[i][0], kAngleBounds[i][1]);
  return out;
}

namespace detail {

struct Vec2 {
  double x = 0, y = 0;
  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
};

// Rotation in image coordinates (y down): positive angles turn +y towards -x.
inline Vec2 rotate(Vec2 v, double a) {
  double c = std::cos(a), s = std::sin(a);
  return {v.x * c - v.y * s, v.x * s + v.y * c};
}

inline double seg_dist(Vec2 p, Vec2 a, Vec2 b) {
  Vec2 ab = b - a, ap = p - a;
  double t = std::clamp(ap.dot(ab) / std::max(ab.dot(ab), 1e-12), 0.0, 1.0);
  Vec2 d = ap - ab * t;
  return std::sqrt(d.dot(d));
}

// Figure layout constants in canvas pixels at scale 1, relative to the pelvis.
struct Layout {
  static constexpr double kAnchorX = 32.0, kAnchorY = 34.0;
  static constexpr double kTorso = 19.0, kNeck = 7.0, kShoulderDrop = 2.0, kShoulderHalf = 7.0;
  static constexpr double kUpperArm = 10.0, kForearm = 9.0, kHipHalf = 4.5, kThigh = 13.0, kShin = 12.0;
  static constexpr double kTorsoRadius = 6.5, kArmRadius = 2.3, kForearmRadius = 2.0;
  static constexpr double kThighRadius = 3.3, kShinRadius = 2.3, kPelvisRadius = 4.5, kShoeRadius = 2.2;
  static constexpr double kShoeLength = 3.0;
  static constexpr double kFaceRx = 4.5, kFaceRy = 5.5, kHairRx = 5.2, kHairRy = 4.2, kHairLift = 2.6;
};

struct Skeleton {
  std::array<Vec2, kJoints> joints;  // canvas coordinates
  Vec2 neck, up, head_up;
};

inline Skeleton pose_skeleton(const FigureSpec& s) {
  using L = Layout;
  const auto& a = s.joint_angles;
  const double k = s.scale;
  const Vec2 pelvis{L::kAnchorX, L::kAnchorY};
  const Vec2 up = rotate({0, -1}, -a[kLeanA]);
  const Vec2 right{-up.y, up.x};
  Skeleton sk;
  sk.up = up;
  sk.neck = pelvis + up * (L::kTorso * k);
  sk.head_up = rotate(up, -a[kNeckA]);
  auto& j = sk.joints;
  j[kPelvis] = pelvis;
  j[kHead] = sk.neck + sk.head_up * (L::kNeck * k);
  const Vec2 down = up * -1.0;
  const Vec2 sh_base = sk.neck + down * (L::kShoulderDrop * k);
  j[kLShoulder] = sh_base - right * (L::kShoulderHalf * k);
  j[kRShoulder] = sh_base + right * (L::kShoulderHalf * k);
  // Left limbs sit at image-left; positive angles open outward.
  const Vec2 l_arm = rotate(down, a[kLShoulderA]);
  const Vec2 r_arm = rotate(down, -a[kRShoulderA]);
  j[kLElbow] = j[kLShoulder] + l_arm * (L::kUpperArm * k);
  j[kRElbow] = j[kRShoulder] + r_arm * (L::kUpperArm * k);
  j[kLWrist] = j[kLElbow] + rotate(l_arm, a[kLElbowA]) * (L::kForearm * k);
  j[kRWrist] = j[kRElbow] + rotate(r_arm, -a[kRElbowA]) * (L::kForearm * k);
  const Vec2 vdown{0, 1};
  j[kLHip] = pelvis + Vec2{-L::kHipHalf * k, 0};
  j[kRHip] = pelvis + Vec2{L::kHipHalf * k, 0};
  const Vec2 l_thigh = rotate(vdown, a[kLHipA]);
  const Vec2 r_thigh = rotate(vdown, -a[kRHipA]);
  j[kLKnee] = j[kLHip] + l_thigh * (L::kThigh * k);
  j[kRKnee] = j[kRHip] + r_thigh * (L::kThigh * k);
  j[kLAnkle] = j[kLKnee] + rotate(l_thigh, -a[kLKneeA]) * (L::kShin * k);
  j[kRAnkle] = j[kRKnee] + rotate(r_thigh, a[kRKneeA]) * (L::kShin * k);
  return sk;
}

// Maps an output pixel centre to canvas coordinates for the given crop.
inline Vec2 to_canvas(double px, double py, Crop crop) {
  if (crop == Crop::kFullBody) return {px, py};
  const double w = kImageSize * kHalfBodyFraction;
  return {kImageSize / 2.0 - w / 2.0 + px * kHalfBodyFraction, py * kHalfBodyFraction};
}

inline Vec2 from_canvas(Vec2 c, Crop crop) {
  if (crop == Crop::kFullBody) return c;
  const double w = kImageSize * kHalfBodyFraction;
  return {(c.x - (kImageSize / 2.0 - w / 2.0)) / kHalfBodyFraction, c.y / kHalfBodyFraction};
}

inline bool in_ellipse(Vec2 p, Vec2 c, Vec2 axis_y, double rx, double ry) {
  Vec2 d = p - c;
  Vec2 axis_x{-axis_y.y, axis_y.x};
  double u = d.dot(axis_x) / rx, v = d.dot(axis_y) / ry;
  return u * u + v * v <= 1.0;
}

// Region label of one canvas point under painter's ordering.
inline int label_at(Vec2 p, const Skeleton& sk, double k, Crop crop) {
  using L = Layout;
  const auto& j = sk.joints;
  int label = kBackground;
  if (crop == Crop::kFullBody) {
    if (seg_dist(p, j[kLKnee], j[kLAnkle]) <= L::kShinRadius * k ||
        seg_dist(p, j[kRKnee], j[kRAnkle]) <= L::kShinRadius * k)
      label = kLegsSkin;
    const Vec2 lt = j[kLAnkle] + Vec2{-L::kShoeLength * k, 0}, rt = j[kRAnkle] + Vec2{L::kShoeLength * k, 0};
    if (seg_dist(p, j[kLAnkle], lt) <= L::kShoeRadius * k || seg_dist(p, j[kRAnkle], rt) <= L::kShoeRadius * k)
      label = kShoes;
    if (seg_dist(p, j[kLHip], j[kRHip]) <= L::kPelvisRadius * k ||
        seg_dist(p, j[kLHip], j[kLKnee]) <= L::kThighRadius * k ||
        seg_dist(p, j[kRHip], j[kRKnee]) <= L::kThighRadius * k)
      label = kPants;
  }
  if (seg_dist(p, j[kLShoulder], j[kLElbow]) <= L::kArmRadius * k ||
      seg_dist(p, j[kRShoulder], j[kRElbow]) <= L::kArmRadius * k ||
      seg_dist(p, j[kLElbow], j[kLWrist]) <= L::kForearmRadius * k ||
      seg_dist(p, j[kRElbow], j[kRWrist]) <= L::kForearmRadius * k)
    label = kArmsSkin;
  const Vec2 torso_top = sk.neck - sk.up * (1.5 * k);
  const Vec2 torso_bottom = j[kPelvis] + sk.up * (1.5 * k);
  if (seg_dist(p, torso_top, torso_bottom) <= L::kTorsoRadius * k) label = kUpperClothes;
  if (in_ellipse(p, j[kHead], sk.head_up, L::kFaceRx * k, L::kFaceRy * k)) label = kFace;
  if (in_ellipse(p, j[kHead] + sk.head_up * (L::kHairLift * k), sk.head_up, L::kHairRx * k, L::kHairRy * k))
    label = kHair;
  return label;
}

}  // namespace detail

// Joint positions in output-pixel coordinates (may lie outside the image).
inline std::array<std::array<double, 2>, kJoints> joint_positions(const FigureSpec& spec) {
  auto sk = detail::pose_skeleton(spec);
  std::array<std::array<double, 2>, kJoints> out{};
  for (int i = 0; i < kJoints; ++i) {
    auto p = detail::from_canvas(sk.joints[i], spec.crop);
    out[i] = {p.x, p.y};
  }
  return out;
}

inline bool lower_leg_joint(int j) { return j == kLKnee || j == kRKnee || j == kLAnkle || j == kRAnkle; }

// Pixel containing each joint, or nullopt when outside the image. Half-body
// crops drop the legs, so knees and ankles are never visible there.
inline std::array<std::optional<std::array<std::int64_t, 2>>, kJoints> joint_pixels(const FigureSpec& spec) {
  std::array<std::optional<std::array<std::int64_t, 2>>, kJoints> out{};
  auto pos = joint_positions(spec);
  for (int i = 0; i < kJoints; ++i) {
    if (spec.crop == Crop::kHalfBody && lower_leg_joint(i)) continue;
    auto x = static_cast<std::int64_t>(std::floor(pos[i][0]));
    auto y = static_cast<std::int64_t>(std::floor(pos[i][1]));
    if (x >= 0 && x < kImageSize && y >= 0 && y < kImageSize) out[i] = std::array<std::int64_t, 2>{x, y};
  }
  return out;
}

// Joint heatmaps [14,64,64]: Gaussian (sigma 1.5 px) peaking at exactly 1 on
// the joint's pixel; all-zero for joints outside the image.
inline Tensor render_skeleton(const FigureSpec& spec) {
  Tensor sk(Shape{kJoints, kImageSize, kImageSize});
  auto px = joint_pixels(spec);
  const double inv = 1.0 / (2.0 * kJointSigma * kJointSigma);
  for (int j = 0; j < kJoints; ++j) {
    if (!px[j]) continue;
    auto [jx, jy] = *px[j];
    double* plane = sk.mutable_ptr() + j * kImageSize * kImageSize;
    for (std::int64_t y = 0; y < kImageSize; ++y)
      for (std::int64_t x = 0; x < kImageSize; ++x) {
        double d2 = static_cast<double>((x - jx) * (x - jx) + (y - jy) * (y - jy));
        plane[y * kImageSize + x] = std::exp(-d2 * inv);
      }
  }
  return sk;
}

inline FigureSample render(const FigureSpec& spec) {
  if (!spec_valid(spec)) throw ValidationError("figure spec out of bounds");
  constexpr std::int64_t S = kImageSize, P = S * S;
  FigureSample out;
  out.spec = spec;
  out.image = Tensor(Shape{3, S, S});
  out.mask = Tensor(Shape{kRegions, S, S});
  const auto sk = detail::pose_skeleton(spec);
  const bool striped = palette_entry(kStripedRegion, spec.region_colors[kStripedRegion]) == kStripedEntry;
  for (std::int64_t y = 0; y < S; ++y) {
    for (std::int64_t x = 0; x < S; ++x) {
      const auto p = detail::to_canvas(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, spec.crop);
      const int r = detail::label_at(p, sk, spec.scale, spec.crop);
      out.mask.mutable_data()[r * P + y * S + x] = 1.0;
      double shade = (striped && r == kStripedRegion && (y / 2) % 2 == 1) ? kStripeShade : 1.0;
      for (int c = 0; c < 3; ++c) out.image.mutable_data()[c * P + y * S + x] = spec.region_colors[r][c] * shade;
    }
  }
  out.skeleton = render_skeleton(spec);
  return out;
}

// Rounds every stored value through float32, the on-disk precision.
inline void round_to_f32(FigureSample& s) {
  auto rt = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  for (auto* t : {&s.image, &s.mask, &s.skeleton})
    for (auto& v : t->mutable_data()) v = rt(v);
  for (auto& a : s.spec.joint_angles) a = rt(a);
  for (auto& c : s.spec.region_colors)
    for (auto& v : c) v = rt(v);
  s.spec.scale = rt(s.spec.scale);
}

inline std::uint64_t sample_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  return splitmix64(dataset_seed * 0x100000001B3ull + index);
}

// Indices assigned to the half-body crop: the round(n * fraction) indices with
// the smallest per-index hash.
inline std::vector<bool> half_body_assignment(std::int64_t n, std::uint64_t seed, double fraction) {
  auto k = static_cast<std::int64_t>(std::llround(static_cast<double>(n) * fraction));
  std::vector<std::pair<std::uint64_t, std::int64_t>> h;
  for (std::int64_t i = 0; i < n; ++i)
    h.emplace_back(splitmix64(sample_seed(seed, static_cast<std::uint64_t>(i)) ^ 0xC0FFEEull), i);
  std::sort(h.begin(), h.end());
  std::vector<bool> half(static_cast<std::size_t>(n), false);
  for (std::int64_t i = 0; i < k; ++i) half[static_cast<std::size_t>(h[i].second)] = true;
  return half;
}

inline std::vector<FigureSample> generate_dataset(std::int64_t n, std::uint64_t seed, double half_body_fraction) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  if (!(half_body_fraction >= 0.0 && half_body_fraction <= 1.0))
    throw ConfigError("half_body_fraction must lie in [0,1]");
  auto half = half_body_assignment(n, seed, half_body_fraction);
  std::vector<FigureSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    FigureSpec spec = sample_spec(sample_seed(seed, static_cast<std::uint64_t>(i)));
    spec.crop = half[static_cast<std::size_t>(i)] ? Crop::kHalfBody : Crop::kFullBody;
    FigureSample s = render(spec);
    round_to_f32(s);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- dataset file

inline constexpr char kDatasetMagic[4] = {'S', 'C', 'M', 'F'};
inline constexpr std::uint16_t kDatasetVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

template <class T>
T get_le(const std::uint8_t* p) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline constexpr std::size_t kSpecFloats = kAngles + 3 * kRegions + 1;
inline constexpr std::size_t kSampleBytes =
    1 + 4 * kSpecFloats + 4 * static_cast<std::size_t>((3 + kRegions + kJoints) * kImageSize * kImageSize);

}  // namespace detail

inline std::vector<std::uint8_t> encode_dataset(const std::vector<FigureSample>& samples) {
  std::vector<std::uint8_t> out(kDatasetMagic, kDatasetMagic + 4);
  detail::put_le<std::uint16_t>(out, kDatasetVersion);
  out.reserve(out.size() + samples.size() * detail::kSampleBytes);
  for (const auto& s : samples) {
    out.push_back(static_cast<std::uint8_t>(s.spec.crop));
    for (double a : s.spec.joint_angles) detail::put_le<float>(out, static_cast<float>(a));
    for (const auto& c : s.spec.region_colors)
      for (double v : c) detail::put_le<float>(out, static_cast<float>(v));
    detail::put_le<float>(out, static_cast<float>(s.spec.scale));
    for (const Tensor* t : {&s.image, &s.mask, &s.skeleton})
      for (double v : t->data()) detail::put_le<float>(out, static_cast<float>(v));
  }
  return out;
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<FigureSample>& samples) {
  scm::detail::write_bytes(path, encode_dataset(samples));
}

inline std::vector<FigureSample> decode_dataset(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0)
    throw IoError("not a figure dataset (bad magic)");
  if (detail::get_le<std::uint16_t>(bytes.data() + 4) != kDatasetVersion)
    throw IoError("unsupported dataset version");
  const std::size_t body = bytes.size() - 6;
  if (body % detail::kSampleBytes != 0) throw IoError("truncated dataset file");
  std::vector<FigureSample> out;
  const std::uint8_t* p = bytes.data() + 6;
  for (std::size_t i = 0; i < body / detail::kSampleBytes; ++i) {
    FigureSample s;
    std::uint8_t crop = *p++;
    if (crop > 1) throw IoError("bad crop flag in dataset");
    s.spec.crop = static_cast<Crop>(crop);
    auto rd = [&p]() {
      float f = detail::get_le<float>(p);
      p += 4;
      return static_cast<double>(f);
    };
    for (auto& a : s.spec.joint_angles) a = rd();
    for (auto& c : s.spec.region_colors)
      for (auto& v : c) v = rd();
    s.spec.scale = rd();
    s.image = Tensor(Shape{3, kImageSize, kImageSize});
    s.mask = Tensor(Shape{kRegions, kImageSize, kImageSize});
    s.skeleton = Tensor(Shape{kJoints, kImageSize, kImageSize});
    for (Tensor* t : {&s.image, &s.mask, &s.skeleton})
      for (auto& v : t->mutable_data()) v = rd();
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<FigureSample> read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open dataset " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

inline void make_dataset(const std::filesystem::path& path, std::int64_t n, std::uint64_t seed,
                         double half_body_fraction) {
  write_dataset(path, generate_dataset(n, seed, half_body_fraction));
}

// Writes image.png plus one PGM per mask and skeleton channel into `dir`.
inline void export_sample(const std::filesystem::path& dir, const FigureSample& s) {
  std::filesystem::create_directories(dir);
  write_png(dir / "image.png", s.image);
  const std::int64_t P = kImageSize * kImageSize;
  for (int r = 0; r < kRegions; ++r)
    write_pgm(dir / ("mask_" + std::string(kRegionNames[r]) + ".pgm"), s.mask.data().subspan(r * P, P), kImageSize,
              kImageSize);
  for (int j = 0; j < kJoints; ++j)
    write_pgm(dir / ("joint_" + std::string(kJointNames[j]) + ".pgm"), s.skeleton.data().subspan(j * P, P),
              kImageSize, kImageSize);
}

// Nearest-neighbour subsampling by an integer factor (keeps masks binary and
// partitioned). Used for reduced-resolution configurations.
inline FigureSample downsample(const FigureSample& s, std::int64_t factor) {
  if (factor < 1 || kImageSize % factor != 0) throw ConfigError("downsample factor must divide 64");
  auto pick = [factor](const Tensor& t) {
    const std::int64_t C = t.dim(0), H = t.dim(1), W = t.dim(2), h = H / factor, w = W / factor;
    Tensor out(Shape{C, h, w});
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          out.mutable_data()[(c * h + y) * w + x] = t[(c * H + y * factor + factor / 2) * W + x * factor + factor / 2];
    return out;
  };
  FigureSample d;
  d.image = pick(s.image);
  d.mask = pick(s.mask);
  d.skeleton = pick(s.skeleton);
  d.spec = s.spec;
  return d;
}

// Stacks per-sample tensors into a batch along a new leading axis.
inline Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw DimensionError("stack of nothing");
  Shape s = items[0].shape();
  s.insert(s.begin(), static_cast<std::int64_t>(items.size()));
  Tensor out(s);
  const auto n = items[0].numel();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items[0].shape()) throw DimensionError("stack shape mismatch");
    std::copy_n(items[i].ptr(), n, out.mutable_ptr() + static_cast<std::int64_t>(i) * n);
  }
  return out;
}

}  // namespace scm::synth
