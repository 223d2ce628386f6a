#include <catch_amalgamated.hpp>

#include "scm/corrfield.hpp"
#include "scm/gradcheck.hpp"
#include "test_util.hpp"

using namespace scm;
using scm::testing::max_abs_diff;
using scm::testing::random_tensor;

namespace {

// Long-double reference for the default field direction: centered cosine,
// divided by the temperature, exponentiated and normalized over style positions.
std::vector<long double> brute_force_field(const Tensor& style, const Tensor& pose, double tau) {
  const std::int64_t C = style.dim(1), HW = style.dim(2) * style.dim(3);
  auto centered = [&](const Tensor& t, std::int64_t pos) {
    std::vector<long double> v(static_cast<std::size_t>(C));
    long double m = 0;
    for (std::int64_t c = 0; c < C; ++c) m += v[c] = t[c * HW + pos];
    m /= C;
    for (auto& x : v) x -= m;
    return v;
  };
  std::vector<long double> out(static_cast<std::size_t>(HW * HW));
  for (std::int64_t i = 0; i < HW; ++i) {
    auto q = centered(pose, i);
    long double z = 0;
    for (std::int64_t j = 0; j < HW; ++j) {
      auto k = centered(style, j);
      long double dot = 0, nq = 0, nk = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        dot += q[c] * k[c];
        nq += q[c] * q[c];
        nk += k[c] * k[c];
      }
      const long double s = dot / std::max(std::sqrt(nq) * std::sqrt(nk), 1e-8L);
      z += out[i * HW + j] = std::exp(s / tau);
    }
    for (std::int64_t j = 0; j < HW; ++j) out[i * HW + j] /= z;
  }
  return out;
}

// Replaces position `pos` of t [1,C,h,w] by a*v + b*1.
Tensor affine_at(const Tensor& t, std::int64_t pos, double a, double b) {
  Tensor out = t.detach();
  const std::int64_t C = t.dim(1), HW = t.dim(2) * t.dim(3);
  for (std::int64_t c = 0; c < C; ++c) out.mutable_data()[c * HW + pos] = a * t[c * HW + pos] + b;
  return out;
}

Tensor permute_positions(const Tensor& t, const std::vector<std::int64_t>& perm) {
  Tensor out(t.shape());
  const std::int64_t NC = t.dim(0) * t.dim(1), HW = t.dim(2) * t.dim(3);
  for (std::int64_t nc = 0; nc < NC; ++nc)
    for (std::int64_t i = 0; i < HW; ++i) out.mutable_data()[nc * HW + i] = t[nc * HW + perm[i]];
  return out;
}

}  // namespace

TEST_CASE("center", "[corrfield]") {
  Tensor k({1, 4, 1}, {3, 3, 3, 3});
  CHECK(abs_sum(center(k, 1)).item() == 0.0);
  Tensor c({1, 3, 1}, {-1, 0, 1});
  CHECK(max_abs_diff(center(c, 1), c) == 0.0);
  Tensor r = center(random_tensor({2, 64, 5}, 1), 1);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t p = 0; p < 5; ++p) {
      double m = 0;
      for (std::int64_t ch = 0; ch < 64; ++ch) m += r[(n * 64 + ch) * 5 + p];
      CHECK(std::abs(m / 64) <= 1e-15);
    }
}

TEST_CASE("similarity", "[corrfield]") {
  SECTION("two-position hand example with centering") {
    // q positions (1,0) and (0,1), key position (1,0); channels on axis 1.
    Tensor q({1, 2, 2}, {1, 0, 0, 1});
    Tensor k({1, 2, 1}, {1, 0});
    Tensor s = similarity(q, k);
    REQUIRE(s.shape() == Shape{1, 2, 1});
    // Centered: q -> (0.5,-0.5), (-0.5,0.5); k -> (0.5,-0.5); norms 1/sqrt(2).
    CHECK(s[0] == Catch::Approx(1.0).epsilon(1e-15));
    CHECK(s[1] == Catch::Approx(-1.0).epsilon(1e-15));
  }
  SECTION("self-similarity diagonal and range") {
    Tensor f = random_tensor({1, 8, 6}, 2);
    Tensor s = similarity(f, f);
    for (std::int64_t i = 0; i < 6; ++i) CHECK(std::abs(s[i * 6 + i] - 1.0) <= 1e-14);
    for (double v : s.data()) CHECK(std::abs(v) <= 1.0);
  }
  SECTION("orthogonal centered vectors") {
    Tensor q({1, 4, 1}, {1, -1, 0, 0});
    Tensor k({1, 4, 1}, {0, 0, 1, -1});
    CHECK(similarity(q, k)[0] == 0.0);
  }
  SECTION("zero vectors give zero, not an error") { CHECK(similarity(Tensor::zeros({1, 3, 2}), random_tensor({1, 3, 2}, 3))[0] == 0.0); }
}

TEST_CASE("build_field basic cases", "[corrfield]") {
  SECTION("single position") {
    Tensor f = build_field(random_tensor({1, 4, 1, 1}, 4), random_tensor({1, 4, 1, 1}, 5));
    REQUIRE(f.shape() == Shape{1, 1, 1});
    CHECK(f[0] == 1.0);
  }
  SECTION("equal similarities give a uniform field") {
    Tensor style = Tensor::ones({1, 4, 4, 4});
    Tensor f = build_field(style, random_tensor({1, 4, 4, 4}, 6));
    for (double v : f.data()) CHECK(v == Catch::Approx(1.0 / 16).epsilon(1e-12));
  }
  SECTION("shape and argument errors") {
    CHECK_THROWS_AS(build_field(Tensor::ones({1, 4, 4, 4}), Tensor::ones({1, 4, 2, 2})), DimensionError);
    CHECK_THROWS_AS(build_field(Tensor::ones({1, 4, 2, 2}), Tensor::ones({1, 4, 2, 2}), 0.0), ConfigError);
  }
}

TEST_CASE("build_field matches a brute-force oracle", "[corrfield][oracle]") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::int64_t side = seed % 2 == 0 ? 2 : 4;
    Tensor style = random_tensor({1, 6, side, side}, 10 + seed), pose = random_tensor({1, 6, side, side}, 40 + seed);
    for (double tau : {1.0, kDefaultTemperature}) {
      Tensor f = build_field(style, pose, tau);
      auto ref = brute_force_field(style, pose, tau);
      double worst = 0;
      for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(f[i] - static_cast<double>(ref[i])));
      CAPTURE(seed, tau);
      CHECK(worst <= 1e-9);
    }
  }
}

TEST_CASE("build_field rows are distributions", "[corrfield][property]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor f = build_field(random_tensor({2, 8, 4, 4}, 60 + seed), random_tensor({2, 8, 4, 4}, 70 + seed), 0.1);
    for (std::int64_t row = 0; row < 2 * 16; ++row) {
      double s = 0;
      for (std::int64_t j = 0; j < 16; ++j) {
        const double v = f[row * 16 + j];
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("build_field is invariant to per-vector affine maps", "[corrfield][property]") {
  Tensor style = random_tensor({1, 8, 4, 4}, 80), pose = random_tensor({1, 8, 4, 4}, 81);
  Tensor base = build_field(style, pose);
  std::mt19937_64 rng(82);
  std::uniform_real_distribution<double> ua(0.1, 5.0), ub(-3.0, 3.0);
  for (std::int64_t pos = 0; pos < 16; ++pos) {
    CHECK(max_abs_diff(build_field(affine_at(style, pos, ua(rng), ub(rng)), pose), base) <= 1e-9);
    CHECK(max_abs_diff(build_field(style, affine_at(pose, pos, ua(rng), ub(rng))), base) <= 1e-9);
  }
}

TEST_CASE("rearrange", "[corrfield]") {
  Tensor style = random_tensor({1, 5, 3, 3}, 90);
  SECTION("identity field") {
    Tensor eye({1, 9, 9});
    for (int i = 0; i < 9; ++i) eye.mutable_data()[i * 10] = 1.0;
    CHECK(max_abs_diff(rearrange(eye, style), style) == 0.0);
  }
  SECTION("permutation field is a pure permutation") {
    std::vector<std::int64_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(91));
    Tensor c({1, 9, 9});
    for (int i = 0; i < 9; ++i) c.mutable_data()[i * 9 + perm[i]] = 1.0;
    CHECK(max_abs_diff(rearrange(c, style), permute_positions(style, perm)) == 0.0);
  }
  SECTION("uniform field averages positions") {
    Tensor u({1, 9, 9}, 1.0 / 9);
    Tensor out = rearrange(u, style);
    for (std::int64_t c = 0; c < 5; ++c) {
      double m = 0;
      for (int i = 0; i < 9; ++i) m += style[c * 9 + i];
      for (int i = 0; i < 9; ++i) CHECK(out[c * 9 + i] == Catch::Approx(m / 9).epsilon(1e-13));
    }
  }
  SECTION("mismatched field") { CHECK_THROWS_AS(rearrange(Tensor::ones({1, 4, 4}), style), DimensionError); }
}

TEST_CASE("rearranged features are convex combinations", "[corrfield][property]") {
  Tensor style = random_tensor({1, 8, 4, 4}, 100), pose = random_tensor({1, 8, 4, 4}, 101);
  Tensor out = rearrange(build_field(style, pose), style);
  for (std::int64_t c = 0; c < 8; ++c) {
    double lo = 1e300, hi = -1e300;
    for (int j = 0; j < 16; ++j) {
      lo = std::min(lo, style[c * 16 + j]);
      hi = std::max(hi, style[c * 16 + j]);
    }
    for (int i = 0; i < 16; ++i) {
      CHECK(out[c * 16 + i] >= lo - 1e-12);
      CHECK(out[c * 16 + i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("permuting style positions leaves the rearranged features unchanged", "[corrfield][property]") {
  Tensor style = random_tensor({1, 8, 4, 4}, 110), pose = random_tensor({1, 8, 4, 4}, 111);
  std::vector<std::int64_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(112));
  Tensor a = rearrange(build_field(style, pose), style);
  Tensor ps = permute_positions(style, perm);
  Tensor b = rearrange(build_field(ps, pose), ps);
  CHECK(max_abs_diff(a, b) <= 1e-9);
}

TEST_CASE("style-query direction normalizes columns", "[corrfield]") {
  Tensor style = random_tensor({1, 8, 3, 3}, 120), pose = random_tensor({1, 8, 3, 3}, 121);
  Tensor f = build_field(style, pose, 0.1, FieldDirection::kStyleQuery);
  for (std::int64_t j = 0; j < 9; ++j) {
    double s = 0;
    for (std::int64_t i = 0; i < 9; ++i) s += f[i * 9 + j];
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("field and rearrangement gradients match finite differences", "[corrfield][gradient]") {
  Tensor style = random_tensor({1, 6, 3, 3}, 130), pose = random_tensor({1, 6, 3, 3}, 131);
  Tensor w = random_tensor({1, 6, 3, 3}, 132);
  for (FieldDirection dir : {FieldDirection::kPoseQuery, FieldDirection::kStyleQuery}) {
    auto f = [&] { return sum(mul(rearrange(build_field(style, pose, 0.5, dir), style), w)); };
    CHECK(check_gradients(f, {style, pose}).max_rel_error <= 1e-4);
  }
}
