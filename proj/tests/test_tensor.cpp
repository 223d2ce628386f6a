#include <catch_amalgamated.hpp>

#include "scm/gradcheck.hpp"
#include "scm/ops.hpp"
#include "test_util.hpp"

using namespace scm;
using scm::testing::max_abs_diff;
using scm::testing::naive_conv2d;
using scm::testing::random_tensor;

TEST_CASE("conv2d all-ones window counts its size", "[tensor][conv2d]") {
  Tensor x = Tensor::ones({1, 1, 3, 3});
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d(x, w, b, 1, 1);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y[4] == 9.0);
  CHECK(y[0] == 4.0);
}

TEST_CASE("conv2d identity kernel reproduces the input", "[tensor][conv2d]") {
  Tensor x = random_tensor({2, 1, 5, 6}, 3);
  Tensor w = Tensor::zeros({1, 1, 3, 3});
  w.mutable_data()[4] = 1.0;
  Tensor y = conv2d(x, w, Tensor::zeros({1}), 1, 1);
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d matches the six-loop reference", "[tensor][conv2d]") {
  Tensor x = random_tensor({2, 3, 8, 8}, 11);
  Tensor w = random_tensor({4, 3, 3, 3}, 12);
  Tensor b = random_tensor({4}, 13);
  SECTION("stride 1, zero pad") { CHECK(max_abs_diff(conv2d(x, w, b, 1, 1), naive_conv2d(x, w, b, 1, 1)) <= 1e-12); }
  SECTION("stride 2, zero pad") { CHECK(max_abs_diff(conv2d(x, w, b, 2, 1), naive_conv2d(x, w, b, 2, 1)) <= 1e-12); }
  SECTION("stride 2, replicate pad") {
    CHECK(max_abs_diff(conv2d(x, w, b, 2, 1, PadMode::kReplicate), naive_conv2d(x, w, b, 2, 1, true)) <= 1e-12);
  }
  SECTION("1x1 pointwise") {
    Tensor w1 = random_tensor({5, 3, 1, 1}, 14);
    Tensor b1 = random_tensor({5}, 15);
    CHECK(max_abs_diff(conv2d(x, w1, b1, 1, 0), naive_conv2d(x, w1, b1, 1, 0)) <= 1e-12);
  }
  SECTION("5x5 kernel, no pad") {
    Tensor w5 = random_tensor({2, 3, 5, 5}, 16);
    CHECK(max_abs_diff(conv2d(x, w5, Tensor::zeros({2}), 1, 0),
                       naive_conv2d(x, w5, Tensor::zeros({2}), 1, 0)) <= 1e-12);
  }
}

TEST_CASE("conv2d rejects bad configurations", "[tensor][conv2d]") {
  Tensor x = Tensor::ones({1, 2, 4, 4});
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 3, 3, 3}), Tensor::zeros({1}), 1, 1), DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 2, 2, 2}), Tensor::zeros({1}), 1, 0), ConfigError);
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 2, 7, 7}), Tensor::zeros({1}), 1, 0), ConfigError);
  CHECK_THROWS_AS(conv2d(x, Tensor::ones({1, 2, 3, 3}), Tensor::zeros({1}), 0, 1), ConfigError);
  CHECK_THROWS_AS(conv2d(Tensor::ones({2, 4, 4}), Tensor::ones({1, 2, 3, 3}), Tensor::zeros({1}), 1, 1),
                  DimensionError);
}

TEST_CASE("matmul", "[tensor][matmul]") {
  SECTION("identity") {
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.mutable_data()[i * 4] = 1.0;
    Tensor x = random_tensor({3, 4}, 5);
    CHECK(max_abs_diff(matmul(eye, x), x) == 0.0);
  }
  SECTION("hand arithmetic") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {0, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 1});
    CHECK(c[0] == 2.0);
    CHECK(c[1] == 4.0);
  }
  SECTION("triple-loop oracle") {
    Tensor a = random_tensor({5, 7}, 21), b = random_tensor({7, 2}, 22);
    Tensor ref({5, 2});
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 2; ++j) {
        double acc = 0;
        for (int k = 0; k < 7; ++k) acc += a[i * 7 + k] * b[k * 2 + j];
        ref.mutable_data()[i * 2 + j] = acc;
      }
    CHECK(max_abs_diff(matmul(a, b), ref) <= 1e-12);
  }
  SECTION("dimension mismatch") { CHECK_THROWS_AS(matmul(Tensor::ones({2, 3}), Tensor::ones({2, 3})), DimensionError); }
}

TEST_CASE("softmax", "[tensor][softmax]") {
  SECTION("symmetric input is uniform") {
    Tensor y = softmax(Tensor({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK(y[i] == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SECTION("large logits do not overflow") {
    Tensor y = softmax(Tensor({2}, {1000, 0}));
    CHECK(y[0] == 1.0);
    CHECK(y[1] == 0.0);
  }
  SECTION("extended-precision oracle") {
    Tensor x = random_tensor({6}, 31);
    long double z = 0;
    for (int i = 0; i < 6; ++i) z += std::exp(static_cast<long double>(x[i]));
    Tensor y = softmax(x);
    for (int i = 0; i < 6; ++i)
      CHECK(std::abs(y[i] - static_cast<double>(std::exp(static_cast<long double>(x[i])) / z)) <= 1e-12);
  }
  SECTION("slices sum to one and stay positive along any axis") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor x = random_tensor({3, 4, 5}, seed, -30, 30);
      for (std::int64_t axis = 0; axis < 3; ++axis) {
        Tensor y = softmax(x, axis);
        auto sp = detail::split_at(x.shape(), axis);
        for (std::int64_t o = 0; o < sp.outer; ++o)
          for (std::int64_t in = 0; in < sp.inner; ++in) {
            double s = 0;
            for (std::int64_t k = 0; k < sp.len; ++k) {
              double v = y[(o * sp.len + k) * sp.inner + in];
              CHECK(v > 0.0);
              s += v;
            }
            CHECK(std::abs(s - 1.0) <= 1e-9);
          }
      }
    }
  }
}

TEST_CASE("elementwise suite", "[tensor][elementwise]") {
  CHECK(leaky_relu(Tensor({1}, {-1.0}))[0] == Catch::Approx(-0.2).epsilon(1e-15));
  CHECK(leaky_relu(Tensor({1}, {3.0}))[0] == 3.0);
  CHECK(sigmoid(Tensor({1}, {0.0}))[0] == 0.5);
  CHECK(abs_sum(Tensor({3}, {-1, 2, -3})).item() == 6.0);
  CHECK(mean(Tensor({4}, {1, 2, 3, 4})).item() == 2.5);

  Tensor x = random_tensor({2, 3, 4}, 8);
  Tensor s = slice(x, 1, 1, 3);
  Tensor c = concat({slice(x, 1, 0, 1), s}, 1);
  CHECK(max_abs_diff(c, x) == 0.0);
  Tensor u = upsample_nearest2x(random_tensor({1, 2, 2, 3}, 9));
  REQUIRE(u.shape() == Shape{1, 2, 4, 6});
  CHECK(u[0] == u[1]);
  CHECK(u[0] == u[6]);
  CHECK_THROWS_AS(add(Tensor::ones({2}), Tensor::ones({3})), DimensionError);
  CHECK_THROWS_AS(scale(Tensor::ones({1}), std::numeric_limits<double>::infinity()), NumericError);
}

TEST_CASE("region_avg_pool", "[tensor][region_avg_pool]") {
  SECTION("single selected position returns its feature vector") {
    Tensor f = random_tensor({1, 3, 2, 2}, 41);
    Tensor m = Tensor::zeros({1, 1, 2, 2});
    m.mutable_data()[2] = 1.0;
    Tensor p = region_avg_pool(f, m);
    REQUIRE(p.shape() == Shape{1, 1, 3});
    for (int c = 0; c < 3; ++c) CHECK(p[c] == f[c * 4 + 2]);
  }
  SECTION("two regions on a 2x2 map match hand means") {
    // Channel 0: [1 2; 3 4], channel 1: [10 20; 30 40]; region A = {0,3}, region B = {1,2}.
    Tensor f({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor m({1, 2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
    Tensor p = region_avg_pool(f, m);
    CHECK(p[0] == 2.5);
    CHECK(p[1] == 25.0);
    CHECK(p[2] == 2.5);
    CHECK(p[3] == 25.0);
  }
  SECTION("empty region yields zeros and zero gradient") {
    Tensor f = random_tensor({1, 2, 2, 2}, 42);
    f.set_requires_grad(true);
    Tensor m = Tensor::zeros({1, 2, 2, 2});
    for (int i = 0; i < 4; ++i) m.mutable_data()[i] = 1.0;
    Tape tape;
    Tensor loss;
    {
      Tape::Scope sc(tape);
      Tensor p = region_avg_pool(f, m);
      CHECK(p[2] == 0.0);
      CHECK(p[3] == 0.0);
      loss = sum(slice(p, 1, 1, 2));
    }
    tape.backward(loss);
    for (double g : f.grad()) CHECK(g == 0.0);
  }
  SECTION("non-binary mask is rejected") {
    CHECK_THROWS_AS(region_avg_pool(Tensor::ones({1, 1, 2, 2}), Tensor({1, 1, 2, 2}, 0.5)), ValidationError);
  }
}

TEST_CASE("backward", "[tensor][backward]") {
  Tensor x = random_tensor({4, 3}, 51);
  x.set_requires_grad(true);
  SECTION("sum gives ones") {
    Tape tape;
    Tensor l;
    {
      Tape::Scope sc(tape);
      l = sum(x);
    }
    tape.backward(l);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SECTION("sum of squares gives 2x, doubled by a second backward") {
    Tape tape;
    Tensor l;
    {
      Tape::Scope sc(tape);
      l = sum(mul(x, x));
    }
    tape.backward(l);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x[i]);
    tape.backward(l);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 4.0 * x[i]);
    x.zero_grad();
    for (double g : x.grad()) CHECK(g == 0.0);
  }
  SECTION("composite graph doubles exactly on repeat") {
    Tensor w = random_tensor({3, 2}, 52);
    w.set_requires_grad(true);
    Tape tape;
    Tensor l;
    {
      Tape::Scope sc(tape);
      l = sum(tanh(matmul(x, w)));
    }
    tape.backward(l);
    std::vector<double> first(w.grad().begin(), w.grad().end());
    tape.backward(l);
    for (std::size_t i = 0; i < first.size(); ++i) CHECK(w.grad()[i] == 2.0 * first[i]);
  }
  SECTION("misuse") {
    Tape tape;
    Tensor y;
    {
      Tape::Scope sc(tape);
      y = scale(x, 2.0);
    }
    CHECK_THROWS_AS(tape.backward(y), UsageError);
    CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), UsageError);
  }
  SECTION("no tape, no recording") {
    Tensor y = sum(x);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("check_gradients on simple functions", "[tensor][gradcheck]") {
  Tensor x = random_tensor({5}, 61);
  CHECK(check_gradients([](const Tensor& t) { return sum(mul(t, t)); }, x) <= 1e-7);

  Tensor q = random_tensor({1, 4, 3}, 62), k = random_tensor({1, 4, 5}, 63);
  auto chain = [&k](const Tensor& t) {
    Tensor c = softmax(scale(cosine_similarity(center(t, 1), center(k, 1), 1e-8), 5.0), -1);
    return sum(mul(c, c));
  };
  CHECK(check_gradients(chain, q) <= 1e-5);

  int calls = 0;
  auto flaky = [&calls](const Tensor& t) { return scale(sum(t), static_cast<double>(++calls)); };
  CHECK_THROWS_AS(check_gradients(flaky, x), OracleError);
}

// Every differentiable op against central differences on random inputs in [-2,2].
TEST_CASE("every op matches finite differences", "[tensor][gradcheck][property]") {
  const double tol = 1e-4;
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    Tensor a = random_tensor({2, 3, 4}, seed), b = random_tensor({2, 3, 4}, seed + 50);
    // Weighted sum with fixed random weights shaped like the op's output.
    auto probe = [seed](const Tensor& y) { return sum(mul(y, random_tensor(y.shape(), seed + 99))); };
    CAPTURE(seed);
    CHECK(check_gradients([&](const Tensor& t) { return probe(add(t, b)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(sub(b, t)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(mul(t, b)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(scale(t, -1.7)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(leaky_relu(t)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(sigmoid(t)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(tanh(t)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(log_sigmoid(t)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return abs_sum(t); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return l1_mean(t, b); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return mean(mul(t, t)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(softmax(t, 1)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(center(t, 1)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(reshape(transpose_last2(t), {2, 3, 4})); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(concat({slice(t, 2, 2, 4), slice(t, 2, 0, 2)}, 2)); },
                          a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(bmm(t, b, false, true)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(bmm(b, t, true, false)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(bmm(b, t, false, true)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(bmm(t, b, true, false)); }, a) <= tol);

    Tensor k = random_tensor({2, 3, 5}, seed + 7);
    CHECK(check_gradients([&](const Tensor& t) { return probe(cosine_similarity(t, k, 1e-8)); }, a) <= tol);
    CHECK(check_gradients([&](const Tensor& t) { return probe(cosine_similarity(b, t, 1e-8)); }, k) <= tol);

    Tensor img = random_tensor({2, 3, 6, 6}, seed + 9);
    Tensor w = random_tensor({4, 3, 3, 3}, seed + 10);
    Tensor bias = random_tensor({4}, seed + 11);
    Tensor cw = random_tensor({2, 4, 3, 3}, seed + 12);
    auto cprobe = [&cw](const Tensor& y) { return sum(mul(y, cw)); };
    for (PadMode mode : {PadMode::kZero, PadMode::kReplicate}) {
      CHECK(check_gradients([&](const Tensor& t) { return cprobe(conv2d(t, w, bias, 2, 1, mode)); }, img) <= tol);
      CHECK(check_gradients([&](const Tensor& t) { return cprobe(conv2d(img, t, bias, 2, 1, mode)); }, w) <= tol);
      CHECK(check_gradients([&](const Tensor& t) { return cprobe(conv2d(img, w, t, 2, 1, mode)); }, bias) <= tol);
    }
    Tensor uw = random_tensor({2, 3, 12, 12}, seed + 13);
    CHECK(check_gradients([&](const Tensor& t) { return sum(mul(upsample_nearest2x(t), uw)); }, img) <= tol);

    Tensor mask({2, 2, 6, 6});
    for (std::int64_t i = 0; i < mask.numel(); ++i) mask.mutable_data()[i] = ((i / 3) % 2 == 0) ? 1.0 : 0.0;
    Tensor pw = random_tensor({2, 2, 3}, seed + 14);
    CHECK(check_gradients([&](const Tensor& t) { return sum(mul(region_avg_pool(t, mask), pw)); }, img) <= tol);
  }
}

TEST_CASE("branch freezing keeps probes on the smooth piece at x", "[tensor][gradcheck]") {
  // Input 3e-6 sits within one step of the abs kink.
  Tensor x({3}, {3e-6, -4e-6, 1.0});
  auto f = [](const Tensor& t) { return add(abs_sum(t), sum(leaky_relu(t))); };
  GradCheckOptions frozen;
  CHECK(check_gradients([&] { return f(x); }, {x}, frozen).max_rel_error <= 1e-9);

  GradCheckOptions naive;
  naive.freeze_branches = false;
  auto r = check_gradients([&] { return f(x); }, {x}, naive);
  CHECK(r.max_rel_error > 0.1);

  SECTION("replay sees the recorded signs") {
    BranchTrace trace;
    {
      BranchTrace::Use use(trace, BranchTrace::Mode::kRecord);
      CHECK(abs(Tensor({2}, {-1.0, 2.0}))[0] == 1.0);
    }
    REQUIRE(trace.size() == 2);
    BranchTrace::Use use(trace, BranchTrace::Mode::kReplay);
    Tensor y = abs(Tensor({2}, {1.0, -2.0}));
    CHECK(y[0] == -1.0);
    CHECK(y[1] == -2.0);
    CHECK(trace.replay_complete());
  }
  SECTION("a function whose branch count changes is rejected") {
    int calls = 0;
    auto grows = [&calls](const Tensor& t) {
      return abs_sum(concat({t, Tensor::ones({calls++ > 0 ? 2 : 1})}, 0));
    };
    CHECK_THROWS(check_gradients([&] { return grows(x); }, {x}, frozen));
  }
}

TEST_CASE("exact summation is correctly rounded and order independent", "[tensor]") {
  detail::ExactSum s;
  for (double v : {1e100, 1.0, -1e100}) s.add(v);
  CHECK(s.value() == 1.0);
  s.clear();
  for (double v : {0.1, 0.2, 0.3, -0.6}) s.add(v);
  // Exact rational sum of the four doubles, rounded once.
  using ld = long double;
  CHECK(s.value() == static_cast<double>(ld(0.1) + ld(0.2) + ld(0.3) - ld(0.6)));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ud(-1.0, 1.0);
  std::vector<double> xs(500);
  for (auto& x : xs) x = ud(rng) * std::pow(10.0, static_cast<int>(ud(rng) * 8));
  s.clear();
  for (double x : xs) s.add(x);
  const double ref = s.value();
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(xs.begin(), xs.end(), rng);
    s.clear();
    for (double x : xs) s.add(x);
    CHECK(s.value() == ref);
  }
}
