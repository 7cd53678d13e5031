#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "sdet/grad_check.hpp"
#include "sdet/ops.hpp"

using namespace sdet;

namespace {

// Scalar-loss wrapper: dot the op output with fixed weights so every output
// element receives a distinct upstream gradient.
Tensor weighted_sum(const Tensor& t, unsigned seed = 7) {
  std::mt19937_64 rng(seed);
  Tensor w = Tensor::uniform(t.shape(), rng, 0.5, 1.5);
  return sum_all(mul(t, w));
}

Tensor rand_t(Shape shape, unsigned seed, double lo = -1.0, double hi = 1.0,
              bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  return Tensor::uniform(std::move(shape), rng, lo, hi, requires_grad);
}

Tensor rand_prob_vector(size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  Tensor t = Tensor::uniform({n}, rng, 0.05, 1.0);
  double s = 0;
  for (double v : t.vec()) s += v;
  for (double& v : t.vec()) v /= s;
  return t;
}

}  // namespace

TEST_CASE("softmax matches hand-evaluated cases") {
  Tensor z = Tensor::from_data({2}, {0.0, 0.0});
  Tensor y = softmax(z, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(0.5).epsilon(1e-12));

  for (double c : {-3.0, 0.0, 1e3}) {
    Tensor zc = Tensor::full({3}, c);
    Tensor yc = softmax(zc, 0);
    for (size_t i = 0; i < 3; ++i) CHECK(std::abs(yc.data()[i] - 1.0 / 3.0) < 1e-12);
  }

  Tensor z2 = Tensor::from_data({2}, {0.0, std::log(2.0)});
  Tensor y2 = softmax(z2, 0);
  CHECK(std::abs(y2.data()[0] - 1.0 / 3.0) < 1e-12);
  CHECK(std::abs(y2.data()[1] - 2.0 / 3.0) < 1e-12);
}

TEST_CASE("softmax normalization and shift invariance over random instances") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-30.0, 30.0);
  for (int it = 0; it < 1000; ++it) {
    std::vector<double> v(5);
    for (double& x : v) x = dist(rng);
    Tensor z = Tensor::from_data({5}, v);
    Tensor y = softmax(z, 0);
    double s = 0;
    for (size_t i = 0; i < 5; ++i) {
      CHECK(y.data()[i] > 0.0);
      CHECK(y.data()[i] <= 1.0);  // == 1.0 reachable when the gap underflows
      s += y.data()[i];
    }
    CHECK(std::abs(s - 1.0) < 1e-9);

    double c = dist(rng);
    for (double& x : v) x += c;
    Tensor ys = softmax(Tensor::from_data({5}, v), 0);
    for (size_t i = 0; i < 5; ++i) CHECK(std::abs(ys.data()[i] - y.data()[i]) < 1e-9);
  }
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor z = Tensor::from_data({2}, {0.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(softmax(z, 0), Error);
  CHECK_THROWS_AS(softmax(Tensor::zeros({2}), 1), Error);  // bad axis
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Tensor z = Tensor::from_data({2}, {0.0, 0.0});
  Tensor ls = log_softmax(z, 0);
  CHECK(std::abs(ls.data()[0] + std::log(2.0)) < 1e-12);
  CHECK(std::abs(ls.data()[1] + std::log(2.0)) < 1e-12);

  Tensor z2 = Tensor::from_data({2}, {0.0, std::log(2.0)});
  Tensor ls2 = log_softmax(z2, 0);
  CHECK(std::abs(ls2.data()[0] + std::log(3.0)) < 1e-12);
  CHECK(std::abs(ls2.data()[1] - std::log(2.0 / 3.0)) < 1e-12);

  std::mt19937_64 rng(13);
  for (int it = 0; it < 200; ++it) {
    Tensor z3 = Tensor::uniform({7}, rng, -40.0, 40.0);
    Tensor a = log_softmax(z3, 0);
    Tensor b = softmax(z3, 0);
    double sum_exp = 0;
    for (size_t i = 0; i < 7; ++i) {
      CHECK(std::abs(a.data()[i] - std::log(b.data()[i])) < 1e-9);
      sum_exp += std::exp(a.data()[i]);
    }
    CHECK(std::abs(sum_exp - 1.0) < 1e-9);
  }
}

TEST_CASE("mse hand cases and symmetry") {
  Tensor y = Tensor::from_data({2}, {0.0, 2.0});
  Tensor yh = Tensor::from_data({2}, {1.0, 1.0});
  CHECK(mse(y, yh).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mse(y, y).item() == 0.0);
  CHECK(mse(y, yh).item() == mse(yh, y).item());
  CHECK_THROWS_AS(mse(y, Tensor::zeros({3})), Error);

  std::mt19937_64 rng(17);
  for (int it = 0; it < 100; ++it) {
    Tensor a = Tensor::uniform({4, 3}, rng, -2, 2);
    Tensor b = Tensor::uniform({4, 3}, rng, -2, 2);
    CHECK(mse(a, b).item() == mse(b, a).item());
    CHECK(mse(a, b).item() >= 0.0);
  }
}

TEST_CASE("bce hand cases, domain checks and soft-target minimum") {
  Tensor one = Tensor::from_data({1}, {1.0});
  CHECK(bce(one, one).item() < 1e-6);

  Tensor half = Tensor::from_data({1}, {0.5});
  CHECK(bce(half, half).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS_AS(bce(Tensor::from_data({1}, {1.2}), one), Error);
  CHECK_THROWS_AS(bce(one, Tensor::from_data({1}, {-0.1})), Error);

  // minimum over p at p = y, for soft targets
  std::mt19937_64 rng(19);
  for (int it = 0; it < 300; ++it) {
    Tensor y = Tensor::uniform({6}, rng, 0.0, 1.0);
    Tensor p = Tensor::uniform({6}, rng, 0.0, 1.0);
    CHECK(bce(p, y).item() >= bce(y, y).item() - 1e-12);
  }
}

TEST_CASE("kl_div hand cases, Gibbs inequality and normalization check") {
  Tensor p = Tensor::from_data({2}, {1.0, 0.0});
  Tensor q = Tensor::from_data({2}, {0.5, 0.5});
  CHECK(kl_div(p, q, 0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(kl_div(q, q, 0).item() == 0.0);

  CHECK_THROWS_AS(kl_div(Tensor::from_data({2}, {0.7, 0.7}), q, 0), Error);

  std::mt19937_64 rng(23);
  for (int it = 0; it < 500; ++it) {
    Tensor a = rand_prob_vector(5, 1000 + it);
    Tensor b = rand_prob_vector(5, 2000 + it);
    double kl = kl_div(a, b, 0).item();
    CHECK(kl >= -1e-12);
    CHECK(kl_div(a, a, 0).item() == 0.0);
  }
  (void)rng;
}

TEST_CASE("core op identities") {
  // conv with a 1x1 identity kernel leaves the input unchanged
  std::mt19937_64 rng(29);
  Tensor x = Tensor::uniform({1, 1, 4, 4}, rng, -1, 1);
  Tensor k = Tensor::from_data({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, k, 1, 0);
  for (size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  // matmul(A, I) = A
  Tensor a = Tensor::uniform({3, 3}, rng, -1, 1);
  std::vector<double> eye(9, 0.0);
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Tensor ay = matmul(a, Tensor::from_data({3, 3}, eye));
  for (size_t i = 0; i < 9; ++i) CHECK(ay.data()[i] == doctest::Approx(a.data()[i]));

  // layer_norm output has per-row mean 0 and variance 1 before the affine
  Tensor ln_in = Tensor::uniform({4, 8}, rng, -3, 3);
  Tensor g1 = Tensor::full({8}, 1.0);
  Tensor b0 = Tensor::zeros({8});
  Tensor ln = layer_norm(ln_in, g1, b0, 1e-12);
  for (size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (size_t i = 0; i < 8; ++i) m += ln.data()[r * 8 + i];
    m /= 8;
    for (size_t i = 0; i < 8; ++i) {
      double d = ln.data()[r * 8 + i] - m;
      v += d * d;
    }
    v /= 8;
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("backward analytic derivatives") {
  // d/dx x^2 at x=3 is 6
  Tensor x = Tensor::scalar(3.0, true);
  Tensor loss = square(x);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));

  // grad of mse(y, yhat) wrt yhat is (2/N)(yhat - y)
  Tensor y = Tensor::from_data({4}, {1.0, 2.0, 3.0, 4.0});
  Tensor yh = Tensor::from_data({4}, {0.5, 2.5, 2.0, 4.0}, true);
  Tensor l2 = mse(y, yh);
  backward(l2);
  for (size_t i = 0; i < 4; ++i)
    CHECK(yh.grad()[i] ==
          doctest::Approx(2.0 / 4.0 * (yh.data()[i] - y.data()[i])).epsilon(1e-12));

  CHECK_THROWS_AS(backward(Tensor::zeros({2}, true)), Error);
}

TEST_CASE("grad accumulates over reuse and leaves always get grads") {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor l = add(mul(x, x), x);  // x^2 + x -> d/dx = 2x + 1 = 5
  backward(l);
  CHECK(x.grad()[0] == doctest::Approx(5.0));
}

TEST_CASE("determinism: same seed gives bit-identical tensors and op results") {
  std::mt19937_64 r1(123), r2(123);
  Tensor a1 = Tensor::randn({3, 4, 5}, r1);
  Tensor a2 = Tensor::randn({3, 4, 5}, r2);
  for (size_t i = 0; i < a1.numel(); ++i) CHECK(a1.data()[i] == a2.data()[i]);
  Tensor s1 = softmax(a1, 1);
  Tensor s2 = softmax(a2, 1);
  for (size_t i = 0; i < s1.numel(); ++i) CHECK(s1.data()[i] == s2.data()[i]);
}

// ---- finite-difference oracle across every registered op ----

TEST_CASE("grad_check: elementwise and scalar ops on 3x4x5 tensors") {
  Shape s{3, 4, 5};
  auto check2 = [&](const char* name,
                    const std::function<Tensor(const Tensor&, const Tensor&)>& op, double lo_b,
                    double hi_b) {
    CAPTURE(name);
    Tensor a = rand_t(s, 101);
    Tensor b = rand_t(s, 202, lo_b, hi_b);
    auto res = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted_sum(op(in[0], in[1])); }, {a, b});
    CHECK(res.ok());
    CHECK(res.max_rel_err < 1e-4);
  };
  check2("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, -1, 1);
  check2("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, -1, 1);
  check2("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, -1, 1);
  check2("div", [](const Tensor& a, const Tensor& b) { return divide(a, b); }, 0.5, 1.5);
  check2("maximum", [](const Tensor& a, const Tensor& b) { return maximum(a, b); }, 2.0, 3.0);

  auto check1 = [&](const char* name, const std::function<Tensor(const Tensor&)>& op, double lo,
                    double hi) {
    CAPTURE(name);
    Tensor a = rand_t(s, 303, lo, hi);
    auto res = grad_check(
        [&](const std::vector<Tensor>& in) { return weighted_sum(op(in[0])); }, {a});
    CHECK(res.ok());
    CHECK(res.max_rel_err < 1e-4);
  };
  check1("neg", [](const Tensor& a) { return neg(a); }, -1, 1);
  check1("exp", [](const Tensor& a) { return exp_t(a); }, -1, 1);
  check1("log", [](const Tensor& a) { return log_t(a); }, 0.5, 2.0);
  check1("sigmoid", [](const Tensor& a) { return sigmoid(a); }, -3, 3);
  check1("silu", [](const Tensor& a) { return silu(a); }, -3, 3);
  check1("gelu", [](const Tensor& a) { return gelu(a); }, -3, 3);
  check1("leaky_relu", [](const Tensor& a) { return leaky_relu(a, 0.1); }, 0.2, 2.0);
  check1("square", [](const Tensor& a) { return square(a); }, -1, 1);
  check1("add_scalar", [](const Tensor& a) { return add_scalar(a, 0.7); }, -1, 1);
  check1("mul_scalar", [](const Tensor& a) { return mul_scalar(a, -1.3); }, -1, 1);
  check1("maximum_scalar", [](const Tensor& a) { return maximum_scalar(a, 0.0); }, 0.3, 1.0);
  check1("reshape", [](const Tensor& a) { return reshape(a, {5, 12}); }, -1, 1);
  check1("permute", [](const Tensor& a) { return permute(a, {2, 0, 1}); }, -1, 1);
  check1("softmax", [](const Tensor& a) { return softmax(a, 1); }, -2, 2);
  check1("log_softmax", [](const Tensor& a) { return log_softmax(a, 2); }, -2, 2);
  check1("sum_all", [](const Tensor& a) { return sum_all(a); }, -1, 1);
  check1("mean_all", [](const Tensor& a) { return mean_all(a); }, -1, 1);
  check1("grid_cell", [](const Tensor& a) { return grid_cell(reshape(a, {1, 3, 4, 5}), 0, 2, 3); },
         -1, 1);
  check1("index_scalar", [](const Tensor& a) { return index_scalar(a, 17); }, -1, 1);
}

TEST_CASE("grad_check: losses") {
  Tensor y = rand_t({3, 4}, 404, 0.1, 0.9);
  Tensor p = rand_t({3, 4}, 505, 0.1, 0.9);
  auto res = grad_check(
      [](const std::vector<Tensor>& in) { return mse(in[0], in[1]); }, {y, p});
  CHECK(res.ok());

  res = grad_check([](const std::vector<Tensor>& in) { return bce(in[0], in[1]); }, {p, y});
  CHECK(res.ok());

  // kl_div through softmax keeps arguments normalized under perturbation
  Tensor lp = rand_t({6}, 606, -1, 1);
  Tensor lq = rand_t({6}, 707, -1, 1);
  res = grad_check(
      [](const std::vector<Tensor>& in) {
        return kl_div(softmax(in[0], 0), softmax(in[1], 0), 0);
      },
      {lp, lq});
  CHECK(res.ok());
}

TEST_CASE("grad_check: spatial and linear ops") {
  {
    Tensor x = rand_t({2, 3, 5, 5}, 808);
    Tensor w = rand_t({4, 3, 3, 3}, 909, -0.5, 0.5);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(conv2d(in[0], in[1], 1, 1)); },
        {x, w});
    CHECK(res.ok());
    CHECK(res.max_rel_err < 1e-4);
  }
  {
    // strided, unpadded
    Tensor x = rand_t({1, 2, 6, 6}, 111);
    Tensor w = rand_t({3, 2, 2, 2}, 222, -0.5, 0.5);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(conv2d(in[0], in[1], 2, 0)); },
        {x, w});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_t({2, 3, 4, 4}, 333);
    Tensor b = rand_t({3}, 444);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) {
          return weighted_sum(add_channel_bias(in[0], in[1]));
        },
        {x, b});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_t({1, 2, 5, 5}, 555, -2, 2);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(maxpool2d(in[0], 3)); }, {x});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_t({2, 2, 3, 3}, 666);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(upsample_nearest2x(in[0])); },
        {x});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_t({1, 3, 4, 4}, 777);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(space_to_depth(in[0], 2)); },
        {x});
    CHECK(res.ok());
  }
  {
    Tensor a = rand_t({2, 3, 4}, 888);
    Tensor b = rand_t({4, 5}, 999);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1])); },
        {a, b});
    CHECK(res.ok());
  }
  {
    Tensor a = rand_t({2, 3, 4}, 121);
    Tensor b = rand_t({2, 4, 5}, 232);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1])); },
        {a, b});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_t({3, 4}, 343);
    Tensor b = rand_t({4}, 454);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) { return weighted_sum(add_row_bias(in[0], in[1])); },
        {x, b});
    CHECK(res.ok());
  }
  {
    Tensor xs[3] = {rand_t({2, 2, 3, 3}, 565), rand_t({2, 3, 3, 3}, 676),
                    rand_t({2, 1, 3, 3}, 787)};
    auto res = grad_check(
        [](const std::vector<Tensor>& in) {
          return weighted_sum(concat({in[0], in[1], in[2]}, 1));
        },
        {xs[0], xs[1], xs[2]});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_t({3, 6}, 898);
    Tensor g = rand_t({6}, 919, 0.5, 1.5);
    Tensor b = rand_t({6}, 929);
    auto res = grad_check(
        [](const std::vector<Tensor>& in) {
          return weighted_sum(layer_norm(in[0], in[1], in[2]));
        },
        {x, g, b});
    CHECK(res.ok());
  }
  {
    Tensor x = rand_t({2, 3, 4, 4}, 939);
    Tensor g = rand_t({3}, 949, 0.5, 1.5);
    Tensor b = rand_t({3}, 959);
    std::vector<double> mu{0.1, -0.2, 0.3}, sigma{1.1, 0.9, 1.3};
    auto res = grad_check(
        [&](const std::vector<Tensor>& in) {
          return weighted_sum(channel_affine(in[0], in[1], in[2], mu, sigma));
        },
        {x, g, b});
    CHECK(res.ok());
  }
}
