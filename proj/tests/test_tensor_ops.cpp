#include <cmath>
#include <random>

#include "doctest.h"
#include "lorasr/gradcheck.hpp"
#include "lorasr/ops.hpp"

using namespace lorasr;

namespace {

// Direct six-loop cross-correlation with zero padding.
TensorD naive_conv(const TensorD& x, const TensorD& k, const TensorD* bias, Index pad) {
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const Index oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  TensorD out({n, cout, oh, ow});
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < cout; ++o)
      for (Index y = 0; y < oh; ++y)
        for (Index xx = 0; xx < ow; ++xx) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (Index c = 0; c < cin; ++c)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j) {
                const Index sy = y + i - pad, sx = xx + j - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                acc += x.at(b, c, sy, sx) * k.at(o, c, i, j);
              }
          out.at(b, o, y, xx) = acc;
        }
  return out;
}

double scalar_sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

template <typename F>
TensorD eval(F&& f, const std::vector<TensorD>& in) {
  Tape<double> tape(false);
  std::vector<Var<double>> vars;
  for (const auto& t : in) vars.push_back(tape.constant(t));
  return f(tape, vars).value();
}

std::mt19937_64 rng(2024);

TensorD randn(Shape s) { return TensorD::normal(std::move(s), rng); }

}  // namespace

TEST_CASE("conv2d ones-counting") {
  Tape<double> tape(false);
  const auto out = conv2d(tape.constant(TensorD::ones({1, 1, 3, 3})), tape.constant(TensorD::ones({1, 1, 3, 3})), 1);
  CHECK(out.value().at(0, 0, 1, 1) == 9.0);
  CHECK(out.value().at(0, 0, 0, 0) == 4.0);
  CHECK(out.value().at(0, 0, 0, 1) == 6.0);
}

TEST_CASE("conv2d identity kernel") {
  const TensorD x = randn({2, 1, 4, 5});
  Tape<double> tape(false);
  const auto out = conv2d(tape.constant(x), tape.constant(TensorD::ones({1, 1, 1, 1})), 0);
  CHECK(out.value() == x);
}

TEST_CASE("conv2d matches six-loop reference") {
  const TensorD x = randn({2, 3, 5, 5}), k = randn({4, 3, 3, 3}), b = randn({4});
  Tape<double> tape(false);
  const auto out = conv2d(tape.constant(x), tape.constant(k), tape.constant(b), 1);
  CHECK(max_abs_diff(out.value(), naive_conv(x, k, &b, 1)) < 1e-6);
  const auto no_pad = conv2d(tape.constant(x), tape.constant(k), 0);
  CHECK(no_pad.shape() == Shape{2, 4, 3, 3});
  CHECK(max_abs_diff(no_pad.value(), naive_conv(x, k, nullptr, 0)) < 1e-6);
}

TEST_CASE("conv2d float path matches reference") {
  const TensorD x = randn({1, 3, 6, 4}), k = randn({2, 3, 3, 3});
  Tape<float> tape(false);
  const auto out = conv2d(tape.constant(x.cast<float>()), tape.constant(k.cast<float>()), 1);
  CHECK(max_abs_diff(out.value().cast<double>(), naive_conv(x, k, nullptr, 1)) < 1e-5);
}

TEST_CASE("conv2d channel mismatch names both shapes") {
  Tape<double> tape(false);
  try {
    conv2d(tape.constant(TensorD({1, 2, 4, 4})), tape.constant(TensorD({3, 5, 3, 3})), 1);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1,2,4,4]") != std::string::npos);
    CHECK(msg.find("[3,5,3,3]") != std::string::npos);
  }
}

TEST_CASE("conv2d linearity") {
  const TensorD x = randn({1, 2, 5, 5}), y = randn({1, 2, 5, 5}), k = randn({3, 2, 3, 3});
  const double a = 0.7, b = -1.3;
  Tape<double> tape(false);
  TensorD mix(x.shape(), a * x.array() + b * y.array());
  const TensorD lhs = conv2d(tape.constant(mix), tape.constant(k), 1).value();
  const TensorD cx = conv2d(tape.constant(x), tape.constant(k), 1).value();
  const TensorD cy = conv2d(tape.constant(y), tape.constant(k), 1).value();
  CHECK(max_abs_diff(lhs, TensorD(lhs.shape(), a * cx.array() + b * cy.array())) < 1e-5);
}

TEST_CASE("silu values") {
  const TensorD x({4}, {0.0, 1.0, 10.0, 20.0});
  const TensorD y = eval([](auto&, auto& v) { return silu(v[0]); }, {x});
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(1.0 * scalar_sigmoid(1.0)).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.731058).epsilon(1e-6));
  CHECK(std::abs(y[2] - 10.0) < 1e-3);
  CHECK(std::abs(y[3] - 20.0) < 1e-4);
}

TEST_CASE("symmetric activation") {
  const TensorD x({3}, {0.0, 2.0, -2.0});
  const TensorD y = eval([](auto&, auto& v) { return symmetric_activation(v[0]); }, {x});
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(scalar_sigmoid(2.0) - 0.5).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.380797).epsilon(1e-6));

  const TensorD r = randn({64});
  const TensorD neg(r.shape(), -r.array());
  const TensorD fr = eval([](auto&, auto& v) { return symmetric_activation(v[0]); }, {r});
  const TensorD fn = eval([](auto&, auto& v) { return symmetric_activation(v[0]); }, {neg});
  CHECK((fr.array() + fn.array()).abs().maxCoeff() < 1e-7);
  const TensorD big(r.shape(), 50.0 * r.array());
  const TensorD fb = eval([](auto&, auto& v) { return symmetric_activation(v[0]); }, {big});
  CHECK(fb.array().abs().maxCoeff() <= 0.5);

  const TensorD th = eval([](auto&, auto& v) { return symmetric_activation(v[0], SymmetricActivation::Tanh); }, {x});
  CHECK(th[1] == doctest::Approx(std::tanh(2.0)));
}

TEST_CASE("pixel shuffle layout and inverse") {
  const TensorD x({1, 4, 1, 1}, {1, 2, 3, 4});
  const TensorD y = eval([](auto&, auto& v) { return pixel_shuffle(v[0], 2); }, {x});
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y == TensorD({1, 1, 2, 2}, {1, 2, 3, 4}));

  const TensorD big = randn({2, 48, 8, 8});
  const TensorD up = eval([](auto&, auto& v) { return pixel_shuffle(v[0], 4); }, {big});
  CHECK(up.shape() == Shape{2, 3, 32, 32});
  const TensorD back = eval([](auto&, auto& v) { return pixel_unshuffle(pixel_shuffle(v[0], 4), 4); }, {big});
  CHECK(back == big);

  // out[n,c,h*s+i,w*s+j] = in[n,c*s*s+i*s+j,h,w]
  const TensorD z = randn({1, 8, 3, 2});
  const TensorD zs = eval([](auto&, auto& v) { return pixel_shuffle(v[0], 2); }, {z});
  bool ok = true;
  for (Index c = 0; c < 2; ++c)
    for (Index h = 0; h < 3; ++h)
      for (Index w = 0; w < 2; ++w)
        for (Index i = 0; i < 2; ++i)
          for (Index j = 0; j < 2; ++j) ok = ok && zs.at(0, c, h * 2 + i, w * 2 + j) == z.at(0, c * 4 + i * 2 + j, h, w);
  CHECK(ok);

  Tape<double> tape(false);
  CHECK_THROWS_AS(pixel_shuffle(tape.constant(TensorD({1, 6, 2, 2})), 2), ShapeError);
}

TEST_CASE("elementwise identities and errors") {
  const TensorD x = randn({2, 3, 4});
  CHECK(eval([](auto& t, auto& v) { return add(v[0], t.constant(TensorD::zeros(v[0].shape()))); }, {x}) == x);
  CHECK(eval([](auto& t, auto& v) { return mul(v[0], t.constant(TensorD::ones(v[0].shape()))); }, {x}) == x);
  Tape<double> tape(false);
  CHECK_THROWS_AS(add(tape.constant(TensorD({2, 3})), tape.constant(TensorD({3, 2}))), ShapeError);
  CHECK_THROWS_AS(mul(tape.constant(TensorD({2, 3})), tape.constant(TensorD({6}))), ShapeError);
}

TEST_CASE("matmul matches triple loop") {
  const TensorD a = randn({3, 4}), b = randn({4, 2});
  const TensorD c = eval([](auto&, auto& v) { return matmul(v[0], v[1]); }, {a, b});
  TensorD ref({3, 2});
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 2; ++j) {
      double s = 0;
      for (Index k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 2 + j];
      ref[i * 2 + j] = s;
    }
  CHECK(max_abs_diff(c, ref) < 1e-6);

  TensorD eye({4, 4});
  for (Index i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  const TensorD m = randn({4, 3});
  CHECK(eval([](auto&, auto& v) { return matmul(v[0], v[1]); }, {eye, m}) == m);
  CHECK(eval([](auto&, auto& v) { return matmul(v[0], v[1]); }, {m.reshaped({3, 4}), TensorD({4, 5})}) ==
        TensorD({3, 5}));
  Tape<double> tape(false);
  CHECK_THROWS_AS(matmul(tape.constant(TensorD({3, 4})), tape.constant(TensorD({3, 4}))), ShapeError);
}

TEST_CASE("backward basics") {
  const TensorD x = randn({3, 2});
  {
    Tape<double> tape;
    const auto v = tape.parameter("x", x, true);
    const auto g = tape.backward(sum(v));
    CHECK(g.at("x") == TensorD::ones({3, 2}));
  }
  {
    Tape<double> tape;
    const auto v = tape.parameter("x", x, true);
    const auto g = tape.backward(sum(mul(v, v)));
    CHECK(max_abs_diff(g.at("x"), TensorD(x.shape(), 2.0 * x.array())) < 1e-12);
  }
  {
    // fan-out accumulates
    Tape<double> tape;
    const auto v = tape.parameter("x", x, true);
    const auto g = tape.backward(sum(add(v, add(v, v))));
    CHECK(g.at("x") == TensorD::full({3, 2}, 3.0));
  }
  {
    Tape<double> tape;
    const auto v = tape.parameter("x", x, true);
    const auto frozen = tape.parameter("w", x, false);
    const auto g = tape.backward(sum(mul(v, frozen)));
    CHECK(g.count("w") == 0);
    CHECK(g.count("x") == 1);
    CHECK_THROWS_AS(tape.backward(mul(v, frozen)), GradError);
    CHECK_THROWS_AS(add(v, Var<double>()), GradError);
    Tape<double> other;
    CHECK_THROWS_AS(add(v, other.constant(x)), GradError);
    CHECK_THROWS_AS(tape.parameter("x", x, true), GradError);
  }
}

TEST_CASE("finite difference checker") {
  const TensorD x = randn({5});
  const double e = finite_difference_check([](auto&, const Var<double>& v) { return sum(v); }, x);
  CHECK(e < 1e-10);

  // MSE on a random pair at two step sizes.
  const TensorD target = randn({2, 3});
  auto mse = [&](Tape<double>& t, const Var<double>& v) { return mean_squared_error(v, t.constant(target)); };
  const TensorD p = randn({2, 3});
  CHECK(finite_difference_check(mse, p, 1e-4) < 1e-6);
  CHECK(finite_difference_check(mse, p, 5e-5) < 1e-6);
}

TEST_CASE("gradients of every op match finite differences") {
  auto check = [](const char* name, TapeFunction f, std::vector<TensorD> at) {
    const GradCheckResult r = finite_difference_check(f, at, 1e-4);
    INFO(name << " rel err " << r.max_relative_error << " at input " << r.worst_input << "[" << r.worst_index << "]");
    CHECK(r.max_relative_error < 1e-4);
  };
  // Random projection to a scalar; fixed seed so every evaluation sees the same weights.
  auto weighted = [](Tape<double>& t, const Var<double>& v) {
    std::mt19937_64 local(7);
    return sum(mul(v, t.constant(TensorD::normal(v.shape(), local))));
  };
  check("conv2d", [&](auto& t, auto& v) { return weighted(t, conv2d(v[0], v[1], v[2], 1)); },
        {randn({2, 2, 4, 4}), randn({3, 2, 3, 3}), randn({3})});
  check("silu", [&](auto& t, auto& v) { return weighted(t, silu(v[0])); }, {randn({2, 3, 4, 4})});
  check("symmetric", [&](auto& t, auto& v) { return weighted(t, symmetric_activation(v[0])); }, {randn({2, 3, 4, 4})});
  check("tanh", [&](auto& t, auto& v) { return weighted(t, symmetric_activation(v[0], SymmetricActivation::Tanh)); },
        {randn({2, 3, 4, 4})});
  check("add", [&](auto& t, auto& v) { return weighted(t, add(v[0], v[1])); }, {randn({2, 3, 4, 4}), randn({2, 3, 4, 4})});
  check("sub", [&](auto& t, auto& v) { return weighted(t, sub(v[0], v[1])); }, {randn({2, 3, 4, 4}), randn({2, 3, 4, 4})});
  check("mul", [&](auto& t, auto& v) { return weighted(t, mul(v[0], v[1])); }, {randn({2, 3, 4, 4}), randn({2, 3, 4, 4})});
  check("scale", [&](auto& t, auto& v) { return weighted(t, scale(v[0], 1.7)); }, {randn({2, 3, 4, 4})});
  check("matmul", [&](auto& t, auto& v) { return weighted(t, matmul(v[0], v[1])); }, {randn({3, 4}), randn({4, 5})});
  check("reshape", [&](auto& t, auto& v) { return weighted(t, reshape(v[0], {2, 3, 4, 4})); }, {randn({6, 16})});
  check("pixel_shuffle", [&](auto& t, auto& v) { return weighted(t, pixel_shuffle(v[0], 2)); }, {randn({1, 8, 2, 3})});
  check("pixel_unshuffle", [&](auto& t, auto& v) { return weighted(t, pixel_unshuffle(v[0], 2)); },
        {randn({1, 2, 4, 6})});
  check("concat", [&](auto& t, auto& v) { return weighted(t, concat_channels<double>({v[0], v[1], v[0]})); },
        {randn({2, 1, 3, 3}), randn({2, 2, 3, 3})});
  check("mean", [&](auto&, auto& v) { return mean(v[0]); }, {randn({3, 4})});
  check("mean_abs_diff", [&](auto&, auto& v) { return mean_abs_diff(v[0], v[1]); }, {randn({3, 4}), randn({3, 4})});
  check("mse", [&](auto&, auto& v) { return mean_squared_error(v[0], v[1]); }, {randn({3, 4}), randn({3, 4})});
  check("affinity", [&](auto& t, auto& v) { return weighted(t, spatial_affinity(v[0])); }, {randn({2, 3, 2, 3})});
}
