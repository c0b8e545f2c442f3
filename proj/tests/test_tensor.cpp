#include <gtest/gtest.h>

#include <random>

#include "evd/tensor.hpp"
#include "test_util.hpp"

using namespace evd;
using evd::test::fd_check;
using evd::test::random_tensor;

namespace {

// Direct loop over every output and kernel tap.
Tensor4<double> naive_conv(const Tensor4<double>& x, const ConvLayer<double>& l) {
  const long k = static_cast<long>(l.k()), p = static_cast<long>(l.pad());
  Tensor4<double> y(x.n(), l.out_c(), x.h(), x.w());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t o = 0; o < l.out_c(); ++o)
      for (long r = 0; r < static_cast<long>(x.h()); ++r)
        for (long c = 0; c < static_cast<long>(x.w()); ++c) {
          double acc = l.bias.empty() ? 0.0 : l.bias[o];
          for (std::size_t i = 0; i < l.in_c(); ++i)
            for (long dy = 0; dy < k; ++dy)
              for (long dx = 0; dx < k; ++dx) {
                const long yy = r + dy - p, xx = c + dx - p;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(x.h()) || xx >= static_cast<long>(x.w())) continue;
                acc += l.weight(o, i, static_cast<std::size_t>(dy), static_cast<std::size_t>(dx)) *
                       x(n, i, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
              }
          y(n, o, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
        }
  return y;
}

ConvLayer<double> random_layer(std::size_t in, std::size_t out, std::size_t k, std::mt19937_64& rng,
                               bool bias = true) {
  ConvLayer<double> l(in, out, k, bias);
  l.weight = random_tensor(l.weight.shape(), rng);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& b : l.bias) b = u(rng);
  return l;
}

double dot(const Tensor4<double>& a, const Tensor4<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor4<double> t(2, 3, 4, 5);
  EXPECT_EQ(t.size(), 120u);
  t(1, 2, 3, 4) = 7.0;
  EXPECT_EQ(t[t.size() - 1], 7.0);
  EXPECT_EQ(t.index(0, 0, 0, 1), 1u);
  EXPECT_EQ(t.index(0, 0, 1, 0), 5u);
  EXPECT_EQ(to_string(t.shape()), "(2,3,4,5)");
}

TEST(Conv, OneByOneIdentity) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor(2, 1, 5, 6, rng);
  ConvLayer<double> l(1, 1, 1);
  l.weight[0] = 1.0;
  EXPECT_EQ(conv2d_forward(x, l), x);
}

TEST(Conv, ZeroWeightConstantBias) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor(1, 2, 6, 6, rng);
  ConvLayer<double> l(2, 3, 3);
  std::fill(l.bias.begin(), l.bias.end(), 0.5);
  for (const auto out = conv2d_forward(x, l); double v : out.span()) EXPECT_EQ(v, 0.5);
}

TEST(Conv, MatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    const auto x = random_tensor(2, 3, 5, 5, rng);
    const auto l = random_layer(3, 4, k, rng);
    const auto y = conv2d_forward(x, l);
    const auto ref = naive_conv(x, l);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12) << "k=" << k;
  }
}

TEST(Conv, NonSquareAndTinyImages) {
  std::mt19937_64 rng(4);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 7}, {7, 3}, {4, 9}}) {
    const auto x = random_tensor(1, 2, h, w, rng);
    const auto l = random_layer(2, 2, 7, rng);
    const auto y = conv2d_forward(x, l);
    const auto ref = naive_conv(x, l);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv, LinearInInputAndWeight) {
  std::mt19937_64 rng(5);
  auto l = random_layer(3, 2, 3, rng, false);
  const auto x = random_tensor(1, 3, 6, 6, rng), z = random_tensor(1, 3, 6, 6, rng);
  Tensor4<double> mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.0 * x[i] - 0.5 * z[i];
  const auto a = conv2d_forward(x, l), b = conv2d_forward(z, l), m = conv2d_forward(mix, l);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(m[i], 2.0 * a[i] - 0.5 * b[i], 1e-10);

  auto l2 = random_layer(3, 2, 3, rng, false);
  auto lm = l;
  for (std::size_t i = 0; i < lm.weight.size(); ++i) lm.weight[i] = 3.0 * l.weight[i] + l2.weight[i];
  const auto p = conv2d_forward(x, l), q = conv2d_forward(x, l2), r = conv2d_forward(x, lm);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r[i], 3.0 * p[i] + q[i], 1e-10);
}

TEST(Conv, ShapeMismatchNamesBothShapes) {
  ConvLayer<double> l(3, 2, 3);
  Tensor4<double> x(1, 4, 5, 5);
  try {
    conv2d_forward(x, l);
    FAIL() << "expected ContractViolation";
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1,4,5,5)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(2,3,3,3)"), std::string::npos) << msg;
  }
  EXPECT_THROW(ConvLayer<double>(3, 3, 4), ContractViolation);
  Tensor4<double> ok(1, 3, 5, 5);
  EXPECT_THROW(conv2d_backward(ok, l, Tensor4<double>(1, 2, 4, 5)), ContractViolation);
}

TEST(ConvBackward, ZeroGradGivesZeros) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor(1, 2, 5, 5, rng);
  const auto l = random_layer(2, 3, 3, rng);
  const auto g = conv2d_backward(x, l, Tensor4<double>(1, 3, 5, 5));
  for (const auto out = g.input; double v : out.span()) EXPECT_EQ(v, 0.0);
  for (const auto out = g.weight; double v : out.span()) EXPECT_EQ(v, 0.0);
  for (double v : g.bias) EXPECT_EQ(v, 0.0);
}

TEST(ConvBackward, IdentityPassesGradient) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor(2, 1, 4, 4, rng);
  const auto go = random_tensor(2, 1, 4, 4, rng);
  ConvLayer<double> l(1, 1, 1);
  l.weight[0] = 1.0;
  EXPECT_EQ(conv2d_backward(x, l, go).input, go);
}

TEST(ConvBackward, FiniteDifferences) {
  std::mt19937_64 rng(8);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    auto x = random_tensor(2, 3, 6, 5, rng);
    auto l = random_layer(3, 4, k, rng);
    const auto go = random_tensor(2, 4, 6, 5, rng);
    const auto g = conv2d_backward(x, l, go);
    auto loss = [&] { return dot(conv2d_forward(x, l), go); };
    // linear in each argument: a large step has no truncation error
    const double h = 1e-3;
    EXPECT_LT(fd_check(x.span(), g.input.span(), loss, h), 1e-5) << "input k=" << k;
    EXPECT_LT(fd_check(l.weight.span(), g.weight.span(), loss, h), 1e-5) << "weight k=" << k;
    EXPECT_LT(fd_check(std::span<double>(l.bias), std::span<const double>(g.bias), loss, h), 1e-5) << "bias k=" << k;
  }
}

TEST(ConvBackward, LargestPropertyShape) {
  std::mt19937_64 rng(9);
  auto x = random_tensor(2, 12, 9, 9, rng);
  auto l = random_layer(12, 3, 5, rng);
  const auto go = random_tensor(2, 3, 9, 9, rng);
  const auto g = conv2d_backward(x, l, go);
  auto loss = [&] { return dot(conv2d_forward(x, l), go); };
  EXPECT_LT(fd_check(x.span(), g.input.span(), loss), 1e-5);
  EXPECT_LT(fd_check(l.weight.span(), g.weight.span(), loss), 1e-5);
}

TEST(Conv, Deterministic) {
  std::mt19937_64 rng(10);
  const auto x = random_tensor(1, 3, 8, 8, rng);
  const auto l = random_layer(3, 3, 5, rng);
  EXPECT_EQ(conv2d_forward(x, l), conv2d_forward(x, l));
}

TEST(Relu, NegativeAndPositive) {
  Tensor4<double> neg(1, 1, 2, 2, -0.5), pos(1, 1, 2, 2, 0.5), g(1, 1, 2, 2, 1.0);
  for (const auto out = relu_forward(neg); double v : out.span()) EXPECT_EQ(v, 0.0);
  for (const auto out = relu_backward(neg, g); double v : out.span()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(relu_forward(pos), pos);
  EXPECT_EQ(relu_backward(pos, g), g);
  Tensor4<double> zero(1, 1, 1, 1, 0.0), one(1, 1, 1, 1, 1.0);
  EXPECT_EQ(relu_backward(zero, one)[0], 0.0);
  Tensor4<double> nan(1, 1, 1, 1, std::nan(""));
  EXPECT_TRUE(std::isnan(relu_forward(nan)[0]));
  relu_inplace(nan);
  EXPECT_TRUE(std::isnan(nan[0]));
}

TEST(Relu, FiniteDifferencesAwayFromKink) {
  std::mt19937_64 rng(11);
  auto x = random_tensor(2, 3, 4, 4, rng);
  for (auto& v : x.span())
    if (std::abs(v) < 1e-4) v = 0.5;
  const auto go = random_tensor(x.shape(), rng);
  const auto g = relu_backward(x, go);
  auto loss = [&] { return dot(relu_forward(x), go); };
  EXPECT_LT(fd_check(x.span(), g.span(), loss), 1e-5);
}

TEST(Concat, SinglePartAndInverse) {
  std::mt19937_64 rng(12);
  const auto a = random_tensor(2, 3, 4, 4, rng), b = random_tensor(2, 2, 4, 4, rng);
  EXPECT_EQ(concat_channels(std::vector<Tensor4<double>>{a}), a);
  const auto ab = concat_channels(std::vector<Tensor4<double>>{a, b});
  const auto parts = split_channels(ab, std::vector<std::size_t>{3, 2});
  ASSERT_EQ(parts.size(), 2u);
  EXPECT_EQ(parts[0], a);
  EXPECT_EQ(parts[1], b);
}

TEST(Concat, IndexOracle) {
  std::mt19937_64 rng(13);
  const std::vector<Tensor4<double>> parts{random_tensor(2, 1, 3, 5, rng), random_tensor(2, 4, 3, 5, rng),
                                           random_tensor(2, 2, 3, 5, rng)};
  const auto cat = concat_channels(parts);
  ASSERT_EQ(cat.shape(), (Shape{2, 7, 3, 5}));
  const std::size_t offset[] = {0, 1, 5};
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < parts[p].c(); ++c)
        for (std::size_t y = 0; y < 3; ++y)
          for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(cat(n, offset[p] + c, y, x), parts[p](n, c, y, x));
}

TEST(Concat, SpatialMismatch) {
  EXPECT_THROW(concat_channels(std::vector<Tensor4<double>>{Tensor4<double>(1, 1, 3, 3), Tensor4<double>(1, 1, 3, 4)}),
               ContractViolation);
  EXPECT_THROW(split_channels(Tensor4<double>(1, 3, 2, 2), std::vector<std::size_t>{1, 1}), ContractViolation);
}

TEST(Mse, ClosedForms) {
  std::mt19937_64 rng(14);
  const auto a = random_tensor(1, 3, 4, 4, rng);
  const auto same = mse_loss(a, a);
  EXPECT_EQ(same.loss, 0.0);
  for (const auto out = same.grad; double v : out.span()) EXPECT_EQ(v, 0.0);
  auto b = a;
  for (auto& v : b.span()) v += 0.1;
  EXPECT_NEAR(mse_loss(b, a).loss, 0.01, 1e-15);
  EXPECT_THROW(mse_loss(a, Tensor4<double>(1, 3, 4, 5)), ContractViolation);
}

TEST(Mse, FiniteDifferences) {
  std::mt19937_64 rng(15);
  auto p = random_tensor(2, 3, 4, 4, rng);
  const auto t = random_tensor(2, 3, 4, 4, rng);
  const auto r = mse_loss(p, t);
  EXPECT_LT(fd_check(p.span(), r.grad.span(), [&] { return mse_loss(p, t).loss; }), 1e-6);
}

TEST(Sgd, ZeroLearningRateOnlyMovesVelocity) {
  std::vector<double> p{1.0, 2.0}, g{0.5, -1.0};
  MomentumState<double> st;
  sgd_step(std::vector<ParamRef<double>>{{"w", p, g}}, st, 0.0, 0.9, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(st.velocity[0], g);
}

TEST(Sgd, PlainGradientDescent) {
  std::vector<double> p{1.0, 2.0}, g{0.5, -1.0};
  MomentumState<double> st;
  sgd_step(std::vector<ParamRef<double>>{{"w", p, g}}, st, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(p[1], 2.0 + 0.1);
}

TEST(Sgd, TwoStepMomentumDisplacement) {
  const double lr = 0.01, g0 = 0.7;
  std::vector<double> p{3.0}, g{g0};
  MomentumState<double> st;
  for (int i = 0; i < 2; ++i) sgd_step(std::vector<ParamRef<double>>{{"w", p, g}}, st, lr, 0.9, 0.0);
  EXPECT_NEAR(3.0 - p[0], lr * g0 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, WeightDecayInsideVelocity) {
  std::vector<double> p{2.0}, g{0.0};
  MomentumState<double> st;
  sgd_step(std::vector<ParamRef<double>>{{"w", p, g}}, st, 0.5, 0.9, 0.1);
  EXPECT_DOUBLE_EQ(st.velocity[0][0], 0.2);
  EXPECT_DOUBLE_EQ(p[0], 1.9);
}

TEST(Sgd, NonFiniteGradientNamesLayer) {
  std::vector<double> p{1.0, 1.0}, g{3.0, std::nan("")};
  MomentumState<double> st;
  try {
    sgd_step(std::vector<ParamRef<double>>{{"conv4.weight", p, g}}, st, 0.1, 0.9, 0.0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("conv4.weight"), std::string::npos);
    EXPECT_NE(msg.find("3.0"), std::string::npos) << msg;
  }
  EXPECT_EQ(p, (std::vector<double>{1.0, 1.0}));
}

TEST(Sgd, ShapeMismatch) {
  std::vector<double> p{1.0, 1.0}, g{1.0};
  MomentumState<double> st;
  EXPECT_THROW(sgd_step(std::vector<ParamRef<double>>{{"w", p, g}}, st, 0.1, 0.9, 0.0), ContractViolation);
}

TEST(Tensor, FloatInstantiation) {
  Tensor4<float> x(1, 3, 5, 5, 0.5f);
  ConvLayer<float> l(3, 2, 3);
  std::mt19937_64 rng(16);
  l.init_uniform(rng);
  const auto y = conv2d_forward(x, l);
  EXPECT_TRUE(all_finite(y));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 5, 5}));
}
