#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "hyperdys/autodiff.hpp"
#include "test_util.hpp"

namespace ad = hyperdys::ad;
using hyperdys::testing::random_tensor;
using hyperdys::testing::weighted_sum;

namespace {

using TensorD = ad::Tensor<double>;

// Direct 6-nested-loop cross-correlation.
TensorD naive_conv(const TensorD& x, const TensorD& k, const TensorD& b, std::size_t s,
                   std::size_t p) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oc = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * p - kh) / s + 1, ow = (w + 2 * p - kw) / s + 1;
  TensorD y({n, oc, oh, ow});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < oc; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b[o];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t ki = 0; ki < kh; ++ki)
              for (std::size_t kj = 0; kj < kw; ++kj) {
                const long iy = static_cast<long>(oy * s + ki) - static_cast<long>(p);
                const long ix = static_cast<long>(ox * s + kj) - static_cast<long>(p);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                  continue;
                acc += x(i, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                       k(o, ch, ki, kj);
              }
          y(i, o, oy, ox) = acc;
        }
  return y;
}

}  // namespace

TEST(Linear, IdentityWeights) {
  ad::Graph<double> g;
  auto x = g.constant(TensorD({1, 2}, {1, 2}));
  auto w = g.constant(TensorD({2, 2}, {1, 0, 0, 1}));
  auto b = g.constant(TensorD({2}, {0, 0}));
  auto y = ad::linear(g, x, w, b);
  EXPECT_EQ(g.value(y).vec(), (std::vector<double>{1, 2}));
}

TEST(Linear, DotProductPlusBias) {
  ad::Graph<double> g;
  auto y = ad::linear(g, g.constant(TensorD({1, 2}, {1, 2})), g.constant(TensorD({2, 1}, {3, 4})),
                      g.constant(TensorD({1}, {1})));
  EXPECT_DOUBLE_EQ(g.value(y)[0], 12.0);
}

TEST(Linear, ShapeMismatchThrows) {
  ad::Graph<double> g;
  auto x = g.constant(TensorD({1, 3}));
  auto w = g.constant(TensorD({2, 2}));
  auto b = g.constant(TensorD({2}));
  EXPECT_THROW(ad::linear(g, x, w, b), hyperdys::ShapeError);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  ad::ParamStore<double> store;
  store.add("x", random_tensor<double>({3, 4}, 1));
  store.add("w", random_tensor<double>({4, 2}, 2));
  store.add("b", random_tensor<double>({2}, 3));
  const double err = ad::gradient_check<double>(
      [&](ad::Graph<double>& g) {
        auto y = ad::linear(g, g.param(store, "x"), g.param(store, "w"), g.param(store, "b"));
        return weighted_sum(g, y, 4);
      },
      store);
  EXPECT_LT(err, 1e-5);
  // Affine in every parameter, so central differences are exact up to rounding.
  EXPECT_LT(err, 1e-7);
}

TEST(Conv2d, ScalingKernel) {
  ad::Graph<double> g;
  TensorD x = random_tensor<double>({1, 1, 3, 3}, 5);
  auto y = ad::conv2d(g, g.constant(x), g.constant(TensorD({1, 1, 1, 1}, 2.0)),
                      g.constant(TensorD({1})), {1, 0});
  ASSERT_EQ(g.value(y).shape(), (ad::Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(g.value(y)[i], 2.0 * x[i]);
}

TEST(Conv2d, AlexNetFirstLayerShape) {
  ad::Graph<float> g;
  auto y = ad::conv2d(g, g.constant(ad::Tensor<float>({1, 3, 224, 224})),
                      g.constant(ad::Tensor<float>({64, 3, 11, 11})),
                      g.constant(ad::Tensor<float>({64})), {4, 2});
  EXPECT_EQ(g.value(y).shape(), (ad::Shape{1, 64, 55, 55}));
}

TEST(Conv2d, MatchesNaiveLoops) {
  for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 2}}) {
    TensorD x = random_tensor<double>({2, 2, 5, 5}, 10 + s + p);
    TensorD k = random_tensor<double>({3, 2, 3, 3}, 20 + s + p);
    TensorD b = random_tensor<double>({3}, 30);
    ad::Graph<double> g;
    auto y = ad::conv2d(g, g.constant(x), g.constant(k), g.constant(b), {s, p});
    TensorD expected = naive_conv(x, k, b, s, p);
    ASSERT_EQ(g.value(y).shape(), expected.shape());
    for (std::size_t i = 0; i < expected.size(); ++i)
      EXPECT_NEAR(g.value(y)[i], expected[i], 1e-10);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  ad::Graph<double> g;
  EXPECT_THROW(ad::conv2d(g, g.constant(TensorD({1, 1, 3, 3})), g.constant(TensorD({1, 1, 5, 5})),
                          g.constant(TensorD({1})), {1, 0}),
               hyperdys::ShapeError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  ad::ParamStore<double> store;
  store.add("x", random_tensor<double>({2, 2, 6, 5}, 40));
  store.add("k", random_tensor<double>({3, 2, 3, 2}, 41));
  store.add("b", random_tensor<double>({3}, 42));
  const double err = ad::gradient_check<double>(
      [&](ad::Graph<double>& g) {
        auto y = ad::conv2d(g, g.param(store, "x"), g.param(store, "k"), g.param(store, "b"),
                            {2, 1});
        return weighted_sum(g, y, 43);
      },
      store);
  EXPECT_LT(err, 1e-7);
}

TEST(MaxPool, AlexNetShape) {
  ad::Graph<float> g;
  auto y = ad::maxpool2d(g, g.constant(ad::Tensor<float>({1, 2, 55, 55})), 3, 2);
  EXPECT_EQ(g.value(y).shape(), (ad::Shape{1, 2, 27, 27}));
}

TEST(MaxPool, ConstantInputRoutesToFirstElement) {
  ad::Graph<double> g;
  auto x = g.variable(TensorD({1, 1, 5, 5}, 3.0));
  auto y = ad::maxpool2d(g, x, 3, 2);
  for (double v : g.value(y).data()) EXPECT_EQ(v, 3.0);
  auto loss = weighted_sum(g, y, 7);
  g.backward(loss);
  TensorD dx = g.grad(x);
  // Windows start at (0,0), (0,2), (2,0), (2,2); only those receive gradient.
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const bool first = (i == 0 || i == 2) && (j == 0 || j == 2);
      if (first) {
        EXPECT_NE(dx(0, 0, i, j), 0.0) << i << "," << j;
      } else {
        EXPECT_EQ(dx(0, 0, i, j), 0.0) << i << "," << j;
      }
    }
}

TEST(MaxPool, MatchesBruteForceWindowScan) {
  TensorD x = random_tensor<double>({1, 1, 7, 7}, 50);
  ad::Graph<double> g;
  auto y = ad::maxpool2d(g, g.constant(x), 3, 2);
  ASSERT_EQ(g.value(y).shape(), (ad::Shape{1, 1, 3, 3}));
  for (std::size_t oy = 0; oy < 3; ++oy)
    for (std::size_t ox = 0; ox < 3; ++ox) {
      double best = -1e300;
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) best = std::max(best, x(0, 0, 2 * oy + i, 2 * ox + j));
      EXPECT_EQ(g.value(y)(0, 0, oy, ox), best);
    }
}

TEST(MaxPool, WindowExceedingInputThrows) {
  ad::Graph<double> g;
  EXPECT_THROW(ad::maxpool2d(g, g.constant(TensorD({1, 1, 2, 2})), 3, 2), hyperdys::ShapeError);
}

TEST(MaxPool, GradientsMatchFiniteDifferences) {
  ad::ParamStore<double> store;
  store.add("x", random_tensor<double>({2, 2, 7, 6}, 51));
  const double err = ad::gradient_check<double>(
      [&](ad::Graph<double>& g) { return weighted_sum(g, ad::maxpool2d(g, g.param(store, "x"), 3, 2), 52); },
      store);
  EXPECT_LT(err, 1e-7);
}

TEST(Activation, PointValues) {
  ad::Graph<double> g;
  auto x = g.constant(TensorD({3}, {-1.0, 2.0, 0.0}));
  auto r = ad::relu(g, x);
  EXPECT_EQ(g.value(r)[0], 0.0);
  EXPECT_EQ(g.value(r)[1], 2.0);
  EXPECT_EQ(g.value(ad::tanh(g, x))[2], 0.0);
  EXPECT_EQ(g.value(ad::sigmoid(g, x))[2], 0.5);
}

TEST(Activation, GradientsMatchFiniteDifferences) {
  for (auto kind : {ad::Activation::relu, ad::Activation::tanh, ad::Activation::sigmoid}) {
    ad::ParamStore<double> store;
    // Keep ReLU inputs away from the kink so central differences are valid.
    TensorD x = random_tensor<double>({4, 5}, 60, 0.05, 2.0);
    for (std::size_t i = 0; i < x.size(); i += 2) x[i] = -x[i];
    store.add("x", x);
    const double err = ad::gradient_check<double>(
        [&](ad::Graph<double>& g) { return weighted_sum(g, ad::activation(g, g.param(store, "x"), kind), 61); },
        store);
    EXPECT_LT(err, 1e-6) << static_cast<int>(kind);
  }
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  ad::Graph<double> g;
  std::vector<int> labels{0};
  auto loss = ad::softmax_cross_entropy(g, g.constant(TensorD({1, 2}, {0, 0})), labels);
  EXPECT_NEAR(g.value(loss)[0], std::log(2.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, LargeLogitsStayFinite) {
  ad::Graph<double> g;
  std::vector<int> labels{0};
  auto z = g.variable(TensorD({1, 2}, {1000, -1000}));
  auto loss = ad::softmax_cross_entropy(g, z, labels);
  EXPECT_NEAR(g.value(loss)[0], 0.0, 1e-12);
  g.backward(loss);
  EXPECT_TRUE(g.grad(z).all_finite());
}

TEST(SoftmaxCrossEntropy, LabelOutOfRangeThrows) {
  ad::Graph<double> g;
  std::vector<int> labels{2};
  EXPECT_THROW(ad::softmax_cross_entropy(g, g.constant(TensorD({1, 2})), labels), hyperdys::LabelError);
}

TEST(SoftmaxCrossEntropy, GradientsMatchFiniteDifferences) {
  ad::ParamStore<double> store;
  store.add("z", random_tensor<double>({6, 2}, 70, -3, 3));
  std::vector<int> labels{0, 1, 1, 0, 1, 0};
  const double err = ad::gradient_check<double>(
      [&](ad::Graph<double>& g) { return ad::softmax_cross_entropy(g, g.param(store, "z"), labels); },
      store);
  EXPECT_LT(err, 1e-5);
}

TEST(SoftmaxCrossEntropy, LossNonNegativeAndRowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    TensorD z = random_tensor<double>({5, 2}, seed, -50, 50);
    TensorD p = ad::softmax_rows(z);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(p(i, 0) + p(i, 1), 1.0, 1e-6);
    ad::Graph<double> g;
    std::vector<int> labels{0, 1, 0, 1, 1};
    EXPECT_GE(g.value(ad::softmax_cross_entropy(g, g.constant(z), labels))[0], 0.0);
  }
}

TEST(ElementwiseAndStructural, GradientsMatchFiniteDifferences) {
  ad::ParamStore<double> store;
  store.add("a", random_tensor<double>({3, 4}, 80));
  store.add("b", random_tensor<double>({3, 4}, 81));
  store.add("c", random_tensor<double>({3, 2}, 82));
  const double err = ad::gradient_check<double>(
      [&](ad::Graph<double>& g) {
        auto a = g.param(store, "a");
        auto b = g.param(store, "b");
        auto c = g.param(store, "c");
        auto prod = ad::mul(g, a, ad::sub(g, b, a));
        auto sum = ad::add(g, prod, b);
        auto cat = ad::concat_cols(g, {sum, c});
        auto sliced = ad::slice_cols(g, cat, 2, 6);
        auto rows = ad::slice_rows(g, sliced, 1, 3);
        return weighted_sum(g, rows, 83);
      },
      store);
  EXPECT_LT(err, 1e-7);
}

TEST(GeneratedLinear, SharedAndPerRowGradients) {
  for (std::size_t m : {std::size_t{1}, std::size_t{3}}) {
    ad::ParamStore<double> store;
    store.add("x", random_tensor<double>({3, 5}, 90));
    store.add("theta", random_tensor<double>({m, 5 * 2 + 2}, 91));
    const double err = ad::gradient_check<double>(
        [&](ad::Graph<double>& g) {
          return weighted_sum(g, ad::generated_linear(g, g.param(store, "x"), g.param(store, "theta"), 2), 92);
        },
        store);
    EXPECT_LT(err, 1e-7) << "m=" << m;
  }
}

TEST(Dropout, SeededMaskIsReproducibleAndScaled) {
  TensorD x({1, 1000}, 1.0);
  std::mt19937_64 r1(5), r2(5);
  ad::Graph<double> g;
  auto y1 = ad::dropout(g, g.constant(x), 0.5, r1);
  auto y2 = ad::dropout(g, g.constant(x), 0.5, r2);
  EXPECT_EQ(g.value(y1), g.value(y2));
  std::size_t kept = 0;
  for (double v : g.value(y1).data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    kept += v != 0.0;
  }
  EXPECT_GT(kept, 400u);
  EXPECT_LT(kept, 600u);
}

TEST(Adam, ZeroGradientIsIdentity) {
  ad::ParamStore<double> store;
  auto& p = store.add("w", random_tensor<double>({4}, 100));
  const TensorD before = p.value;
  p.grad = TensorD({4});
  ad::adam_step(store, ad::AdamOptions{});
  EXPECT_EQ(p.value, before);
  EXPECT_EQ(p.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ad::ParamStore<double> store;
  auto& p = store.add("w", TensorD({1}, 0.5));
  p.grad = TensorD({1}, 1.0);
  ad::AdamOptions opts;
  ad::adam_step(store, opts);
  EXPECT_NEAR(p.value[0], 0.5 - opts.lr, 1e-12);
}

TEST(Adam, RecurrenceOracleOnQuadratic) {
  // f(w) = (w - 3)^2, g = 2(w - 3); recompute the Adam recurrences by hand.
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w = 0.0, m = 0.0, v = 0.0;
  std::vector<double> expected;
  for (int t = 1; t <= 5; ++t) {
    const double grad = 2.0 * (w - 3.0);
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad * grad;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);
    expected.push_back(w);
  }
  ad::ParamStore<double> store;
  auto& p = store.add("w", TensorD({1}, 0.0));
  for (int t = 0; t < 5; ++t) {
    std::map<std::string, TensorD> grads{{"w", TensorD({1}, 2.0 * (p.value[0] - 3.0))}};
    ad::adam_step(store, grads, ad::AdamOptions{lr, b1, b2, eps});
    EXPECT_NEAR(p.value[0], expected[static_cast<std::size_t>(t)], 1e-10);
  }
}

TEST(Adam, MisalignedGradientThrows) {
  ad::ParamStore<double> store;
  store.add("w", TensorD({2}));
  std::map<std::string, TensorD> grads{{"w", TensorD({3})}};
  EXPECT_THROW(ad::adam_step(store, grads, ad::AdamOptions{}), hyperdys::ShapeError);
}

TEST(GradientCheck, CatchesCorruptedBackward) {
  ad::ParamStore<double> store;
  store.add("x", random_tensor<double>({2, 3}, 110));
  store.add("w", random_tensor<double>({3, 2}, 111));
  // matmul forward with a backward that doubles the true gradient.
  auto corrupted = [&](ad::Graph<double>& g) {
    auto x = g.param(store, "x");
    auto w = g.param(store, "w");
    auto exact = ad::matmul(g, x, w);
    auto y = g.record(g.value(exact), {x, w}, [x, w](ad::Graph<double>& g, ad::NodeId self) {
      const TensorD& dy = g.grad_buffer(self);
      const TensorD& X = g.value(x);
      const TensorD& W = g.value(w);
      TensorD& dx = g.grad_buffer(x);
      TensorD& dw = g.grad_buffer(w);
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
          for (std::size_t a = 0; a < 3; ++a) {
            dx(i, a) += 2.0 * dy(i, j) * W(a, j);
            dw(a, j) += 2.0 * dy(i, j) * X(i, a);
          }
    });
    return weighted_sum(g, y, 112);
  };
  EXPECT_GT(ad::gradient_check<double>(corrupted, store), 0.3);
}

TEST(GradientCheck, NonFiniteLossThrows) {
  ad::ParamStore<double> store;
  store.add("x", TensorD({1, 2}, {1.0, 2.0}));
  auto fn = [&](ad::Graph<double>& g) {
    auto x = g.param(store, "x");
    auto inf = g.constant(TensorD({2, 1}, std::numeric_limits<double>::infinity()));
    return ad::matmul(g, x, inf);
  };
  EXPECT_THROW(ad::gradient_check<double>(fn, store), hyperdys::NumericError);
}

TEST(Graph, GradBeforeBackwardThrows) {
  ad::Graph<double> g;
  auto x = g.variable(TensorD({1}));
  EXPECT_THROW(g.grad(x), hyperdys::StateError);
}

TEST(Graph, FrozenParametersReceiveNoGradient) {
  ad::ParamStore<double> store;
  auto& w = store.add("w", random_tensor<double>({3, 1}, 120));
  auto& b = store.add("b", TensorD({1}));
  w.frozen = true;
  ad::Graph<double> g;
  auto y = ad::linear(g, g.constant(random_tensor<double>({2, 3}, 121)), g.param(w), g.param(b));
  g.backward(weighted_sum(g, y, 122));
  EXPECT_TRUE(w.grad.empty());
  EXPECT_FALSE(b.grad.empty());
}

// Randomized shapes: every differentiable op under one composite graph.
TEST(Property, RandomShapesPassFiniteDifferences) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> small(1, 3), spatial(4, 7);
  const auto start = std::chrono::steady_clock::now();
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t n = small(rng), c = small(rng), oc = small(rng) + 1;
    const std::size_t h = spatial(rng), w = spatial(rng);
    const std::size_t hidden = small(rng) + 2;
    ad::ParamStore<double> store;
    store.add("x", random_tensor<double>({n, c, h, w}, rng()));
    store.add("k", random_tensor<double>({oc, c, 3, 3}, rng()));
    store.add("kb", random_tensor<double>({oc}, rng()));
    const std::size_t ph = (h + 2 - 3) / 1 + 1, pw = (w + 2 - 3) / 1 + 1;
    const std::size_t flat = oc * ((ph - 2) / 1 + 1) * ((pw - 2) / 1 + 1);
    store.add("w", random_tensor<double>({flat, hidden}, rng()));
    store.add("b", random_tensor<double>({hidden}, rng()));
    store.add("w2", random_tensor<double>({hidden, 2}, rng()));
    store.add("b2", random_tensor<double>({2}, rng()));
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(rng() % 2);
    const double err = ad::gradient_check<double>(
        [&](ad::Graph<double>& g) {
          auto y = ad::conv2d(g, g.param(store, "x"), g.param(store, "k"), g.param(store, "kb"), {1, 1});
          y = ad::tanh(g, y);
          y = ad::maxpool2d(g, y, 2, 1);
          y = ad::reshape(g, y, {n, flat});
          y = ad::sigmoid(g, ad::linear(g, y, g.param(store, "w"), g.param(store, "b")));
          y = ad::linear(g, y, g.param(store, "w2"), g.param(store, "b2"));
          return ad::softmax_cross_entropy(g, y, labels);
        },
        store, {1e-5, 32, static_cast<std::uint64_t>(trial)});
    EXPECT_LT(err, 1e-4) << "trial " << trial;
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 60.0);
}

TEST(Property, ForwardIsDeterministic) {
  TensorD x = random_tensor<double>({2, 3, 9, 9}, 130);
  TensorD k = random_tensor<double>({4, 3, 3, 3}, 131);
  TensorD b = random_tensor<double>({4}, 132);
  ad::Graph<double> g1, g2;
  auto y1 = ad::conv2d(g1, g1.constant(x), g1.constant(k), g1.constant(b), {2, 1});
  auto y2 = ad::conv2d(g2, g2.constant(x), g2.constant(k), g2.constant(b), {2, 1});
  EXPECT_EQ(g1.value(y1), g2.value(y2));
}
