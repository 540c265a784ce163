#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "smsr/smsr.hpp"

using namespace smsr;
using oracle::check_gradients;
using oracle::probe;
using V = Var<double>;
using Vs = std::vector<V>;

namespace {

constexpr double kTol = 1e-4;

std::mt19937_64& rng() {
  static std::mt19937_64 r(2024);
  return r;
}

Tensor<double> rnd(Shape s) { return oracle::random_tensor<double>(s, rng()); }
Tensor<double> away(Shape s) { return oracle::random_away_from_zero(s, rng()); }

const std::vector<Shape> kShapes{{1, 1, 1, 1}, {2, 3, 4, 5}, {1, 4, 3, 3}, {3, 2, 1, 6}, {2, 1, 5, 2}};

}  // namespace

TEST(GradCheck, AddSubMulWithBroadcasting) {
  for (const Shape& s : kShapes) {
    std::vector<Shape> others{s, {1, s.c, 1, 1}, {s.n, 1, s.h, s.w}, {1, 1, 1, 1}};
    for (const Shape& o : others) {
      auto r1 = check_gradients([](Tape<double>& t, const Vs& v) { return probe(t, ad::add(v[0], v[1])); },
                                {rnd(s), rnd(o)});
      auto r2 = check_gradients([](Tape<double>& t, const Vs& v) { return probe(t, ad::sub(v[1], v[0])); },
                                {rnd(s), rnd(o)});
      auto r3 = check_gradients([](Tape<double>& t, const Vs& v) { return probe(t, ad::mul(v[0], v[1])); },
                                {rnd(s), rnd(o)});
      EXPECT_LT(r1.worst_rel, kTol);
      EXPECT_LT(r2.worst_rel, kTol);
      EXPECT_LT(r3.worst_rel, kTol) << to_string(s) << " x " << to_string(o);
    }
  }
}

TEST(GradCheck, ElementwiseOps) {
  for (const Shape& s : kShapes) {
    auto relu = check_gradients([](Tape<double>& t, const Vs& v) { return probe(t, ad::relu(v[0])); }, {away(s)});
    auto abs = check_gradients([](Tape<double>& t, const Vs& v) { return probe(t, ad::abs(v[0])); }, {away(s)});
    auto aff = check_gradients([](Tape<double>& t, const Vs& v) { return probe(t, ad::affine(v[0], -2.5, 0.3)); },
                               {rnd(s)});
    auto mean = check_gradients([](Tape<double>&, const Vs& v) { return ad::mean(v[0]); }, {rnd(s)});
    EXPECT_LT(relu.worst_rel, kTol);
    EXPECT_LT(abs.worst_rel, kTol);
    EXPECT_LT(aff.worst_rel, kTol);
    EXPECT_LT(mean.worst_rel, kTol);
  }
}

TEST(GradCheck, Conv2d) {
  struct Case {
    Shape x;
    Shape w;
    int stride, pad;
  };
  for (const Case& c : {Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 1}, Case{{2, 3, 4, 6}, {2, 3, 3, 3}, 2, 1},
                        Case{{2, 4, 3, 3}, {2, 4, 1, 1}, 1, 0}, Case{{1, 1, 6, 5}, {2, 1, 3, 3}, 1, 0},
                        Case{{3, 2, 4, 4}, {1, 2, 2, 2}, 2, 0}}) {
    auto r = check_gradients(
        [&](Tape<double>& t, const Vs& v) { return probe(t, ad::conv2d(v[0], v[1], &v[2], c.stride, c.pad)); },
        {rnd(c.x), rnd(c.w), rnd({1, c.w.n, 1, 1})});
    EXPECT_LT(r.worst_rel, kTol) << to_string(c.x);
    auto nb = check_gradients(
        [&](Tape<double>& t, const Vs& v) {
          return probe(t, ad::conv2d(v[0], v[1], static_cast<const V*>(nullptr), c.stride, c.pad));
        },
        {rnd(c.x), rnd(c.w)});
    EXPECT_LT(nb.worst_rel, kTol);
  }
}

TEST(GradCheck, ShapeOps) {
  for (const Shape& s : kShapes) {
    Shape s2 = s;
    s2.c += 2;
    auto cat = check_gradients(
        [](Tape<double>& t, const Vs& v) { return probe(t, ad::concat<double>({v[0], v[1], v[0]})); },
        {rnd(s), rnd(s2)});
    EXPECT_LT(cat.worst_rel, kTol);
    for (int axis = 0; axis < 4; ++axis) {
      const int len = s.dim(axis);
      auto sl = check_gradients(
          [&](Tape<double>& t, const Vs& v) { return probe(t, ad::slice(v[0], axis, len > 1 ? 1 : 0, len)); },
          {rnd(s)});
      auto sm = check_gradients([&](Tape<double>& t, const Vs& v) { return probe(t, ad::softmax(v[0], axis)); },
                                {rnd(s)});
      EXPECT_LT(sl.worst_rel, kTol);
      EXPECT_LT(sm.worst_rel, kTol) << to_string(s) << " axis " << axis;
    }
    auto rs = check_gradients(
        [&](Tape<double>& t, const Vs& v) { return probe(t, ad::reshape(v[0], Shape{1, 1, 1, static_cast<int>(s.numel())})); },
        {rnd(s)});
    EXPECT_LT(rs.worst_rel, kTol);
  }
}

TEST(GradCheck, PixelShuffleAndUpsample) {
  for (auto [s, r] : {std::pair{Shape{1, 4, 2, 3}, 2}, {Shape{2, 8, 3, 3}, 2}, {Shape{1, 9, 2, 2}, 3},
                      {Shape{2, 16, 1, 2}, 4}, {Shape{1, 3, 2, 2}, 1}}) {
    auto ps = check_gradients([r](Tape<double>& t, const Vs& v) { return probe(t, ad::pixel_shuffle(v[0], r)); },
                              {rnd(s)});
    EXPECT_LT(ps.worst_rel, kTol);
  }
  for (auto [s, oh, ow] : {std::tuple{Shape{1, 2, 3, 4}, 6, 8}, {Shape{2, 1, 3, 3}, 5, 7}, {Shape{1, 3, 2, 2}, 4, 3},
                           {Shape{1, 1, 1, 1}, 1, 1}, {Shape{2, 2, 4, 2}, 7, 4}}) {
    auto up = check_gradients(
        [&](Tape<double>& t, const Vs& v) { return probe(t, ad::upsample_nearest(v[0], 2, oh, ow)); }, {rnd(s)});
    EXPECT_LT(up.worst_rel, kTol);
  }
}

TEST(GradCheck, GumbelSoftmaxAndHourglass) {
  GumbelSampler g(3);
  for (const Shape& s : {Shape{2, 2, 3, 3}, Shape{1, 2, 4, 5}, Shape{3, 2, 1, 1}}) {
    Shape ns = s;
    const Tensor<double> noise = g.sample<double>(ns);
    for (double tau : {1.0, 0.4}) {
      auto r = check_gradients(
          [&](Tape<double>& t, const Vs& v) { return probe(t, ad::gumbel_softmax(v[0], &noise, tau, 1)); }, {rnd(s)});
      EXPECT_LT(r.worst_rel, kTol);
    }
  }
  auto ch = check_gradients(
      [&](Tape<double>& t, const Vs& v) { return probe(t, ad::gumbel_softmax(v[0], static_cast<const Tensor<double>*>(nullptr), 0.7, 0)); },
      {rnd({2, 5, 1, 1})});
  EXPECT_LT(ch.worst_rel, kTol);

  HourglassParams<double> hg;
  hg.down_w = Parameter<double>(rnd({2, 8, 3, 3}));
  hg.down_b = Parameter<double>(rnd({1, 2, 1, 1}));
  hg.mid_w = Parameter<double>(rnd({2, 2, 3, 3}));
  hg.mid_b = Parameter<double>(rnd({1, 2, 1, 1}));
  hg.out_w = Parameter<double>(rnd({2, 2, 3, 3}));
  hg.out_b = Parameter<double>(rnd({1, 2, 1, 1}));
  auto r = check_gradients([&](Tape<double>& t, const Vs& v) { return probe(t, ad::hourglass(v[0], hg)); },
                           {rnd({2, 8, 5, 7})});
  EXPECT_LT(r.worst_rel, kTol);
}

TEST(GradCheck, MaskedConvTrain) {
  for (int trial = 0; trial < 5; ++trial) {
    const int c = 2 + trial % 3;
    const Shape fs{1 + trial % 2, c, 3 + trial, 4};
    std::uniform_real_distribution<double> u(0.05, 0.95);
    auto soft = [&](Shape s) {
      Tensor<double> t(s);
      for (auto& v : t.values()) v = u(rng());
      return t;
    };
    auto r = check_gradients(
        [](Tape<double>&, const Vs& v) {
          auto y = ad::masked_conv_train(v[0], v[1], &v[2], &v[3], v[4], v[5]);
          return ad::mean(ad::mul(y, y));
        },
        {rnd(fs), rnd({c, c, 3, 3}), rnd({1, c, 1, 1}), soft({1, c, 1, 1}), soft({1, c, 1, 1}),
         soft({fs.n, 1, fs.h, fs.w})});
    EXPECT_LT(r.worst_rel, kTol);
    auto first = check_gradients(
        [](Tape<double>& t, const Vs& v) {
          return probe(t, ad::masked_conv_train(v[0], v[1], static_cast<const V*>(nullptr), static_cast<const V*>(nullptr), v[2], v[3]));
        },
        {rnd(fs), rnd({c, c, 3, 3}), soft({1, c, 1, 1}), soft({fs.n, 1, fs.h, fs.w})});
    EXPECT_LT(first.worst_rel, kTol);
  }
}

TEST(GradCheck, SparsityTermAndRegLoss) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> ch(1, 3 + trial, 1, 1), spa(1 + trial % 2, 1, 4, 3);
    for (auto& v : ch.values()) v = u(rng());
    for (auto& v : spa.values()) v = u(rng());
    auto r = check_gradients(
        [](Tape<double>&, const Vs& v) {
          std::vector<V> etas{ad::sparsity_term(v[0], v[1]), ad::sparsity_term(v[1], v[0])};
          return ad::reg_loss<double>(etas);
        },
        {ch, spa});
    EXPECT_LT(r.worst_rel, kTol);
  }
}

TEST(GradCheck, CompositeLossThroughSoftenedMasks) {
  for (double lambda : {0.0, 0.3}) {
    for (double tau : {1.0, 0.4}) {
      auto r = oracle::composite_gradient_check(lambda, tau, rng());
      EXPECT_LT(r.worst_rel, kTol) << "lambda " << lambda << " tau " << tau;
      EXPECT_GT(r.checked, 500u);
    }
  }
}

TEST(Autodiff, MeanGradientIsUniform) {
  Tape<double> t;
  auto x = t.variable(rnd({2, 3, 2, 2}));
  t.backward(ad::mean(x));
  for (double g : t.grad(x.id()).values()) EXPECT_DOUBLE_EQ(g, 1.0 / 24);
}

TEST(Autodiff, ReluSubgradientAtZero) {
  Tape<double> t;
  auto x = t.variable(Tensor<double>(Shape{1, 1, 1, 3}, {-1.0, 0.0, 2.0}));
  t.backward(ad::mean(ad::relu(x)));
  const auto& g = t.grad(x.id());
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0 / 3);
}

TEST(Autodiff, MaskedProductGradientIsMask) {
  Tape<double> t;
  auto x = t.variable(rnd({2, 3, 4, 4}));
  auto m = t.constant(rnd({1, 3, 1, 1}));
  auto y = ad::mul(x, m);
  t.backward(ad::affine(ad::mean(y), static_cast<double>(y.value().size()), 0.0));
  const auto& g = t.grad(x.id());
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i) EXPECT_NEAR(g.plane(n, c)[i], m.value()[c], 1e-12);
}

TEST(Autodiff, ReplayIsDeterministic) {
  Tape<double> t;
  auto x = t.variable(rnd({1, 2, 5, 5}));
  auto w = t.variable(rnd({3, 2, 3, 3}));
  auto loss = probe(t, ad::relu(ad::conv2d(x, w, static_cast<const V*>(nullptr), 1, 1)));
  t.backward(loss);
  const auto g1 = t.grad(w.id());
  t.backward(loss);
  EXPECT_EQ(g1, t.grad(w.id()));
}

TEST(Autodiff, ParameterGradientsAccumulate) {
  Parameter<double> p(rnd({1, 1, 2, 2}));
  for (int i = 0; i < 2; ++i) {
    Tape<double> t;
    t.backward(ad::mean(t.param(p)));
  }
  for (double g : p.grad.values()) EXPECT_DOUBLE_EQ(g, 0.5);
}

TEST(Autodiff, Errors) {
  Tape<double> empty;
  EXPECT_THROW(empty.backward(V{}), TapeError);
  Tape<double> t;
  auto x = t.variable(rnd({1, 1, 2, 2}));
  EXPECT_THROW(t.backward(x), TapeError);  // not a scalar
  Tape<double> other;
  auto y = other.variable(rnd({1, 1, 2, 2}));
  EXPECT_THROW(ad::add(x, y), TapeError);
  EXPECT_THROW(ad::add(x, t.constant(rnd({1, 1, 3, 2}))), ShapeError);
  EXPECT_THROW(ad::mean(ad::slice(x, 2, 1, 3)), ShapeError);
}

TEST(Autodiff, ConstantsNeedNoBackward) {
  Tape<double> t;
  auto a = t.constant(rnd({1, 1, 2, 2}));
  auto loss = ad::mean(ad::mul(a, a));
  EXPECT_FALSE(t.requires_grad(loss.id()));
  EXPECT_NO_THROW(t.backward(loss));
}

TEST(Adam, ZeroGradientLeavesStateUnchanged) {
  Parameter<float> p(Tensor<float>(1, 1, 1, 3, 0.7f));
  std::vector<Parameter<float>*> ps{&p};
  for (int i = 0; i < 5; ++i) adam_step<float>(ps, {});
  for (float v : p.value.values()) EXPECT_EQ(v, 0.7f);
  for (float v : p.adam_m.values()) EXPECT_EQ(v, 0.0f);
  for (float v : p.adam_v.values()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(p.step_count, 5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p(Tensor<double>(1, 1, 1, 1, 1.0));
  p.grad[0] = 1.0;
  std::vector<Parameter<double>*> ps{&p};
  adam_step<double>(ps, {2e-4});
  EXPECT_NEAR(1.0 - p.value[0], 2e-4, 1e-9);
  EXPECT_EQ(p.grad[0], 0.0);
  EXPECT_NEAR(p.adam_m[0], 0.1, 1e-12);
  EXPECT_NEAR(p.adam_v[0], 0.001, 1e-12);
}

TEST(Adam, ConstantGradientConvergesToSignedLearningRate) {
  Parameter<double> p(Tensor<double>(1, 1, 1, 1, 0.0));
  std::vector<Parameter<double>*> ps{&p};
  double prev = 0.0;
  double step = 0.0;
  for (int i = 0; i < 3000; ++i) {
    p.grad[0] = -3.0;
    adam_step<double>(ps, {1e-3});
    step = p.value[0] - prev;
    prev = p.value[0];
  }
  EXPECT_NEAR(step, 1e-3, 1e-8);
}
