#include <gtest/gtest.h>

#include "dacal/nn.hpp"

using namespace dacal;

namespace {

// Central-difference gradient check of a scalar-valued function of one leaf.
double max_rel_gradcheck(const std::function<Var(const Var&)>& f, Tensor x0,
                         double h = 1e-6) {
  Var x = leaf(x0);
  Var y = f(x);
  std::vector<Var> g = grad(y, {x});
  double worst = 0.0;
  for (int64_t i = 0; i < x0.numel(); ++i) {
    Tensor xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    double fp = f(constant(xp))->value[0];
    double fm = f(constant(xm))->value[0];
    double fd = (fp - fm) / (2 * h);
    double an = g[0]->value[i];
    double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

TEST(Autograd, AddMulChainValues) {
  Var a = leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  Var b = leaf(Tensor({2, 2}, {5, 6, 7, 8}));
  Var y = sum_all(mul(add(a, b), b));
  EXPECT_DOUBLE_EQ(y->value[0], 6 * 5 + 8 * 6 + 10 * 7 + 12 * 8);
  auto g = grad(y, {a, b});
  // d/da (a+b)*b = b
  EXPECT_DOUBLE_EQ(g[0]->value[0], 5);
  EXPECT_DOUBLE_EQ(g[0]->value[3], 8);
  // d/db = a + 2b
  EXPECT_DOUBLE_EQ(g[1]->value[0], 1 + 10);
}

TEST(Autograd, GradChecksElementwise) {
  std::mt19937_64 rng(7);
  Tensor x = rand_uniform({3, 4}, rng, 0.2, 0.9);
  EXPECT_LT(max_rel_gradcheck([](const Var& v) { return sum_all(exp_v(v)); }, x), 1e-6);
  EXPECT_LT(max_rel_gradcheck([](const Var& v) { return sum_all(sqrt_v(v)); }, x), 1e-6);
  EXPECT_LT(max_rel_gradcheck([](const Var& v) { return sum_all(selu(v)); }, x), 1e-6);
  EXPECT_LT(max_rel_gradcheck(
                [](const Var& v) { return sum_all(divide(constant(Tensor({3, 4}, 2.0)), v)); }, x),
            1e-6);
  Tensor xn = randn({3, 4}, rng);  // exercise the negative SELU branch
  EXPECT_LT(max_rel_gradcheck([](const Var& v) { return sum_all(selu(v)); }, xn), 1e-6);
}

TEST(Autograd, MatmulGradcheck) {
  std::mt19937_64 rng(11);
  Tensor a = randn({3, 5}, rng);
  Tensor b = randn({5, 2}, rng);
  EXPECT_LT(max_rel_gradcheck(
                [&](const Var& v) { return sum_all(mul(matmul(v, constant(b)), matmul(v, constant(b)))); },
                a),
            1e-5);
}

TEST(Autograd, GatherScatterRoundTrip) {
  auto table = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{3, 0, -1, 1});
  Var x = leaf(Tensor({4}, {10, 20, 30, 40}));
  Var y = gather(x, table, {4});
  EXPECT_DOUBLE_EQ(y->value[0], 40);
  EXPECT_DOUBLE_EQ(y->value[2], 0);
  auto g = grad(sum_all(mul(y, y)), {x});
  // d/dx of sum(gather(x)^2) routes 2*y back through the table.
  EXPECT_DOUBLE_EQ(g[0]->value[3], 2 * 40);
  EXPECT_DOUBLE_EQ(g[0]->value[2], 0);  // index 2 never read
}

TEST(Autograd, ConcatSliceGradcheck) {
  std::mt19937_64 rng(3);
  Tensor x = randn({2, 3}, rng);
  auto f = [](const Var& v) {
    Var c = concat_last({v, mul(v, v)});
    return sum_all(mul(c, c));
  };
  EXPECT_LT(max_rel_gradcheck(f, x), 1e-5);
}

TEST(Autograd, SecondOrderGradientOfGradientNorm) {
  // f(x) = x^T A x; grad = (A + A^T) x; d/dx ||grad||^2 = 2 (A+A^T)^2 x.
  Tensor at({2, 2}, {1.0, 2.0, 0.5, 3.0});
  Var A = constant(at);
  Var x = leaf(Tensor({2, 1}, {0.7, -0.4}));
  Var y = matmul(transpose2(x), matmul(A, x));
  std::vector<Var> g = grad(y, {x});
  Var norm2 = sum_all(mul(g[0], g[0]));
  std::vector<Var> gg = grad(norm2, {x});
  Eigen::Matrix2d Am;
  Am << 1.0, 2.0, 0.5, 3.0;
  Eigen::Matrix2d S = Am + Am.transpose();
  Eigen::Vector2d xv(0.7, -0.4);
  Eigen::Vector2d expect = 2.0 * S * (S * xv);
  EXPECT_NEAR(gg[0]->value[0], expect(0), 1e-10);
  EXPECT_NEAR(gg[0]->value[1], expect(1), 1e-10);
}

TEST(Autograd, SecondOrderThroughConvAndSelu) {
  // Finite-difference check of d/dx [ || d(sum selu(conv(x)))/dx ||^2 ].
  std::mt19937_64 rng(19);
  ParamStore ps;
  Conv2d conv(ps, "c", 1, 2, 3, 1, rng);
  Tensor x0 = randn({1, 4, 4, 1}, rng, 0.5);
  auto gradnorm2 = [&](const Tensor& xt, bool tape) -> std::pair<double, Tensor> {
    Var x = leaf(xt);
    Var y = sum_all(selu(conv.forward(x)));
    std::vector<Var> g = grad(y, {x});
    Var n2 = sum_all(mul(g[0], g[0]));
    if (!tape) return {n2->value[0], Tensor()};
    std::vector<Var> gg = grad(n2, {x});
    return {n2->value[0], gg[0]->value};
  };
  auto [base, analytic] = gradnorm2(x0, true);
  double h = 1e-6;
  for (int64_t i = 0; i < x0.numel(); i += 3) {
    Tensor xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    double fd = (gradnorm2(xp, false).first - gradnorm2(xm, false).first) / (2 * h);
    EXPECT_NEAR(analytic[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Autograd, BatchNormTrainGradcheck) {
  std::mt19937_64 rng(23);
  ParamStore ps;
  BatchNorm2d bn(ps, "bn", 3);
  Tensor x = randn({2, 2, 2, 3}, rng);
  auto f = [&](const Var& v) { return sum_all(mul(bn.forward(v, true), bn.forward(v, true))); };
  EXPECT_LT(max_rel_gradcheck(f, x, 1e-5), 1e-4);
}

TEST(Autograd, ConvStride2ZeroAndReplicatePad) {
  std::mt19937_64 rng(29);
  ParamStore ps;
  Conv2d cz(ps, "z", 2, 3, 3, 2, rng, PadMode::kZero);
  Conv2d cr(ps, "r", 2, 3, 3, 2, rng, PadMode::kReplicate);
  Tensor x = randn({2, 6, 6, 2}, rng);
  EXPECT_EQ(cz.forward(constant(x))->value.shape(), (Shape{2, 3, 3, 3}));
  EXPECT_EQ(cr.forward(constant(x))->value.shape(), (Shape{2, 3, 3, 3}));
  EXPECT_LT(max_rel_gradcheck([&](const Var& v) { return sum_all(mul(cr.forward(v), cr.forward(v))); }, x),
            1e-5);
}

TEST(Autograd, PoolBroadcastUpsampleShapes) {
  std::mt19937_64 rng(31);
  Tensor x = randn({2, 4, 6, 3}, rng);
  Var p = global_avg_pool(constant(x));
  EXPECT_EQ(p->value.shape(), (Shape{2, 1, 1, 3}));
  // pooled value = spatial mean per channel
  double expect = 0.0;
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t xx = 0; xx < 6; ++xx) expect += x.at4(1, y, xx, 2);
  EXPECT_NEAR(p->value.at4(1, 0, 0, 2), expect / 24.0, 1e-12);
  Var b = broadcast_hw(p, 4, 6);
  EXPECT_EQ(b->value.shape(), x.shape());
  EXPECT_DOUBLE_EQ(b->value.at4(1, 3, 5, 2), p->value.at4(1, 0, 0, 2));
  Var u = upsample2_nearest(constant(x));
  EXPECT_EQ(u->value.shape(), (Shape{2, 8, 12, 3}));
  EXPECT_DOUBLE_EQ(u->value.at4(0, 7, 11, 1), x.at4(0, 3, 5, 1));
}

TEST(Autograd, AdamDescendsQuadratic) {
  Var p = leaf(Tensor({3}, {5.0, -4.0, 2.0}));
  Adam opt(0.1);
  for (int i = 0; i < 500; ++i) {
    zero_grad({p});
    Var loss = sum_all(mul(p, p));
    backward(loss, {p});
    opt.step({p});
  }
  for (int64_t i = 0; i < 3; ++i) EXPECT_NEAR(p->value[i], 0.0, 1e-3);
}

}  // namespace
