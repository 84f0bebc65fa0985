#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtl/autodiff.hpp"
#include "mtl/gradcheck.hpp"
#include "mtl/rng.hpp"
#include "test_support.hpp"

using namespace mtl;

namespace {

Tensor iota_tensor(Shape shape, double start = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = start + static_cast<double>(i);
  return t;
}

// Builds a scalar loss from a list of parameter inputs.
using LossBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

double evaluate(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(g.constant(inputs[i]));
  return g.value(build(g, vars)).item();
}

GradMap analytic(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    vars.push_back(g.parameter(ParamId{static_cast<std::uint32_t>(i)}, inputs[i]));
  }
  return backward(g, build(g, vars));
}

// Compares backward against central differences for every input of `build`.
void expect_gradients_match(const std::string& label, const LossBuilder& build,
                            const std::vector<Tensor>& inputs) {
  const auto grads = analytic(build, inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& probe) {
      auto perturbed = inputs;
      perturbed[i] = probe;
      return evaluate(build, perturbed);
    };
    const Tensor numeric = finite_diff_grad(f, inputs[i], 1e-5);
    const auto it = grads.find(ParamId{static_cast<std::uint32_t>(i)});
    ASSERT_NE(it, grads.end()) << label << ": no gradient for input " << i;
    ASSERT_EQ(it->second.shape(), inputs[i].shape());
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      EXPECT_TRUE(test_support::gradient_close(it->second[j], numeric[j]))
          << label << " input " << i << " entry " << j << ": analytic " << it->second[j] << " numeric "
          << numeric[j];
    }
  }
}

// loss = Σ w ⊙ op(x) with fixed random weights, so every output entry matters.
LossBuilder weighted(std::function<Var(Graph&, const std::vector<Var>&)> op, Shape out_shape,
                     std::uint64_t seed) {
  Tensor weights = test_support::uniform_tensor(out_shape, seed ^ 0x5eedULL);
  return [op, weights](Graph& g, const std::vector<Var>& vars) {
    const Var out = op(g, vars);
    return sum(g, mul(g, out, g.constant(weights)));
  };
}

constexpr int kSeeds = 20;

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Graph g;
  const auto eye = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  const auto m = g.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(g.value(matmul(g, eye, m)), Tensor({2, 2}, {1, 2, 3, 4}));
}

TEST(Matmul, HandArithmetic) {
  Graph g;
  const auto a = g.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const auto b = g.constant(Tensor({2, 1}, {5, 6}));
  EXPECT_EQ(g.value(matmul(g, a, b)), Tensor({2, 1}, {17, 39}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  const auto a = g.constant(Tensor({2, 3}));
  const auto b = g.constant(Tensor({2, 3}));
  try {
    matmul(g, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2x3] and [2x3]"), std::string::npos) << what;
  }
}

TEST(Conv2d, PointwiseScaling) {
  Graph g;
  const auto x = g.constant(Tensor({1, 3, 3}, 1.0));
  const auto k = g.constant(Tensor({1, 1, 1, 1}, 2.0));
  EXPECT_EQ(g.value(conv2d(g, x, k, 1, 0)), Tensor({1, 3, 3}, 2.0));
}

TEST(Conv2d, FullWindowSum) {
  Graph g;
  const auto x = g.constant(iota_tensor({1, 3, 3}));
  const auto k = g.constant(Tensor({1, 1, 3, 3}, 1.0));
  EXPECT_EQ(g.value(conv2d(g, x, k, 1, 0)), Tensor({1, 1, 1}, {45.0}));
}

TEST(Conv2d, StridedPaddedShape) {
  Graph g;
  const auto x = g.constant(Tensor({1, 5, 5}, 1.0));
  const auto k = g.constant(Tensor({1, 1, 3, 3}, 1.0));
  EXPECT_EQ(g.value(conv2d(g, x, k, 2, 1)).shape(), (Shape{1, 3, 3}));
}

TEST(Conv2d, DegenerateOutputIsAnError) {
  Graph g;
  const auto x = g.constant(Tensor({1, 2, 2}, 1.0));
  const auto k = g.constant(Tensor({1, 1, 3, 3}, 1.0));
  EXPECT_THROW(conv2d(g, x, k, 1, 0), ShapeError);
  EXPECT_THROW(conv2d(g, x, k, 0, 1), ValueError);
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const Tensor x = test_support::uniform_tensor({2, 3, 6, 5}, seed);
    const Tensor k = test_support::uniform_tensor({4, 3, 3, 2}, seed + 100);
    const std::size_t stride = 1 + seed % 2, pad = seed % 3;
    Graph g;
    const Tensor out = g.value(conv2d(g, g.constant(x), g.constant(k), stride, pad));
    EXPECT_TRUE(bit_identical(out, test_support::reference_conv(x, k, stride, pad)) ||
                test_support::max_abs_diff(out, test_support::reference_conv(x, k, stride, pad)) < 1e-12);
  }
}

TEST(Activation, Relu) {
  Graph g;
  const auto x = g.constant(Tensor({3}, {-1, 0, 2}));
  EXPECT_EQ(g.value(apply_activation(g, x, Activation::relu)), Tensor({3}, {0, 0, 2}));
}

TEST(Activation, SigmoidSymmetryPoint) {
  Graph g;
  const auto x = g.constant(Tensor({1}, {0.0}));
  EXPECT_EQ(g.value(apply_activation(g, x, Activation::sigmoid))[0], 0.5);
}

TEST(Activation, SoftmaxDoesNotOverflow) {
  Graph g;
  const auto x = g.constant(Tensor({2}, {1000.0, 1000.0}));
  const auto& y = g.value(apply_activation(g, x, Activation::softmax));
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], 0.5);
}

TEST(Activation, ExtremeInputsStayFinite) {
  Graph g;
  const auto x = g.constant(Tensor({4}, {-800.0, 800.0, -1e6, 1e6}));
  EXPECT_TRUE(g.value(sigmoid(g, x)).all_finite());
  EXPECT_TRUE(g.value(apply_activation(g, x, Activation::softmax)).all_finite());
}

TEST(Activation, RejectsNaN) {
  Graph g;
  const auto x = g.constant(Tensor({2}, {0.0, std::nan("")}));
  EXPECT_THROW(relu(g, x), ValueError);
  EXPECT_THROW(apply_activation(g, x, Activation::softmax), ValueError);
}

TEST(Activation, SoftmaxRowsSumToOneAndReluBounds) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Tensor x = test_support::uniform_tensor({5, 7}, seed);
    for (auto& v : x.data()) v *= 30.0;
    Graph g;
    const auto in = g.constant(x);
    const auto& s = g.value(apply_activation(g, in, Activation::softmax));
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) total += s[r * 7 + c];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    const auto& y = g.value(relu(g, in));
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_GE(y[i], 0.0);
      if (x[i] >= 0.0) {
        EXPECT_LE(y[i], x[i]);
      }
    }
  }
}

TEST(CrossEntropy, ConfidentCorrectClassIsNearZero) {
  Graph g;
  const auto logits = g.constant(Tensor({1, 2}, {10.0, -10.0}));
  const std::vector<std::int32_t> labels{0};
  EXPECT_LT(g.value(cross_entropy(g, logits, labels)).item(), 1e-4);
}

TEST(CrossEntropy, UniformLogitsGiveLog2) {
  Graph g;
  const auto logits = g.constant(Tensor({1, 2}, {0.0, 0.0}));
  const std::vector<std::int32_t> labels{1};
  EXPECT_NEAR(g.value(cross_entropy(g, logits, labels)).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, OutOfRangeLabel) {
  Graph g;
  const auto logits = g.constant(Tensor({1, 3}));
  const std::vector<std::int32_t> labels{5};
  EXPECT_THROW(cross_entropy(g, logits, labels), ValueError);
  const std::vector<std::int32_t> negative{-1};
  EXPECT_THROW(cross_entropy(g, logits, negative), ValueError);
}

TEST(CrossEntropy, PerPixelMeanMatchesClassificationForm) {
  // A [K,H,W] map must equal the [B,K] form with B = H·W rows.
  const Tensor maps = test_support::uniform_tensor({3, 2, 2}, 7);
  Tensor rows({4, 3});
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t p = 0; p < 4; ++p) rows[p * 3 + k] = maps[k * 4 + p];
  }
  const std::vector<std::int32_t> labels{0, 2, 1, 2};
  Graph g;
  const double a = g.value(cross_entropy(g, g.constant(maps), labels)).item();
  const double b = g.value(cross_entropy(g, g.constant(rows), labels)).item();
  EXPECT_NEAR(a, b, 1e-15);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  const auto p = g.parameter(ParamId{3}, Tensor({2, 2}, {1, -2, 3, 4}));
  const auto grads = backward(g, sum(g, p));
  EXPECT_EQ(grads.at(ParamId{3}), Tensor({2, 2}, 1.0));
}

TEST(Backward, SumOfSquares) {
  Graph g;
  const auto p = g.parameter(ParamId{0}, Tensor({3}, {1, 2, 3}));
  const auto grads = backward(g, sum(g, mul(g, p, p)));
  EXPECT_EQ(grads.at(ParamId{0}), Tensor({3}, {2, 4, 6}));
}

TEST(Backward, DeadBranchHasNoEntry) {
  Graph g;
  const auto used = g.parameter(ParamId{0}, Tensor({2}, 1.0));
  const auto unused = g.parameter(ParamId{1}, Tensor({2}, 1.0));
  const auto side = sum(g, unused);
  (void)side;
  const auto grads = backward(g, sum(g, used));
  EXPECT_EQ(grads.count(ParamId{0}), 1u);
  EXPECT_EQ(grads.count(ParamId{1}), 0u);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph g;
  const auto p = g.parameter(ParamId{0}, Tensor({2}, 1.0));
  EXPECT_THROW(backward(g, p), ShapeError);
}

TEST(Backward, SharedParameterAccumulates) {
  Graph g;
  const auto a = g.parameter(ParamId{0}, Tensor({2}, {1, 2}));
  const auto b = g.parameter(ParamId{0}, Tensor({2}, {1, 2}));
  const auto grads = backward(g, add(g, sum(g, a), sum(g, scale(g, b, 3.0))));
  EXPECT_EQ(grads.at(ParamId{0}), Tensor({2}, 4.0));
}

TEST(FiniteDiff, SumOfSquares) {
  auto f = [](const Tensor& p) { return p[0] * p[0]; };
  const Tensor grad = finite_diff_grad(f, Tensor({1}, {3.0}), 1e-5);
  EXPECT_NEAR(grad[0], 6.0, 1e-6);
}

TEST(FiniteDiff, ConstantAndLinear) {
  const Tensor p = test_support::uniform_tensor({6}, 1);
  const Tensor zero = finite_diff_grad([](const Tensor&) { return 4.0; }, p, 1e-5);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  auto total = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return s;
  };
  const Tensor ones = finite_diff_grad(total, p, 1e-5);
  for (double v : ones.data()) EXPECT_NEAR(v, 1.0, 1e-8);
  EXPECT_THROW(finite_diff_grad(total, p, 0.0), ValueError);
}

// ---------------------------------------------------------------------------
// Gradient checks, one per op kind, 20 seeds each.

TEST(GradientCheck, Elementwise) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const Shape shape{3, 4};
    const auto a = test_support::uniform_tensor(shape, seed);
    const auto b = test_support::uniform_tensor(shape, seed + 1000);
    expect_gradients_match("add", weighted([](Graph& g, auto& v) { return add(g, v[0], v[1]); }, shape, seed),
                           {a, b});
    expect_gradients_match("mul", weighted([](Graph& g, auto& v) { return mul(g, v[0], v[1]); }, shape, seed),
                           {a, b});
    expect_gradients_match("scale",
                           weighted([](Graph& g, auto& v) { return scale(g, v[0], -1.7); }, shape, seed), {a});
    expect_gradients_match("sum", [](Graph& g, auto& v) { return sum(g, v[0]); }, {a});
    expect_gradients_match("mean", [](Graph& g, auto& v) { return mean(g, v[0]); }, {a});
    expect_gradients_match(
        "reshape", weighted([](Graph& g, auto& v) { return reshape(g, v[0], Shape{2, 6}); }, {2, 6}, seed), {a});
  }
}

TEST(GradientCheck, Matmul) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto a = test_support::uniform_tensor({3, 4}, seed);
    const auto b = test_support::uniform_tensor({4, 2}, seed + 1000);
    expect_gradients_match("matmul",
                           weighted([](Graph& g, auto& v) { return matmul(g, v[0], v[1]); }, {3, 2}, seed), {a, b});
  }
}

TEST(GradientCheck, AddBias) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto x2 = test_support::uniform_tensor({3, 4}, seed);
    const auto b4 = test_support::uniform_tensor({4}, seed + 1);
    expect_gradients_match("add_bias 2d",
                           weighted([](Graph& g, auto& v) { return add_bias(g, v[0], v[1]); }, {3, 4}, seed),
                           {x2, b4});
    const auto x4 = test_support::uniform_tensor({2, 3, 2, 2}, seed + 2);
    const auto b3 = test_support::uniform_tensor({3}, seed + 3);
    expect_gradients_match(
        "add_bias 4d", weighted([](Graph& g, auto& v) { return add_bias(g, v[0], v[1]); }, {2, 3, 2, 2}, seed),
        {x4, b3});
  }
}

TEST(GradientCheck, Conv2d) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const std::size_t stride = 1 + seed % 2, pad = seed % 3;
    const auto x = test_support::uniform_tensor({2, 2, 5, 4}, seed);
    const auto k = test_support::uniform_tensor({3, 2, 3, 2}, seed + 1000);
    const std::size_t oh = (5 + 2 * pad - 3) / stride + 1, ow = (4 + 2 * pad - 2) / stride + 1;
    expect_gradients_match("conv2d batched",
                           weighted([=](Graph& g, auto& v) { return conv2d(g, v[0], v[1], stride, pad); },
                                    {2, 3, oh, ow}, seed),
                           {x, k});
    const auto x3 = test_support::uniform_tensor({2, 4, 4}, seed + 2);
    const auto k3 = test_support::uniform_tensor({2, 2, 3, 3}, seed + 3);
    expect_gradients_match(
        "conv2d single",
        weighted([](Graph& g, auto& v) { return conv2d(g, v[0], v[1], 1, 1); }, {2, 4, 4}, seed), {x3, k3});
  }
}

TEST(GradientCheck, SpatialOps) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto x = test_support::uniform_tensor({2, 3, 3, 2}, seed);
    expect_gradients_match("global_avg_pool",
                           weighted([](Graph& g, auto& v) { return global_avg_pool(g, v[0]); }, {2, 3}, seed), {x});
    expect_gradients_match(
        "upsample_nearest",
        weighted([](Graph& g, auto& v) { return upsample_nearest(g, v[0], 2); }, {2, 3, 6, 4}, seed), {x});
  }
}

TEST(GradientCheck, Activations) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const Shape shape{3, 5};
    const auto x = test_support::uniform_tensor(shape, seed);
    for (auto kind : {Activation::relu, Activation::sigmoid, Activation::softmax}) {
      expect_gradients_match(activation_name(kind),
                             weighted([kind](Graph& g, auto& v) { return apply_activation(g, v[0], kind); }, shape,
                                      seed),
                             {x});
    }
    const auto maps = test_support::uniform_tensor({2, 3, 2, 2}, seed + 5);
    expect_gradients_match("softmax channel axis",
                           weighted([](Graph& g, auto& v) { return softmax(g, v[0], 1); }, {2, 3, 2, 2}, seed),
                           {maps});
  }
}

TEST(GradientCheck, Losses) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const auto logits = test_support::uniform_tensor({4, 3}, seed);
    std::vector<std::int32_t> labels(4);
    for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(3));
    expect_gradients_match("cross_entropy rows",
                           [labels](Graph& g, auto& v) { return cross_entropy(g, v[0], labels); }, {logits});

    const auto maps = test_support::uniform_tensor({2, 3, 2, 3}, seed + 1);
    std::vector<std::int32_t> pixels(2 * 2 * 3);
    for (auto& l : pixels) l = static_cast<std::int32_t>(rng.below(3));
    expect_gradients_match("cross_entropy pixels",
                           [pixels](Graph& g, auto& v) { return cross_entropy(g, v[0], pixels); }, {maps});

    const auto single = test_support::uniform_tensor({3, 2, 2}, seed + 2);
    std::vector<std::int32_t> single_labels(4);
    for (auto& l : single_labels) l = static_cast<std::int32_t>(rng.below(3));
    expect_gradients_match("cross_entropy single map",
                           [single_labels](Graph& g, auto& v) { return cross_entropy(g, v[0], single_labels); },
                           {single});

    Tensor targets({2, 1, 3, 3});
    for (auto& t : targets.data()) t = rng.uniform() < 0.5 ? 0.0 : 1.0;
    const auto bce_logits = test_support::uniform_tensor({2, 1, 3, 3}, seed + 3);
    expect_gradients_match("bce",
                           [targets](Graph& g, auto& v) { return binary_cross_entropy_with_logits(g, v[0], targets); },
                           {bce_logits});
  }
}

TEST(GradientCheck, ComposedNetwork) {
  // conv -> bias -> relu -> pool -> dense -> bias -> cross-entropy.
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto x = test_support::uniform_tensor({2, 2, 5, 5}, seed);
    const auto k = test_support::uniform_tensor({3, 2, 3, 3}, seed + 1);
    const auto kb = test_support::uniform_tensor({3}, seed + 2);
    const auto w = test_support::uniform_tensor({3, 4}, seed + 3);
    const auto wb = test_support::uniform_tensor({4}, seed + 4);
    const std::vector<std::int32_t> labels{1, 3};
    expect_gradients_match(
        "network",
        [labels](Graph& g, auto& v) {
          auto h = relu(g, add_bias(g, conv2d(g, v[0], v[1], 1, 1), v[2]));
          auto logits = add_bias(g, matmul(g, global_avg_pool(g, h), v[3]), v[4]);
          return cross_entropy(g, logits, labels);
        },
        {x, k, kb, w, wb});
  }
}

TEST(BackwardProperties, DeterministicAndLinear) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto x = test_support::uniform_tensor({2, 2, 4, 4}, seed);
    const auto k = test_support::uniform_tensor({3, 2, 3, 3}, seed + 1);
    const std::vector<std::int32_t> labels{0, 2};
    auto run = [&](double factor) {
      Graph g;
      const auto input = g.parameter(ParamId{0}, x);
      const auto kernels = g.parameter(ParamId{1}, k);
      auto pooled = global_avg_pool(g, relu(g, conv2d(g, input, kernels, 1, 1)));
      auto loss = cross_entropy(g, pooled, labels);
      return backward(g, scale(g, loss, factor));
    };
    const auto first = run(1.0);
    const auto second = run(1.0);
    for (const auto& [id, grad] : first) EXPECT_TRUE(bit_identical(grad, second.at(id)));
    for (double factor : {0.25, 2.0, 8.0}) {
      const auto scaled = run(factor);
      for (const auto& [id, grad] : first) {
        const auto& s = scaled.at(id);
        for (std::size_t i = 0; i < grad.size(); ++i) EXPECT_EQ(s[i], factor * grad[i]);
      }
    }
  }
}
