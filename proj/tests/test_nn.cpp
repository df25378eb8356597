// Finite-difference checks of every backward kernel, run in double precision.

#include <functional>

#include <gtest/gtest.h>

#include "tumorseg/nn/layers.hpp"
#include "tumorseg/nn/optim.hpp"
#include "tumorseg/random.hpp"

using namespace tumorseg;
using nn::Tensor;
using T3 = Tensor<double>;

namespace {

constexpr double kEps = 1e-6;
constexpr double kTol = 1e-6;

T3 random_tensor(std::vector<int> shape, Rng& rng) {
  T3 t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

/// Fixed random projection so a tensor-valued output becomes a scalar loss.
double project(const T3& out, const T3& weights) {
  double s = 0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * weights[i];
  return s;
}

/// Compares analytic gradient `grad` of `loss` with respect to `x` against
/// central differences on every entry.
void check_gradient(T3& x, const T3& grad, const std::function<double()>& loss, const char* what) {
  ASSERT_EQ(x.numel(), grad.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + kEps;
    const double up = loss();
    x[i] = keep - kEps;
    const double down = loss();
    x[i] = keep;
    const double numeric = (up - down) / (2 * kEps);
    ASSERT_NEAR(grad[i], numeric, kTol * std::max(1.0, std::abs(numeric))) << what << " entry " << i;
  }
}

}  // namespace

TEST(Gradients, Conv2d) {
  Rng rng(1);
  for (int pad : {0, 1}) {
    auto in = random_tensor({2, 5, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    const auto probe = random_tensor(nn::conv2d(in, w, b, pad).shape, rng);
    auto loss = [&] { return project(nn::conv2d(in, w, b, pad), probe); };
    T3 gi = in.zeros_like(), gw = w.zeros_like(), gb = b.zeros_like();
    nn::conv2d_backward(in, w, probe, pad, &gi, gw, gb);
    check_gradient(in, gi, loss, "conv input");
    check_gradient(w, gw, loss, "conv weight");
    check_gradient(b, gb, loss, "conv bias");
  }
}

TEST(Gradients, ReluAndMaxPool) {
  Rng rng(2);
  auto in = random_tensor({2, 6, 6}, rng);
  std::vector<std::size_t> argmax;
  const auto probe = random_tensor({2, 3, 3}, rng);
  auto loss = [&] {
    T3 r = in;
    nn::relu_inplace(r);
    std::vector<std::size_t> am;
    return project(nn::maxpool2(r, am), probe);
  };
  T3 r = in;
  nn::relu_inplace(r);
  nn::maxpool2(r, argmax);
  T3 g = in.zeros_like();
  nn::maxpool2_backward(argmax, probe, g);
  nn::relu_backward(r, g);
  check_gradient(in, g, loss, "relu+maxpool");
}

TEST(Gradients, Linear) {
  Rng rng(3);
  auto x = random_tensor({7}, rng), w = random_tensor({4, 7}, rng), b = random_tensor({4}, rng);
  const auto probe = random_tensor({4}, rng);
  auto loss = [&] {
    const auto y = nn::linear(std::span<const double>(x.data), w, b);
    double s = 0;
    for (int i = 0; i < 4; ++i) s += y[i] * probe[i];
    return s;
  };
  T3 gx = x.zeros_like(), gw = w.zeros_like(), gb = b.zeros_like();
  nn::linear_backward(std::span<const double>(x.data), w, std::span<const double>(probe.data),
                      std::span<double>(gx.data), gw, gb);
  check_gradient(x, gx, loss, "linear input");
  check_gradient(w, gw, loss, "linear weight");
  check_gradient(b, gb, loss, "linear bias");
}

TEST(Gradients, RoiAlign) {
  Rng rng(4);
  auto feat = random_tensor({2, 8, 9}, rng);
  // Boxes inside, straddling the border, and partly outside the map.
  for (const nn::RoiBox box : {nn::RoiBox{1.3, 0.7, 6.2, 5.9}, nn::RoiBox{-0.8, 5.5, 3.1, 9.6},
                               nn::RoiBox{6.0, 6.0, 10.5, 11.0}}) {
    const auto plan = nn::roi_align_plan(box, 8, 9, 3);
    const auto probe = random_tensor({2, 3, 3}, rng);
    auto loss = [&] { return project(nn::roi_align(feat, plan), probe); };
    T3 g = feat.zeros_like();
    nn::roi_align_backward(plan, probe, g);
    check_gradient(feat, g, loss, "roi_align");
  }
}

TEST(RoiAlign, ConstantMapGivesConstantBins) {
  T3 feat({1, 6, 6}, 2.5);
  const auto out = nn::roi_align(feat, nn::roi_align_plan({0.5, 0.5, 5.0, 4.0}, 6, 6, 4));
  for (double v : out.data) EXPECT_NEAR(v, 2.5, 1e-12);
}

TEST(Gradients, Losses) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    T3 z({1});
    z[0] = rng.uniform(-6, 6);
    const double target = rng.uniform();
    double g = 0;
    nn::bce_with_logits(z[0], target, g);
    T3 gz({1});
    gz[0] = g;
    check_gradient(z, gz, [&] { double d; return nn::bce_with_logits(z[0], target, d); }, "bce");

    T3 diff({1});
    diff[0] = rng.uniform(-3, 3);
    nn::smooth_l1(diff[0], g);
    gz[0] = g;
    check_gradient(diff, gz, [&] { double d; return nn::smooth_l1(diff[0], d); }, "smooth_l1");
  }
  auto logits = random_tensor({5}, rng);
  T3 g({5});
  nn::softmax_cross_entropy(std::span<const double>(logits.data), 2, std::span<double>(g.data));
  check_gradient(logits, g, [&] {
    std::vector<double> d(5);
    return nn::softmax_cross_entropy(std::span<const double>(logits.data), 2, std::span<double>(d));
  }, "softmax ce");
}

TEST(Losses, KnownValues) {
  double g;
  EXPECT_NEAR(nn::bce_with_logits(0.0, 1.0, g), std::log(2.0), 1e-12);
  EXPECT_NEAR(g, -0.5, 1e-12);
  EXPECT_NEAR(nn::bce_with_logits(800.0, 1.0, g), 0.0, 1e-12);  // no overflow
  EXPECT_DOUBLE_EQ(nn::smooth_l1(0.5, g), 0.125);
  EXPECT_DOUBLE_EQ(nn::smooth_l1(-3.0, g), 2.5);
  EXPECT_EQ(g, -1.0);
  const std::vector<double> logits{0.0, 0.0, 0.0, 0.0};
  std::vector<double> d(4);
  EXPECT_NEAR(nn::softmax_cross_entropy(std::span<const double>(logits), 1, std::span<double>(d)), std::log(4.0),
              1e-12);
}

TEST(Gradients, ComposedPipeline) {
  // conv -> relu -> pool -> roi_align -> linear -> softmax cross-entropy, the
  // path a box-head loss takes through the network.
  Rng rng(6);
  auto img = random_tensor({1, 8, 8}, rng), w = random_tensor({2, 1, 3, 3}, rng), b = random_tensor({2}, rng);
  auto fw = random_tensor({3, 2 * 2 * 2}, rng), fb = random_tensor({3}, rng);
  const nn::RoiBox box{0.4, 0.9, 3.6, 3.2};
  const auto plan = nn::roi_align_plan(box, 4, 4, 2);

  struct Fwd {
    T3 conv;
    std::vector<std::size_t> am;
    T3 pooled, roi;
    std::vector<double> logits;
  };
  auto forward = [&] {
    Fwd f;
    f.conv = nn::conv2d(img, w, b, 1);
    nn::relu_inplace(f.conv);
    f.pooled = nn::maxpool2(f.conv, f.am);
    f.roi = nn::roi_align(f.pooled, plan);
    f.logits = nn::linear(std::span<const double>(f.roi.data), fw, fb);
    return f;
  };
  auto loss = [&] {
    auto f = forward();
    std::vector<double> d(3);
    return nn::softmax_cross_entropy(std::span<const double>(f.logits), 1, std::span<double>(d));
  };

  auto f = forward();
  std::vector<double> gl(3);
  nn::softmax_cross_entropy(std::span<const double>(f.logits), 1, std::span<double>(gl));
  T3 groi = f.roi.zeros_like(), gfw = fw.zeros_like(), gfb = fb.zeros_like();
  nn::linear_backward(std::span<const double>(f.roi.data), fw, std::span<const double>(gl), std::span<double>(groi.data),
                      gfw, gfb);
  T3 gpool = f.pooled.zeros_like();
  nn::roi_align_backward(plan, groi, gpool);
  T3 gconv = f.conv.zeros_like();
  nn::maxpool2_backward(f.am, gpool, gconv);
  nn::relu_backward(f.conv, gconv);
  T3 gimg = img.zeros_like(), gw = w.zeros_like(), gb = b.zeros_like();
  nn::conv2d_backward(img, w, gconv, 1, &gimg, gw, gb);

  check_gradient(fw, gfw, loss, "fc weight");
  check_gradient(w, gw, loss, "conv weight");
  check_gradient(b, gb, loss, "conv bias");
  check_gradient(img, gimg, loss, "image");
}

TEST(Adam, MinimisesQuadraticAndClipsLargeGradients) {
  nn::ParamSet<double> p;
  p.emplace("x", T3({2}, 5.0));
  nn::Adam<double> opt;
  for (int i = 0; i < 2000; ++i) {
    auto g = nn::zeros_like(p);
    for (std::size_t k = 0; k < 2; ++k) g.at("x")[k] = 2 * (p.at("x")[k] - 1.0);
    opt.step(p, g, 0.05);
  }
  EXPECT_NEAR(p.at("x")[0], 1.0, 1e-3);
  EXPECT_EQ(opt.steps(), 2000);

  // The first Adam step moves each coordinate by about lr regardless of scale.
  nn::ParamSet<double> q;
  q.emplace("y", T3({1}, 0.0));
  nn::Adam<double> opt2;
  auto g = nn::zeros_like(q);
  g.at("y")[0] = 1e6;
  opt2.step(q, g, 0.01);
  EXPECT_NEAR(q.at("y")[0], -0.01, 1e-6);
}
