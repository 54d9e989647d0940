#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "eks/conv.hpp"
#include "eks/rng.hpp"
#include "eks/tensor.hpp"

using namespace eks;

namespace {

// direct 6-loop convolution oracle, shares nothing with the im2col path
std::vector<double> conv_oracle(const std::vector<double>& in, size_t b, size_t c_in, size_t h,
                                size_t w, const std::vector<double>& weight, size_t c_out, size_t k,
                                size_t stride, size_t pad, size_t oh, size_t ow) {
  std::vector<double> out(b * c_out * oh * ow, 0.0);
  for (size_t s = 0; s < b; ++s)
    for (size_t co = 0; co < c_out; ++co)
      for (size_t oy = 0; oy < oh; ++oy)
        for (size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (size_t ci = 0; ci < c_in; ++ci)
            for (size_t m = 0; m < k; ++m)
              for (size_t n = 0; n < k; ++n) {
                long iy = static_cast<long>(oy * stride + m) - static_cast<long>(pad);
                long ix = static_cast<long>(ox * stride + n) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 || ix >= static_cast<long>(w))
                  continue;
                acc += in[((s * c_in + ci) * h + iy) * w + ix] *
                       weight[((co * c_in + ci) * k + m) * k + n];
              }
          out[((s * c_out + co) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

double fd_check(Tensor& param, const std::function<Tensor()>& forward) {
  param.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(forward());
  }
  std::vector<double> analytic = param.grad();
  param.zero_grad();
  const double h = 1e-5;
  double worst = 0.0;
  for (size_t i = 0; i < param.values().size(); ++i) {
    double keep = param.values()[i];
    param.values()[i] = keep + h;
    double up = forward().item();
    param.values()[i] = keep - h;
    double down = forward().item();
    param.values()[i] = keep;
    double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
  }
  return worst;
}

}  // namespace

TEST_CASE("3x3 ones kernel over a 3x3 image of ones sums to 9") {
  Tensor in = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor out = conv2d(in, w, ConvSpec{1, 1, 3, 1, 0, 1});
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.item() == 9.0);
}

TEST_CASE("1x1 identity kernel reproduces the input") {
  Rng rng(2);
  Tensor in = Tensor::uniform({2, 1, 4, 4}, rng, -1.0, 1.0);
  Tensor w = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor out = conv2d(in, w, ConvSpec{1, 1, 1, 1, 0, 1});
  CHECK(max_abs_diff(out.values(), in.values()) == 0.0);
}

TEST_CASE("random conv2d matches the 6-loop oracle") {
  Rng rng(11);
  Tensor in = Tensor::uniform({2, 3, 5, 5}, rng, -1.0, 1.0);
  Tensor w = Tensor::uniform({4, 3, 3, 3}, rng, -1.0, 1.0);
  for (size_t stride : {1u, 2u})
    for (size_t pad : {0u, 1u}) {
      ConvSpec spec{3, 4, 3, stride, pad, 1};
      Tensor out = conv2d(in, w, spec);
      auto [oh, ow] = spec.out_hw(5, 5);
      std::vector<double> expect =
          conv_oracle(in.values(), 2, 3, 5, 5, w.values(), 4, 3, stride, pad, oh, ow);
      CHECK(max_abs_diff(out.values(), expect) < 1e-12);
    }
}

TEST_CASE("conv2d rejects bad shapes and degenerate outputs") {
  Tensor in = Tensor::zeros({1, 3, 5, 5});
  Tensor w = Tensor::zeros({4, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(in, w, ConvSpec{2, 4, 3, 1, 0, 1}), Error);          // c_in mismatch
  CHECK_THROWS_AS(conv2d(in, w, ConvSpec{3, 4, 7, 1, 0, 1}), Error);          // zero-sized output
  CHECK_THROWS_AS(conv2d(in, w, ConvSpec{3, 4, 3, 1, 0, 3}), Error);          // groups != 1
  CHECK_THROWS_AS(grouped_conv2d(in, w, ConvSpec{3, 4, 3, 1, 0, 2}), Error);  // indivisible
  ConvSpec bad_stride{4, 4, 3, 3, 0, 1};
  CHECK_THROWS_AS(bad_stride.validate(), Error);
}

TEST_CASE("groups=1 grouped_conv2d is identical to conv2d") {
  Rng rng(13);
  Tensor in = Tensor::uniform({2, 3, 6, 6}, rng, -1.0, 1.0);
  Tensor w = Tensor::uniform({5, 3, 3, 3}, rng, -1.0, 1.0);
  ConvSpec spec{3, 5, 3, 1, 1, 1};
  Tensor a = conv2d(in, w, spec);
  Tensor b = grouped_conv2d(in, w, spec);
  CHECK(a.values() == b.values());
}

TEST_CASE("grouped conv equals a loop of independent conv2d calls") {
  Rng rng(17);
  for (int rep = 0; rep < 12; ++rep) {
    size_t groups = 1 + rng.index(4);
    size_t cig = 1 + rng.index(3), cog = 1 + rng.index(3);
    size_t k = rng.index(2) == 0 ? 1 : 3;
    ConvSpec spec{groups * cig, groups * cog, k, 1 + rng.index(2), k / 2, groups};
    size_t h = k + rng.index(4), w = k + rng.index(4);
    Tensor in = Tensor::uniform({2, spec.c_in, h, w}, rng, -1.0, 1.0);
    Tensor wt = Tensor::uniform({spec.c_out, cig, k, k}, rng, -1.0, 1.0);
    Tensor fast = grouped_conv2d(in, wt, spec);
    ConvSpec sub = spec;
    sub.c_in = cig;
    sub.c_out = cog;
    sub.groups = 1;
    std::vector<Tensor> parts;
    for (size_t g = 0; g < groups; ++g)
      parts.push_back(
          conv2d(slice(in, 1, g * cig, (g + 1) * cig), slice(wt, 0, g * cog, (g + 1) * cog), sub));
    CHECK(max_abs_diff(fast.values(), concat(parts, 1).values()) < 1e-10);
  }
}

TEST_CASE("grouped lowering with per-sample weight blocks equals per-sample conv2d") {
  Rng rng(19);
  size_t b = 3, c_in = 2, c_out = 4, k = 3, h = 5, w = 5;
  Tensor in = Tensor::uniform({b, c_in, h, w}, rng, -1.0, 1.0);
  Tensor wt = Tensor::uniform({c_out, c_in, k, k}, rng, -1.0, 1.0);
  std::vector<Tensor> reps(b, wt);
  Tensor stacked_w = concat(reps, 0);  // (B*c_out, c_in, k, k)
  Tensor flat_in = reshape(in, {1, b * c_in, h, w});
  ConvSpec gspec{b * c_in, b * c_out, k, 1, 1, b};
  Tensor grouped = grouped_conv2d(flat_in, stacked_w, gspec);
  Tensor per_sample = conv2d(in, wt, ConvSpec{c_in, c_out, k, 1, 1, 1});
  CHECK(max_abs_diff(grouped.values(), per_sample.values()) < 1e-12);
}

TEST_CASE("conv2d and grouped conv gradients match finite differences") {
  Rng rng(23);
  Tensor in = Tensor::uniform({2, 2, 4, 4}, rng, -1.0, 1.0, true);
  Tensor w = Tensor::uniform({4, 2, 3, 3}, rng, -0.6, 0.6, true);
  Tensor dir = Tensor::uniform({2, 4, 4, 4}, rng, -1.0, 1.0);
  ConvSpec spec{2, 4, 3, 1, 1, 1};
  auto fwd = [&] { return sum(mul(conv2d(in, w, spec), dir)); };
  CHECK(fd_check(in, fwd) < 1e-6);
  CHECK(fd_check(w, fwd) < 1e-6);

  Tensor gin = Tensor::uniform({1, 4, 4, 4}, rng, -1.0, 1.0, true);
  Tensor gw = Tensor::uniform({6, 2, 3, 3}, rng, -0.6, 0.6, true);
  Tensor gdir = Tensor::uniform({1, 6, 2, 2}, rng, -1.0, 1.0);
  ConvSpec gspec{4, 6, 3, 2, 1, 2};
  auto gfwd = [&] { return sum(mul(grouped_conv2d(gin, gw, gspec), gdir)); };
  CHECK(fd_check(gin, gfwd) < 1e-6);
  CHECK(fd_check(gw, gfwd) < 1e-6);
}

TEST_CASE("channel bias adds per output channel and backpropagates") {
  Rng rng(29);
  Tensor t = Tensor::uniform({2, 3, 2, 2}, rng, -1.0, 1.0, true);
  Tensor bias = Tensor::from_data({3}, {0.5, -1.0, 2.0}, true);
  Tensor out = add_channel_bias(t, bias);
  CHECK(out.at({1, 2, 0, 1}) == doctest::Approx(t.at({1, 2, 0, 1}) + 2.0));
  Tensor dir = Tensor::uniform({2, 3, 2, 2}, rng, -1.0, 1.0);
  auto fwd = [&] { return sum(mul(add_channel_bias(t, bias), dir)); };
  CHECK(fd_check(bias, fwd) < 1e-6);
  CHECK(fd_check(t, fwd) < 1e-6);
}

TEST_CASE("translation consistency: shifting input by stride shifts output by one") {
  Rng rng(31);
  ConvSpec spec{2, 3, 3, 2, 0, 1};
  size_t h = 9, w = 11;
  Tensor in = Tensor::uniform({1, 2, h, w}, rng, -1.0, 1.0);
  Tensor wt = Tensor::uniform({3, 2, 3, 3}, rng, -1.0, 1.0);
  Tensor shifted = Tensor::zeros(in.shape());
  for (size_t c = 0; c < 2; ++c)
    for (size_t y = 0; y < h; ++y)
      for (size_t x = spec.stride; x < w; ++x)
        shifted.values()[(c * h + y) * w + x] = in.values()[(c * h + y) * w + x - spec.stride];
  Tensor out = conv2d(in, wt, spec);
  Tensor out2 = conv2d(shifted, wt, spec);
  size_t oh = out.dim(2), ow = out.dim(3);
  double worst = 0.0;
  for (size_t c = 0; c < 3; ++c)
    for (size_t y = 0; y < oh; ++y)
      for (size_t x = 1; x < ow; ++x)
        worst = std::max(worst, std::abs(out2.at({0, c, y, x}) - out.at({0, c, y, x - 1})));
  CHECK(worst < 1e-12);
}

TEST_CASE("conv_flops formula basics") {
  // one 1x1 multiply-add on a 1x1 image counts 2 FLOPs
  CHECK(conv_flops(ConvSpec{1, 1, 1, 1, 0, 1}, 1, 1) == 2);
  ConvSpec base{8, 16, 3, 1, 1, 1};
  ConvSpec doubled = base;
  doubled.c_out = 32;
  CHECK(conv_flops(doubled, 10, 10) == 2 * conv_flops(base, 10, 10));
}

TEST_CASE("formula FLOPs equal the instrumented kernel count for a small CNN") {
  Rng rng(37);
  std::vector<ConvSpec> specs = {{1, 4, 3, 2, 1, 1}, {4, 8, 3, 2, 1, 1}, {8, 12, 1, 1, 0, 1}};
  std::vector<Tensor> weights;
  for (const ConvSpec& s : specs)
    weights.push_back(Tensor::uniform({s.c_out, s.c_in / s.groups, s.k, s.k}, rng, -0.5, 0.5));
  Tensor x = Tensor::uniform({3, 1, 16, 16}, rng, -1.0, 1.0);
  conv_counters().reset();
  Tensor cur = x;
  uint64_t formula = 0;
  size_t h = 16, w = 16;
  for (size_t i = 0; i < specs.size(); ++i) {
    cur = conv2d(cur, weights[i], specs[i]);
    formula += 3 * conv_flops(specs[i], h, w);  // batch of 3 samples
    auto [oh, ow] = specs[i].out_hw(h, w);
    h = oh;
    w = ow;
  }
  CHECK(conv_counters().gemm_flops.load() == formula);
}

TEST_CASE("invocation counters track conv entry points") {
  Rng rng(41);
  Tensor in = Tensor::uniform({1, 2, 4, 4}, rng, -1.0, 1.0);
  Tensor w = Tensor::uniform({2, 1, 3, 3}, rng, -1.0, 1.0);
  conv_counters().reset();
  grouped_conv2d(in, w, ConvSpec{2, 2, 3, 1, 1, 2});
  conv2d(in, reshape(w, {1, 2, 3, 3}), ConvSpec{2, 1, 3, 1, 1, 1});
  CHECK(conv_counters().grouped_conv2d_calls.load() == 1);
  CHECK(conv_counters().conv2d_calls.load() == 1);
}
