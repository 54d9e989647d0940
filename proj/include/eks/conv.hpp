#pragma once

// Reference and grouped 2-D convolution, forward and backward, lowered to
// im2col + matmul with a col2im backward. Zero padding, square kernels,
// stride 1 or 2. Also exact FLOP accounting and the instrumentation counters
// the single-pass and cost checks rely on.

#include <atomic>
#include <cstdint>
#include <utility>

#include "eks/tensor.hpp"

namespace eks {

struct ConvSpec {
  size_t c_in = 1;
  size_t c_out = 1;
  size_t k = 3;
  size_t stride = 1;
  size_t padding = 0;
  size_t groups = 1;

  void validate() const {
    if (c_in == 0 || c_out == 0 || k == 0) fail("ConvSpec: channel and kernel sizes must be positive");
    if (stride != 1 && stride != 2) fail("ConvSpec: stride must be 1 or 2, got " + std::to_string(stride));
    if (groups == 0) fail("ConvSpec: groups must be positive");
    if (c_in % groups != 0 || c_out % groups != 0)
      fail("ConvSpec: channels not divisible by groups (c_in=" + std::to_string(c_in) +
           ", c_out=" + std::to_string(c_out) + ", groups=" + std::to_string(groups) + ")");
  }

  // floor((H + 2*padding - k)/stride) + 1, rejected when < 1
  std::pair<size_t, size_t> out_hw(size_t h, size_t w) const {
    if (h + 2 * padding < k || w + 2 * padding < k)
      fail("conv: zero-sized output for input " + std::to_string(h) + "x" + std::to_string(w) +
           " with k=" + std::to_string(k) + " pad=" + std::to_string(padding));
    return {(h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1};
  }
};

// Multiply-add-counted FLOPs per sample: 2 * (C_in/groups) * k^2 * C_out * H' * W'.
inline uint64_t conv_flops(const ConvSpec& spec, size_t h, size_t w) {
  spec.validate();
  auto [oh, ow] = spec.out_hw(h, w);
  return 2ull * (spec.c_in / spec.groups) * spec.k * spec.k * spec.c_out * oh * ow;
}

struct ConvCounters {
  std::atomic<uint64_t> conv2d_calls{0};
  std::atomic<uint64_t> grouped_conv2d_calls{0};
  std::atomic<uint64_t> gemm_flops{0};

  void reset() {
    conv2d_calls = 0;
    grouped_conv2d_calls = 0;
    gemm_flops = 0;
  }
};

inline ConvCounters& conv_counters() {
  static ConvCounters c;
  return c;
}

namespace detail {

// src is one sample's channel block (C x H x W); cols is (C*k*k) x (OH*OW).
inline void im2col(const double* src, size_t c, size_t h, size_t w, const ConvSpec& spec,
                   size_t oh, size_t ow, double* cols) {
  size_t k = spec.k, stride = spec.stride;
  long pad = static_cast<long>(spec.padding);
  size_t patch = oh * ow;
  for (size_t ci = 0; ci < c; ++ci) {
    const double* plane = src + ci * h * w;
    for (size_t m = 0; m < k; ++m)
      for (size_t n = 0; n < k; ++n) {
        double* row = cols + ((ci * k + m) * k + n) * patch;
        for (size_t oy = 0; oy < oh; ++oy) {
          long iy = static_cast<long>(oy * stride + m) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            for (size_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = 0.0;
            continue;
          }
          for (size_t ox = 0; ox < ow; ++ox) {
            long ix = static_cast<long>(ox * stride + n) - pad;
            row[oy * ow + ox] =
                (ix < 0 || ix >= static_cast<long>(w)) ? 0.0 : plane[iy * w + ix];
          }
        }
      }
  }
}

// scatter-add of a cols-shaped gradient back onto the input plane
inline void col2im_add(const double* cols, size_t c, size_t h, size_t w, const ConvSpec& spec,
                       size_t oh, size_t ow, double* dst) {
  size_t k = spec.k, stride = spec.stride;
  long pad = static_cast<long>(spec.padding);
  size_t patch = oh * ow;
  for (size_t ci = 0; ci < c; ++ci) {
    double* plane = dst + ci * h * w;
    for (size_t m = 0; m < k; ++m)
      for (size_t n = 0; n < k; ++n) {
        const double* row = cols + ((ci * k + m) * k + n) * patch;
        for (size_t oy = 0; oy < oh; ++oy) {
          long iy = static_cast<long>(oy * stride + m) - pad;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (size_t ox = 0; ox < ow; ++ox) {
            long ix = static_cast<long>(ox * stride + n) - pad;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            plane[iy * w + ix] += row[oy * ow + ox];
          }
        }
      }
  }
}

// Shared forward/backward for conv2d and grouped_conv2d. Weight layout is
// (c_out, c_in/groups, k, k); group g consumes input channels
// [g*cig, (g+1)*cig) and produces output channels [g*cog, (g+1)*cog).
inline Tensor conv_impl(const Tensor& input, const Tensor& weight, const ConvSpec& spec,
                        const char* opname) {
  spec.validate();
  if (input.rank() != 4)
    fail(std::string(opname) + ": input must be rank-4 (N,C,H,W), got " + shape_str(input.shape()));
  if (weight.rank() != 4)
    fail(std::string(opname) + ": weight must be rank-4, got " + shape_str(weight.shape()));
  size_t n = input.dim(0), h = input.dim(2), w = input.dim(3);
  size_t cig = spec.c_in / spec.groups;
  size_t cog = spec.c_out / spec.groups;
  if (input.dim(1) != spec.c_in)
    fail(std::string(opname) + ": input channels " + shape_str(input.shape()) +
         " do not match spec c_in=" + std::to_string(spec.c_in));
  Shape expect_w = {spec.c_out, cig, spec.k, spec.k};
  if (weight.shape() != expect_w)
    fail(std::string(opname) + ": weight shape " + shape_str(weight.shape()) + " does not match " +
         shape_str(expect_w));
  auto [oh, ow] = spec.out_hw(h, w);
  size_t patch = oh * ow;
  size_t krows = cig * spec.k * spec.k;

  bool rec = detail::should_record({&input, &weight});
  Tensor out = Tensor::uninit({n, spec.c_out, oh, ow}, rec);

  std::vector<double> cols(krows * patch);
  const double* in = input.values().data();
  const double* wv = weight.values().data();
  double* ov = out.values().data();
  ConvSpec gspec = spec;  // per-group geometry for im2col (channel count = cig)
  for (size_t s = 0; s < n; ++s)
    for (size_t g = 0; g < spec.groups; ++g) {
      im2col(in + (s * spec.c_in + g * cig) * h * w, cig, h, w, gspec, oh, ow, cols.data());
      double* out_blk = ov + (s * spec.c_out + g * cog) * patch;
      std::fill(out_blk, out_blk + cog * patch, 0.0);
      gemm_nn(wv + g * cog * krows, cols.data(), out_blk, cog, krows, patch);
    }
  conv_counters().gemm_flops.fetch_add(2ull * n * spec.groups * cog * krows * patch,
                                       std::memory_order_relaxed);
  check_finite(out.values(), opname);

  if (rec) {
    auto in_node = input.node(), w_node = weight.node(), on = out.node();
    size_t groups = spec.groups;
    ConvSpec cspec = spec;
    active_tape()->record(opname, {in_node, w_node}, on,
                          [in_node, w_node, on, cspec, n, h, w, oh, ow, cig, cog, groups] {
      size_t patch = oh * ow;
      size_t krows = cig * cspec.k * cspec.k;
      std::vector<double> cols(krows * patch);
      std::vector<double> gcols(krows * patch);
      const double* in = in_node->value.data();
      const double* wv = w_node->value.data();
      const double* gout = on->grad.data();
      for (size_t s = 0; s < n; ++s)
        for (size_t g = 0; g < groups; ++g) {
          const double* gout_blk = gout + (s * cspec.c_out + g * cog) * patch;
          if (w_node->requires_grad) {
            // dW_g += dOut_g * cols^T
            im2col(in + (s * cspec.c_in + g * cig) * h * w, cig, h, w, cspec, oh, ow, cols.data());
            gemm_nt(gout_blk, cols.data(), w_node->grad.data() + g * cog * krows, cog, patch, krows);
          }
          if (in_node->requires_grad) {
            // dCols = W_g^T * dOut_g, then col2im scatter
            std::fill(gcols.begin(), gcols.end(), 0.0);
            gemm_tn(wv + g * cog * krows, gout_blk, gcols.data(), krows, cog, patch);
            col2im_add(gcols.data(), cig, h, w, cspec, oh, ow,
                       in_node->grad.data() + (s * cspec.c_in + g * cig) * h * w);
          }
        }
    });
  }
  return out;
}

}  // namespace detail

// Standard convolution: o_ij = sum_m sum_n h_(i+m)(j+n) * w_mn over input channels.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const ConvSpec& spec) {
  if (spec.groups != 1)
    fail("conv2d: expects groups == 1, got " + std::to_string(spec.groups) +
         " (use grouped_conv2d)");
  conv_counters().conv2d_calls.fetch_add(1, std::memory_order_relaxed);
  return detail::conv_impl(input, weight, spec, "conv2d");
}

// Group convolution: group g's outputs depend only on group g's input
// channels and filters.
inline Tensor grouped_conv2d(const Tensor& input, const Tensor& weight, const ConvSpec& spec) {
  conv_counters().grouped_conv2d_calls.fetch_add(1, std::memory_order_relaxed);
  return detail::conv_impl(input, weight, spec, "grouped_conv2d");
}

// per-output-channel bias on a (N,C,H,W) tensor
inline Tensor add_channel_bias(const Tensor& t, const Tensor& bias) {
  if (t.rank() != 4 || bias.rank() != 1 || bias.dim(0) != t.dim(1))
    fail("add_channel_bias: incompatible shapes " + shape_str(t.shape()) + " and " +
         shape_str(bias.shape()));
  size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  bool rec = detail::should_record({&t, &bias});
  Tensor out = Tensor::uninit(t.shape(), rec);
  const auto& tv = t.values();
  const auto& bv = bias.values();
  auto& ov = out.values();
  for (size_t s = 0; s < n; ++s)
    for (size_t ci = 0; ci < c; ++ci) {
      double b = bv[ci];
      size_t base = (s * c + ci) * hw;
      for (size_t p = 0; p < hw; ++p) ov[base + p] = tv[base + p] + b;
    }
  detail::check_finite(ov, "add_channel_bias");
  if (rec) {
    auto tn = t.node(), bn = bias.node(), on = out.node();
    active_tape()->record("add_channel_bias", {tn, bn}, on, [tn, bn, on, n, c, hw] {
      if (tn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) tn->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (size_t s = 0; s < n; ++s)
          for (size_t ci = 0; ci < c; ++ci) {
            size_t base = (s * c + ci) * hw;
            double acc = 0.0;
            for (size_t p = 0; p < hw; ++p) acc += on->grad[base + p];
            bn->grad[ci] += acc;
          }
    });
  }
  return out;
}

}  // namespace eks
