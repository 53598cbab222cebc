#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "nestnet/group_spec.hpp"
#include "nestnet/ops.hpp"
#include "nestnet/rng.hpp"

using namespace nestnet;

namespace {

// Reference convolution: the same in-channel -> kernel-row -> kernel-column
// summation order as the production code, written as six plain loops with an
// inline bounds test and an inline mask test. Any agreement between the two
// is therefore bit-exact, not approximate.
template <class S>
Tensor<S> conv_reference(const Tensor<S>& in, const Tensor<S>& w, const Tensor<uint8_t>& mask,
                         int stride, int padding, int out_ch = -1) {
  const int B = in.dim(0), Ci = in.dim(1), H = in.dim(2), Wd = in.dim(3);
  const int Co = out_ch < 0 ? w.dim(0) : out_ch, k = w.dim(2);
  const int Ho = (H + 2 * padding - k) / stride + 1;
  const int Wo = (Wd + 2 * padding - k) / stride + 1;
  const int Ck = w.dim(1);
  Tensor<S> out({B, Co, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < Co; ++o)
      for (int y = 0; y < Ho; ++y)
        for (int x = 0; x < Wo; ++x) {
          S acc = S(0);
          for (int i = 0; i < Ci; ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride - padding + ky;
                const int ix = x * stride - padding + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= Wd) continue;
                const size_t widx = ((static_cast<size_t>(o) * Ck + i) * k + ky) * k + kx;
                if (!mask.data[widx]) continue;
                acc += w.data[widx] * in.at4(b, i, iy, ix);
              }
          out.at4(b, o, y, x) = acc;
        }
  return out;
}

Tensor<float> random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

MaskedConvKernel<float> make_kernel(int co, int ci, int k, int stride, int padding,
                                    Tensor<uint8_t> mask, Rng& rng) {
  MaskedConvKernel<float> kr;
  kr.weights = random_tensor({co, ci, k, k}, rng);
  kr.mask = std::move(mask);
  kr.stride = stride;
  kr.padding = padding;
  // Masked positions hold zero storage, matching the builder's contract.
  for (size_t i = 0; i < kr.weights.numel(); ++i)
    if (!kr.mask.data[i]) kr.weights.data[i] = 0.0f;
  kr.finalize();
  return kr;
}

}  // namespace

TEST_CASE("conv_out_extent follows the standard formula") {
  CHECK(conv_out_extent(8, 3, 1, 1) == 8);
  CHECK(conv_out_extent(8, 3, 2, 1) == 4);
  CHECK(conv_out_extent(8, 1, 1, 0) == 8);
  CHECK(conv_out_extent(5, 3, 1, 0) == 3);
  CHECK(conv_out_extent(7, 3, 2, 1) == 4);
}

TEST_CASE("masked conv equals the reference over stride/padding/group variants") {
  Rng rng(101);
  for (int groups : {1, 2, 4}) {
    for (auto [stride, padding] : {std::pair{1, 1}, {2, 1}, {1, 0}}) {
      const int ci = 4, co = 8, k = 3;
      GroupSpec in_spec = GroupSpec::proportional(ci, groups);
      GroupSpec out_spec = GroupSpec::proportional(co, groups);
      MaskedConvKernel<float> kr =
          make_kernel(co, ci, k, stride, padding, build_mask(in_spec, out_spec, k), rng);
      Tensor<float> x = random_tensor({2, ci, 8, 8}, rng);
      Tensor<float> got = conv2d_masked(x, kr);
      Tensor<float> want = conv_reference(x, kr.weights, kr.mask, stride, padding);
      CHECK(bit_equal(got, want));
    }
  }
}

TEST_CASE("1x1 convolutions match the reference too") {
  Rng rng(55);
  GroupSpec in_spec = GroupSpec::proportional(8, 4);
  GroupSpec out_spec = GroupSpec::proportional(16, 4);
  MaskedConvKernel<float> kr = make_kernel(16, 8, 1, 2, 0, build_mask(in_spec, out_spec, 1), rng);
  Tensor<float> x = random_tensor({3, 8, 8, 8}, rng);
  CHECK(bit_equal(conv2d_masked(x, kr), conv_reference(x, kr.weights, kr.mask, 2, 0)));
}

TEST_CASE("finalize derives prefixes, ones counts, and max channel") {
  Rng rng(7);
  GroupSpec spec = GroupSpec::proportional(4, 2);  // boundaries 2, 4
  MaskedConvKernel<float> kr = make_kernel(4, 4, 3, 1, 1, build_mask(spec, spec, 3), rng);
  CHECK(kr.in_prefix == std::vector<int>{2, 2, 4, 4});
  CHECK(kr.ones_count == std::vector<int64_t>{18, 18, 36, 36});
  CHECK(kr.max_in_channel == std::vector<int>{1, 1, 3, 3});
}

TEST_CASE("irregular masks take the per-position path and still match") {
  Rng rng(23);
  GroupSpec spec = GroupSpec::proportional(4, 2);
  Tensor<uint8_t> mask = build_mask(spec, spec, 3);
  // Punch a hole mid-prefix so no contiguous prefix describes out channel 2.
  for (int q = 0; q < 9; ++q) mask.data[(2u * 4 + 1) * 9 + q] = 0;
  MaskedConvKernel<float> kr = make_kernel(4, 4, 3, 1, 1, std::move(mask), rng);
  CHECK(kr.in_prefix[2] == -1);  // irregular
  CHECK(kr.in_prefix[0] == 2);   // others untouched
  Tensor<float> x = random_tensor({2, 4, 6, 6}, rng);
  Tensor<float> got = conv2d_masked(x, kr);
  CHECK(bit_equal(got, conv_reference(x, kr.weights, kr.mask, 1, 1)));
  // Instrumented pass agrees bit for bit and counts unmasked positions only.
  ForwardStats stats;
  CHECK(bit_equal(conv2d_masked(x, kr, -1, &stats), got));
  int64_t unmasked = 0;
  for (int64_t c : kr.ones_count) unmasked += c;
  CHECK(stats.macs == static_cast<uint64_t>(2) * unmasked * 6 * 6);
}

TEST_CASE("instrumented MACs equal unmasked positions times output pixels") {
  Rng rng(31);
  GroupSpec spec = GroupSpec::proportional(8, 4);
  MaskedConvKernel<float> kr = make_kernel(8, 8, 3, 1, 1, build_mask(spec, spec, 3), rng);
  Tensor<float> x = random_tensor({2, 8, 8, 8}, rng);
  ForwardStats stats;
  Tensor<float> instrumented = conv2d_masked(x, kr, -1, &stats);
  // The instrumented path multiplies through padding reads; zero terms do
  // not alter the accumulator bits, so both paths agree exactly.
  CHECK(bit_equal(instrumented, conv2d_masked(x, kr)));
  int64_t positions = 0;
  for (int o = 0; o < 8; ++o) positions += static_cast<int64_t>(kr.in_prefix[o]) * 9;
  CHECK(stats.macs == static_cast<uint64_t>(positions) * 8 * 8 * 2);  // x Ho x Wo x B
  CHECK(stats.conv_max_in_read.size() == 1);
  CHECK(stats.conv_max_in_read[0] == 7);
}

TEST_CASE("out channel limit computes a bit-identical output prefix") {
  Rng rng(77);
  GroupSpec spec = GroupSpec::proportional(8, 4);
  MaskedConvKernel<float> kr = make_kernel(8, 8, 3, 1, 1, build_mask(spec, spec, 3), rng);
  Tensor<float> x = random_tensor({2, 8, 8, 8}, rng);
  Tensor<float> full = conv2d_masked(x, kr);
  for (int limit : {2, 4, 6}) {
    Tensor<float> part = conv2d_masked(x, kr, limit);
    CHECK(part.dim(1) == limit);
    for (int b = 0; b < 2; ++b)
      for (int o = 0; o < limit; ++o)
        for (int y = 0; y < 8; ++y)
          for (int xx = 0; xx < 8; ++xx) {
            REQUIRE(part.at4(b, o, y, xx) == full.at4(b, o, y, xx));
          }
  }
}

TEST_CASE("restricted input prefix feeds restricted out channels identically") {
  // Keeping groups <= w means the input can be physically truncated to the
  // prefix; outputs for the retained channels must not change at all.
  Rng rng(13);
  GroupSpec spec = GroupSpec::proportional(8, 4);
  MaskedConvKernel<float> kr = make_kernel(8, 8, 3, 1, 1, build_mask(spec, spec, 3), rng);
  Tensor<float> x = random_tensor({2, 8, 6, 6}, rng);
  const int keep = 4;  // two groups
  Tensor<float> xt({2, keep, 6, 6});
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < keep; ++c)
      for (int i = 0; i < 36; ++i)
        xt.data[(static_cast<size_t>(b) * keep + c) * 36 + i] =
            x.data[(static_cast<size_t>(b) * 8 + c) * 36 + i];
  Tensor<float> full = conv2d_masked(x, kr);
  Tensor<float> part = conv2d_masked(xt, kr, keep);
  for (int b = 0; b < 2; ++b)
    for (int o = 0; o < keep; ++o)
      for (int i = 0; i < 36; ++i)
        REQUIRE(part.data[(static_cast<size_t>(b) * keep + o) * 36 + i] ==
                full.data[(static_cast<size_t>(b) * 8 + o) * 36 + i]);
}

TEST_CASE("instrumentation records the highest input channel actually read") {
  Rng rng(3);
  GroupSpec spec = GroupSpec::proportional(8, 4);
  MaskedConvKernel<float> kr = make_kernel(8, 8, 3, 1, 1, build_mask(spec, spec, 3), rng);
  Tensor<float> x = random_tensor({1, 8, 6, 6}, rng);
  for (int limit : {2, 4, 8}) {
    ForwardStats stats;
    conv2d_masked(x, kr, limit, &stats);
    // With proportional groups the top retained channel reads exactly the
    // prefix of its own group: channels 0..limit-1.
    CHECK(stats.conv_max_in_read.back() == limit - 1);
  }
}

TEST_CASE("shape mismatches carry both shapes in the diagnostic") {
  Rng rng(5);
  GroupSpec spec = GroupSpec::proportional(4, 2);
  MaskedConvKernel<float> kr = make_kernel(4, 4, 3, 1, 1, build_mask(spec, spec, 3), rng);
  Tensor<float> bad({1, 3, 6, 6});
  try {
    conv2d_masked(bad, kr);
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1,3,6,6]") != std::string::npos);
    CHECK(msg.find("[4,4,3,3]") != std::string::npos);
  }
}

// ------------------------------------------------------------- backward ---

namespace {

// Finite-difference derivative of sum(conv(x, w) * probe) with respect to a
// single scalar, computed entirely through the forward path.
template <class F>
double central_diff(F&& eval, float& slot, float eps) {
  const float keep = slot;
  slot = keep + eps;
  const double up = eval();
  slot = keep - eps;
  const double down = eval();
  slot = keep;
  return (up - down) / (2.0 * eps);
}

}  // namespace

TEST_CASE("conv backward matches finite differences and respects the mask") {
  Rng rng(97);
  GroupSpec spec = GroupSpec::proportional(4, 2);
  MaskedConvKernel<float> kr = make_kernel(4, 4, 3, 1, 1, build_mask(spec, spec, 3), rng);
  Tensor<float> x = random_tensor({2, 4, 5, 5}, rng);
  Tensor<float> probe = random_tensor({2, 4, 5, 5}, rng);

  auto objective = [&] {
    Tensor<float> out = conv2d_masked(x, kr);
    double s = 0;
    for (size_t i = 0; i < out.numel(); ++i) s += static_cast<double>(out.data[i]) * probe.data[i];
    return s;
  };

  Tensor<float> gw(kr.weights.shape), gx(x.shape);
  conv2d_masked_backward(x, kr, probe, &gw, &gx);

  // |analytic - fd| with a floor of 1 in the denominator: the float forward
  // contributes ~1e-4 of absolute finite-difference noise at this step size.
  auto close = [](double a, double fd) {
    return std::abs(a - fd) <= 5e-3 * std::max(1.0, std::abs(a) + std::abs(fd));
  };
  // Sampled weight positions; index 18 is (o=0, i=2), a masked pair.
  for (size_t idx : {size_t(0), size_t(18), size_t(40), size_t(100), size_t(143)}) {
    const double fd = central_diff(objective, kr.weights.data[idx], 1e-2f);
    if (!kr.mask.data[idx]) {
      CHECK(gw.data[idx] == 0.0f);  // exactly zero, never written
      CHECK(fd == 0.0);             // and the forward never reads the slot
    } else {
      CHECK(close(gw.data[idx], fd));
    }
  }
  // Sampled input positions.
  for (size_t idx : {size_t(3), size_t(77), size_t(180)}) {
    const double fd = central_diff(objective, x.data[idx], 1e-2f);
    CHECK(close(gx.data[idx], fd));
  }
}

TEST_CASE("conv backward with a channel limit ignores dropped out channels") {
  Rng rng(19);
  GroupSpec spec = GroupSpec::proportional(4, 2);
  MaskedConvKernel<float> kr = make_kernel(4, 4, 3, 1, 1, build_mask(spec, spec, 3), rng);
  Tensor<float> x = random_tensor({1, 4, 5, 5}, rng);
  Tensor<float> probe = random_tensor({1, 2, 5, 5}, rng);  // only 2 retained out channels
  Tensor<float> gw(kr.weights.shape), gx(x.shape);
  conv2d_masked_backward(x, kr, probe, &gw, &gx, 2);
  // Rows of dropped out channels never receive gradient.
  for (int o = 2; o < 4; ++o)
    for (int q = 0; q < 4 * 9; ++q) CHECK(gw.data[static_cast<size_t>(o) * 36 + q] == 0.0f);
  // Input channels beyond the causal cone of the retained outputs stay zero.
  for (int c = 2; c < 4; ++c)
    for (int i = 0; i < 25; ++i) CHECK(gx.data[static_cast<size_t>(c) * 25 + i] == 0.0f);
}
