#pragma once

#include <cstdint>
#include <vector>

#include "nestnet/descriptor.hpp"
#include "nestnet/group_spec.hpp"
#include "nestnet/ops.hpp"
#include "nestnet/slice.hpp"

namespace nestnet {

// Cost of deploying one slice, all counts in scalars / operations:
//  - params: trainable scalars stored by the sliced model (retained conv
//    weights, normalization scale+shift, classifier matrix+bias; frozen
//    statistics are buffers and excluded);
//  - macs: multiply-accumulates of one single-image forward pass —
//    convolution kernels (every kernel position of every retained weight,
//    padding positions included) plus the classifier matvec; pooling,
//    normalization, and additions are not MACs;
//  - peak_activation: the documented live-scalar model below.
struct SliceCost {
  int64_t params = 0;
  int64_t macs = 0;
  int64_t peak_activation = 0;

  bool operator==(const SliceCost&) const = default;
  bool fits(int64_t max_params, int64_t max_macs, int64_t max_peak) const {
    return params <= max_params && macs <= max_macs && peak_activation <= max_peak;
  }
};

// Retained weight scalars of a grouped causal conv cut at w groups:
// sum over retained out channels of (causal input prefix) * k^2.
inline int64_t conv_retained_weights(const GroupSpec& in_spec, const GroupSpec& out_spec, int k,
                                     int w) {
  int64_t total = 0;
  for (int o = 0; o < out_spec.boundaries[w - 1]; ++o)
    total += static_cast<int64_t>(in_spec.boundaries[out_spec.group_of(o)]) * k * k;
  return total;
}

// Peak live activation scalars during a layer-by-layer forward of the sliced
// model at batch 1, with immediate freeing. The event model (documented and
// fixed — parameters are counted separately):
//  - a convolution keeps its input and output live; normalization and the
//    nonlinearity run in place;
//  - inside a residual block the block input x stays live for the shortcut,
//    so the second convolution's event is x + h1 + h2, and a projection's
//    event is x + h2 + s;
//  - pooling keeps the final feature map and the pooled vector live, the
//    classifier the pooled vector and the logits.
//
// All terms scale with the retained channel counts, so the peak is weakly
// increasing in w; appending blocks only adds events at least as large as
// the head events they displace, so it is weakly increasing in d.
namespace detail {

struct ShapeCursor {
  int ch, h, w;
  int64_t scalars() const { return static_cast<int64_t>(ch) * h * w; }
};

}  // namespace detail

// Closed-form cost of slice (d, w) for reference input size H x W, computed
// from the descriptor alone. Matches the instrumented execution counters of
// the sliced model's forward pass and the sliced model's parameter count.
inline SliceCost slice_cost(const ArchDescriptor& desc, SliceId id, int H, int W) {
  desc.validate();
  const int L = desc.num_layer_groups(), C = desc.groups, k = desc.kernel;
  if (id.d < 1 || id.d > L || id.w < 1 || id.w > C)
    throw ConfigError("cost: (d,w)=(" + std::to_string(id.d) + "," + std::to_string(id.w) +
                      ") outside grid " + std::to_string(L) + "x" + std::to_string(C));
  GroupSpec input_spec;
  if (desc.input_grouped) input_spec = GroupSpec::proportional(desc.input_channels, C);
  std::vector<GroupSpec> specs;
  for (int w : desc.stage_widths) specs.push_back(GroupSpec::proportional(w, C));

  SliceCost cost;
  int64_t peak = 0;
  auto event = [&](int64_t live) { peak = std::max(peak, live); };

  const int in_ch = desc.input_grouped ? input_spec.boundaries[id.w - 1] : desc.input_channels;
  detail::ShapeCursor in{in_ch, H, W};

  // Stem conv (stride 1, padded to keep the spatial size).
  {
    const int out_ch = specs[0].boundaries[id.w - 1];
    int64_t weights = 0;
    if (desc.input_grouped) {
      weights = conv_retained_weights(input_spec, specs[0], k, id.w);
    } else {
      weights = static_cast<int64_t>(out_ch) * desc.input_channels * k * k;
    }
    const int Ho = conv_out_extent(H, k, 1, k / 2), Wo = conv_out_extent(W, k, 1, k / 2);
    cost.params += weights;
    cost.macs += weights * Ho * Wo;
    cost.params += 2 * out_ch;  // scale + shift
    detail::ShapeCursor out{out_ch, Ho, Wo};
    event(in.scalars() + out.scalars());
    in = out;
  }

  const int last_block = desc.head_block(id.d - 1);
  for (int b = 0; b <= last_block; ++b) {
    const int stage = desc.stage_of_block(b);
    const bool transition = desc.block_is_first_of_later_stage(b);
    const int in_stage = transition ? stage - 1 : stage;
    const int stride = transition ? 2 : 1;
    const int out_ch = specs[stage].boundaries[id.w - 1];
    const int Ho = conv_out_extent(in.h, k, stride, k / 2);
    const int Wo = conv_out_extent(in.w, k, stride, k / 2);
    detail::ShapeCursor out{out_ch, Ho, Wo};

    const int64_t w1 = conv_retained_weights(specs[in_stage], specs[stage], k, id.w);
    const int64_t w2 = conv_retained_weights(specs[stage], specs[stage], k, id.w);
    cost.params += w1 + w2 + 4 * out_ch;  // two normalizations
    cost.macs += w1 * Ho * Wo + w2 * Ho * Wo;
    event(in.scalars() + out.scalars());                  // conv1: x + h1
    event(in.scalars() + 2 * out.scalars());              // conv2: x + h1 + h2
    if (transition) {
      const int64_t wp = conv_retained_weights(specs[in_stage], specs[stage], 1, id.w);
      cost.params += wp;
      cost.macs += wp * Ho * Wo;
      event(in.scalars() + 2 * out.scalars());            // proj: x + h2 + s
      event(2 * out.scalars());                           // add: h2 + s
    } else {
      event(in.scalars() + out.scalars());                // add: x + h2
    }
    in = out;
  }

  // Pooling and the classifier.
  const int feat = in.ch;
  cost.params += static_cast<int64_t>(desc.classes) * feat + desc.classes;
  cost.macs += static_cast<int64_t>(desc.classes) * feat;
  event(in.scalars() + feat);            // gap: x + f
  event(feat + desc.classes);            // head: f + logits
  cost.peak_activation = peak;
  return cost;
}

// Row-major [L, C] table over every slice.
inline std::vector<SliceCost> cost_table(const ArchDescriptor& desc, int H, int W) {
  const int L = desc.num_layer_groups(), C = desc.groups;
  std::vector<SliceCost> table;
  table.reserve(static_cast<size_t>(L) * C);
  for (int d = 1; d <= L; ++d)
    for (int w = 1; w <= C; ++w) table.push_back(slice_cost(desc, SliceId{d, w}, H, W));
  return table;
}

}  // namespace nestnet
