#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nestnet/descriptor.hpp"
#include "nestnet/errors.hpp"
#include "nestnet/model.hpp"
#include "nestnet/ops.hpp"

namespace nestnet {

struct SliceId {
  int d = 1, w = 1;  // 1-based layer-group and channel-group counts
  bool operator==(const SliceId&) const = default;
};

// Standalone convolution with ragged dense storage: out channel o keeps
// exactly its causal input prefix, weights laid out (o-major, then input
// channel, kernel row, kernel column) — the same order the masked kernel
// reads, which is what keeps slice outputs bit-identical to the full model.
template <class S>
struct SlicedConv {
  int out_channels = 0, k = 1, stride = 1, padding = 0;
  int in_retained = 0;          // channels of the incoming (already sliced) tensor
  std::vector<int> prefix;      // per out channel, retained input channels
  std::vector<size_t> offset;   // start of channel o's weights in `weights`
  Tensor<S> weights;            // flat [sum over o of prefix[o] * k * k]

  int64_t weight_count() const { return static_cast<int64_t>(weights.numel()); }

  // Same dual path as the masked convolution: bounds-hoisted fast loop, or
  // an instrumented loop that executes (and counts) the full kernel window
  // with zero reads outside the input.
  Tensor<S> forward(const Tensor<S>& input, ForwardStats* stats = nullptr) const {
    const int B = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int Ho = conv_out_extent(H, k, stride, padding);
    const int Wo = conv_out_extent(W, k, stride, padding);
    Tensor<S> out({B, out_channels, Ho, Wo});
    const S* in = input.data.data();
    uint64_t macs = 0;
    int max_read = -1;
    for (int b = 0; b < B; ++b) {
      for (int o = 0; o < out_channels; ++o) {
        const int ilim = prefix[o];
        if (ilim > Ci)
          throw std::logic_error("sliced conv: input has " + std::to_string(Ci) +
                                 " channels, out channel " + std::to_string(o) + " needs " +
                                 std::to_string(ilim));
        if (ilim > 0) max_read = std::max(max_read, ilim - 1);
        const S* wbase = weights.data.data() + offset[o];
        for (int y = 0; y < Ho; ++y) {
          const int iy0 = y * stride - padding;
          for (int x = 0; x < Wo; ++x) {
            const int ix0 = x * stride - padding;
            S acc = S(0);
            if (stats) {
              for (int i = 0; i < ilim; ++i) {
                const S* wrow = wbase + static_cast<size_t>(i) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                  const int iy = iy0 + ky;
                  const bool row_ok = iy >= 0 && iy < H;
                  for (int kx = 0; kx < k; ++kx) {
                    const int ix = ix0 + kx;
                    const S v = (row_ok && ix >= 0 && ix < W)
                                    ? in[((static_cast<size_t>(b) * Ci + i) * H + iy) * W + ix]
                                    : S(0);
                    acc += wrow[ky * k + kx] * v;
                    ++macs;
                  }
                }
              }
            } else {
              const int ky0 = std::max(0, -iy0), ky1 = std::min(k, H - iy0);
              const int kx0 = std::max(0, -ix0), kx1 = std::min(k, W - ix0);
              for (int i = 0; i < ilim; ++i) {
                const S* wrow = wbase + static_cast<size_t>(i) * k * k;
                const S* in_ch = in + (static_cast<size_t>(b) * Ci + i) * H * W;
                for (int ky = ky0; ky < ky1; ++ky) {
                  const S* in_row = in_ch + static_cast<size_t>(iy0 + ky) * W + ix0;
                  for (int kx = kx0; kx < kx1; ++kx) acc += wrow[ky * k + kx] * in_row[kx];
                }
              }
            }
            out.at4(b, o, y, x) = acc;
          }
        }
      }
    }
    if (stats) {
      stats->macs += macs;
      stats->conv_max_in_read.push_back(max_read);
    }
    return out;
  }
};

template <class S>
struct SlicedBN {
  Tensor<S> gamma, beta, mean, var;  // frozen statistics, retained channels only
};

template <class S>
struct SlicedBlock {
  SlicedConv<S> conv1, conv2;
  SlicedBN<S> bn1, bn2;
  bool has_proj = false;
  SlicedConv<S> proj;
};

// Dense standalone sub-network for one (d, w): blocks 1..d at the first w
// channel groups, classified by that single head. No masks, no zero-filled
// storage; the frozen normalization statistics ride along.
template <class S>
struct SlicedModel {
  ArchDescriptor arch;  // descriptor of the parent model
  SliceId id;
  int in_retained = 0;  // input channels consumed (prefix of the raw input)
  SlicedConv<S> stem_conv;
  SlicedBN<S> stem_bn;
  std::vector<SlicedBlock<S>> blocks;
  Tensor<S> head_w;  // [N, feature_channels]
  Tensor<S> head_b;  // [N]

  // Trainable scalars in the stored network (conv weights, normalization
  // scale/shift, classifier); frozen running statistics are buffers and are
  // not counted.
  int64_t parameter_count() const {
    int64_t n = stem_conv.weight_count() + 2 * static_cast<int64_t>(stem_bn.gamma.numel());
    for (const auto& b : blocks) {
      n += b.conv1.weight_count() + b.conv2.weight_count();
      n += 2 * static_cast<int64_t>(b.bn1.gamma.numel());
      n += 2 * static_cast<int64_t>(b.bn2.gamma.numel());
      if (b.has_proj) n += b.proj.weight_count();
    }
    n += static_cast<int64_t>(head_w.numel()) + static_cast<int64_t>(head_b.numel());
    return n;
  }

  // Accepts either the parent model's full input or an input already cut to
  // the retained channel prefix; only the retained prefix is read either way.
  Tensor<S> forward(const Tensor<S>& x, ForwardStats* stats = nullptr) const {
    if (x.ndim() != 4)
      throw std::invalid_argument("sliced forward: input must be 4-d, got " + shape_str(x.shape));
    if (x.dim(1) != arch.input_channels && x.dim(1) != in_retained)
      throw std::invalid_argument("sliced forward: input has " + std::to_string(x.dim(1)) +
                                  " channels, expected " + std::to_string(arch.input_channels) +
                                  " (full) or " + std::to_string(in_retained) + " (retained)");
    const S eps = static_cast<S>(kBnEps);
    Tensor<S> a = stem_conv.forward(x, stats);
    a = batchnorm_eval<S>(a, stem_bn.gamma.data, stem_bn.beta.data, stem_bn.mean.data,
                          stem_bn.var.data, eps);
    a = relu(a);
    for (const auto& blk : blocks) {
      Tensor<S> h = blk.conv1.forward(a, stats);
      h = batchnorm_eval<S>(h, blk.bn1.gamma.data, blk.bn1.beta.data, blk.bn1.mean.data,
                            blk.bn1.var.data, eps);
      h = relu(h);
      h = blk.conv2.forward(h, stats);
      h = batchnorm_eval<S>(h, blk.bn2.gamma.data, blk.bn2.beta.data, blk.bn2.mean.data,
                            blk.bn2.var.data, eps);
      if (blk.has_proj) {
        Tensor<S> sc = blk.proj.forward(a, stats);
        for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += sc.data[i];
      } else {
        for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += a.data[i];
      }
      a = relu(h);
    }
    Tensor<S> f = global_avg_pool(a);
    const int B = f.dim(0), N = head_w.dim(0), Cf = head_w.dim(1);
    Tensor<S> snap({1, B, N});
    const int bnd[1] = {Cf};
    cumulative_head_forward<S>(f, head_w, head_b.data, bnd, &snap, 0, stats);
    Tensor<S> out({B, N});
    out.data = std::move(snap.data);
    return out;
  }
};

namespace detail {

// Retained-prefix copy of a masked kernel, shapes only (weights zero).
template <class S>
SlicedConv<S> sliced_conv_skeleton(int out_retained, int in_retained,
                                   const std::vector<int>& full_prefix, int k, int stride,
                                   int padding) {
  SlicedConv<S> sc;
  sc.out_channels = out_retained;
  sc.k = k;
  sc.stride = stride;
  sc.padding = padding;
  sc.in_retained = in_retained;
  sc.prefix.resize(out_retained);
  sc.offset.resize(out_retained);
  size_t total = 0;
  for (int o = 0; o < out_retained; ++o) {
    const int p = full_prefix[o];
    if (p < 0)
      throw std::logic_error("slice: kernel mask is not a channel prefix for out channel " +
                             std::to_string(o));
    if (p > in_retained)
      throw std::logic_error("slice: out channel " + std::to_string(o) + " reads " +
                             std::to_string(p) + " input channels but only " +
                             std::to_string(in_retained) + " are retained");
    sc.prefix[o] = p;
    sc.offset[o] = total;
    total += static_cast<size_t>(p) * k * k;
  }
  // total >= k*k always: the first group is never empty, so every retained
  // out channel keeps at least one input channel.
  sc.weights = Tensor<S>({static_cast<int>(total)});
  return sc;
}

}  // namespace detail

// Shape skeleton of slice (d, w): every tensor allocated at its final size,
// weights zeroed. The serializer rebuilds models through here so that file
// layout and slicing agree on shapes by construction.
template <class S>
SlicedModel<S> sliced_skeleton(const ArchDescriptor& desc, SliceId id) {
  desc.validate();
  const int L = desc.num_layer_groups(), C = desc.groups;
  if (id.d < 1 || id.d > L || id.w < 1 || id.w > C)
    throw ConfigError("slice: (d,w)=(" + std::to_string(id.d) + "," + std::to_string(id.w) +
                      ") outside grid " + std::to_string(L) + "x" + std::to_string(C));
  SlicedModel<S> sm;
  sm.arch = desc;
  sm.id = id;

  GroupSpec input_spec;
  if (desc.input_grouped) input_spec = GroupSpec::proportional(desc.input_channels, C);
  std::vector<GroupSpec> specs;
  for (int w : desc.stage_widths) specs.push_back(GroupSpec::proportional(w, C));
  const int k = desc.kernel, pad = desc.kernel / 2;

  sm.in_retained = desc.input_grouped ? input_spec.boundaries[id.w - 1] : desc.input_channels;
  const int s0r = specs[0].boundaries[id.w - 1];

  // Stem: per out channel, the causal prefix (or every input channel when
  // the input is not grouped).
  std::vector<int> stem_prefix(s0r);
  for (int o = 0; o < s0r; ++o)
    stem_prefix[o] =
        desc.input_grouped ? input_spec.boundaries[specs[0].group_of(o)] : desc.input_channels;
  sm.stem_conv = detail::sliced_conv_skeleton<S>(s0r, sm.in_retained, stem_prefix, k, 1, pad);
  sm.stem_bn.gamma = Tensor<S>({s0r});
  sm.stem_bn.beta = Tensor<S>({s0r});
  sm.stem_bn.mean = Tensor<S>({s0r});
  sm.stem_bn.var = Tensor<S>({s0r});

  const int last_block = desc.head_block(id.d - 1);
  for (int b = 0; b <= last_block; ++b) {
    const int stage = desc.stage_of_block(b);
    const bool transition = desc.block_is_first_of_later_stage(b);
    const int in_stage = transition ? stage - 1 : stage;
    const int stride = transition ? 2 : 1;
    const int in_r = specs[in_stage].boundaries[id.w - 1];
    const int out_r = specs[stage].boundaries[id.w - 1];

    SlicedBlock<S> blk;
    std::vector<int> pfx1(out_r), pfx2(out_r), pfxp(out_r);
    for (int o = 0; o < out_r; ++o) {
      pfx1[o] = specs[in_stage].boundaries[specs[stage].group_of(o)];
      pfx2[o] = specs[stage].boundaries[specs[stage].group_of(o)];
      pfxp[o] = pfx1[o];
    }
    blk.conv1 = detail::sliced_conv_skeleton<S>(out_r, in_r, pfx1, k, stride, pad);
    blk.conv2 = detail::sliced_conv_skeleton<S>(out_r, out_r, pfx2, k, 1, pad);
    auto init_bn = [&](SlicedBN<S>& bn) {
      bn.gamma = Tensor<S>({out_r});
      bn.beta = Tensor<S>({out_r});
      bn.mean = Tensor<S>({out_r});
      bn.var = Tensor<S>({out_r});
    };
    init_bn(blk.bn1);
    init_bn(blk.bn2);
    if (transition) {
      blk.has_proj = true;
      blk.proj = detail::sliced_conv_skeleton<S>(out_r, in_r, pfxp, 1, stride, 0);
    }
    sm.blocks.push_back(std::move(blk));
  }

  const int feat = specs[desc.stage_of_block(last_block)].boundaries[id.w - 1];
  sm.head_w = Tensor<S>({desc.classes, feat});
  sm.head_b = Tensor<S>({desc.classes});
  return sm;
}

// Extracts the standalone sub-model for (d, w) from a frozen full model.
// Weight values are copied from the unmasked retained region in the same
// order the masked forward reads them; together with the shared inference
// ops this makes forward(slice(M, d, w), x) reproduce forward_head(M, x, d, w)
// bit for bit.
template <class S>
SlicedModel<S> slice(NestedModel<S>& model, SliceId id) {
  if (!model.frozen)
    throw ConfigError(
        "slice: model is not frozen; finish training (or mark the model frozen) first — "
        "slicing mid-training is undefined");
  SlicedModel<S> sm = sliced_skeleton<S>(model.desc, id);

  auto copy_conv = [](SlicedConv<S>& dst, const MaskedConvKernel<S>& src) {
    const int k = src.ksize(), Ci = src.in_channels();
    for (int o = 0; o < dst.out_channels; ++o) {
      S* w = dst.weights.data.data() + dst.offset[o];
      for (int i = 0; i < dst.prefix[o]; ++i)
        for (int p = 0; p < k * k; ++p)
          w[static_cast<size_t>(i) * k * k + p] =
              src.weights.data[(static_cast<size_t>(o) * Ci + i) * k * k + p];
    }
  };
  auto copy_bn = [](SlicedBN<S>& dst, const BatchNormUnit<S>& src) {
    const size_t n = dst.gamma.numel();
    std::copy_n(src.gamma.data.begin(), n, dst.gamma.data.begin());
    std::copy_n(src.beta.data.begin(), n, dst.beta.data.begin());
    std::copy_n(src.running_mean.data.begin(), n, dst.mean.data.begin());
    std::copy_n(src.running_var.data.begin(), n, dst.var.data.begin());
  };

  copy_conv(sm.stem_conv, model.stem_conv.kernel);
  copy_bn(sm.stem_bn, model.stem_bn);
  for (size_t b = 0; b < sm.blocks.size(); ++b) {
    copy_conv(sm.blocks[b].conv1, model.blocks[b].conv1.kernel);
    copy_conv(sm.blocks[b].conv2, model.blocks[b].conv2.kernel);
    copy_bn(sm.blocks[b].bn1, model.blocks[b].bn1);
    copy_bn(sm.blocks[b].bn2, model.blocks[b].bn2);
    if (sm.blocks[b].has_proj) copy_conv(sm.blocks[b].proj, model.blocks[b].proj.kernel);
  }
  const auto& W = model.heads[id.d - 1].w;
  const int N = W.dim(0), Cw = W.dim(1), Cf = sm.head_w.dim(1);
  for (int n = 0; n < N; ++n)
    std::copy_n(W.data.data() + static_cast<size_t>(n) * Cw, Cf,
                sm.head_w.data.data() + static_cast<size_t>(n) * Cf);
  sm.head_b = model.heads[id.d - 1].b;
  return sm;
}

}  // namespace nestnet
