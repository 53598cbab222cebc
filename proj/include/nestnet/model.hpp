#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "nestnet/descriptor.hpp"
#include "nestnet/errors.hpp"
#include "nestnet/group_spec.hpp"
#include "nestnet/ops.hpp"
#include "nestnet/rng.hpp"
#include "nestnet/tensor.hpp"

namespace nestnet {

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <class S>
struct ConvUnit {
  MaskedConvKernel<S> kernel;
  Tensor<S> grad;  // same shape as kernel.weights; masked entries stay 0
};

template <class S>
struct BatchNormUnit {
  Tensor<S> gamma, beta;
  Tensor<S> grad_gamma, grad_beta;
  Tensor<S> running_mean, running_var;

  void init(int channels) {
    gamma = Tensor<S>({channels});
    beta = Tensor<S>({channels});
    grad_gamma = Tensor<S>({channels});
    grad_beta = Tensor<S>({channels});
    running_mean = Tensor<S>({channels});
    running_var = Tensor<S>({channels});
    gamma.fill(S(1));
    running_var.fill(S(1));
  }
};

// Basic residual block: conv-bn-relu-conv-bn, identity (or masked 1x1
// projection) shortcut, relu after the add. Identity shortcuts map channel c
// to channel c, so group membership is preserved end to end.
template <class S>
struct ResidualBlockNet {
  ConvUnit<S> conv1, conv2;
  BatchNormUnit<S> bn1, bn2;
  bool has_proj = false;
  ConvUnit<S> proj;
  int stage = 0;     // stage this block's outputs belong to
  int in_stage = 0;  // stage of the incoming activation
};

// One classifier site: a weight matrix over that site's pooled features.
// Heads (l, c) for every c share this matrix via cumulative partial sums.
template <class S>
struct HeadUnit {
  Tensor<S> w, b;  // w: [classes, feature_channels]
  Tensor<S> grad_w, grad_b;
  int block = 0;  // feature source: output of this block
};

template <class S>
struct NestedModel {
  ArchDescriptor desc;
  GroupSpec input_spec;                 // used only when desc.input_grouped
  std::vector<GroupSpec> stage_specs;   // boundaries per stage width
  ConvUnit<S> stem_conv;
  BatchNormUnit<S> stem_bn;
  std::vector<ResidualBlockNet<S>> blocks;
  std::vector<HeadUnit<S>> heads;
  // Set once training (or loading) finishes; slicing requires it because the
  // normalization statistics of a model mid-training are not final.
  bool frozen = false;

  int layer_groups() const { return desc.num_layer_groups(); }
  int channel_groups() const { return desc.groups; }
  const GroupSpec& spec_of_block(int b) const { return stage_specs[blocks[b].stage]; }
  const GroupSpec& in_spec_of_block(int b) const { return stage_specs[blocks[b].in_stage]; }

  // Channels of the raw input consumed when restricted to w channel groups.
  int retained_input_channels(int w) const {
    return desc.input_grouped ? input_spec.boundaries[w - 1] : desc.input_channels;
  }

  // Canonical parameter order; serialization, casting, and the optimizer all
  // iterate through here. f(name, value, grad, mask_or_null).
  template <class F>
  void visit_params(F&& f) {
    f(std::string("stem.conv.w"), stem_conv.kernel.weights, stem_conv.grad,
      &stem_conv.kernel.mask);
    f(std::string("stem.bn.gamma"), stem_bn.gamma, stem_bn.grad_gamma, nullptr);
    f(std::string("stem.bn.beta"), stem_bn.beta, stem_bn.grad_beta, nullptr);
    for (size_t i = 0; i < blocks.size(); ++i) {
      auto& blk = blocks[i];
      const std::string p = "block" + std::to_string(i);
      f(p + ".conv1.w", blk.conv1.kernel.weights, blk.conv1.grad, &blk.conv1.kernel.mask);
      f(p + ".bn1.gamma", blk.bn1.gamma, blk.bn1.grad_gamma, nullptr);
      f(p + ".bn1.beta", blk.bn1.beta, blk.bn1.grad_beta, nullptr);
      f(p + ".conv2.w", blk.conv2.kernel.weights, blk.conv2.grad, &blk.conv2.kernel.mask);
      f(p + ".bn2.gamma", blk.bn2.gamma, blk.bn2.grad_gamma, nullptr);
      f(p + ".bn2.beta", blk.bn2.beta, blk.bn2.grad_beta, nullptr);
      if (blk.has_proj) f(p + ".proj.w", blk.proj.kernel.weights, blk.proj.grad, &blk.proj.kernel.mask);
    }
    for (size_t l = 0; l < heads.size(); ++l) {
      const std::string p = "head" + std::to_string(l);
      f(p + ".w", heads[l].w, heads[l].grad_w, nullptr);
      f(p + ".b", heads[l].b, heads[l].grad_b, nullptr);
    }
  }

  // Non-trainable state that still ships with the model.
  template <class F>
  void visit_buffers(F&& f) {
    f(std::string("stem.bn.running_mean"), stem_bn.running_mean);
    f(std::string("stem.bn.running_var"), stem_bn.running_var);
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i);
      f(p + ".bn1.running_mean", blocks[i].bn1.running_mean);
      f(p + ".bn1.running_var", blocks[i].bn1.running_var);
      f(p + ".bn2.running_mean", blocks[i].bn2.running_mean);
      f(p + ".bn2.running_var", blocks[i].bn2.running_var);
    }
  }

  void zero_grads() {
    visit_params([](const std::string&, Tensor<S>&, Tensor<S>& g, const Tensor<uint8_t>*) {
      g.fill(S(0));
    });
  }

  int64_t parameter_count() {
    int64_t n = 0;
    visit_params([&](const std::string&, Tensor<S>& v, Tensor<S>&, const Tensor<uint8_t>* mask) {
      if (mask) {
        for (uint8_t m : mask->data) n += m ? 1 : 0;
      } else {
        n += static_cast<int64_t>(v.numel());
      }
    });
    return n;
  }
};

namespace detail {

// Initial weights for a masked kernel: zero-mean normals scaled by the
// unmasked fan-in of each output channel, drawn in flat index order over the
// unmasked positions only (masked entries never consume randomness).
template <class S>
void init_conv(ConvUnit<S>& unit, Rng& rng) {
  auto& kern = unit.kernel;
  kern.finalize();
  const int Co = kern.out_channels(), Ci = kern.in_channels(), k = kern.ksize();
  unit.grad = Tensor<S>({Co, Ci, k, k});
  for (int o = 0; o < Co; ++o) {
    const int64_t fan = kern.ones_count[o];
    const double std = fan > 0 ? std::sqrt(2.0 / static_cast<double>(fan)) : 0.0;
    for (int i = 0; i < Ci; ++i)
      for (int p = 0; p < k * k; ++p) {
        const size_t idx = (static_cast<size_t>(o) * Ci + i) * k * k + p;
        kern.weights.data[idx] = kern.mask.data[idx] ? static_cast<S>(rng.normal() * std) : S(0);
      }
  }
}

}  // namespace detail

template <class S>
NestedModel<S> build_model(const ArchDescriptor& desc) {
  desc.validate();
  NestedModel<S> m;
  m.desc = desc;
  const int C = desc.groups, k = desc.kernel, pad = desc.kernel / 2;
  if (desc.input_grouped) m.input_spec = GroupSpec::proportional(desc.input_channels, C);
  m.stage_specs.reserve(desc.num_stages());
  for (int w : desc.stage_widths) m.stage_specs.push_back(GroupSpec::proportional(w, C));

  Rng rng(desc.seed);

  // Stem: 3x3 stride-1 conv from the raw input into stage 0's width.
  const int w0 = desc.stage_widths[0];
  m.stem_conv.kernel.weights = Tensor<S>({w0, desc.input_channels, k, k});
  m.stem_conv.kernel.mask = desc.input_grouped ? build_mask(m.input_spec, m.stage_specs[0], k)
                                               : dense_mask(w0, desc.input_channels, k);
  m.stem_conv.kernel.stride = 1;
  m.stem_conv.kernel.padding = pad;
  detail::init_conv(m.stem_conv, rng);
  m.stem_bn.init(w0);

  // Residual blocks; the first block of every later stage downsamples by 2
  // and widens, which forces a masked 1x1 projection shortcut.
  for (int s = 0; s < desc.num_stages(); ++s) {
    for (int j = 0; j < desc.stage_blocks[s]; ++j) {
      ResidualBlockNet<S> blk;
      blk.stage = s;
      const bool transition = (j == 0 && s > 0);
      blk.in_stage = transition ? s - 1 : s;
      const int cin = desc.stage_widths[blk.in_stage];
      const int cout = desc.stage_widths[s];
      const int stride = transition ? 2 : 1;

      blk.conv1.kernel.weights = Tensor<S>({cout, cin, k, k});
      blk.conv1.kernel.mask = build_mask(m.stage_specs[blk.in_stage], m.stage_specs[s], k);
      blk.conv1.kernel.stride = stride;
      blk.conv1.kernel.padding = pad;
      detail::init_conv(blk.conv1, rng);
      blk.bn1.init(cout);

      blk.conv2.kernel.weights = Tensor<S>({cout, cout, k, k});
      blk.conv2.kernel.mask = build_mask(m.stage_specs[s], m.stage_specs[s], k);
      blk.conv2.kernel.stride = 1;
      blk.conv2.kernel.padding = pad;
      detail::init_conv(blk.conv2, rng);
      blk.bn2.init(cout);

      if (transition) {
        blk.has_proj = true;
        blk.proj.kernel.weights = Tensor<S>({cout, cin, 1, 1});
        blk.proj.kernel.mask = build_mask(m.stage_specs[blk.in_stage], m.stage_specs[s], 1);
        blk.proj.kernel.stride = stride;
        blk.proj.kernel.padding = 0;
        detail::init_conv(blk.proj, rng);
      }
      m.blocks.push_back(std::move(blk));
    }
  }

  // Classifier sites: one per block (plus the optional final site on the
  // last block's features). Full-width weight matrices; cumulative heads
  // read column prefixes of them.
  const int L = desc.num_layer_groups(), N = desc.classes;
  for (int l = 0; l < L; ++l) {
    HeadUnit<S> h;
    h.block = desc.head_block(l);
    const int cl = desc.stage_widths[m.blocks[h.block].stage];
    h.w = Tensor<S>({N, cl});
    h.b = Tensor<S>({N});
    h.grad_w = Tensor<S>({N, cl});
    h.grad_b = Tensor<S>({N});
    const double std = std::sqrt(1.0 / static_cast<double>(cl));
    for (auto& v : h.w.data) v = static_cast<S>(rng.normal() * std);
    m.heads.push_back(std::move(h));
  }
  return m;
}

enum class Mode { train, eval };

template <class S>
struct BlockTrace {
  Tensor<S> x;   // block input
  Tensor<S> h1;  // conv1 output
  BatchNormCache<S> bn1;
  Tensor<S> h2;  // bn1 output (pre-activation)
  Tensor<S> h3;  // relu(h2)
  Tensor<S> h4;  // conv2 output
  BatchNormCache<S> bn2;
  Tensor<S> h5;  // bn2 output
  Tensor<S> sc;  // projection shortcut output (when present)
  Tensor<S> y;   // h5 + shortcut
  Tensor<S> a;   // relu(y), the block output
};

template <class S>
struct ForwardTrace {
  Tensor<S> input;
  Tensor<S> s1;  // stem conv output
  BatchNormCache<S> stem_bn;
  Tensor<S> s2;  // stem bn output
  Tensor<S> a0;  // relu(s2)
  std::vector<BlockTrace<S>> blocks;
  std::vector<Tensor<S>> feats;  // per head site, pooled features [B, C_l]
  bool valid = false;
};

// Full forward pass over every head: returns the logits grid [L, C, B, N].
// Grid entry (l, c) depends only on input channel groups 1..c+1 and blocks
// up to head site l — the masks plus the cumulative heads enforce this
// structurally. Train mode uses batch statistics (and fills `trace` for the
// backward pass); eval mode uses the stored running statistics.
template <class S>
Tensor<S> forward_grid(NestedModel<S>& model, const Tensor<S>& x, Mode mode,
                       ForwardTrace<S>* trace = nullptr, ForwardStats* stats = nullptr) {
  if (x.ndim() != 4)
    throw std::invalid_argument("forward: input must be [B,C,H,W], got " + shape_str(x.shape));
  if (x.dim(1) != model.desc.input_channels)
    throw std::invalid_argument("forward: input has " + std::to_string(x.dim(1)) +
                                " channels, model expects " +
                                std::to_string(model.desc.input_channels));
  if (mode == Mode::train && !trace)
    throw std::invalid_argument("forward: train mode requires a trace for the backward pass");
  const int B = x.dim(0), L = model.layer_groups(), C = model.channel_groups();
  const int N = model.desc.classes;
  const S eps = static_cast<S>(kBnEps);

  Tensor<S> grid({L, C, B, N});
  if (trace) {
    *trace = ForwardTrace<S>{};
    trace->input = x;
    trace->blocks.resize(model.blocks.size());
    trace->feats.resize(L);
  }

  Tensor<S> s1 = conv2d_masked(x, model.stem_conv.kernel, -1, stats);
  Tensor<S> s2 = mode == Mode::train
                     ? batchnorm_train<S>(s1, model.stem_bn.gamma.data, model.stem_bn.beta.data,
                                          eps, trace ? &trace->stem_bn : nullptr)
                     : batchnorm_eval<S>(s1, model.stem_bn.gamma.data, model.stem_bn.beta.data,
                                         model.stem_bn.running_mean.data,
                                         model.stem_bn.running_var.data, eps);
  Tensor<S> a = relu(s2);
  if (trace) {
    trace->s1 = std::move(s1);
    trace->s2 = std::move(s2);
    trace->a0 = a;
  }

  // head site index -> block, in ascending block order
  std::vector<std::vector<int>> sites(model.blocks.size());
  for (int l = 0; l < L; ++l) sites[model.heads[l].block].push_back(l);

  for (size_t b = 0; b < model.blocks.size(); ++b) {
    auto& blk = model.blocks[b];
    BlockTrace<S> bt;
    bt.x = a;
    Tensor<S> h1 = conv2d_masked(a, blk.conv1.kernel, -1, stats);
    Tensor<S> h2 = mode == Mode::train
                       ? batchnorm_train<S>(h1, blk.bn1.gamma.data, blk.bn1.beta.data, eps,
                                            trace ? &bt.bn1 : nullptr)
                       : batchnorm_eval<S>(h1, blk.bn1.gamma.data, blk.bn1.beta.data,
                                           blk.bn1.running_mean.data, blk.bn1.running_var.data,
                                           eps);
    Tensor<S> h3 = relu(h2);
    Tensor<S> h4 = conv2d_masked(h3, blk.conv2.kernel, -1, stats);
    Tensor<S> h5 = mode == Mode::train
                       ? batchnorm_train<S>(h4, blk.bn2.gamma.data, blk.bn2.beta.data, eps,
                                            trace ? &bt.bn2 : nullptr)
                       : batchnorm_eval<S>(h4, blk.bn2.gamma.data, blk.bn2.beta.data,
                                           blk.bn2.running_mean.data, blk.bn2.running_var.data,
                                           eps);
    Tensor<S> y = h5;  // copy, then add the shortcut elementwise
    if (blk.has_proj) {
      Tensor<S> sc = conv2d_masked(a, blk.proj.kernel, -1, stats);
      for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += sc.data[i];
      if (trace) bt.sc = std::move(sc);
    } else {
      for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += a.data[i];
    }
    a = relu(y);
    if (trace) {
      bt.h1 = std::move(h1);
      bt.h2 = std::move(h2);
      bt.h3 = std::move(h3);
      bt.h4 = std::move(h4);
      bt.h5 = std::move(h5);
      bt.y = std::move(y);
      bt.a = a;
    }

    for (int l : sites[b]) {
      Tensor<S> f = global_avg_pool(a);
      const auto& bnd = model.spec_of_block(static_cast<int>(b)).boundaries;
      cumulative_head_forward<S>(f, model.heads[l].w, model.heads[l].b.data, bnd, &grid,
                                 static_cast<size_t>(l) * C, stats);
      if (trace) trace->feats[l] = std::move(f);
    }
    if (trace) trace->blocks[b] = std::move(bt);
  }
  if (trace) trace->valid = true;
  return grid;
}

// Restricted forward: computes head (d, w) only (1-based), touching only
// blocks up to that head's site and channels in groups 1..w. Eval mode only.
// Matches the corresponding forward_grid entry bit for bit, because every op
// here runs the same accumulation sequence on the same channel prefix.
template <class S>
Tensor<S> forward_head(NestedModel<S>& model, const Tensor<S>& x, int d, int w,
                       ForwardStats* stats = nullptr) {
  const int L = model.layer_groups(), C = model.channel_groups();
  if (d < 1 || d > L || w < 1 || w > C)
    throw std::invalid_argument("forward_head: (d,w)=(" + std::to_string(d) + "," +
                                std::to_string(w) + ") outside grid " + std::to_string(L) + "x" +
                                std::to_string(C));
  if (x.ndim() != 4 || x.dim(1) != model.desc.input_channels)
    throw std::invalid_argument("forward_head: bad input shape " + shape_str(x.shape));
  const S eps = static_cast<S>(kBnEps);
  const int last_block = model.desc.head_block(d - 1);

  const int s0_lim = model.stage_specs[0].boundaries[w - 1];
  Tensor<S> a = conv2d_masked(x, model.stem_conv.kernel, s0_lim, stats);
  a = batchnorm_eval<S>(a, std::span<const S>(model.stem_bn.gamma.data).first(s0_lim),
                        std::span<const S>(model.stem_bn.beta.data).first(s0_lim),
                        std::span<const S>(model.stem_bn.running_mean.data).first(s0_lim),
                        std::span<const S>(model.stem_bn.running_var.data).first(s0_lim), eps);
  a = relu(a);

  for (int b = 0; b <= last_block; ++b) {
    auto& blk = model.blocks[b];
    const int lim = model.spec_of_block(b).boundaries[w - 1];
    Tensor<S> h = conv2d_masked(a, blk.conv1.kernel, lim, stats);
    h = batchnorm_eval<S>(h, std::span<const S>(blk.bn1.gamma.data).first(lim),
                          std::span<const S>(blk.bn1.beta.data).first(lim),
                          std::span<const S>(blk.bn1.running_mean.data).first(lim),
                          std::span<const S>(blk.bn1.running_var.data).first(lim), eps);
    h = relu(h);
    h = conv2d_masked(h, blk.conv2.kernel, lim, stats);
    h = batchnorm_eval<S>(h, std::span<const S>(blk.bn2.gamma.data).first(lim),
                          std::span<const S>(blk.bn2.beta.data).first(lim),
                          std::span<const S>(blk.bn2.running_mean.data).first(lim),
                          std::span<const S>(blk.bn2.running_var.data).first(lim), eps);
    if (blk.has_proj) {
      Tensor<S> sc = conv2d_masked(a, blk.proj.kernel, lim, stats);
      for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += sc.data[i];
    } else {
      for (size_t i = 0; i < h.data.size(); ++i) h.data[i] += a.data[i];
    }
    a = relu(h);
  }

  Tensor<S> f = global_avg_pool(a);
  const int bw = model.spec_of_block(last_block).boundaries[w - 1];
  const int B = x.dim(0), N = model.desc.classes;
  Tensor<S> snap({1, B, N});
  const int bnd[1] = {bw};
  cumulative_head_forward<S>(f, model.heads[d - 1].w, model.heads[d - 1].b.data, bnd, &snap, 0,
                             stats);
  Tensor<S> out({B, N});
  out.data = std::move(snap.data);
  return out;
}

// Accumulates parameter gradients for the given upstream grid gradient
// (dLoss/dlogits laid out [L, C, B, N]). Requires the trace produced by the
// train-mode forward on the same inputs.
template <class S>
void backward(NestedModel<S>& model, const ForwardTrace<S>& trace, const Tensor<S>& grid_grad) {
  if (!trace.valid)
    throw std::invalid_argument("backward: no forward trace (run a train-mode forward first)");
  const int L = model.layer_groups(), C = model.channel_groups();
  const int B = trace.input.dim(0), N = model.desc.classes;
  if (grid_grad.shape != std::vector<int>{L, C, B, N})
    throw std::invalid_argument("backward: grid gradient shape " + shape_str(grid_grad.shape) +
                                " does not match [L,C,B,N]");

  // Block-output gradients, filled by head backpasses and later blocks.
  std::vector<Tensor<S>> agrad(model.blocks.size());
  for (size_t b = 0; b < model.blocks.size(); ++b)
    agrad[b] = Tensor<S>(trace.blocks[b].a.shape);

  // Heads: walk channel groups high to low keeping the suffix sum of the
  // incoming logit gradients; group c's weight columns see exactly the
  // gradients of heads c..C-1, mirroring the cumulative forward.
  for (int l = 0; l < L; ++l) {
    auto& head = model.heads[l];
    const int blk = head.block;
    const auto& bnd = model.spec_of_block(blk).boundaries;
    const Tensor<S>& f = trace.feats[l];
    const int Cf = f.dim(1);
    Tensor<S> fgrad({B, Cf});
    std::vector<S> suf(static_cast<size_t>(B) * N, S(0));
    for (int c = C - 1; c >= 0; --c) {
      const S* g = grid_grad.data.data() +
                   ((static_cast<size_t>(l) * C + c) * B) * N;
      for (size_t i = 0; i < suf.size(); ++i) suf[i] += g[i];
      const int k0 = c == 0 ? 0 : bnd[c - 1], k1 = bnd[c];
      for (int b = 0; b < B; ++b) {
        const S* sb = suf.data() + static_cast<size_t>(b) * N;
        for (int n = 0; n < N; ++n) {
          const S s = sb[n];
          if (s == S(0)) continue;
          S* wrow = head.w.data.data() + static_cast<size_t>(n) * Cf;
          S* gwrow = head.grad_w.data.data() + static_cast<size_t>(n) * Cf;
          for (int k = k0; k < k1; ++k) {
            gwrow[k] += f.at2(b, k) * s;
            fgrad.at2(b, k) += wrow[k] * s;
          }
        }
      }
    }
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n) head.grad_b.data[n] += suf[static_cast<size_t>(b) * N + n];
    const auto& ash = trace.blocks[blk].a;
    global_avg_pool_backward(fgrad, ash.dim(2), ash.dim(3), agrad[blk]);
  }

  // Blocks, deepest first.
  Tensor<S> a0grad(trace.a0.shape);
  for (int b = static_cast<int>(model.blocks.size()) - 1; b >= 0; --b) {
    auto& blk = model.blocks[b];
    const auto& bt = trace.blocks[b];
    Tensor<S>& xgrad = b > 0 ? agrad[b - 1] : a0grad;

    Tensor<S> ygrad(bt.y.shape);
    relu_backward(bt.y, agrad[b], ygrad);

    Tensor<S> h4grad(bt.h4.shape);
    batchnorm_train_backward<S>(bt.bn2, blk.bn2.gamma.data, ygrad, h4grad,
                                blk.bn2.grad_gamma.data, blk.bn2.grad_beta.data);

    Tensor<S> h3grad(bt.h3.shape);
    conv2d_masked_backward(bt.h3, blk.conv2.kernel, h4grad, &blk.conv2.grad, &h3grad);

    Tensor<S> h2grad(bt.h2.shape);
    relu_backward(bt.h2, h3grad, h2grad);

    Tensor<S> h1grad(bt.h1.shape);
    batchnorm_train_backward<S>(bt.bn1, blk.bn1.gamma.data, h2grad, h1grad,
                                blk.bn1.grad_gamma.data, blk.bn1.grad_beta.data);

    conv2d_masked_backward(bt.x, blk.conv1.kernel, h1grad, &blk.conv1.grad, &xgrad);
    if (blk.has_proj) {
      conv2d_masked_backward(bt.x, blk.proj.kernel, ygrad, &blk.proj.grad, &xgrad);
    } else {
      for (size_t i = 0; i < ygrad.data.size(); ++i) xgrad.data[i] += ygrad.data[i];
    }
  }

  Tensor<S> s2grad(trace.s2.shape);
  relu_backward(trace.s2, a0grad, s2grad);
  Tensor<S> s1grad(trace.s1.shape);
  batchnorm_train_backward<S>(trace.stem_bn, model.stem_bn.gamma.data, s2grad, s1grad,
                              model.stem_bn.grad_gamma.data, model.stem_bn.grad_beta.data);
  conv2d_masked_backward(trace.input, model.stem_conv.kernel, s1grad, &model.stem_conv.grad,
                         static_cast<Tensor<S>*>(nullptr));
}

// Folds the batch statistics recorded in a train-mode trace into the running
// estimates (exponential moving average, biased variance).
template <class S>
void update_running_stats(NestedModel<S>& model, const ForwardTrace<S>& trace,
                          double momentum = kBnMomentum) {
  auto fold = [&](BatchNormUnit<S>& bn, const BatchNormCache<S>& cache) {
    const S m = static_cast<S>(momentum);
    for (size_t c = 0; c < bn.running_mean.data.size(); ++c) {
      bn.running_mean.data[c] = (S(1) - m) * bn.running_mean.data[c] + m * cache.mean[c];
      bn.running_var.data[c] = (S(1) - m) * bn.running_var.data[c] + m * cache.var[c];
    }
  };
  if (!trace.valid) throw std::invalid_argument("update_running_stats: invalid trace");
  fold(model.stem_bn, trace.stem_bn);
  for (size_t b = 0; b < model.blocks.size(); ++b) {
    fold(model.blocks[b].bn1, trace.blocks[b].bn1);
    fold(model.blocks[b].bn2, trace.blocks[b].bn2);
  }
}

// Structural copy with scalar conversion; used to re-evaluate a trained or
// fresh 32-bit model in 64-bit for gradient verification.
template <class To, class From>
NestedModel<To> model_cast(NestedModel<From>& src) {
  NestedModel<To> dst = build_model<To>(src.desc);
  dst.frozen = src.frozen;
  std::vector<Tensor<From>*> sp, sb;
  src.visit_params([&](const std::string&, Tensor<From>& v, Tensor<From>&, const Tensor<uint8_t>*) {
    sp.push_back(&v);
  });
  src.visit_buffers([&](const std::string&, Tensor<From>& v) { sb.push_back(&v); });
  size_t ip = 0, ib = 0;
  dst.visit_params([&](const std::string&, Tensor<To>& v, Tensor<To>&, const Tensor<uint8_t>*) {
    v = cast_tensor<To>(*sp[ip++]);
  });
  dst.visit_buffers([&](const std::string&, Tensor<To>& v) { v = cast_tensor<To>(*sb[ib++]); });
  return dst;
}

}  // namespace nestnet
