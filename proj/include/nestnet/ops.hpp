#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "nestnet/tensor.hpp"

namespace nestnet {

// Execution counters used for cost verification and channel-access checks.
// macs counts multiply-accumulates in convolution kernels and classifier
// matvecs; one per unmasked weight position per output pixel, padding reads
// included. Nothing else (pooling, normalization, adds) counts as a MAC.
struct ForwardStats {
  uint64_t macs = 0;
  // Per conv call, in execution order: highest input-channel index read.
  std::vector<int> conv_max_in_read;
};

// Convolution weights with a static binary mask. Masked positions contribute
// exactly zero to outputs and receive exactly zero gradient; the mask is
// fixed after finalize().
template <class S>
struct MaskedConvKernel {
  Tensor<S> weights;     // [Cout, Cin, k, k]
  Tensor<uint8_t> mask;  // same shape, entries 0/1
  int stride = 1;
  int padding = 0;

  // Derived at finalize(): per out channel, the unmasked in-channel prefix
  // when mask[o,i,:,:] is all-ones for i < prefix and all-zero beyond
  // (-1 when the mask is irregular), the unmasked position count, and the
  // highest unmasked in-channel.
  std::vector<int> in_prefix;
  std::vector<int64_t> ones_count;
  std::vector<int> max_in_channel;

  int out_channels() const { return weights.dim(0); }
  int in_channels() const { return weights.dim(1); }
  int ksize() const { return weights.dim(2); }

  void finalize() {
    if (weights.ndim() != 4)
      throw std::invalid_argument("conv kernel must be 4-d, got " + shape_str(weights.shape));
    if (mask.shape != weights.shape)
      throw std::invalid_argument("conv mask shape " + shape_str(mask.shape) +
                                  " does not match weights " + shape_str(weights.shape));
    if (weights.dim(2) != weights.dim(3))
      throw std::invalid_argument("conv kernel must be square, got " + shape_str(weights.shape));
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv stride/padding invalid");
    const int Co = out_channels(), Ci = in_channels(), k = ksize();
    in_prefix.assign(Co, 0);
    ones_count.assign(Co, 0);
    max_in_channel.assign(Co, -1);
    const int kk = k * k;
    for (int o = 0; o < Co; ++o) {
      int prefix = 0;
      bool uniform = true;
      int64_t ones = 0;
      int max_i = -1;
      for (int i = 0; i < Ci; ++i) {
        int cnt = 0;
        for (int p = 0; p < kk; ++p)
          cnt += mask.data[(static_cast<size_t>(o) * Ci + i) * kk + p] ? 1 : 0;
        ones += cnt;
        if (cnt > 0) max_i = i;
        if (cnt == kk && uniform && prefix == i)
          prefix = i + 1;
        else if (cnt != 0)
          uniform = false;
      }
      in_prefix[o] = (uniform && ones == static_cast<int64_t>(prefix) * kk) ? prefix : -1;
      ones_count[o] = ones;
      max_in_channel[o] = max_i;
    }
  }
};

inline int conv_out_extent(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

// Shared accumulation core. Iterates in-channel, then kernel row, then kernel
// column; that loop nest is the documented summation order and every forward
// path (full model, restricted heads, sliced models) must reproduce it
// exactly for the bit-equality guarantees to hold.
//
// weight_at(o, i, ky, kx) returns the stored weight; in_limit(o) gives the
// unmasked in-channel prefix for out channel o. The fast path skips kernel
// positions that fall outside the input; the instrumented path (stats != nullptr)
// executes a multiply for every position, reading zero outside the input, and
// counts each one, so the counter equals unmasked-positions x output-pixels.
template <class S, class WeightAt, class InLimit>
void conv_accumulate(const Tensor<S>& input, int out_ch, int k, int stride, int padding,
                     WeightAt&& weight_at, InLimit&& in_limit, Tensor<S>& out,
                     ForwardStats* stats) {
  const int B = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Ho = out.dim(2), Wo = out.dim(3);
  const S* in = input.data.data();
  S* op = out.data.data();
  uint64_t macs = 0;
  int max_read = -1;
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < out_ch; ++o) {
      const int ilim = in_limit(o);
      if (ilim > Ci)
        throw std::logic_error("conv: restricted input has " + std::to_string(Ci) +
                               " channels but out channel " + std::to_string(o) + " reads " +
                               std::to_string(ilim));
      if (ilim > 0) max_read = std::max(max_read, ilim - 1);
      for (int y = 0; y < Ho; ++y) {
        const int iy0 = y * stride - padding;
        for (int x = 0; x < Wo; ++x) {
          const int ix0 = x * stride - padding;
          S acc = S(0);
          if (stats) {
            for (int i = 0; i < ilim; ++i) {
              for (int ky = 0; ky < k; ++ky) {
                const int iy = iy0 + ky;
                const bool row_ok = iy >= 0 && iy < H;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ix0 + kx;
                  const S v = (row_ok && ix >= 0 && ix < W)
                                  ? in[((static_cast<size_t>(b) * Ci + i) * H + iy) * W + ix]
                                  : S(0);
                  acc += weight_at(o, i, ky, kx) * v;
                  ++macs;
                }
              }
            }
          } else {
            const int ky0 = std::max(0, -iy0), ky1 = std::min(k, H - iy0);
            const int kx0 = std::max(0, -ix0), kx1 = std::min(k, W - ix0);
            for (int i = 0; i < ilim; ++i) {
              const S* in_ch = in + (static_cast<size_t>(b) * Ci + i) * H * W;
              for (int ky = ky0; ky < ky1; ++ky) {
                const S* in_row = in_ch + static_cast<size_t>(iy0 + ky) * W + ix0;
                for (int kx = kx0; kx < kx1; ++kx) acc += weight_at(o, i, ky, kx) * in_row[kx];
              }
            }
          }
          op[((static_cast<size_t>(b) * out_ch + o) * Ho + y) * Wo + x] = acc;
        }
      }
    }
  }
  if (stats) {
    stats->macs += macs;
    stats->conv_max_in_read.push_back(max_read);
  }
}

}  // namespace detail

// Cross-correlation with weights masked by the kernel's binary mask.
// out_channel_limit < 0 computes all out channels and requires the input
// channel count to match the kernel; a non-negative limit computes only the
// first out channels and accepts an input restricted to a channel prefix.
template <class S>
Tensor<S> conv2d_masked(const Tensor<S>& input, const MaskedConvKernel<S>& kernel,
                        int out_channel_limit = -1, ForwardStats* stats = nullptr) {
  if (input.ndim() != 4)
    throw std::invalid_argument("conv2d_masked: input must be 4-d, got " + shape_str(input.shape));
  const int Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int k = kernel.ksize();
  if (out_channel_limit < 0 && Ci != kernel.in_channels())
    throw std::invalid_argument("conv2d_masked: input shape " + shape_str(input.shape) +
                                " does not match kernel " + shape_str(kernel.weights.shape));
  if (Ci > kernel.in_channels())
    throw std::invalid_argument("conv2d_masked: input has more channels (" + std::to_string(Ci) +
                                ") than kernel " + shape_str(kernel.weights.shape));
  const int out_ch = out_channel_limit < 0 ? kernel.out_channels() : out_channel_limit;
  if (out_ch > kernel.out_channels())
    throw std::invalid_argument("conv2d_masked: out channel limit exceeds kernel");
  const int Ho = conv_out_extent(H, k, kernel.stride, kernel.padding);
  const int Wo = conv_out_extent(W, k, kernel.stride, kernel.padding);
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv2d_masked: input " + shape_str(input.shape) +
                                " too small for kernel " + shape_str(kernel.weights.shape));
  Tensor<S> out({input.dim(0), out_ch, Ho, Wo});

  const int Ck = kernel.in_channels();
  const S* wp = kernel.weights.data.data();
  const uint8_t* mp = kernel.mask.data.data();
  auto weight_at = [&](int o, int i, int ky, int kx) {
    return wp[((static_cast<size_t>(o) * Ck + i) * k + ky) * k + kx];
  };
  const bool all_prefix =
      std::all_of(kernel.in_prefix.begin(), kernel.in_prefix.begin() + out_ch,
                  [](int p) { return p >= 0; });
  if (all_prefix) {
    detail::conv_accumulate(input, out_ch, k, kernel.stride, kernel.padding, weight_at,
                            [&](int o) { return kernel.in_prefix[o]; }, out, stats);
  } else {
    // Irregular mask: per-position test, same loop order. The prefix fast
    // path is unavailable; iterate every in channel but only count/execute
    // the unmasked positions.
    const int B = input.dim(0);
    const S* in = input.data.data();
    uint64_t macs = 0;
    int max_read = -1;
    for (int o = 0; o < out_ch; ++o)
      if (kernel.max_in_channel[o] >= Ci)
        throw std::logic_error("conv: mask reads channel beyond restricted input");
    for (int b = 0; b < B; ++b) {
      for (int o = 0; o < out_ch; ++o) {
        max_read = std::max(max_read, kernel.max_in_channel[o]);
        for (int y = 0; y < out.dim(2); ++y) {
          const int iy0 = y * kernel.stride - kernel.padding;
          for (int x = 0; x < out.dim(3); ++x) {
            const int ix0 = x * kernel.stride - kernel.padding;
            S acc = S(0);
            for (int i = 0; i < Ci; ++i) {
              for (int ky = 0; ky < k; ++ky) {
                const int iy = iy0 + ky;
                const bool row_ok = iy >= 0 && iy < H;
                for (int kx = 0; kx < k; ++kx) {
                  const size_t widx = ((static_cast<size_t>(o) * Ck + i) * k + ky) * k + kx;
                  if (!mp[widx]) continue;
                  const int ix = ix0 + kx;
                  const S v = (row_ok && ix >= 0 && ix < W)
                                  ? in[((static_cast<size_t>(b) * Ci + i) * H + iy) * W + ix]
                                  : S(0);
                  acc += wp[widx] * v;
                  ++macs;
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
  }
  return out;
}

// Gradients of conv2d_masked. grad_weights accumulates only at unmasked
// positions (masked entries are never written, so they stay exactly zero);
// grad_input, when non-null, is accumulated (+=).
template <class S>
void conv2d_masked_backward(const Tensor<S>& input, const MaskedConvKernel<S>& kernel,
                            const Tensor<S>& grad_out, Tensor<S>* grad_weights,
                            Tensor<S>* grad_input, int out_channel_limit = -1) {
  const int B = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int k = kernel.ksize(), s = kernel.stride, p = kernel.padding;
  const int out_ch = out_channel_limit < 0 ? kernel.out_channels() : out_channel_limit;
  const int Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  if (grad_out.dim(0) != B || grad_out.dim(1) != out_ch)
    throw std::invalid_argument("conv backward: grad_out shape " + shape_str(grad_out.shape) +
                                " mismatch");
  if (grad_weights && grad_weights->shape != kernel.weights.shape)
    throw std::invalid_argument("conv backward: grad_weights shape mismatch");
  if (grad_input && grad_input->shape != input.shape)
    throw std::invalid_argument("conv backward: grad_input shape mismatch");
  const int Ck = kernel.in_channels();
  const uint8_t* mp = kernel.mask.data.data();
  const S* wp = kernel.weights.data.data();

  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < out_ch; ++o) {
      const int prefix = kernel.in_prefix[o];
      for (int y = 0; y < Ho; ++y) {
        const int iy0 = y * s - p;
        const int ky0 = std::max(0, -iy0), ky1 = std::min(k, H - iy0);
        for (int x = 0; x < Wo; ++x) {
          const S g = grad_out.at4(b, o, y, x);
          if (g == S(0)) continue;
          const int ix0 = x * s - p;
          const int kx0 = std::max(0, -ix0), kx1 = std::min(k, W - ix0);
          const int ilim = prefix >= 0 ? std::min(prefix, Ci) : Ci;
          for (int i = 0; i < ilim; ++i) {
            for (int ky = ky0; ky < ky1; ++ky) {
              const int iy = iy0 + ky;
              for (int kx = kx0; kx < kx1; ++kx) {
                const size_t widx = ((static_cast<size_t>(o) * Ck + i) * k + ky) * k + kx;
                if (prefix < 0 && !mp[widx]) continue;
                const int ix = ix0 + kx;
                const size_t iidx = ((static_cast<size_t>(b) * Ci + i) * H + iy) * W + ix;
                if (grad_weights) grad_weights->data[widx] += g * input.data[iidx];
                if (grad_input) grad_input->data[iidx] += g * wp[widx];
              }
            }
          }
        }
      }
    }
  }
}

// Per-channel mean over spatial positions: [B,C,H,W] -> [B,C].
template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& in) {
  if (in.ndim() != 4)
    throw std::invalid_argument("global_avg_pool: input must be 4-d, got " + shape_str(in.shape));
  const int B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  Tensor<S> out({B, C});
  const S denom = static_cast<S>(H) * static_cast<S>(W);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      S acc = S(0);
      const S* p = in.data.data() + (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) acc += p[i];
      out.at2(b, c) = acc / denom;
    }
  }
  return out;
}

template <class S>
void global_avg_pool_backward(const Tensor<S>& grad_out, int H, int W, Tensor<S>& grad_in) {
  const int B = grad_out.dim(0), C = grad_out.dim(1);
  const S denom = static_cast<S>(H) * static_cast<S>(W);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S g = grad_out.at2(b, c) / denom;
      S* p = grad_in.data.data() + (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) p[i] += g;
    }
}

template <class S>
Tensor<S> relu(const Tensor<S>& in) {
  Tensor<S> out;
  out.shape = in.shape;
  out.data.resize(in.data.size());
  for (size_t i = 0; i < in.data.size(); ++i) out.data[i] = in.data[i] > S(0) ? in.data[i] : S(0);
  return out;
}

// grad_in += grad_out where the pre-activation was strictly positive.
template <class S>
void relu_backward(const Tensor<S>& pre, const Tensor<S>& grad_out, Tensor<S>& grad_in) {
  for (size_t i = 0; i < pre.data.size(); ++i)
    if (pre.data[i] > S(0)) grad_in.data[i] += grad_out.data[i];
}

// Per-channel batch normalization. Channel statistics depend only on that
// channel's activations, so every group's output is unaffected by higher
// groups. Variance is biased (divide by count) both for normalization and
// for the running estimates.
template <class S>
struct BatchNormCache {
  std::vector<S> mean, var, inv_std;
  Tensor<S> xhat;
  int reduce_count = 0;
};

template <class S>
Tensor<S> batchnorm_train(const Tensor<S>& x, std::span<const S> gamma, std::span<const S> beta,
                          S eps, BatchNormCache<S>* cache) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int n = B * H * W;
  Tensor<S> out;
  out.shape = x.shape;
  out.data.resize(x.data.size());
  std::vector<S> mean(C), var(C), inv_std(C);
  for (int c = 0; c < C; ++c) {
    S sum = S(0);
    for (int b = 0; b < B; ++b) {
      const S* p = x.data.data() + (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) sum += p[i];
    }
    const S mu = sum / static_cast<S>(n);
    S sq = S(0);
    for (int b = 0; b < B; ++b) {
      const S* p = x.data.data() + (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) {
        const S d = p[i] - mu;
        sq += d * d;
      }
    }
    const S v = sq / static_cast<S>(n);
    mean[c] = mu;
    var[c] = v;
    inv_std[c] = S(1) / std::sqrt(v + eps);
  }
  Tensor<S> xhat;
  if (cache) {
    xhat.shape = x.shape;
    xhat.data.resize(x.data.size());
  }
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const size_t base = (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) {
        const S xh = (x.data[base + i] - mean[c]) * inv_std[c];
        if (cache) xhat.data[base + i] = xh;
        out.data[base + i] = gamma[c] * xh + beta[c];
      }
    }
  if (cache) {
    cache->mean = std::move(mean);
    cache->var = std::move(var);
    cache->inv_std = std::move(inv_std);
    cache->xhat = std::move(xhat);
    cache->reduce_count = n;
  }
  return out;
}

// Inference-mode normalization from frozen statistics. Sliced models call
// this same function on their retained channels, which keeps full-vs-slice
// outputs bit-identical.
template <class S>
Tensor<S> batchnorm_eval(const Tensor<S>& x, std::span<const S> gamma, std::span<const S> beta,
                         std::span<const S> running_mean, std::span<const S> running_var, S eps) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> out;
  out.shape = x.shape;
  out.data.resize(x.data.size());
  for (int c = 0; c < C; ++c) {
    const S scale = gamma[c] / std::sqrt(running_var[c] + eps);
    const S shift = beta[c] - running_mean[c] * scale;
    for (int b = 0; b < B; ++b) {
      const size_t base = (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) out.data[base + i] = x.data[base + i] * scale + shift;
    }
  }
  return out;
}

template <class S>
void batchnorm_train_backward(const BatchNormCache<S>& cache, std::span<const S> gamma,
                              const Tensor<S>& grad_out, Tensor<S>& grad_x,
                              std::span<S> grad_gamma, std::span<S> grad_beta) {
  const int B = grad_out.dim(0), C = grad_out.dim(1), H = grad_out.dim(2), W = grad_out.dim(3);
  const int n = cache.reduce_count;
  for (int c = 0; c < C; ++c) {
    S sum_dy = S(0), sum_dy_xhat = S(0);
    for (int b = 0; b < B; ++b) {
      const size_t base = (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) {
        const S dy = grad_out.data[base + i];
        sum_dy += dy;
        sum_dy_xhat += dy * cache.xhat.data[base + i];
      }
    }
    grad_gamma[c] += sum_dy_xhat;
    grad_beta[c] += sum_dy;
    const S scale = gamma[c] * cache.inv_std[c] / static_cast<S>(n);
    for (int b = 0; b < B; ++b) {
      const size_t base = (static_cast<size_t>(b) * C + c) * H * W;
      for (int i = 0; i < H * W; ++i) {
        const S dy = grad_out.data[base + i];
        grad_x.data[base + i] +=
            scale * (static_cast<S>(n) * dy - sum_dy - cache.xhat.data[base + i] * sum_dy_xhat);
      }
    }
  }
}

template <class S>
struct CrossEntropyResult {
  S loss;
  Tensor<S> grad;  // dL/dlogits, already divided by batch size
};

// Mean over the batch of -log softmax(logits)[label], max-stabilized.
template <class S>
S cross_entropy_loss(const Tensor<S>& logits, std::span<const int> labels) {
  const int B = logits.dim(0), N = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("cross_entropy: batch size mismatch");
  S total = S(0);
  for (int b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= N)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                  " out of range [0," + std::to_string(N) + ")");
    S m = logits.at2(b, 0);
    for (int k = 1; k < N; ++k) m = std::max(m, logits.at2(b, k));
    S denom = S(0);
    for (int k = 0; k < N; ++k) denom += std::exp(logits.at2(b, k) - m);
    total += -(logits.at2(b, y) - m - std::log(denom));
  }
  return total / static_cast<S>(B);
}

template <class S>
CrossEntropyResult<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  const int B = logits.dim(0), N = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw std::invalid_argument("cross_entropy: batch size mismatch");
  CrossEntropyResult<S> res;
  res.grad = Tensor<S>({B, N});
  S total = S(0);
  for (int b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || y >= N)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                  " out of range [0," + std::to_string(N) + ")");
    S m = logits.at2(b, 0);
    for (int k = 1; k < N; ++k) m = std::max(m, logits.at2(b, k));
    S denom = S(0);
    for (int k = 0; k < N; ++k) denom += std::exp(logits.at2(b, k) - m);
    total += -(logits.at2(b, y) - m - std::log(denom));
    for (int k = 0; k < N; ++k) {
      const S p = std::exp(logits.at2(b, k) - m) / denom;
      res.grad.at2(b, k) = (p - (k == y ? S(1) : S(0))) / static_cast<S>(B);
    }
  }
  res.loss = total / static_cast<S>(B);
  return res;
}

// Cumulative classifier: starting from the bias, accumulates W[n,k]*f[b,k]
// column-ascending and snapshots the running logits at every requested
// boundary. Snapshot c therefore extends snapshot c-1 by group c's partial
// dot products, with no re-summation.
//
// f: [B, Cf] features; W: [N, Cw] with Cf <= Cw; boundaries: ascending, each
// <= Cf. Writes snapshots[g] as a [B, N] block into `out` at out_offset + g.
template <class S>
void cumulative_head_forward(const Tensor<S>& f, const Tensor<S>& W, std::span<const S> bias,
                             std::span<const int> boundaries, Tensor<S>* out, size_t out_offset,
                             ForwardStats* stats = nullptr) {
  const int B = f.dim(0), Cf = f.dim(1);
  const int N = W.dim(0), Cw = W.dim(1);
  if (Cf > Cw) throw std::invalid_argument("cumulative head: feature width exceeds weight matrix");
  const int G = static_cast<int>(boundaries.size());
  if (G == 0) throw std::invalid_argument("cumulative head: no boundaries requested");
  for (int g = 0; g < G; ++g)
    if (boundaries[g] < 1 || boundaries[g] > Cf || (g > 0 && boundaries[g] <= boundaries[g - 1]))
      throw std::invalid_argument("cumulative head: bad boundary list");
  uint64_t macs = 0;
  for (int b = 0; b < B; ++b) {
    for (int n = 0; n < N; ++n) {
      S acc = bias[n];
      const S* wrow = W.data.data() + static_cast<size_t>(n) * Cw;
      const S* frow = f.data.data() + static_cast<size_t>(b) * Cf;
      int g = 0;
      for (int k = 0; k < boundaries[G - 1]; ++k) {
        acc += wrow[k] * frow[k];
        ++macs;
        if (k + 1 == boundaries[g]) {
          // snapshot block g: [G?, B, N] layout via offset arithmetic
          out->data[(out_offset + static_cast<size_t>(g)) * B * N + static_cast<size_t>(b) * N +
                    n] = acc;
          ++g;
        }
      }
    }
  }
  if (stats) stats->macs += macs;
}

}  // namespace nestnet
