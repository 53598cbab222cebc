#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nestnet/loss_weights.hpp"
#include "nestnet/model.hpp"
#include "nestnet/rng.hpp"
#include "nestnet/train.hpp"

namespace nestnet {

struct FdCheckReport {
  int checked = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  double worst_analytic = 0.0, worst_fd = 0.0;
};

// Error measure: |analytic - fd| / max(1, |analytic| + |fd|). The loss is
// O(1), so flooring the denominator at 1 keeps finite-difference rounding
// noise on near-zero gradients from registering as spurious relative error
// while still flagging any real deviation of the gradient field.
inline double fd_rel_err(double analytic, double fd) {
  return std::fabs(analytic - fd) / std::max(1.0, std::fabs(analytic) + std::fabs(fd));
}

// Compares the gradients currently stored in `model` (from a backward pass
// the caller already ran) against central finite differences of the same
// λ-weighted aggregate loss. The differences are always evaluated on a
// 64-bit copy of the model at the identical parameter values, so the oracle
// resolution does not depend on the model's own precision. Samples
// `samples_per_tensor` positions per parameter tensor; masked positions are
// excluded (their gradients are structurally zero on both sides).
template <class S>
FdCheckReport fd_check_grads(NestedModel<S>& model, const Tensor<S>& x,
                             const std::vector<int>& labels, const LossWeights& lw,
                             int samples_per_tensor, uint64_t seed, double epsilon = 1e-5) {
  NestedModel<double> m64 = model_cast<double>(model);
  const Tensor<double> x64 = cast_tensor<double>(x);

  auto loss_of = [&]() -> double {
    ForwardTrace<double> tr;
    Tensor<double> grid = forward_grid(m64, x64, Mode::train, &tr);
    const int L = grid.dim(0), C = grid.dim(1), B = grid.dim(2), N = grid.dim(3);
    Tensor<double> lg({L, C});
    Tensor<double> logits({B, N});
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c) {
        const size_t off = ((static_cast<size_t>(l) * C + c) * B) * N;
        std::copy_n(grid.data.data() + off, static_cast<size_t>(B) * N, logits.data.begin());
        lg.at2(l, c) = cross_entropy_loss(logits, labels);
      }
    return aggregate_loss(lg, lw);
  };

  struct Entry {
    std::string name;
    Tensor<S>* grad;
    Tensor<double>* value64;
    const Tensor<uint8_t>* mask;
  };
  std::vector<Entry> entries;
  model.visit_params([&](const std::string& n, Tensor<S>&, Tensor<S>& g, const Tensor<uint8_t>* m) {
    entries.push_back({n, &g, nullptr, m});
  });
  size_t i = 0;
  m64.visit_params([&](const std::string&, Tensor<double>& v, Tensor<double>&,
                       const Tensor<uint8_t>*) { entries[i++].value64 = &v; });

  FdCheckReport rep;
  Rng rng(seed);
  for (auto& e : entries) {
    const size_t n = e.grad->numel();
    for (int s = 0; s < samples_per_tensor; ++s) {
      size_t idx = static_cast<size_t>(rng.below(n));
      bool found = true;
      if (e.mask) {
        int tries = 0;
        while (!e.mask->data[idx] && ++tries < 64) idx = static_cast<size_t>(rng.below(n));
        found = e.mask->data[idx] != 0;
      }
      if (!found) continue;
      const double analytic = static_cast<double>(e.grad->data[idx]);
      const double theta = e.value64->data[idx];
      e.value64->data[idx] = theta + epsilon;
      const double lp = loss_of();
      e.value64->data[idx] = theta - epsilon;
      const double lm = loss_of();
      e.value64->data[idx] = theta;
      const double fd = (lp - lm) / (2.0 * epsilon);
      const double rel = fd_rel_err(analytic, fd);
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = e.name;
        rep.worst_index = idx;
        rep.worst_analytic = analytic;
        rep.worst_fd = fd;
      }
    }
  }
  return rep;
}

// Convenience wrapper: runs the analytic forward/backward on `model` for the
// given batch, then checks those gradients against finite differences.
template <class S>
FdCheckReport fd_gradient_check(NestedModel<S>& model, const Tensor<S>& x,
                                const std::vector<int>& labels, const LossWeights& lw,
                                int samples_per_tensor, uint64_t seed, double epsilon = 1e-5) {
  ForwardTrace<S> trace;
  Tensor<S> grid = forward_grid(model, x, Mode::train, &trace);
  HeadLossResult<S> hl = head_losses<S>(grid, labels);
  const int L = grid.dim(0), C = grid.dim(1), B = grid.dim(2), N = grid.dim(3);
  const double wsum = lw.sum();
  for (int l = 0; l < L; ++l)
    for (int c = 0; c < C; ++c) {
      const S w = static_cast<S>(lw.at(l, c) / wsum);
      S* g = hl.grad.data.data() + ((static_cast<size_t>(l) * C + c) * B) * N;
      for (size_t i = 0; i < static_cast<size_t>(B) * N; ++i) g[i] *= w;
    }
  model.zero_grads();
  backward(model, trace, hl.grad);
  return fd_check_grads(model, x, labels, lw, samples_per_tensor, seed, epsilon);
}

}  // namespace nestnet
