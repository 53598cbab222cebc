#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nestnet/dataset.hpp"
#include "nestnet/errors.hpp"
#include "nestnet/loss_weights.hpp"
#include "nestnet/model.hpp"

namespace nestnet {

struct TrainConfig {
  int batch = 128;
  double momentum = 0.9;
  double lr = 0.1;
  double weight_decay = 0;  // L2 coefficient; 0 leaves gradients untouched
  // (step, factor): multiply the learning rate by factor when reaching step
  // (0-based; applied before that step's update).
  std::vector<std::pair<int64_t, double>> decay;
  int64_t steps = 2000;
  uint64_t seed = 0;
  int64_t eval_every = 0;  // 0: evaluate once at the end

  // Standard desk-scale schedule: x0.1 at 60% and 80% of the run.
  static std::vector<std::pair<int64_t, double>> default_decay(int64_t steps) {
    return {{steps * 6 / 10, 0.1}, {steps * 8 / 10, 0.1}};
  }

  void check() const {
    if (batch < 1) throw ConfigError("train config: batch must be >= 1");
    if (!(lr > 0)) throw ConfigError("train config: learning rate must be positive");
    if (!(momentum >= 0 && momentum < 1))
      throw ConfigError("train config: momentum must lie in [0, 1)");
    if (steps < 0) throw ConfigError("train config: steps must be >= 0");
    if (weight_decay < 0) throw ConfigError("train config: weight decay must be >= 0");
    for (auto& [s, f] : decay)
      if (s < 0 || !(f > 0)) throw ConfigError("train config: bad decay entry");
  }
};

struct MetricsEntry {
  int64_t step = 0;
  Tensor<double> loss;      // [L, C] per-head evaluation loss
  Tensor<double> accuracy;  // [L, C] top-1
  double aggregate = 0;     // λ-weighted aggregate of the loss grid
};

struct MetricsLog {
  int L = 0, C = 0;
  std::string lambda_descriptor;
  std::vector<MetricsEntry> entries;
};

template <class S>
struct HeadLossResult {
  Tensor<S> loss_grid;  // [L, C]
  Tensor<S> grad;       // [L, C, B, N], per-head CE gradients, unweighted
};

// Cross-entropy per head over the whole grid. Entry (l, c) equals a
// standalone softmax cross-entropy on that head's logits.
template <class S>
HeadLossResult<S> head_losses(const Tensor<S>& grid, std::span<const int> labels) {
  const int L = grid.dim(0), C = grid.dim(1), B = grid.dim(2), N = grid.dim(3);
  HeadLossResult<S> res{Tensor<S>({L, C}), Tensor<S>({L, C, B, N})};
  Tensor<S> logits({B, N});
  for (int l = 0; l < L; ++l)
    for (int c = 0; c < C; ++c) {
      const size_t off = ((static_cast<size_t>(l) * C + c) * B) * N;
      std::copy_n(grid.data.data() + off, static_cast<size_t>(B) * N, logits.data.begin());
      CrossEntropyResult<S> ce = softmax_cross_entropy(logits, labels);
      res.loss_grid.at2(l, c) = ce.loss;
      std::copy_n(ce.grad.data.data(), static_cast<size_t>(B) * N, res.grad.data.begin() + off);
    }
  return res;
}

template <class S>
struct GridEval {
  Tensor<double> accuracy;  // [L, C]
  Tensor<double> loss;      // [L, C]
};

// Deterministic full-dataset evaluation in inference mode, remainder batch
// included. Per head: top-1 accuracy (first argmax wins ties) and mean loss.
template <class S>
GridEval<S> evaluate_grid(NestedModel<S>& model, const Dataset& data, int batch = 256) {
  if (data.count() < 1) throw DataError("evaluate: empty dataset");
  const int L = model.layer_groups(), C = model.channel_groups(), N = model.desc.classes;
  GridEval<S> ev{Tensor<double>({L, C}), Tensor<double>({L, C})};
  std::vector<int64_t> correct(static_cast<size_t>(L) * C, 0);
  std::vector<double> loss_sum(static_cast<size_t>(L) * C, 0.0);
  for (int start = 0; start < data.count(); start += batch) {
    const int n = std::min(batch, data.count() - start);
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = start + i;
    auto [x, y] = gather_batch<S>(data, idx);
    Tensor<S> grid = forward_grid(model, x, Mode::eval);
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c) {
        const S* block = grid.data.data() + ((static_cast<size_t>(l) * C + c) * n) * N;
        double lsum = 0;
        for (int b = 0; b < n; ++b) {
          const S* row = block + static_cast<size_t>(b) * N;
          int arg = 0;
          for (int k = 1; k < N; ++k)
            if (row[k] > row[arg]) arg = k;
          if (arg == y[b]) ++correct[static_cast<size_t>(l) * C + c];
        }
        Tensor<S> logits({n, N});
        std::copy_n(block, static_cast<size_t>(n) * N, logits.data.begin());
        lsum = static_cast<double>(cross_entropy_loss(logits, y)) * n;
        loss_sum[static_cast<size_t>(l) * C + c] += lsum;
      }
  }
  for (int l = 0; l < L; ++l)
    for (int c = 0; c < C; ++c) {
      ev.accuracy.at2(l, c) =
          static_cast<double>(correct[static_cast<size_t>(l) * C + c]) / data.count();
      ev.loss.at2(l, c) = loss_sum[static_cast<size_t>(l) * C + c] / data.count();
    }
  return ev;
}

// SGD with momentum on the λ-weighted aggregate loss. Batch order is a pure
// function of (seed, epoch); the same seed reproduces parameters and metrics
// bit for bit. Evaluation runs against eval_data when given, else the
// training set. Marks the model frozen when done.
template <class S>
MetricsLog train(NestedModel<S>& model, const Dataset& data, const Dataset* eval_data,
                 const TrainConfig& cfg, const LossWeights& lw) {
  cfg.check();
  lw.check();
  const int L = model.layer_groups(), C = model.channel_groups();
  if (lw.L != L || lw.C != C)
    throw ConfigError("train: loss weights " + std::to_string(lw.L) + "x" + std::to_string(lw.C) +
                      " do not match model grid " + std::to_string(L) + "x" + std::to_string(C));
  if (data.count() < 1) throw DataError("train: empty dataset");
  if (data.num_classes > model.desc.classes)
    throw ConfigError("train: dataset has " + std::to_string(data.num_classes) +
                      " classes, model outputs " + std::to_string(model.desc.classes));

  MetricsLog log;
  log.L = L;
  log.C = C;
  log.lambda_descriptor = lw.descriptor;

  // Normalized per-head weights (Σ of these is 1).
  const double wsum = lw.sum();
  std::vector<S> wnorm(static_cast<size_t>(L) * C);
  for (size_t i = 0; i < wnorm.size(); ++i) wnorm[i] = static_cast<S>(lw.values[i] / wsum);

  std::vector<Tensor<S>*> params, grads;
  model.visit_params([&](const std::string&, Tensor<S>& v, Tensor<S>& g, const Tensor<uint8_t>*) {
    params.push_back(&v);
    grads.push_back(&g);
  });
  std::vector<Tensor<S>> velocity(params.size());
  for (size_t i = 0; i < params.size(); ++i) velocity[i] = Tensor<S>(params[i]->shape);

  auto run_eval = [&](int64_t step) {
    GridEval<S> ev = evaluate_grid(model, eval_data ? *eval_data : data);
    MetricsEntry e;
    e.step = step;
    e.loss = ev.loss;
    e.accuracy = ev.accuracy;
    Tensor<double> lg = ev.loss;
    e.aggregate = aggregate_loss(lg, lw);
    log.entries.push_back(std::move(e));
  };

  double lr = cfg.lr;
  int64_t epoch = 0;
  std::vector<std::vector<int>> batches;
  size_t batch_cursor = 0;
  ForwardTrace<S> trace;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    if (batch_cursor == batches.size()) {
      batches = epoch_batches(data.count(), cfg.batch, cfg.seed, epoch++);
      batch_cursor = 0;
    }
    for (auto& [at, factor] : cfg.decay)
      if (at == step) lr *= factor;

    auto [x, y] = gather_batch<S>(data, batches[batch_cursor++]);
    Tensor<S> grid = forward_grid(model, x, Mode::train, &trace);
    update_running_stats(model, trace);
    HeadLossResult<S> hl = head_losses(grid, y);
    Tensor<double> lg64 = cast_tensor<double>(hl.loss_grid);
    const double agg = aggregate_loss(lg64, lw);
    if (!std::isfinite(agg))
      throw DivergenceError("training diverged at step " + std::to_string(step) +
                            ": aggregate loss is not finite");

    // Scale each head's CE gradient by its normalized λ.
    const int B = x.dim(0), N = model.desc.classes;
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c) {
        const S w = wnorm[static_cast<size_t>(l) * C + c];
        S* g = hl.grad.data.data() + ((static_cast<size_t>(l) * C + c) * B) * N;
        for (size_t i = 0; i < static_cast<size_t>(B) * N; ++i) g[i] *= w;
      }

    model.zero_grads();
    backward(model, trace, hl.grad);

    const S lrs = static_cast<S>(lr), mom = static_cast<S>(cfg.momentum);
    const S wd = static_cast<S>(cfg.weight_decay);
    for (size_t p = 0; p < params.size(); ++p) {
      S* v = velocity[p].data.data();
      const S* g = grads[p]->data.data();
      S* w = params[p]->data.data();
      const size_t n = params[p]->numel();
      // Separate decay-free path: adding a literal 0 term would still flip
      // the sign bit of negative-zero gradients and break the bit-exactness
      // guarantees around one-hot loss weights.
      if (wd != S(0)) {
        for (size_t i = 0; i < n; ++i) {
          v[i] = mom * v[i] + g[i] + wd * w[i];
          w[i] -= lrs * v[i];
        }
      } else {
        for (size_t i = 0; i < n; ++i) {
          v[i] = mom * v[i] + g[i];
          w[i] -= lrs * v[i];
        }
      }
    }

    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps)
      run_eval(step + 1);
  }
  run_eval(cfg.steps);
  model.frozen = true;
  return log;
}

}  // namespace nestnet
