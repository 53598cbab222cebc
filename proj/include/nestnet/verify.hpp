#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "nestnet/cost.hpp"
#include "nestnet/grad_check.hpp"
#include "nestnet/model.hpp"
#include "nestnet/select.hpp"
#include "nestnet/slice.hpp"

namespace nestnet {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline Tensor<float> random_input(const ArchDescriptor& desc, int B, int hw, Rng& rng) {
  Tensor<float> x({B, desc.input_channels, hw, hw});
  for (auto& v : x.data) v = static_cast<float>(rng.uniform());
  return x;
}

// Bitwise comparison of one grid cell: floats of entry (l, c) across the batch.
inline bool cell_bits_equal(const Tensor<float>& a, const Tensor<float>& b, int l, int c) {
  const int C = a.dim(1), B = a.dim(2), N = a.dim(3);
  const size_t off = ((static_cast<size_t>(l) * C + c) * B) * N;
  return std::memcmp(a.data.data() + off, b.data.data() + off,
                     static_cast<size_t>(B) * N * sizeof(float)) == 0;
}

}  // namespace detail

// Exact structural causality: perturbing input channel groups > w and all
// parameters beyond layer group d must leave heads (l <= d, c <= w)
// bit-identical, for every (d, w).
inline CheckResult check_causality(NestedModel<float>& model, int hw, uint64_t seed) {
  const int L = model.layer_groups(), C = model.channel_groups();
  Rng rng(seed);
  Tensor<float> x = detail::random_input(model.desc, 2, hw, rng);
  Tensor<float> base = forward_grid(model, x, Mode::eval);
  int pairs = 0, ok = 0;
  for (int d = 1; d <= L; ++d)
    for (int w = 1; w <= C; ++w) {
      NestedModel<float> pert = model;
      // Noise on every parameter of blocks past head site d, and on the
      // deeper head banks themselves.
      const int last_block = model.desc.head_block(d - 1);
      for (size_t b = last_block + 1; b < pert.blocks.size(); ++b) {
        auto poke_conv = [&](ConvUnit<float>& cu) {
          for (size_t i = 0; i < cu.kernel.weights.numel(); ++i)
            if (cu.kernel.mask.data[i])
              cu.kernel.weights.data[i] += static_cast<float>(rng.uniform() + 0.5);
        };
        poke_conv(pert.blocks[b].conv1);
        poke_conv(pert.blocks[b].conv2);
        if (pert.blocks[b].has_proj) poke_conv(pert.blocks[b].proj);
        for (auto* t : {&pert.blocks[b].bn1.gamma, &pert.blocks[b].bn1.beta,
                        &pert.blocks[b].bn2.gamma, &pert.blocks[b].bn2.beta})
          for (auto& v : t->data) v += static_cast<float>(rng.uniform() + 0.5);
      }
      for (int l = d; l < L; ++l) {
        for (auto& v : pert.heads[l].w.data) v += static_cast<float>(rng.uniform() + 0.5);
        for (auto& v : pert.heads[l].b.data) v += static_cast<float>(rng.uniform() + 0.5);
      }
      // Noise on input channels in groups > w (possible only for grouped input).
      Tensor<float> xp = x;
      if (model.desc.input_grouped) {
        const int keep = model.input_spec.boundaries[w - 1];
        const int Cin = xp.dim(1), H = xp.dim(2), Wd = xp.dim(3);
        for (int b = 0; b < xp.dim(0); ++b)
          for (int ch = keep; ch < Cin; ++ch) {
            float* p = xp.data.data() + (static_cast<size_t>(b) * Cin + ch) * H * Wd;
            for (int i = 0; i < H * Wd; ++i) p[i] += static_cast<float>(rng.uniform() + 0.5);
          }
      }
      Tensor<float> grid = forward_grid(pert, xp, Mode::eval);
      bool all_ok = true;
      for (int l = 0; l < d; ++l)
        for (int c = 0; c < w; ++c)
          if (!detail::cell_bits_equal(base, grid, l, c)) all_ok = false;
      ++pairs;
      if (all_ok) ++ok;
    }
  return {"causality", ok == pairs,
          std::to_string(ok) + "/" + std::to_string(pairs) +
              " restriction pairs bit-identical under out-of-cone perturbation"};
}

// Exact slice equivalence: forward(slice(M,d,w), x) vs forward_head(M,x,d,w),
// bitwise, over the whole grid.
inline CheckResult check_slice_equivalence(NestedModel<float>& model, int hw, int inputs,
                                           uint64_t seed) {
  NestedModel<float> frozen = model;
  frozen.frozen = true;
  const int L = frozen.layer_groups(), C = frozen.channel_groups();
  Rng rng(seed);
  int checked = 0, ok = 0;
  double worst = 0;
  for (int d = 1; d <= L; ++d)
    for (int w = 1; w <= C; ++w) {
      SlicedModel<float> sm = slice(frozen, SliceId{d, w});
      for (int i = 0; i < inputs; ++i) {
        Tensor<float> x = detail::random_input(frozen.desc, 2, hw, rng);
        Tensor<float> a = sm.forward(x);
        Tensor<float> b = forward_head(frozen, x, d, w);
        ++checked;
        if (bit_equal(a, b))
          ++ok;
        else
          worst = std::max(worst, max_abs_diff(a, b));
      }
    }
  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "%d/%d slice evaluations bit-identical (worst deviation %.3g)", ok, checked,
                worst);
  return {"slice_equivalence", ok == checked, detail};
}

inline CheckResult check_gradients(NestedModel<float>& model, int hw, uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x = detail::random_input(model.desc, 4, hw, rng);
  std::vector<int> labels(4);
  for (auto& l : labels) l = static_cast<int>(rng.below(model.desc.classes));
  LossWeights lw = LossWeights::descend(model.layer_groups(), model.channel_groups(), 2.0);
  NestedModel<float> work = model;  // gradient buffers are scratch here
  FdCheckReport rep = fd_gradient_check(work, x, labels, lw, 3, seed + 1);
  char detail[200];
  std::snprintf(detail, sizeof(detail),
                "max relative gradient error %.3g over %d samples (worst: %s)", rep.max_rel_err,
                rep.checked, rep.worst_param.c_str());
  return {"gradients", rep.checked > 0 && rep.max_rel_err <= 1e-3, detail};
}

// Analytic cost table vs the deployed artifacts themselves: parameter count
// from the sliced model's storage, MAC count from instrumented execution.
inline CheckResult check_cost_model(NestedModel<float>& model, int hw, uint64_t seed) {
  NestedModel<float> frozen = model;
  frozen.frozen = true;
  const int L = frozen.layer_groups(), C = frozen.channel_groups();
  Rng rng(seed);
  int bad = 0;
  std::string first_bad;
  for (int d = 1; d <= L; ++d)
    for (int w = 1; w <= C; ++w) {
      const SliceCost cost = slice_cost(frozen.desc, SliceId{d, w}, hw, hw);
      SlicedModel<float> sm = slice(frozen, SliceId{d, w});
      ForwardStats stats;
      Tensor<float> x = detail::random_input(frozen.desc, 1, hw, rng);
      sm.forward(x, &stats);
      const int64_t measured_params = sm.parameter_count();
      if (cost.params != measured_params || cost.macs != static_cast<int64_t>(stats.macs)) {
        ++bad;
        if (first_bad.empty())
          first_bad = " first mismatch at (" + std::to_string(d) + "," + std::to_string(w) +
                      "): analytic params " + std::to_string(cost.params) + " vs " +
                      std::to_string(measured_params) + ", analytic macs " +
                      std::to_string(cost.macs) + " vs " + std::to_string(stats.macs);
      }
    }
  // Weak monotonicity of every component along both axes.
  auto table = cost_table(frozen.desc, hw, hw);
  int non_monotone = 0;
  for (int d = 0; d < L; ++d)
    for (int w = 0; w < C; ++w) {
      const auto& c = table[static_cast<size_t>(d) * C + w];
      if (d > 0) {
        const auto& p = table[static_cast<size_t>(d - 1) * C + w];
        if (c.params < p.params || c.macs < p.macs || c.peak_activation < p.peak_activation)
          ++non_monotone;
      }
      if (w > 0) {
        const auto& p = table[static_cast<size_t>(d) * C + (w - 1)];
        if (c.params < p.params || c.macs < p.macs || c.peak_activation < p.peak_activation)
          ++non_monotone;
      }
    }
  const bool pass = bad == 0 && non_monotone == 0;
  return {"cost_model", pass,
          pass ? "analytic = measured for all " + std::to_string(L * C) +
                     " slices; all components weakly monotone"
               : std::to_string(bad) + " slices mismatched, " + std::to_string(non_monotone) +
                     " monotonicity violations" + first_bad};
}

// Random cost/score/budget instances against an independently coded argmax.
inline CheckResult check_selector(uint64_t seed, int instances = 200) {
  Rng rng(seed);
  int ok = 0;
  for (int t = 0; t < instances; ++t) {
    const int L = 1 + static_cast<int>(rng.below(5)), C = 1 + static_cast<int>(rng.below(5));
    std::vector<SliceCost> costs(static_cast<size_t>(L) * C);
    std::vector<double> scores(costs.size());
    for (size_t i = 0; i < costs.size(); ++i) {
      costs[i].params = static_cast<int64_t>(rng.below(50));
      costs[i].macs = static_cast<int64_t>(rng.below(50));
      costs[i].peak_activation = static_cast<int64_t>(rng.below(50));
      scores[i] = static_cast<double>(rng.below(10)) / 10.0;  // deliberate ties
    }
    Budget budget;
    if (rng.below(2)) budget.max_macs = static_cast<int64_t>(rng.below(60));
    if (rng.below(2)) budget.max_params = static_cast<int64_t>(rng.below(60));
    if (rng.below(2)) budget.max_peak_activation = static_cast<int64_t>(rng.below(60));

    // Oracle: explicit candidate sort.
    struct Cand {
      SliceId id;
      SliceCost c;
      double s;
    };
    std::vector<Cand> cands;
    for (int d = 1; d <= L; ++d)
      for (int w = 1; w <= C; ++w) {
        const size_t i = static_cast<size_t>(d - 1) * C + (w - 1);
        if (budget.admits(costs[i])) cands.push_back({SliceId{d, w}, costs[i], scores[i]});
      }
    std::optional<SliceId> expect;
    if (!cands.empty()) {
      std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.s != b.s) return a.s > b.s;
        if (a.c.macs != b.c.macs) return a.c.macs < b.c.macs;
        if (a.c.params != b.c.params) return a.c.params < b.c.params;
        if (a.id.d != b.id.d) return a.id.d < b.id.d;
        return a.id.w < b.id.w;
      });
      expect = cands.front().id;
    }
    if (select_slice(costs, scores, L, C, budget) == expect) ++ok;
  }
  return {"selector", ok == instances,
          std::to_string(ok) + "/" + std::to_string(instances) +
              " random instances match the exhaustive oracle"};
}

// The full battery used by the verification command.
inline std::vector<CheckResult> run_verification(NestedModel<float>& model, int hw,
                                                 uint64_t seed) {
  std::vector<CheckResult> results;
  results.push_back(check_causality(model, hw, seed));
  results.push_back(check_slice_equivalence(model, hw, 4, seed + 1));
  results.push_back(check_gradients(model, hw, seed + 2));
  results.push_back(check_cost_model(model, hw, seed + 3));
  results.push_back(check_selector(seed + 4));
  return results;
}

}  // namespace nestnet
