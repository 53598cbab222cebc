#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "nestnet/cost.hpp"
#include "nestnet/errors.hpp"
#include "nestnet/slice.hpp"

namespace nestnet {

// Unset components are unbounded.
struct Budget {
  std::optional<int64_t> max_macs;
  std::optional<int64_t> max_params;
  std::optional<int64_t> max_peak_activation;

  bool admits(const SliceCost& c) const {
    if (max_macs && c.macs > *max_macs) return false;
    if (max_params && c.params > *max_params) return false;
    if (max_peak_activation && c.peak_activation > *max_peak_activation) return false;
    return true;
  }
};

// Best feasible slice: maximum score over slices whose cost satisfies every
// bounded budget component. Ties break deterministically toward smaller
// MACs, then smaller params, then lexicographically smaller (d, w).
// Returns nothing when no slice is feasible.
inline std::optional<SliceId> select_slice(const std::vector<SliceCost>& costs,
                                           const std::vector<double>& scores, int L, int C,
                                           const Budget& budget) {
  if (costs.size() != static_cast<size_t>(L) * C || scores.size() != costs.size())
    throw ConfigError("select: cost table has " + std::to_string(costs.size()) +
                      " entries and score table " + std::to_string(scores.size()) +
                      ", expected " + std::to_string(L) + "x" + std::to_string(C));
  std::optional<SliceId> best;
  double best_score = 0;
  const SliceCost* best_cost = nullptr;
  for (int d = 1; d <= L; ++d)
    for (int w = 1; w <= C; ++w) {
      const size_t i = static_cast<size_t>(d - 1) * C + (w - 1);
      if (!budget.admits(costs[i])) continue;
      bool better;
      if (!best) {
        better = true;
      } else if (scores[i] != best_score) {
        better = scores[i] > best_score;
      } else if (costs[i].macs != best_cost->macs) {
        better = costs[i].macs < best_cost->macs;
      } else if (costs[i].params != best_cost->params) {
        better = costs[i].params < best_cost->params;
      } else {
        better = false;  // lexicographic (d, w): the earlier candidate wins
      }
      if (better) {
        best = SliceId{d, w};
        best_score = scores[i];
        best_cost = &costs[i];
      }
    }
  return best;
}

}  // namespace nestnet
