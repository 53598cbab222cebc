#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "nestnet/errors.hpp"
#include "nestnet/tensor.hpp"

namespace nestnet {

namespace detail {
inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}
}  // namespace detail

// Per-head loss multipliers over the L x C grid. The aggregate loss divides
// by the sum of all entries, so only the relative pattern matters.
struct LossWeights {
  int L = 0, C = 0;
  std::vector<double> values;  // row-major [L, C]
  std::string descriptor;      // origin string echoed into metrics artifacts

  double at(int l, int c) const { return values[static_cast<size_t>(l) * C + c]; }
  double& at(int l, int c) { return values[static_cast<size_t>(l) * C + c]; }

  double sum() const {
    double s = 0;
    for (double v : values) s += v;
    return s;
  }

  void check() const {
    if (L < 1 || C < 1 || values.size() != static_cast<size_t>(L) * C)
      throw ConfigError("loss weights: bad dimensions");
    for (double v : values)
      if (!(v >= 0)) throw ConfigError("loss weights: entries must be non-negative and finite");
    if (!(sum() > 0)) throw ConfigError("loss weights: at least one entry must be positive");
  }

  static LossWeights flat(int L, int C) {
    LossWeights w{L, C, std::vector<double>(static_cast<size_t>(L) * C, 1.0), "flat"};
    w.check();
    return w;
  }

  // gamma^-(l+c) with 1-based (l, c): emphasizes the cheap corner.
  static LossWeights descend(int L, int C, double gamma) {
    require_gamma(gamma);
    LossWeights w{L, C, std::vector<double>(static_cast<size_t>(L) * C),
                  "descend γ=" + detail::fmt_g(gamma)};
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c) w.at(l, c) = std::pow(gamma, -static_cast<double>(l + c + 2));
    w.check();
    return w;
  }

  // gamma^(l+c) with 1-based (l, c): emphasizes the big corner.
  static LossWeights ascend(int L, int C, double gamma) {
    require_gamma(gamma);
    LossWeights w{L, C, std::vector<double>(static_cast<size_t>(L) * C),
                  "ascend γ=" + detail::fmt_g(gamma)};
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c) w.at(l, c) = std::pow(gamma, static_cast<double>(l + c + 2));
    w.check();
    return w;
  }

  static LossWeights custom(int L, int C, std::vector<double> table) {
    if (table.size() != static_cast<size_t>(L) * C)
      throw ConfigError("loss weights: custom table has " + std::to_string(table.size()) +
                        " entries, expected " + std::to_string(L) + "x" + std::to_string(C));
    LossWeights w{L, C, std::move(table), "custom"};
    w.check();
    return w;
  }

  // Weight k at one head (1-based target), 1 everywhere else.
  static LossWeights single_pick(int L, int C, int l_star, int c_star, double k) {
    check_target(L, C, l_star, c_star);
    if (!(k > 0)) throw ConfigError("loss weights: pick factor must be positive");
    LossWeights w{L, C, std::vector<double>(static_cast<size_t>(L) * C, 1.0),
                  "pick l=" + std::to_string(l_star) + " c=" + std::to_string(c_star) +
                      " k=" + detail::fmt_g(k)};
    w.at(l_star - 1, c_star - 1) = k;
    w.check();
    return w;
  }

  // 1 at one head (1-based target), 0 everywhere else; only that head's
  // parameter cone receives gradient.
  static LossWeights one_hot(int L, int C, int l_star, int c_star) {
    check_target(L, C, l_star, c_star);
    LossWeights w{L, C, std::vector<double>(static_cast<size_t>(L) * C, 0.0),
                  "one_hot l=" + std::to_string(l_star) + " c=" + std::to_string(c_star)};
    w.at(l_star - 1, c_star - 1) = 1.0;
    w.check();
    return w;
  }

 private:
  static void require_gamma(double gamma) {
    if (!(gamma > 1.0))
      throw ConfigError("loss weights: γ must be larger than one, got " + detail::fmt_g(gamma));
  }
  static void check_target(int L, int C, int l_star, int c_star) {
    if (l_star < 1 || l_star > L || c_star < 1 || c_star > C)
      throw ConfigError("loss weights: target (" + std::to_string(l_star) + "," +
                        std::to_string(c_star) + ") outside grid " + std::to_string(L) + "x" +
                        std::to_string(C));
  }
};

// Weighted mean of the per-head losses: sum(λ_lc * loss_lc) / sum(λ).
template <class S>
double aggregate_loss(const Tensor<S>& loss_grid, const LossWeights& lw) {
  if (loss_grid.ndim() != 2 || loss_grid.dim(0) != lw.L || loss_grid.dim(1) != lw.C)
    throw ConfigError("aggregate_loss: loss grid " + shape_str(loss_grid.shape) +
                      " does not match weights " + std::to_string(lw.L) + "x" +
                      std::to_string(lw.C));
  lw.check();
  const double denom = lw.sum();
  double acc = 0;
  for (int l = 0; l < lw.L; ++l)
    for (int c = 0; c < lw.C; ++c)
      acc += lw.at(l, c) * static_cast<double>(loss_grid.at2(l, c));
  return acc / denom;
}

}  // namespace nestnet
