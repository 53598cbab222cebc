#include <cmath>
#include <vector>

#include "doctest.h"
#include "nestnet/loss_weights.hpp"

using namespace nestnet;

TEST_CASE("flat weights are all ones") {
  LossWeights w = LossWeights::flat(3, 2);
  CHECK(w.values == std::vector<double>(6, 1.0));
  CHECK(w.descriptor == "flat");
}

TEST_CASE("descend gamma=2 on a 2x2 grid gives the documented matrix") {
  LossWeights w = LossWeights::descend(2, 2, 2.0);
  // gamma^{-(l+c)} with 1-based l, c.
  CHECK(w.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(w.at(0, 1) == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(w.at(1, 0) == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(w.at(1, 1) == doctest::Approx(0.0625).epsilon(1e-12));
  CHECK(w.descriptor == "descend γ=2");
}

TEST_CASE("ascend gamma=2 on a 2x2 grid gives the documented matrix") {
  LossWeights w = LossWeights::ascend(2, 2, 2.0);
  CHECK(w.at(0, 0) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(w.at(0, 1) == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(w.at(1, 0) == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(w.at(1, 1) == doctest::Approx(16.0).epsilon(1e-12));
}

TEST_CASE("gamma must exceed one for geometric families") {
  CHECK_THROWS_AS(LossWeights::descend(2, 2, 1.0), ConfigError);
  CHECK_THROWS_AS(LossWeights::descend(2, 2, 0.5), ConfigError);
  CHECK_THROWS_AS(LossWeights::ascend(2, 2, -2.0), ConfigError);
  LossWeights::descend(2, 2, 1.0001);  // barely valid
}

TEST_CASE("single_pick puts k at the target and 1 elsewhere") {
  LossWeights w = LossWeights::single_pick(4, 4, 2, 3, 100.0);
  for (int l = 0; l < 4; ++l)
    for (int c = 0; c < 4; ++c)
      CHECK(w.at(l, c) == (l == 1 && c == 2 ? 100.0 : 1.0));
  CHECK_THROWS_AS(LossWeights::single_pick(4, 4, 0, 1, 100.0), ConfigError);   // 1-based
  CHECK_THROWS_AS(LossWeights::single_pick(4, 4, 5, 1, 100.0), ConfigError);   // range
  CHECK_THROWS_AS(LossWeights::single_pick(4, 4, 2, 2, -1.0), ConfigError);    // k > 0
}

TEST_CASE("one_hot selects exactly one head") {
  LossWeights w = LossWeights::one_hot(3, 3, 2, 2);
  double sum = 0;
  for (double v : w.values) sum += v;
  CHECK(sum == 1.0);
  CHECK(w.at(1, 1) == 1.0);
}

TEST_CASE("custom validates dimensions and non-negativity") {
  CHECK_THROWS_AS(LossWeights::custom(2, 2, {1.0, 2.0, 3.0}), ConfigError);
  CHECK_THROWS_AS(LossWeights::custom(2, 2, {1.0, -2.0, 3.0, 4.0}), ConfigError);
  CHECK_THROWS_AS(LossWeights::custom(2, 2, {0.0, 0.0, 0.0, 0.0}), ConfigError);
  LossWeights w = LossWeights::custom(2, 2, {0.0, 2.0, 3.0, 4.0});
  CHECK(w.at(0, 1) == 2.0);
}

TEST_CASE("flat aggregate equals the arithmetic mean") {
  Tensor<double> grid({2, 2});
  grid.data = {1.0, 2.0, 3.0, 4.0};
  const double agg = aggregate_loss(grid, LossWeights::flat(2, 2));
  CHECK(std::abs(agg - 2.5) <= 1e-12);
}

TEST_CASE("aggregate is invariant under positive scaling of the weights") {
  Tensor<double> grid({2, 3});
  grid.data = {0.3, 1.7, 2.9, 0.01, 5.5, 0.8};
  LossWeights base = LossWeights::descend(2, 3, 2.0);
  const double ref = aggregate_loss(grid, base);
  for (double k : {1e-3, 1.0, 1e3}) {
    LossWeights scaled = base;
    for (double& v : scaled.values) v *= k;
    CHECK(std::abs(aggregate_loss(grid, scaled) - ref) <= 1e-12);
  }
}

TEST_CASE("one-hot aggregate selects that head's loss exactly") {
  Tensor<double> grid({3, 3});
  for (int i = 0; i < 9; ++i) grid.data[i] = 0.1 * (i + 1);
  const double agg = aggregate_loss(grid, LossWeights::one_hot(3, 3, 2, 3));
  CHECK(agg == grid.at2(1, 2));  // exact: sum has a single term, divided by 1
}

TEST_CASE("aggregate matches the definition on a hand-computed case") {
  Tensor<double> grid({2, 2});
  grid.data = {1.0, 2.0, 3.0, 4.0};
  LossWeights w = LossWeights::custom(2, 2, {1.0, 0.0, 0.0, 3.0});
  // (1*1 + 3*4) / 4 = 13/4
  CHECK(std::abs(aggregate_loss(grid, w) - 3.25) <= 1e-15);
}

TEST_CASE("weights must match the grid shape") {
  Tensor<double> grid({2, 2});
  CHECK_THROWS_AS(aggregate_loss(grid, LossWeights::flat(3, 2)), ConfigError);
}
