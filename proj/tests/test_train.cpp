#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>
#include <vector>

#include "doctest.h"
#include "nestnet/dataset.hpp"
#include "nestnet/errors.hpp"
#include "nestnet/model.hpp"
#include "nestnet/rng.hpp"
#include "nestnet/train.hpp"

using namespace nestnet;

namespace {

ArchDescriptor bars_arch() {
  ArchDescriptor d;
  d.stage_widths = {8, 16};
  d.stage_blocks = {2, 2};
  d.groups = 4;
  d.classes = 3;
  d.kernel = 3;
  d.input_channels = 1;
  d.input_grouped = false;
  d.seed = 7;
  d.validate();
  return d;
}

std::vector<float> flatten_params(NestedModel<float>& m) {
  std::vector<float> out;
  m.visit_params([&](const std::string&, Tensor<float>& v, Tensor<float>&,
                     const Tensor<uint8_t>*) { out.insert(out.end(), v.data.begin(), v.data.end()); });
  return out;
}

}  // namespace

TEST_CASE("epoch batches partition the dataset deterministically") {
  auto b1 = epoch_batches(10, 3, 42, 0);
  auto b2 = epoch_batches(10, 3, 42, 0);
  CHECK(b1 == b2);
  REQUIRE(b1.size() == 3);  // trailing partial batch dropped
  std::set<int> seen;
  for (auto& batch : b1) {
    REQUIRE(batch.size() == 3);
    for (int i : batch) {
      CHECK(i >= 0);
      CHECK(i < 10);
      CHECK(seen.insert(i).second);  // no duplicates across the epoch
    }
  }
  CHECK(seen.size() == 9);

  auto next_epoch = epoch_batches(10, 3, 42, 1);
  CHECK(b1 != next_epoch);
  auto other_seed = epoch_batches(10, 3, 43, 0);
  CHECK(b1 != other_seed);

  auto whole = epoch_batches(6, 6, 1, 0);
  REQUIRE(whole.size() == 1);
  std::vector<int> sorted = whole[0];
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5});

  CHECK_THROWS_AS(epoch_batches(4, 5, 0, 0), ConfigError);
  CHECK_THROWS_AS(epoch_batches(4, 0, 0, 0), ConfigError);
}

TEST_CASE("synthetic bars: deterministic, balanced, exact templates at zero noise") {
  Dataset a = synth_bars(60, 8, 3, 0.1, 5);
  Dataset b = synth_bars(60, 8, 3, 0.1, 5);
  CHECK(bit_equal(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK(a.split == "train");

  std::vector<int> per_class(3, 0);
  for (int l : a.labels) ++per_class[static_cast<size_t>(l)];
  CHECK(per_class == std::vector<int>{20, 20, 20});

  Dataset clean = synth_bars(4, 8, 4, 0.0, 1, "test");
  CHECK(clean.split == "test");
  // class 0: horizontal bar on row hw/2
  for (int x = 0; x < 8; ++x) {
    CHECK(clean.images.at4(0, 0, 4, x) == 1.0f);
    CHECK(clean.images.at4(0, 0, 0, x) == 0.0f);
  }
  // class 1: vertical bar on column hw/2
  CHECK(clean.images.at4(1, 0, 3, 4) == 1.0f);
  CHECK(clean.images.at4(1, 0, 3, 3) == 0.0f);
  // class 2: main diagonal; class 3: anti-diagonal
  CHECK(clean.images.at4(2, 0, 5, 5) == 1.0f);
  CHECK(clean.images.at4(3, 0, 2, 5) == 1.0f);

  CHECK_THROWS_AS(synth_bars(10, 8, 1, 0, 0), DataError);
  CHECK_THROWS_AS(synth_bars(10, 8, 5, 0, 0), DataError);
  CHECK_THROWS_AS(synth_bars(0, 8, 3, 0, 0), DataError);
}

TEST_CASE("per-head losses equal standalone cross entropy on each head's logits") {
  Rng rng(77);
  Tensor<float> grid({2, 3, 4, 5});
  for (auto& v : grid.data) v = static_cast<float>(rng.normal());
  std::vector<int> labels = {0, 3, 1, 4};
  HeadLossResult<float> hl = head_losses<float>(grid, labels);
  for (int l = 0; l < 2; ++l)
    for (int c = 0; c < 3; ++c) {
      Tensor<float> logits({4, 5});
      std::copy_n(grid.data.data() + ((static_cast<size_t>(l) * 3 + c) * 4) * 5, 20,
                  logits.data.begin());
      CrossEntropyResult<float> ce = softmax_cross_entropy<float>(logits, labels);
      CHECK(hl.loss_grid.at2(l, c) == ce.loss);
      for (size_t i = 0; i < 20; ++i)
        CHECK(hl.grad.data[((static_cast<size_t>(l) * 3 + c) * 4) * 5 + i] == ce.grad.data[i]);
    }
}

TEST_CASE("default decay schedule steps down at 60% and 80%") {
  auto d = TrainConfig::default_decay(2000);
  REQUIRE(d.size() == 2);
  CHECK(d[0] == std::pair<int64_t, double>{1200, 0.1});
  CHECK(d[1] == std::pair<int64_t, double>{1600, 0.1});
}

TEST_CASE("training on bars reduces the aggregate loss and fits the full head") {
  NestedModel<float> m = build_model<float>(bars_arch());
  Dataset train_set = synth_bars(600, 8, 3, 0.1, 7);
  Dataset test_set = synth_bars(300, 8, 3, 0.1, 8, "test");
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch = 64;
  cfg.lr = 0.05;
  cfg.seed = 7;
  cfg.eval_every = 100;
  cfg.decay = TrainConfig::default_decay(cfg.steps);
  MetricsLog log = train(m, train_set, &test_set, cfg, LossWeights::flat(4, 4));
  REQUIRE(log.entries.size() == 3);
  CHECK(log.entries.front().step == 100);
  CHECK(log.entries.back().step == 300);
  CHECK(log.entries.back().aggregate < log.entries.front().aggregate);
  CHECK(log.entries.back().accuracy.at2(3, 3) >= 0.85);
  CHECK(m.frozen);
  CHECK(log.lambda_descriptor == "flat");
}

TEST_CASE("identical configuration reproduces metrics and parameters bit for bit") {
  Dataset data = synth_bars(200, 8, 3, 0.1, 11);
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch = 32;
  cfg.lr = 0.05;
  cfg.seed = 3;
  cfg.eval_every = 30;
  NestedModel<float> m1 = build_model<float>(bars_arch());
  NestedModel<float> m2 = build_model<float>(bars_arch());
  MetricsLog l1 = train(m1, data, nullptr, cfg, LossWeights::descend(4, 4, 2.0));
  MetricsLog l2 = train(m2, data, nullptr, cfg, LossWeights::descend(4, 4, 2.0));
  REQUIRE(l1.entries.size() == l2.entries.size());
  for (size_t i = 0; i < l1.entries.size(); ++i) {
    CHECK(bit_equal(l1.entries[i].loss, l2.entries[i].loss));
    CHECK(bit_equal(l1.entries[i].accuracy, l2.entries[i].accuracy));
    CHECK(l1.entries[i].aggregate == l2.entries[i].aggregate);
  }
  CHECK(flatten_params(m1) == flatten_params(m2));
}

TEST_CASE("one-hot weighting trains only its cone; everything else is bit-identical") {
  NestedModel<float> m = build_model<float>(bars_arch());
  // Snapshot initial parameter tensors by name.
  std::vector<std::pair<std::string, std::vector<float>>> init;
  m.visit_params([&](const std::string& n, Tensor<float>& v, Tensor<float>&,
                     const Tensor<uint8_t>*) { init.emplace_back(n, v.data); });

  Dataset data = synth_bars(200, 8, 3, 0.1, 13);
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.batch = 32;
  cfg.lr = 0.05;
  cfg.seed = 5;
  train(m, data, nullptr, cfg, LossWeights::one_hot(4, 4, 2, 2));

  const int last_block = m.desc.head_block(1);  // depth d=2 ends here
  const int w_boundary = m.stage_specs[0].boundaries[1];  // width w=2 retains this prefix
  size_t i = 0;
  m.visit_params([&](const std::string& n, Tensor<float>& v, Tensor<float>&,
                     const Tensor<uint8_t>*) {
    REQUIRE(init[i].first == n);
    const std::vector<float>& before = init[i].second;
    ++i;
    bool out_of_cone = false;
    for (size_t b = static_cast<size_t>(last_block) + 1; b < m.blocks.size(); ++b)
      if (n.rfind("block" + std::to_string(b) + ".", 0) == 0) out_of_cone = true;
    for (size_t l = 0; l < m.heads.size(); ++l)
      if (l != 1 && n.rfind("head" + std::to_string(l) + ".", 0) == 0) out_of_cone = true;
    if (out_of_cone) {
      INFO("tensor ", n);
      CHECK(std::memcmp(before.data(), v.data.data(), v.numel() * sizeof(float)) == 0);
    }
    if (n == "head1.w") CHECK(before != v.data);
  });

  // Channel-level causality inside retained blocks: out-channel rows beyond
  // the trained width boundary feed only zero-weighted heads, so they keep
  // their initial bits too.
  auto rows_unchanged = [&](const Tensor<float>& now, const std::vector<float>& before,
                            int from_row) {
    const size_t per_row = now.numel() / static_cast<size_t>(now.dim(0));
    return std::memcmp(before.data() + from_row * per_row, now.data.data() + from_row * per_row,
                       (now.dim(0) - from_row) * per_row * sizeof(float)) == 0;
  };
  size_t j = 0;
  m.visit_params([&](const std::string& n, Tensor<float>& v, Tensor<float>&,
                     const Tensor<uint8_t>*) {
    if (n == "block0.conv1.w" || n == "block0.conv2.w")
      CHECK(rows_unchanged(v, init[j].second, w_boundary));
    ++j;
  });
}

TEST_CASE("weight decay shrinks parameters relative to a decay-free run") {
  Dataset data = synth_bars(128, 8, 3, 0.1, 17);
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch = 32;
  cfg.lr = 0.05;
  cfg.seed = 9;
  NestedModel<float> plain = build_model<float>(bars_arch());
  NestedModel<float> decayed = build_model<float>(bars_arch());
  train(plain, data, nullptr, cfg, LossWeights::flat(4, 4));
  cfg.weight_decay = 0.05;
  train(decayed, data, nullptr, cfg, LossWeights::flat(4, 4));
  std::vector<float> a = flatten_params(plain), b = flatten_params(decayed);
  CHECK(a != b);
  double na = 0, nb = 0;
  for (float v : a) na += static_cast<double>(v) * v;
  for (float v : b) nb += static_cast<double>(v) * v;
  CHECK(nb < na);
}

TEST_CASE("non-finite aggregate loss aborts with a divergence diagnostic") {
  Dataset data = synth_bars(128, 8, 3, 0.1, 19);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 32;
  cfg.lr = 0.05;
  cfg.seed = 1;
  NestedModel<float> m = build_model<float>(bars_arch());
  // Plant a NaN where no rectifier can swallow it (relu maps NaN to 0, so a
  // poisoned normalization shift never reaches the loss): a head bias feeds
  // the logits directly.
  m.heads[0].b.data[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(m, data, nullptr, cfg, LossWeights::flat(4, 4));
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("diverged at step 0") != std::string::npos);
  }
}

TEST_CASE("runaway learning rate diverges within a few dozen steps") {
  Dataset data = synth_bars(128, 8, 3, 0.1, 23);
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch = 32;
  cfg.lr = 1e8;
  cfg.seed = 2;
  NestedModel<float> m = build_model<float>(bars_arch());
  CHECK_THROWS_AS(train(m, data, nullptr, cfg, LossWeights::flat(4, 4)), DivergenceError);
}

TEST_CASE("configuration validation rejects bad settings") {
  Dataset data = synth_bars(32, 8, 3, 0.1, 29);
  NestedModel<float> m = build_model<float>(bars_arch());
  LossWeights lw = LossWeights::flat(4, 4);
  TrainConfig cfg;
  cfg.batch = 0;
  CHECK_THROWS_AS(train(m, data, nullptr, cfg, lw), ConfigError);
  cfg = TrainConfig{};
  cfg.lr = 0;
  CHECK_THROWS_AS(train(m, data, nullptr, cfg, lw), ConfigError);
  cfg = TrainConfig{};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(train(m, data, nullptr, cfg, lw), ConfigError);
  cfg = TrainConfig{};
  cfg.weight_decay = -0.1;
  CHECK_THROWS_AS(train(m, data, nullptr, cfg, lw), ConfigError);
  cfg = TrainConfig{};
  CHECK_THROWS_AS(train(m, data, nullptr, cfg, LossWeights::flat(3, 4)), ConfigError);
  // Grid mismatch aside, a batch larger than the dataset is also rejected.
  cfg.batch = 64;
  CHECK_THROWS_AS(train(m, data, nullptr, cfg, lw), ConfigError);
}
