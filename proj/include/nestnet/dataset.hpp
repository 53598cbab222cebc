#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nestnet/tensor.hpp"

namespace nestnet {

struct Dataset {
  Tensor<float> images;  // [count, channels, H, W], values in [0, 1]
  std::vector<int> labels;
  int num_classes = 0;
  std::string split;  // "train" or "test"

  int count() const { return images.ndim() ? images.dim(0) : 0; }
};

// Deterministic synthetic task: each image is one oriented bar (horizontal,
// vertical, main diagonal, anti-diagonal) plus clamped Gaussian noise.
// label(i) = i mod num_classes, so classes are balanced to within one.
Dataset synth_bars(int count, int hw, int num_classes, double noise_sigma, uint64_t seed,
                   const std::string& split = "train");

// One standard binary batch file: records of 1 label byte + 3072 pixel bytes.
// Rejects files whose size is not exactly expected_records * 3073.
Dataset read_cifar_batch(const std::string& path, int expected_records);

// data_batch_1..5.bin -> 50000 train images, test_batch.bin -> 10000 test.
std::pair<Dataset, Dataset> load_cifar10_binary(const std::string& dir);

// Index batches for one epoch: a seeded permutation of [0, count) cut into
// full batches; the trailing partial batch is dropped.
std::vector<std::vector<int>> epoch_batches(int count, int batch_size, uint64_t seed,
                                            int64_t epoch);

// Copies the selected records into a batch tensor of the requested scalar
// type, preserving index order.
template <class S>
std::pair<Tensor<S>, std::vector<int>> gather_batch(const Dataset& ds,
                                                    const std::vector<int>& idx) {
  const int ch = ds.images.dim(1), H = ds.images.dim(2), W = ds.images.dim(3);
  Tensor<S> x({static_cast<int>(idx.size()), ch, H, W});
  std::vector<int> y(idx.size());
  const size_t rec = static_cast<size_t>(ch) * H * W;
  for (size_t i = 0; i < idx.size(); ++i) {
    const float* src = ds.images.data.data() + static_cast<size_t>(idx[i]) * rec;
    S* dst = x.data.data() + i * rec;
    for (size_t j = 0; j < rec; ++j) dst[j] = static_cast<S>(src[j]);
    y[i] = ds.labels[static_cast<size_t>(idx[i])];
  }
  return {std::move(x), std::move(y)};
}

}  // namespace nestnet
