#include "nestnet/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "nestnet/errors.hpp"
#include "nestnet/rng.hpp"

namespace nestnet {

Dataset synth_bars(int count, int hw, int num_classes, double noise_sigma, uint64_t seed,
                   const std::string& split) {
  if (count < 1) throw DataError("synth_bars: count must be positive");
  if (hw < 2) throw DataError("synth_bars: image side must be >= 2");
  if (num_classes < 2 || num_classes > 4)
    throw DataError("synth_bars: supports 2..4 classes (bar orientations), got " +
                    std::to_string(num_classes));
  if (noise_sigma < 0) throw DataError("synth_bars: noise sigma must be >= 0");

  Dataset ds;
  ds.images = Tensor<float>({count, 1, hw, hw});
  ds.labels.resize(count);
  ds.num_classes = num_classes;
  ds.split = split;
  Rng rng(seed);
  const int mid = hw / 2;
  for (int i = 0; i < count; ++i) {
    const int cls = i % num_classes;
    ds.labels[i] = cls;
    float* img = ds.images.data.data() + static_cast<size_t>(i) * hw * hw;
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x) {
        float v = 0.0f;
        switch (cls) {
          case 0: v = y == mid ? 1.0f : 0.0f; break;               // horizontal bar
          case 1: v = x == mid ? 1.0f : 0.0f; break;               // vertical bar
          case 2: v = x == y ? 1.0f : 0.0f; break;                 // main diagonal
          default: v = x + y == hw - 1 ? 1.0f : 0.0f; break;       // anti-diagonal
        }
        if (noise_sigma > 0) {
          v += static_cast<float>(rng.normal() * noise_sigma);
          v = std::clamp(v, 0.0f, 1.0f);
        }
        img[static_cast<size_t>(y) * hw + x] = v;
      }
  }
  return ds;
}

Dataset read_cifar_batch(const std::string& path, int expected_records) {
  constexpr int kRecord = 1 + 3 * 32 * 32;
  const int64_t expected_bytes = static_cast<int64_t>(expected_records) * kRecord;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cifar: cannot open '" + path + "'");
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (static_cast<int64_t>(raw.size()) != expected_bytes)
    throw DataError("cifar: '" + path + "' is " + std::to_string(raw.size()) +
                    " bytes, expected " + std::to_string(expected_bytes) + " (" +
                    std::to_string(expected_records) + " records of " + std::to_string(kRecord) +
                    " bytes)");
  Dataset ds;
  ds.images = Tensor<float>({expected_records, 3, 32, 32});
  ds.labels.resize(expected_records);
  ds.num_classes = 10;
  for (int r = 0; r < expected_records; ++r) {
    const unsigned char* rec = raw.data() + static_cast<size_t>(r) * kRecord;
    const int label = rec[0];
    if (label > 9)
      throw DataError("cifar: '" + path + "' record " + std::to_string(r) + " has label byte " +
                      std::to_string(label) + " (valid range 0..9)");
    ds.labels[r] = label;
    float* dst = ds.images.data.data() + static_cast<size_t>(r) * 3 * 32 * 32;
    for (int j = 0; j < 3 * 32 * 32; ++j) dst[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  return ds;
}

std::pair<Dataset, Dataset> load_cifar10_binary(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset train;
  train.images = Tensor<float>({50000, 3, 32, 32});
  train.labels.resize(50000);
  train.num_classes = 10;
  train.split = "train";
  for (int b = 0; b < 5; ++b) {
    const std::string path = (fs::path(dir) / ("data_batch_" + std::to_string(b + 1) + ".bin")).string();
    Dataset part = read_cifar_batch(path, 10000);
    std::copy(part.images.data.begin(), part.images.data.end(),
              train.images.data.begin() + static_cast<size_t>(b) * 10000 * 3 * 32 * 32);
    std::copy(part.labels.begin(), part.labels.end(), train.labels.begin() + b * 10000);
  }
  Dataset test = read_cifar_batch((fs::path(dir) / "test_batch.bin").string(), 10000);
  test.split = "test";
  return {std::move(train), std::move(test)};
}

std::vector<std::vector<int>> epoch_batches(int count, int batch_size, uint64_t seed,
                                            int64_t epoch) {
  if (batch_size < 1 || batch_size > count)
    throw ConfigError("batches: batch size " + std::to_string(batch_size) +
                      " must be in [1, dataset count " + std::to_string(count) + "]");
  std::vector<int> perm(count);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(splitmix64(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(epoch + 1))));
  rng.shuffle(perm);
  const int nb = count / batch_size;
  std::vector<std::vector<int>> out(nb);
  for (int b = 0; b < nb; ++b)
    out[b].assign(perm.begin() + static_cast<size_t>(b) * batch_size,
                  perm.begin() + static_cast<size_t>(b + 1) * batch_size);
  return out;
}

}  // namespace nestnet
