#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "nestnet/dataset.hpp"
#include "nestnet/errors.hpp"
#include "test_util.hpp"

using namespace nestnet;

namespace {

constexpr int kRecord = 1 + 3 * 32 * 32;

// Builds a batch file of hand-placed records: label byte, then 3072 pixel
// bytes in channel-major order (R plane, G plane, B plane, each 32x32).
std::string make_batch(const std::string& name, const std::vector<unsigned char>& bytes) {
  const std::string path = scratch_path(name);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  return path;
}

}  // namespace

TEST_CASE("record decoding: labels and pixel scaling") {
  std::vector<unsigned char> bytes(3 * kRecord, 0);
  // Record 0: label 7, red plane pixel (0,0) = 255, green (1,2) = 51.
  bytes[0] = 7;
  bytes[1] = 255;
  bytes[1 + 1024 + 32 + 2] = 51;
  // Record 1: label 0, blue plane pixel (31,31) = 128.
  bytes[kRecord] = 0;
  bytes[kRecord + 1 + 2 * 1024 + 1023] = 128;
  // Record 2: label 9, all pixels 17.
  bytes[2 * kRecord] = 9;
  for (int j = 0; j < 3072; ++j) bytes[2 * kRecord + 1 + j] = 17;

  Dataset ds = read_cifar_batch(make_batch("three_records.bin", bytes), 3);
  CHECK(ds.count() == 3);
  CHECK(ds.num_classes == 10);
  CHECK(ds.labels == std::vector<int>{7, 0, 9});
  CHECK(ds.images.at4(0, 0, 0, 0) == 1.0f);
  CHECK(ds.images.at4(0, 1, 1, 2) == 51.0f / 255.0f);
  CHECK(ds.images.at4(0, 2, 5, 5) == 0.0f);
  CHECK(ds.images.at4(1, 2, 31, 31) == 128.0f / 255.0f);
  CHECK(ds.images.at4(2, 0, 16, 16) == 17.0f / 255.0f);
  CHECK(ds.images.at4(2, 2, 31, 0) == 17.0f / 255.0f);
}

TEST_CASE("batch files of the wrong length are rejected with byte counts") {
  std::vector<unsigned char> bytes(2 * kRecord + 5, 0);
  const std::string path = make_batch("wrong_length.bin", bytes);
  try {
    read_cifar_batch(path, 2);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(path) != std::string::npos);
    CHECK(msg.find(std::to_string(2 * kRecord + 5)) != std::string::npos);
    CHECK(msg.find(std::to_string(2 * kRecord)) != std::string::npos);
  }
}

TEST_CASE("label bytes outside 0..9 are rejected naming the record") {
  std::vector<unsigned char> bytes(kRecord, 0);
  bytes[0] = 10;
  try {
    read_cifar_batch(make_batch("bad_label.bin", bytes), 1);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("label byte 10") != std::string::npos);
    CHECK(msg.find("record 0") != std::string::npos);
  }
}

TEST_CASE("a missing batch directory names the absent file") {
  try {
    load_cifar10_binary(scratch_path("nonexistent_cifar_dir"));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("data_batch_1.bin") != std::string::npos);
  }
}
