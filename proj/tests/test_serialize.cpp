#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "doctest.h"
#include "nestnet/errors.hpp"
#include "nestnet/model.hpp"
#include "nestnet/rng.hpp"
#include "nestnet/serialize.hpp"
#include "nestnet/slice.hpp"
#include "test_util.hpp"

using namespace nestnet;

namespace {

NestedModel<float> frozen_toy() {
  NestedModel<float> m = build_model<float>(ArchDescriptor::toy());
  m.frozen = true;
  return m;
}

std::string file_bytes(const std::string& path) { return read_file(path); }

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string diag_of(auto&& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("save, load, save again: byte-identical containers") {
  NestedModel<float> m = frozen_toy();
  const std::string p1 = scratch_path("roundtrip_a.nnm");
  const std::string p2 = scratch_path("roundtrip_b.nnm");
  save_model(m, p1);
  NestedModel<float> loaded = load_full_model(p1);
  save_model(loaded, p2);
  const std::string b1 = file_bytes(p1), b2 = file_bytes(p2);
  REQUIRE(!b1.empty());
  CHECK(b1 == b2);
  CHECK(loaded.frozen == m.frozen);
  CHECK(loaded.desc == m.desc);
  CHECK(peek_model_kind(p1) == kModelKindFull);
}

TEST_CASE("a loaded model slices exactly like the original") {
  NestedModel<float> m = frozen_toy();
  const std::string p = scratch_path("slice_after_load.nnm");
  save_model(m, p);
  NestedModel<float> loaded = load_full_model(p);
  Rng rng(3);
  Tensor<float> x({2, 4, 8, 8});
  for (auto& v : x.data) v = static_cast<float>(rng.uniform());
  for (int d = 1; d <= 4; d += 3)
    for (int w = 1; w <= 4; w += 3) {
      SlicedModel<float> a = slice(m, SliceId{d, w});
      SlicedModel<float> b = slice(loaded, SliceId{d, w});
      CHECK(bit_equal(a.forward(x), b.forward(x)));
    }
}

TEST_CASE("sliced containers round-trip and keep their coordinates") {
  NestedModel<float> m = frozen_toy();
  SlicedModel<float> sm = slice(m, SliceId{3, 2});
  const std::string p = scratch_path("sliced_container.nnm");
  save_model(sm, p);
  CHECK(peek_model_kind(p) == kModelKindSliced);
  SlicedModel<float> loaded = load_sliced_model(p);
  CHECK(loaded.id == SliceId{3, 2});
  CHECK(loaded.parameter_count() == sm.parameter_count());
  Rng rng(4);
  Tensor<float> x({2, 4, 8, 8});
  for (auto& v : x.data) v = static_cast<float>(rng.uniform());
  CHECK(bit_equal(loaded.forward(x), sm.forward(x)));
}

TEST_CASE("kind mismatch is reported as such") {
  NestedModel<float> m = frozen_toy();
  const std::string pf = scratch_path("kind_full.nnm");
  const std::string ps = scratch_path("kind_sliced.nnm");
  save_model(m, pf);
  save_model(slice(m, SliceId{1, 1}), ps);
  const std::string d1 = diag_of([&] { load_sliced_model(pf); });
  const std::string d2 = diag_of([&] { load_full_model(ps); });
  CHECK(d1.find("expected a sliced model") != std::string::npos);
  CHECK(d2.find("expected a full model") != std::string::npos);
}

TEST_CASE("corruption diagnostics name the failure, not just 'bad file'") {
  NestedModel<float> m = frozen_toy();
  const std::string src = scratch_path("diag_source.nnm");
  save_model(m, src);
  const std::string good = file_bytes(src);

  const std::string p = scratch_path("diag_case.nnm");

  // Truncation below the fixed header.
  write_bytes(p, good.substr(0, 10));
  std::string d = diag_of([&] { load_full_model(p); });
  CHECK(d.find("truncated") != std::string::npos);

  // Mid-file truncation trips the checksum before anything else.
  write_bytes(p, good.substr(0, good.size() / 2));
  d = diag_of([&] { load_full_model(p); });
  CHECK(d.find("checksum") != std::string::npos);

  auto restamp = [](std::string bytes) {
    const size_t body = bytes.size() - 4;
    const uint32_t c = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
    for (int i = 0; i < 4; ++i) bytes[body + i] = static_cast<char>((c >> (8 * i)) & 0xff);
    return bytes;
  };

  // Mid-file truncation with a freshly stamped checksum: the reader runs out
  // of bytes while decoding and says so.
  write_bytes(p, restamp(good.substr(0, good.size() / 2)));
  d = diag_of([&] { load_full_model(p); });
  CHECK(d.find("truncated") != std::string::npos);

  // Wrong magic.
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  write_bytes(p, bad_magic);
  d = diag_of([&] { load_full_model(p); });
  CHECK(d.find("magic") != std::string::npos);

  // Flipped payload byte: checksum failure.
  std::string flipped = good;
  flipped[good.size() / 2] = static_cast<char>(flipped[good.size() / 2] ^ 0x5a);
  write_bytes(p, flipped);
  d = diag_of([&] { load_full_model(p); });
  CHECK(d.find("checksum") != std::string::npos);

  // Unsupported version (bytes 8..11 hold the format version). The checksum
  // is verified first, so re-stamp it over the edited body.
  std::string bad_version = good;
  bad_version[8] = 42;
  write_bytes(p, restamp(bad_version));
  d = diag_of([&] { load_full_model(p); });
  CHECK(d.find("version") != std::string::npos);

  // Payload followed by garbage (checksum re-stamped so decoding proceeds).
  write_bytes(p, restamp(good.substr(0, good.size() - 4) + "junkjunk" + good.substr(good.size() - 4)));
  d = diag_of([&] { load_full_model(p); });
  CHECK(d.find("trailing") != std::string::npos);

  // Missing file.
  d = diag_of([&] { load_full_model(scratch_path("no_such_model.nnm")); });
  CHECK(!d.empty());
}

TEST_CASE("the sidecar is valid JSON describing the architecture") {
  NestedModel<float> m = frozen_toy();
  const std::string p = scratch_path("sidecar_check.nnm");
  save_model(m, p);
  REQUIRE(std::filesystem::exists(p + ".json"));
  nlohmann::json j = nlohmann::json::parse(read_file(p + ".json"));
  CHECK(j.contains("arch"));
  CHECK(j["arch"]["groups"].get<int>() == 4);
  CHECK(j["kind"] == "full");
}
