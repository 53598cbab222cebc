#pragma once

#include <string>

#include "nestnet/model.hpp"
#include "nestnet/slice.hpp"

namespace nestnet {

inline constexpr int kModelKindFull = 0;
inline constexpr int kModelKindSliced = 1;

// Binary model container (all integers little-endian):
//   magic "NNETMODL" (8 bytes)
//   u32 format version (currently 1)
//   u32 kind: 0 full model, 1 sliced model
//   u64 meta length, then that many bytes of JSON (architecture descriptor,
//       kind, slice coordinates for sliced models, frozen flag)
//   u32 tensor count, then per tensor:
//     u16 name length + name bytes
//     u8 dtype (0 = float32), u8 ndim, u32 dims[ndim]
//     float32 payload, row-major
//   u32 CRC-32 of every preceding byte
// A human-readable JSON sidecar of the descriptor is written next to the
// container as <path>.json.
void save_model(NestedModel<float>& model, const std::string& path);
void save_model(const SlicedModel<float>& model, const std::string& path);

// Kind field of an existing container (validates magic/version/checksum).
int peek_model_kind(const std::string& path);

NestedModel<float> load_full_model(const std::string& path);
SlicedModel<float> load_sliced_model(const std::string& path);

}  // namespace nestnet
