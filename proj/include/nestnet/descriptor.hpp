#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nestnet/errors.hpp"

namespace nestnet {

// Architecture description: everything needed to rebuild a model skeleton.
//
// Text form (one `key = value` per line, '#' comments, lists comma-separated):
//   stages          = 8, 16        # channel width of each stage
//   blocks          = 2, 2         # residual blocks per stage
//   groups          = 4            # channel groups C (same count at every width)
//   classes         = 3            # classifier outputs N
//   kernel          = 3            # conv kernel size (odd)
//   input_channels  = 1
//   input_grouped   = false        # partition input channels into the C groups
//   final_head_site = false        # extra classifier site after the last block
//   seed            = 7            # parameter initialization seed
struct ArchDescriptor {
  std::vector<int> stage_widths;
  std::vector<int> stage_blocks;
  int groups = 1;
  int classes = 2;
  int kernel = 3;
  int input_channels = 1;
  bool input_grouped = false;
  bool final_head_site = false;
  uint64_t seed = 0;

  int num_stages() const { return static_cast<int>(stage_widths.size()); }
  int num_blocks() const {
    int n = 0;
    for (int b : stage_blocks) n += b;
    return n;
  }
  // Classifier sites: one per residual block, plus an optional final site
  // that reuses the last block's features.
  int num_layer_groups() const { return num_blocks() + (final_head_site ? 1 : 0); }
  int head_block(int l) const { return l < num_blocks() ? l : num_blocks() - 1; }
  int stage_of_block(int b) const {
    for (int s = 0, acc = 0; s < num_stages(); ++s) {
      acc += stage_blocks[s];
      if (b < acc) return s;
    }
    throw std::invalid_argument("block index " + std::to_string(b) + " out of range");
  }
  bool block_is_first_of_later_stage(int b) const {
    int acc = 0;
    for (int s = 0; s < num_stages(); ++s) {
      if (b == acc && s > 0) return true;
      acc += stage_blocks[s];
    }
    return false;
  }

  void validate() const;

  std::string to_text() const;
  std::string to_json() const;
  static ArchDescriptor from_text(const std::string& text);
  static ArchDescriptor from_json(const std::string& json_text);
  static ArchDescriptor from_file(const std::string& path);

  // Reference desk-scale architecture: 2 stages x 2 blocks, 4 channel groups,
  // one head per block (L=4, 16 heads total).
  static ArchDescriptor toy() {
    ArchDescriptor d;
    d.stage_widths = {8, 16};
    d.stage_blocks = {2, 2};
    d.groups = 4;
    d.classes = 3;
    d.kernel = 3;
    d.input_channels = 4;
    d.input_grouped = true;
    d.final_head_site = false;
    d.seed = 11;
    return d;
  }

  bool operator==(const ArchDescriptor&) const = default;
};

}  // namespace nestnet
