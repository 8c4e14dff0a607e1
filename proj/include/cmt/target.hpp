#pragma once

#include <cstdint>
#include <vector>

namespace cmt {

// Ground-truth set of pairwise-disjoint binary masks with class labels.
struct PanopticTarget {
  int64_t H = 0, W = 0;
  std::vector<std::vector<uint8_t>> masks;  // K maps, H*W each, values 0/1
  std::vector<int32_t> classes;             // K class ids

  int64_t K() const { return static_cast<int64_t>(masks.size()); }
};

// Nearest-neighbour downsample by `factor`; masks that become empty are
// dropped together with their class entry.
PanopticTarget downsample_target(const PanopticTarget& t, int64_t factor);

}  // namespace cmt
