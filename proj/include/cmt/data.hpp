#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmt/panoptic.hpp"
#include "cmt/target.hpp"
#include "cmt/tensor.hpp"

// Synthetic panoptic scenes (colored shapes on a stuff background) and the
// little-endian "CMTD" on-disk format shared by datasets and panoptic maps.
// All generator randomness comes from splitmix64 so datasets are bit-exact
// across platforms; see docs/format.md.

namespace cmt {

// class ids
inline constexpr int32_t kClassBackground = 0;
inline constexpr int32_t kClassRectangle = 1;
inline constexpr int32_t kClassCircle = 2;
inline constexpr int32_t kClassTriangle = 3;
inline constexpr int32_t kNumClasses = 4;
inline constexpr uint16_t kThingClassMask = 0b1110;

struct Sample {
  int64_t H = 0, W = 0;
  Array image;  // H*W x 3, values in [0,1]
  PanopticTarget target;
};

struct DatasetHeader {
  uint32_t version = 1;
  uint32_t sample_count = 0;
  uint16_t class_count = kNumClasses;
  uint16_t thing_class_mask = kThingClassMask;
};

struct GenConfig {
  int64_t H = 64, W = 64;
  int64_t max_shapes = 4;
  uint32_t shape_kinds = 0b111;  // bit 0 rectangle, 1 circle, 2 triangle
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  FormatError(const std::string& what, uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  uint64_t byte_offset;
};

Sample generate_scene(uint64_t rng_seed, const GenConfig& config);

void write_dataset(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::string& path, DatasetHeader* header = nullptr);

// PanopticMap reuses the dataset mask-section layout for golden-file tests.
void write_panoptic_map(const std::string& path, const PanopticMap& map);
PanopticMap read_panoptic_map(const std::string& path);

std::set<int32_t> thing_classes_from_mask(uint16_t mask);

}  // namespace cmt
