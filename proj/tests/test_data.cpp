#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cmt/data.hpp"
#include "doctest.h"

using namespace cmt;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) {
    path = (std::filesystem::temp_directory_path() / name).string();
  }
  ~TempFile() { std::remove(path.c_str()); }
};

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool samples_equal(const Sample& a, const Sample& b) {
  return a.H == b.H && a.W == b.W && a.image.data == b.image.data &&
         a.target.masks == b.target.masks && a.target.classes == b.target.classes;
}

}  // namespace

TEST_CASE("scene generation is deterministic in the seed") {
  GenConfig cfg;
  Sample a = generate_scene(42, cfg);
  Sample b = generate_scene(42, cfg);
  CHECK(samples_equal(a, b));
  Sample c = generate_scene(43, cfg);
  CHECK(!samples_equal(a, c));
}

TEST_CASE("generated scenes satisfy the documented invariants") {
  GenConfig cfg;
  for (uint64_t seed = 1; seed <= 300; ++seed) {
    Sample s = generate_scene(seed, cfg);
    REQUIRE(s.H == 64);
    REQUIRE(s.W == 64);
    REQUIRE(s.target.K() >= 1);
    REQUIRE(s.target.K() <= cfg.max_shapes);
    // masks are pairwise disjoint and non-empty, classes are thing classes
    std::vector<int64_t> cover(static_cast<size_t>(s.H * s.W), 0);
    for (int64_t k = 0; k < s.target.K(); ++k) {
      const int32_t cls = s.target.classes[static_cast<size_t>(k)];
      CHECK(cls >= kClassRectangle);
      CHECK(cls <= kClassTriangle);
      int64_t area = 0;
      for (size_t x = 0; x < s.target.masks[static_cast<size_t>(k)].size(); ++x)
        if (s.target.masks[static_cast<size_t>(k)][x]) {
          ++cover[x];
          ++area;
        }
      CHECK(area > 0);
    }
    for (int64_t c : cover) CHECK(c <= 1);
    for (double v : s.image.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("scene generation validates its configuration") {
  GenConfig cfg;
  cfg.H = 8;
  CHECK_THROWS_AS(generate_scene(1, cfg), std::invalid_argument);
  cfg = GenConfig{};
  cfg.max_shapes = 0;
  CHECK_THROWS_AS(generate_scene(1, cfg), std::invalid_argument);
  cfg = GenConfig{};
  cfg.max_shapes = 9;
  CHECK_THROWS_AS(generate_scene(1, cfg), std::invalid_argument);
  cfg = GenConfig{};
  cfg.shape_kinds = 0;
  CHECK_THROWS_AS(generate_scene(1, cfg), std::invalid_argument);
}

TEST_CASE("restricting shape kinds restricts the classes") {
  GenConfig cfg;
  cfg.shape_kinds = 0b010;  // circles only
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Sample s = generate_scene(seed, cfg);
    for (int32_t c : s.target.classes) CHECK(c == kClassCircle);
  }
}

TEST_CASE("dataset round trip is bit exact") {
  std::vector<Sample> samples;
  for (uint64_t seed = 1; seed <= 5; ++seed) samples.push_back(generate_scene(seed, GenConfig{}));
  TempFile f("roundtrip.cmtd");
  write_dataset(f.path, samples);
  const std::vector<char> bytes1 = slurp(f.path);

  DatasetHeader h;
  std::vector<Sample> back = read_dataset(f.path, &h);
  CHECK(h.version == 1);
  CHECK(h.sample_count == 5);
  CHECK(h.class_count == kNumClasses);
  CHECK(h.thing_class_mask == kThingClassMask);
  REQUIRE(back.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) CHECK(samples_equal(samples[i], back[i]));

  // write-read-write produces identical bytes
  TempFile f2("roundtrip2.cmtd");
  write_dataset(f2.path, back);
  CHECK(slurp(f2.path) == bytes1);
}

TEST_CASE("an empty dataset is exactly a 16-byte header") {
  TempFile f("empty.cmtd");
  write_dataset(f.path, {});
  CHECK(slurp(f.path).size() == 16);
  DatasetHeader h;
  CHECK(read_dataset(f.path, &h).empty());
  CHECK(h.sample_count == 0);
}

TEST_CASE("corrupt files raise format errors with byte offsets") {
  TempFile f("corrupt.cmtd");
  write_dataset(f.path, {generate_scene(1, GenConfig{})});
  std::vector<char> bytes = slurp(f.path);

  // bad magic reports offset 0
  std::vector<char> bad = bytes;
  bad[0] = 'X';
  std::ofstream(f.path, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
  try {
    read_dataset(f.path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.byte_offset == 0);
  }

  // unsupported version reports offset 4
  bad = bytes;
  bad[4] = 9;
  std::ofstream(f.path, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
  try {
    read_dataset(f.path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.byte_offset == 4);
  }

  // truncation reports the offset where reading stopped
  bad.assign(bytes.begin(), bytes.begin() + 40);
  std::ofstream(f.path, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
  CHECK_THROWS_AS(read_dataset(f.path), FormatError);
}

TEST_CASE("panoptic maps survive a disk round trip") {
  PanopticMap m;
  m.H = 2;
  m.W = 3;
  m.segment_id = {1, 1, 0, 2, 2, 2};
  m.segments = {{1, 1}, {2, 0}};
  TempFile f("map.bin");
  write_panoptic_map(f.path, m);
  PanopticMap back = read_panoptic_map(f.path);
  CHECK(back.H == m.H);
  CHECK(back.W == m.W);
  CHECK(back.segment_id == m.segment_id);
  CHECK(back.segments == m.segments);
}

TEST_CASE("nearest-neighbour downsampling drops masks that become empty") {
  PanopticTarget t;
  t.H = t.W = 8;
  std::vector<uint8_t> big(64, 0), tiny(64, 0);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) big[static_cast<size_t>(i * 8 + j)] = 1;
  tiny[7] = 1;  // single pixel off the sampling lattice
  t.masks = {big, tiny};
  t.classes = {1, 2};
  PanopticTarget d = downsample_target(t, 4);
  CHECK(d.H == 2);
  CHECK(d.W == 2);
  REQUIRE(d.K() == 1);  // the tiny mask vanished
  CHECK(d.classes[0] == 1);
  // factor-4 sampling reads the pixel at offset (+2, +2) in each block
  CHECK(d.masks[0] == std::vector<uint8_t>{1, 0, 0, 0});
}

TEST_CASE("thing class set decodes the bitmask") {
  CHECK(thing_classes_from_mask(kThingClassMask) == std::set<int32_t>{1, 2, 3});
  CHECK(thing_classes_from_mask(0).empty());
  CHECK(thing_classes_from_mask(0b1001) == std::set<int32_t>{0, 3});
}
