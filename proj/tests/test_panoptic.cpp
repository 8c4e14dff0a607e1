#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "cmt/panoptic.hpp"
#include "doctest.h"

using namespace cmt;

namespace {

// 1 x W map with one segment covering columns [a, b]
PanopticMap strip_map(int64_t W, int64_t a, int64_t b, int32_t cls) {
  PanopticMap m;
  m.H = 1;
  m.W = W;
  m.segment_id.assign(static_cast<size_t>(W), 0);
  for (int64_t j = a; j <= b; ++j) m.segment_id[static_cast<size_t>(j)] = 1;
  m.segments = {{1, cls}};
  return m;
}

void check_partition(const PanopticMap& m) {
  std::set<int32_t> ids;
  for (const auto& [id, cls] : m.segments) {
    CHECK(id > 0);
    CHECK(ids.insert(id).second);  // unique segment ids
  }
  for (int32_t id : m.segment_id)
    if (id != 0) CHECK(ids.count(id) == 1);
}

}  // namespace

TEST_CASE("perfect prediction scores PQ = SQ = RQ = 1 exactly") {
  PanopticMap gt = strip_map(10, 0, 6, 1);
  PQResult r = panoptic_quality(gt, gt, {1});
  CHECK(r.pq == 1.0);
  CHECK(r.sq == 1.0);
  CHECK(r.rq == 1.0);
  CHECK(r.pq_thing == 1.0);
}

TEST_CASE("a single segment at IoU 0.6 scores PQ = 0.6 exactly") {
  PanopticMap gt = strip_map(10, 0, 9, 1);
  PanopticMap pred = strip_map(10, 0, 5, 1);  // inter 6, union 10
  PQResult r = panoptic_quality(pred, gt, {1});
  CHECK(r.sq == 0.6);
  CHECK(r.rq == 1.0);
  CHECK(r.pq == 0.6);
}

TEST_CASE("a single segment at IoU 0.4 scores PQ = 0") {
  PanopticMap gt = strip_map(10, 0, 9, 1);
  PanopticMap pred = strip_map(10, 0, 3, 1);  // inter 4, union 10
  PQResult r = panoptic_quality(pred, gt, {1});
  CHECK(r.pq == 0.0);
  REQUIRE(r.per_class.size() == 1);
  CHECK(r.per_class[0].tp == 0);
  CHECK(r.per_class[0].fp == 1);
  CHECK(r.per_class[0].fn == 1);
}

TEST_CASE("matching requires IoU strictly above one half") {
  PanopticMap gt = strip_map(10, 0, 9, 1);
  PanopticMap pred = strip_map(10, 0, 4, 1);  // inter 5, union 10 -> exactly 0.5
  CHECK(panoptic_quality(pred, gt, {1}).pq == 0.0);
  PanopticMap pred2 = strip_map(10, 0, 5, 1);  // 0.6 > 0.5
  CHECK(panoptic_quality(pred2, gt, {1}).pq == 0.6);
}

TEST_CASE("class mismatch prevents a match regardless of overlap") {
  PanopticMap gt = strip_map(10, 0, 9, 1);
  PanopticMap pred = strip_map(10, 0, 9, 2);
  PQResult r = panoptic_quality(pred, gt, {1, 2});
  CHECK(r.pq == 0.0);
}

TEST_CASE("prediction pixels over ground-truth void are not penalized") {
  PanopticMap gt = strip_map(10, 0, 4, 1);   // columns 5..9 are void
  PanopticMap pred = strip_map(10, 0, 9, 1); // spills into the void region
  PQResult r = panoptic_quality(pred, gt, {1});
  CHECK(r.sq == 1.0);
  CHECK(r.pq == 1.0);
}

TEST_CASE("the accumulator averages per class and splits thing and stuff") {
  PQAccumulator acc({1});
  PanopticMap gt1 = strip_map(10, 0, 9, 1);
  acc.add_image(strip_map(10, 0, 5, 1), gt1);  // class 1 at IoU 0.6
  PanopticMap gt2 = strip_map(10, 0, 9, 0);
  acc.add_image(gt2, gt2);  // class 0 perfect
  PQResult r = acc.result();
  REQUIRE(r.per_class.size() == 2);
  CHECK(r.pq == doctest::Approx(0.5 * (0.6 + 1.0)).epsilon(1e-12));
  CHECK(r.pq_thing == 0.6);
  CHECK(r.pq_stuff == 1.0);
}

TEST_CASE("the accumulator rejects mismatched raster sizes") {
  PQAccumulator acc({1});
  CHECK_THROWS_AS(acc.add_image(strip_map(10, 0, 1, 1), strip_map(8, 0, 1, 1)),
                  std::invalid_argument);
}

TEST_CASE("true/false positives accumulate across images") {
  PQAccumulator acc({1});
  PanopticMap gt = strip_map(10, 0, 9, 1);
  acc.add_image(gt, gt);
  acc.add_image(strip_map(10, 0, 3, 1), gt);  // IoU 0.4: fp + fn
  PQResult r = acc.result();
  REQUIRE(r.per_class.size() == 1);
  CHECK(r.per_class[0].tp == 1);
  CHECK(r.per_class[0].fp == 1);
  CHECK(r.per_class[0].fn == 1);
  // SQ 1.0 over one TP, RQ = 1 / (1 + 0.5 * 2)
  CHECK(r.pq == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("pixelwise argmax drops low-confidence and void queries") {
  // 3 queries over 4 pixels; query 2's best class is void, query 1 is low-conf
  Prediction p;
  p.H = 2;
  p.W = 2;
  p.Z = matrix(4, 3, {0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8, 0.6, 0.3, 0.1});
  p.class_probs = matrix(3, 3, {0.9, 0.05, 0.05, 0.5, 0.3, 0.2, 0.1, 0.1, 0.8});
  PanopticMap m = pixelwise_argmax(p, 0.7);
  check_partition(m);
  REQUIRE(m.segments.size() == 1);
  CHECK(m.segments[0].second == 0);          // class of query 0
  CHECK(m.segment_id[0] == m.segments[0].first);
  CHECK(m.segment_id[3] == m.segments[0].first);  // pixel 3 argmax is query 0
  CHECK(m.segment_id[1] == 0);               // best query dropped -> void
  CHECK(m.segment_id[2] == 0);
}

TEST_CASE("mask-wise merge weights pixels by class confidence") {
  // query 1 has higher confidence, so it wins the contested pixel
  Prediction p;
  p.H = 1;
  p.W = 2;
  p.Z = matrix(2, 2, {0.55, 0.45, 0.1, 0.9});
  p.class_probs = matrix(2, 3, {0.75, 0.05, 0.2, 0.95, 0.0, 0.05});
  PanopticMap m = maskwise_merge(p, 0.7, 0.0);
  check_partition(m);
  // pixel 0: q0 scores .75*.55 = .4125, q1 scores .95*.45 = .4275 -> q1 takes
  // both pixels even though q0 has the larger raw Z at pixel 0
  REQUIRE(m.segments.size() == 1);
  CHECK(m.segment_id[0] == m.segment_id[1]);
  CHECK(m.segments[0].second == 0);  // q1's argmax class
}

TEST_CASE("mask-wise merge applies the object threshold") {
  Prediction p;
  p.H = 1;
  p.W = 2;
  p.Z = matrix(2, 2, {0.9, 0.1, 0.1, 0.9});
  p.class_probs = matrix(2, 3, {0.8, 0.1, 0.1, 0.4, 0.3, 0.3});
  PanopticMap m = maskwise_merge(p, 0.7, 0.0);
  check_partition(m);
  // query 1 is dropped (max non-void prob 0.4 < 0.7); the surviving query 0
  // then claims both pixels
  REQUIRE(m.segments.size() == 1);
  CHECK(m.segments[0].second == 0);
  CHECK(m.segment_id[0] == m.segments[0].first);
  CHECK(m.segment_id[1] == m.segments[0].first);
}

TEST_CASE("mask-wise merge removes segments that lose their own region") {
  // query 1 owns pixels 0..3 at Z >= 0.5 but retains only 1..3 after the
  // confidence-weighted argmax, so its retained/owned ratio is 3/4
  Prediction p;
  p.H = 1;
  p.W = 5;
  // query 1 owns pixels 1..4 at Z >= 0.5 but loses pixel 4 to the more
  // confident query 0 in the weighted argmax: retained/owned = 3/4
  p.Z = matrix(5, 2, {0.55, 0.45, 0.42, 0.58, 0.40, 0.60, 0.05, 0.95, 0.48, 0.52});
  p.class_probs = matrix(2, 3, {0.99, 0.0, 0.01, 0.75, 0.05, 0.2});
  PanopticMap keep = maskwise_merge(p, 0.7, 0.7);
  check_partition(keep);
  CHECK(keep.segments.size() == 2);  // 0.75 >= 0.7 keeps the segment
  PanopticMap strict = maskwise_merge(p, 0.7, 0.8);
  check_partition(strict);
  // 0.75 < 0.8 drops query 1 entirely; its pixels revert to void
  REQUIRE(strict.segments.size() == 1);
  CHECK(strict.segment_id[1] == 0);
  CHECK(strict.segment_id[2] == 0);
  CHECK(strict.segment_id[3] == 0);
  CHECK(strict.segment_id[0] != 0);  // query 0 keeps its pixels
  CHECK(strict.segment_id[4] != 0);
}

TEST_CASE("degenerate thresholds keep every confident query") {
  SplitMix64 rng(11);
  Prediction p;
  p.H = 2;
  p.W = 3;
  Array raw = random_array(Shape{6, 3}, rng, 0.01, 1.0);
  for (int64_t x = 0; x < 6; ++x) {
    double s = 0;
    for (int64_t n = 0; n < 3; ++n) s += raw.at(x, n);
    for (int64_t n = 0; n < 3; ++n) raw.at(x, n) /= s;
  }
  p.Z = raw;
  p.class_probs = matrix(3, 3, {0.9, 0.05, 0.05, 0.05, 0.9, 0.05, 0.9, 0.05, 0.05});
  PanopticMap a = pixelwise_argmax(p, 0.0);
  PanopticMap b = maskwise_merge(p, 0.0, 0.0);
  check_partition(a);
  check_partition(b);
  for (int32_t id : a.segment_id) CHECK(id != 0);  // nothing voided
  for (int32_t id : b.segment_id) CHECK(id != 0);
}

TEST_CASE("target conversion adds a background segment over uncovered pixels") {
  PanopticTarget t;
  t.H = 2;
  t.W = 2;
  t.masks = {{1, 0, 0, 0}, {0, 1, 0, 0}};
  t.classes = {2, 3};
  PanopticMap m = target_to_map(t, 0);
  check_partition(m);
  REQUIRE(m.segments.size() == 3);
  CHECK(m.segments[0] == std::make_pair(1, 2));
  CHECK(m.segments[1] == std::make_pair(2, 3));
  CHECK(m.segments[2].second == 0);
  CHECK(m.segment_id == std::vector<int32_t>{1, 2, 3, 3});
  // fully covered target gets no background segment
  PanopticTarget full;
  full.H = full.W = 1;
  full.masks = {{1}};
  full.classes = {1};
  CHECK(target_to_map(full, 0).segments.size() == 1);
}

TEST_CASE("upsampling replicates blocks and preserves the segment table") {
  PanopticMap m;
  m.H = 1;
  m.W = 2;
  m.segment_id = {1, 2};
  m.segments = {{1, 1}, {2, 2}};
  PanopticMap up = upsample_map(m, 2);
  CHECK(up.H == 2);
  CHECK(up.W == 4);
  CHECK(up.segments == m.segments);
  CHECK(up.segment_id == std::vector<int32_t>{1, 1, 2, 2, 1, 1, 2, 2});
}
