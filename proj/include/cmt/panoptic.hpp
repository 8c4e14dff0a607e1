#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "cmt/target.hpp"
#include "cmt/tensor.hpp"

// Inference post-processing (pixel-wise argmax, mask-wise merge) and the
// PQ/SQ/RQ evaluator.

namespace cmt {

struct Prediction {
  Array Z;            // HW x N mask probabilities, rows sum to 1
  Array class_probs;  // N x (num_classes + 1), last column = void
  int64_t H = 0, W = 0;
};

struct PanopticMap {
  int64_t H = 0, W = 0;
  std::vector<int32_t> segment_id;                      // H*W, 0 = void
  std::vector<std::pair<int32_t, int32_t>> segments;    // (segment id, class id)
};

PanopticMap pixelwise_argmax(const Prediction& pred, double conf_threshold);

// (1) drop queries with max non-void class prob < object_threshold;
// (2) per pixel argmax of class_conf * Z over survivors;
// (3) drop segments with retained area / |{Z >= 0.5}| < overlap_threshold.
PanopticMap maskwise_merge(const Prediction& pred, double object_threshold,
                           double overlap_threshold);

struct PQClassRow {
  int32_t class_id = 0;
  int64_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;
  double pq = 0.0, sq = 0.0, rq = 0.0;
};

struct PQResult {
  double pq = 0.0, sq = 0.0, rq = 0.0;
  double pq_thing = 0.0, pq_stuff = 0.0;
  std::vector<PQClassRow> per_class;
};

// Accumulates per-class TP/FP/FN and IoU over images; classes are matched at
// IoU strictly > 0.5; void pixels are excluded from IoU denominators.
class PQAccumulator {
 public:
  explicit PQAccumulator(std::set<int32_t> thing_classes)
      : thing_classes_(std::move(thing_classes)) {}
  void add_image(const PanopticMap& pred, const PanopticMap& gt);
  PQResult result() const;

 private:
  std::set<int32_t> thing_classes_;
  std::vector<PQClassRow> rows_;
  PQClassRow& row(int32_t class_id);
};

PQResult panoptic_quality(const PanopticMap& pred, const PanopticMap& gt,
                          const std::set<int32_t>& thing_classes);

// Ground-truth map: one segment per target mask plus a background segment
// covering the remaining pixels.
PanopticMap target_to_map(const PanopticTarget& target, int32_t background_class);

PanopticMap upsample_map(const PanopticMap& m, int64_t factor);

}  // namespace cmt
