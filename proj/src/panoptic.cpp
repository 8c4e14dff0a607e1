#include "cmt/panoptic.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace cmt {

namespace {

struct QueryClass {
  int64_t cls = -1;  // argmax class column (may be the void column)
  double conf = 0.0;
};

QueryClass argmax_class(const Array& class_probs, int64_t n) {
  QueryClass q;
  const int64_t C = class_probs.dim(1);
  for (int64_t c = 0; c < C; ++c)
    if (class_probs.at(n, c) > q.conf) {
      q.conf = class_probs.at(n, c);
      q.cls = c;
    }
  return q;
}

QueryClass argmax_nonvoid_class(const Array& class_probs, int64_t n) {
  QueryClass q;
  const int64_t C = class_probs.dim(1);
  for (int64_t c = 0; c < C - 1; ++c)
    if (class_probs.at(n, c) > q.conf) {
      q.conf = class_probs.at(n, c);
      q.cls = c;
    }
  return q;
}

PanopticMap from_pixel_queries(const Prediction& pred, const std::vector<int64_t>& pixel_query,
                               const std::vector<QueryClass>& qc) {
  const int64_t N = pred.Z.dim(1);
  PanopticMap out;
  out.H = pred.H;
  out.W = pred.W;
  out.segment_id.assign(static_cast<size_t>(pred.H * pred.W), 0);
  std::vector<int32_t> seg_of_query(static_cast<size_t>(N), 0);
  for (size_t x = 0; x < pixel_query.size(); ++x) {
    const int64_t n = pixel_query[x];
    if (n < 0) continue;
    if (seg_of_query[static_cast<size_t>(n)] == 0) {
      seg_of_query[static_cast<size_t>(n)] = static_cast<int32_t>(out.segments.size()) + 1;
      out.segments.emplace_back(seg_of_query[static_cast<size_t>(n)],
                                static_cast<int32_t>(qc[static_cast<size_t>(n)].cls));
    }
    out.segment_id[x] = seg_of_query[static_cast<size_t>(n)];
  }
  return out;
}

}  // namespace

PanopticMap pixelwise_argmax(const Prediction& pred, double conf_threshold) {
  const int64_t HW = pred.Z.dim(0), N = pred.Z.dim(1);
  const int64_t void_col = pred.class_probs.dim(1) - 1;
  std::vector<QueryClass> qc(static_cast<size_t>(N));
  std::vector<char> keep(static_cast<size_t>(N), 0);
  for (int64_t n = 0; n < N; ++n) {
    qc[static_cast<size_t>(n)] = argmax_class(pred.class_probs, n);
    keep[static_cast<size_t>(n)] =
        qc[static_cast<size_t>(n)].cls != void_col && qc[static_cast<size_t>(n)].conf >= conf_threshold;
  }
  std::vector<int64_t> pixel_query(static_cast<size_t>(HW), -1);
  for (int64_t x = 0; x < HW; ++x) {
    int64_t best = -1;
    double bv = -1.0;
    for (int64_t n = 0; n < N; ++n)
      if (pred.Z.at(x, n) > bv) {
        bv = pred.Z.at(x, n);
        best = n;
      }
    if (best >= 0 && keep[static_cast<size_t>(best)]) pixel_query[static_cast<size_t>(x)] = best;
  }
  return from_pixel_queries(pred, pixel_query, qc);
}

PanopticMap maskwise_merge(const Prediction& pred, double object_threshold,
                           double overlap_threshold) {
  const int64_t HW = pred.Z.dim(0), N = pred.Z.dim(1);
  std::vector<QueryClass> qc(static_cast<size_t>(N));
  std::vector<char> keep(static_cast<size_t>(N), 0);
  for (int64_t n = 0; n < N; ++n) {
    qc[static_cast<size_t>(n)] = argmax_nonvoid_class(pred.class_probs, n);
    keep[static_cast<size_t>(n)] = qc[static_cast<size_t>(n)].conf >= object_threshold;
  }
  std::vector<int64_t> pixel_query(static_cast<size_t>(HW), -1);
  for (int64_t x = 0; x < HW; ++x) {
    int64_t best = -1;
    double bv = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      if (!keep[static_cast<size_t>(n)]) continue;
      const double score = qc[static_cast<size_t>(n)].conf * pred.Z.at(x, n);
      if (score > bv) {
        bv = score;
        best = n;
      }
    }
    pixel_query[static_cast<size_t>(x)] = best;
  }
  // overlap filter: retained area vs the query's own high-confidence region
  for (int64_t n = 0; n < N; ++n) {
    if (!keep[static_cast<size_t>(n)]) continue;
    int64_t retained = 0, owned = 0;
    for (int64_t x = 0; x < HW; ++x) {
      if (pixel_query[static_cast<size_t>(x)] == n) ++retained;
      if (pred.Z.at(x, n) >= 0.5) ++owned;
    }
    const double ratio = owned > 0 ? static_cast<double>(retained) / static_cast<double>(owned) : 0.0;
    if (ratio < overlap_threshold) {
      for (int64_t x = 0; x < HW; ++x)
        if (pixel_query[static_cast<size_t>(x)] == n) pixel_query[static_cast<size_t>(x)] = -1;
      keep[static_cast<size_t>(n)] = 0;
    }
  }
  return from_pixel_queries(pred, pixel_query, qc);
}

PQClassRow& PQAccumulator::row(int32_t class_id) {
  for (auto& r : rows_)
    if (r.class_id == class_id) return r;
  rows_.push_back(PQClassRow{class_id});
  return rows_.back();
}

void PQAccumulator::add_image(const PanopticMap& pred, const PanopticMap& gt) {
  if (pred.H != gt.H || pred.W != gt.W)
    throw std::invalid_argument("panoptic_quality: raster dimension mismatch");
  const int64_t HW = pred.H * pred.W;

  std::map<int32_t, int32_t> pred_class, gt_class;
  std::map<int32_t, int64_t> pred_area, gt_area;
  for (const auto& [id, cls] : pred.segments) pred_class[id] = cls;
  for (const auto& [id, cls] : gt.segments) gt_class[id] = cls;
  std::map<std::pair<int32_t, int32_t>, int64_t> inter;
  int64_t void_gt_total = 0;
  std::map<int32_t, int64_t> pred_void_overlap;
  for (int64_t x = 0; x < HW; ++x) {
    const int32_t p = pred.segment_id[static_cast<size_t>(x)];
    const int32_t g = gt.segment_id[static_cast<size_t>(x)];
    if (p) ++pred_area[p];
    if (g) ++gt_area[g];
    if (p && g) ++inter[{p, g}];
    if (g == 0) {
      ++void_gt_total;
      if (p) ++pred_void_overlap[p];
    }
  }

  std::set<int32_t> matched_pred, matched_gt;
  for (const auto& [key, i] : inter) {
    const auto [p, g] = key;
    if (pred_class[p] != gt_class[g]) continue;
    // GT-void pixels do not count against the prediction
    const double uni = static_cast<double>(pred_area[p] - pred_void_overlap[p] + gt_area[g] - i);
    const double iou = uni > 0 ? static_cast<double>(i) / uni : 0.0;
    if (iou > 0.5) {
      PQClassRow& r = row(pred_class[p]);
      ++r.tp;
      r.iou_sum += iou;
      matched_pred.insert(p);
      matched_gt.insert(g);
    }
  }
  for (const auto& [id, cls] : gt.segments)
    if (!matched_gt.count(id)) ++row(cls).fn;
  for (const auto& [id, cls] : pred.segments)
    if (!matched_pred.count(id)) ++row(cls).fp;
}

PQResult PQAccumulator::result() const {
  PQResult res;
  int64_t n_all = 0, n_thing = 0, n_stuff = 0;
  for (PQClassRow r : rows_) {
    if (r.tp + r.fp + r.fn == 0) continue;
    r.sq = r.tp > 0 ? r.iou_sum / static_cast<double>(r.tp) : 0.0;
    r.rq = static_cast<double>(r.tp) /
           (static_cast<double>(r.tp) + 0.5 * static_cast<double>(r.fp + r.fn));
    r.pq = r.sq * r.rq;
    res.per_class.push_back(r);
    res.pq += r.pq;
    res.sq += r.sq;
    res.rq += r.rq;
    ++n_all;
    if (thing_classes_.count(r.class_id)) {
      res.pq_thing += r.pq;
      ++n_thing;
    } else {
      res.pq_stuff += r.pq;
      ++n_stuff;
    }
  }
  if (n_all) {
    res.pq /= static_cast<double>(n_all);
    res.sq /= static_cast<double>(n_all);
    res.rq /= static_cast<double>(n_all);
  }
  if (n_thing) res.pq_thing /= static_cast<double>(n_thing);
  if (n_stuff) res.pq_stuff /= static_cast<double>(n_stuff);
  std::sort(res.per_class.begin(), res.per_class.end(),
            [](const PQClassRow& a, const PQClassRow& b) { return a.class_id < b.class_id; });
  return res;
}

PQResult panoptic_quality(const PanopticMap& pred, const PanopticMap& gt,
                          const std::set<int32_t>& thing_classes) {
  PQAccumulator acc(thing_classes);
  acc.add_image(pred, gt);
  return acc.result();
}

PanopticMap target_to_map(const PanopticTarget& target, int32_t background_class) {
  PanopticMap out;
  out.H = target.H;
  out.W = target.W;
  out.segment_id.assign(static_cast<size_t>(target.H * target.W), 0);
  for (int64_t k = 0; k < target.K(); ++k) {
    const int32_t id = static_cast<int32_t>(k) + 1;
    out.segments.emplace_back(id, target.classes[static_cast<size_t>(k)]);
    for (size_t x = 0; x < out.segment_id.size(); ++x)
      if (target.masks[static_cast<size_t>(k)][x]) out.segment_id[x] = id;
  }
  const int32_t bg_id = static_cast<int32_t>(target.K()) + 1;
  bool has_bg = false;
  for (auto& id : out.segment_id)
    if (id == 0) {
      id = bg_id;
      has_bg = true;
    }
  if (has_bg) out.segments.emplace_back(bg_id, background_class);
  return out;
}

PanopticMap upsample_map(const PanopticMap& m, int64_t factor) {
  PanopticMap out;
  out.H = m.H * factor;
  out.W = m.W * factor;
  out.segments = m.segments;
  out.segment_id.assign(static_cast<size_t>(out.H * out.W), 0);
  for (int64_t i = 0; i < out.H; ++i)
    for (int64_t j = 0; j < out.W; ++j)
      out.segment_id[static_cast<size_t>(i * out.W + j)] =
          m.segment_id[static_cast<size_t>((i / factor) * m.W + j / factor)];
  return out;
}

}  // namespace cmt
