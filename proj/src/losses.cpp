#include "cmt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cmt {

int64_t Matching::pred_of(int64_t k) const {
  for (const auto& [n, t] : pairs)
    if (t == k) return n;
  return -1;
}

Matching hungarian(const Array& cost) {
  if (cost.rank() != 2)
    throw std::invalid_argument("hungarian: expected rank-2 cost, got " + shape_str(cost.shape));
  const int64_t N = cost.dim(0), K = cost.dim(1);
  if (N < K)
    throw std::invalid_argument("hungarian: need N >= K, got N=" + std::to_string(N) +
                                " K=" + std::to_string(K));
  if (!cost.all_finite()) throw std::invalid_argument("hungarian: non-finite cost");
  Matching m;
  if (K == 0) return m;

  // Kuhn-Munkres with potentials, rows = targets (K), columns = predictions (N).
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(K) + 1, 0.0), v(static_cast<size_t>(N) + 1, 0.0);
  std::vector<int64_t> p(static_cast<size_t>(N) + 1, 0), way(static_cast<size_t>(N) + 1, 0);
  auto a = [&](int64_t row, int64_t col) { return cost.at(col - 1, row - 1); };
  for (int64_t i = 1; i <= K; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(static_cast<size_t>(N) + 1, INF);
    std::vector<char> used(static_cast<size_t>(N) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int64_t i0 = p[static_cast<size_t>(j0)], j1 = -1;
      double delta = INF;
      for (int64_t j = 1; j <= N; ++j)
        if (!used[static_cast<size_t>(j)]) {
          double cur = a(i0, j) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
          if (cur < minv[static_cast<size_t>(j)]) {
            minv[static_cast<size_t>(j)] = cur;
            way[static_cast<size_t>(j)] = j0;
          }
          if (minv[static_cast<size_t>(j)] < delta) {
            delta = minv[static_cast<size_t>(j)];
            j1 = j;
          }
        }
      for (int64_t j = 0; j <= N; ++j)
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int64_t j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  for (int64_t j = 1; j <= N; ++j)
    if (p[static_cast<size_t>(j)] != 0) {
      m.pairs.emplace_back(j - 1, p[static_cast<size_t>(j)] - 1);
      m.total_cost += cost.at(j - 1, p[static_cast<size_t>(j)] - 1);
    }
  std::sort(m.pairs.begin(), m.pairs.end(),
            [](const auto& x, const auto& y) { return x.second < y.second; });
  return m;
}

Array matching_cost(const Array& Z, const Array& class_probs, const PanopticTarget& target) {
  const int64_t HW = Z.dim(0), N = Z.dim(1), K = target.K();
  if (HW != target.H * target.W)
    throw std::invalid_argument("matching_cost: raster size mismatch");
  constexpr double eps = 1e-6;
  std::vector<double> zsum(static_cast<size_t>(N), 0.0);
  for (int64_t x = 0; x < HW; ++x)
    for (int64_t n = 0; n < N; ++n) zsum[static_cast<size_t>(n)] += Z.at(x, n);
  Array cost(Shape{N, K});
  for (int64_t k = 0; k < K; ++k) {
    const auto& mask = target.masks[static_cast<size_t>(k)];
    double msum = 0.0;
    std::vector<double> inter(static_cast<size_t>(N), 0.0);
    for (int64_t x = 0; x < HW; ++x)
      if (mask[static_cast<size_t>(x)]) {
        msum += 1.0;
        for (int64_t n = 0; n < N; ++n) inter[static_cast<size_t>(n)] += Z.at(x, n);
      }
    for (int64_t n = 0; n < N; ++n) {
      const double dice = 2.0 * inter[static_cast<size_t>(n)] /
                          (zsum[static_cast<size_t>(n)] + msum + eps);
      cost.at(n, k) = -class_probs.at(n, target.classes[static_cast<size_t>(k)]) - dice;
    }
  }
  return cost;
}

namespace {

struct MaskStats {
  double min_h, max_h, avg_h, min_w, max_w, avg_w;
};

MaskStats mask_stats(const PanopticTarget& t, int64_t k) {
  MaskStats s{1e9, -1e9, 0, 1e9, -1e9, 0};
  double count = 0;
  const auto& mask = t.masks[static_cast<size_t>(k)];
  for (int64_t i = 0; i < t.H; ++i)
    for (int64_t j = 0; j < t.W; ++j)
      if (mask[static_cast<size_t>(i * t.W + j)]) {
        const double h = (static_cast<double>(i) + 0.5) / static_cast<double>(t.H);
        const double w = (static_cast<double>(j) + 0.5) / static_cast<double>(t.W);
        s.min_h = std::min(s.min_h, h);
        s.max_h = std::max(s.max_h, h);
        s.min_w = std::min(s.min_w, w);
        s.max_w = std::max(s.max_w, w);
        s.avg_h += h;
        s.avg_w += w;
        count += 1.0;
      }
  if (count == 0) throw std::invalid_argument("mask_approximation_loss: empty target mask");
  s.avg_h /= count;
  s.avg_w /= count;
  return s;
}

Var abs_diff(Var stat, double gt) { return abs_(add_scalar(stat, -gt)); }

}  // namespace

Var mask_approximation_loss(const ReferenceState& ref, const Matching& matching,
                            const PanopticTarget& target) {
  Tape& tape = *ref.r_c.tape;
  const int64_t K = static_cast<int64_t>(matching.pairs.size());
  if (K == 0) return tape.constant(Array(Shape{1}, std::vector<double>{0.0}));
  const int64_t M = ref.M;
  Var ext, cen;
  bool first = true;
  for (const auto& [n, k] : matching.pairs) {
    MaskStats gt = mask_stats(target, k);
    Var row = slice(ref.r_c, 0, n, 1);  // 1 x 2M
    Var h = slice(row, 1, 0, M);
    Var w = slice(row, 1, M, M);
    Var e = abs_diff(reduce(h, Reduce::Min, 1), gt.min_h);
    e = add(e, abs_diff(reduce(h, Reduce::Max, 1), gt.max_h));
    e = add(e, abs_diff(reduce(w, Reduce::Min, 1), gt.min_w));
    e = add(e, abs_diff(reduce(w, Reduce::Max, 1), gt.max_w));
    Var c = add(abs_diff(reduce(h, Reduce::Mean, 1), gt.avg_h),
                abs_diff(reduce(w, Reduce::Mean, 1), gt.avg_w));
    if (first) {
      ext = e;
      cen = c;
      first = false;
    } else {
      ext = add(ext, e);
      cen = add(cen, c);
    }
  }
  const double k = static_cast<double>(K);
  Var total = add(scale(ext, 1.0 / (4.0 * k)), scale(cen, 1.0 / (2.0 * k)));
  return reduce_sum_all(total);
}

SampledPixelSet sample_pixels(const PanopticTarget& target, int64_t count, uint64_t rng_seed,
                              double area_exponent) {
  const int64_t HW = target.H * target.W;
  if (count > HW)
    throw std::invalid_argument("sample_pixels: count exceeds pixel count");
  // cluster id per pixel, -1 = background
  std::vector<int64_t> cluster(static_cast<size_t>(HW), -1);
  std::vector<double> area(static_cast<size_t>(target.K()) + 1, 0.0);
  for (int64_t k = 0; k < target.K(); ++k)
    for (int64_t x = 0; x < HW; ++x)
      if (target.masks[static_cast<size_t>(k)][static_cast<size_t>(x)]) {
        cluster[static_cast<size_t>(x)] = k;
        area[static_cast<size_t>(k)] += 1.0;
      }
  double bg_area = 0.0;
  for (int64_t x = 0; x < HW; ++x)
    if (cluster[static_cast<size_t>(x)] < 0) bg_area += 1.0;

  std::vector<double> weight(static_cast<size_t>(HW));
  for (int64_t x = 0; x < HW; ++x) {
    const int64_t c = cluster[static_cast<size_t>(x)];
    const double a = c < 0 ? bg_area : area[static_cast<size_t>(c)];
    weight[static_cast<size_t>(x)] = std::pow(a, -area_exponent);
  }

  SplitMix64 rng(rng_seed);
  SampledPixelSet out;
  out.indices.reserve(static_cast<size_t>(count));
  std::vector<int64_t> alive(static_cast<size_t>(HW));
  for (int64_t x = 0; x < HW; ++x) alive[static_cast<size_t>(x)] = x;
  double wsum = 0.0;
  for (double w : weight) wsum += w;
  for (int64_t s = 0; s < count; ++s) {
    double u = rng.next_double() * wsum;
    size_t pick = alive.size() - 1;
    for (size_t i = 0; i < alive.size(); ++i) {
      u -= weight[static_cast<size_t>(alive[i])];
      if (u <= 0.0) {
        pick = i;
        break;
      }
    }
    const int64_t x = alive[pick];
    out.indices.push_back(x);
    out.cluster_of.push_back(cluster[static_cast<size_t>(x)]);
    wsum -= weight[static_cast<size_t>(x)];
    alive.erase(alive.begin() + static_cast<int64_t>(pick));
  }
  return out;
}

Var pixel_contrastive_loss(Var features, const SampledPixelSet& sample, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("pixel_contrastive_loss: tau must be positive");
  Tape& tape = *features.tape;
  const int64_t A = static_cast<int64_t>(sample.indices.size());
  const int64_t D = tape.val(features).dim(1);

  // positive-pair weights; anchors without positives are skipped
  std::vector<int64_t> pos_count(static_cast<size_t>(A), 0);
  for (int64_t a = 0; a < A; ++a)
    for (int64_t p = 0; p < A; ++p)
      if (p != a && sample.cluster_of[static_cast<size_t>(p)] ==
                        sample.cluster_of[static_cast<size_t>(a)])
        ++pos_count[static_cast<size_t>(a)];
  int64_t contributing = 0;
  for (int64_t a = 0; a < A; ++a)
    if (pos_count[static_cast<size_t>(a)] > 0) ++contributing;
  if (contributing == 0) return tape.constant(Array(Shape{1}, std::vector<double>{0.0}));

  Array wmat(Shape{A, A});
  for (int64_t a = 0; a < A; ++a) {
    if (pos_count[static_cast<size_t>(a)] == 0) continue;
    const double w = 1.0 / (static_cast<double>(pos_count[static_cast<size_t>(a)]) *
                            static_cast<double>(contributing));
    for (int64_t p = 0; p < A; ++p)
      if (p != a && sample.cluster_of[static_cast<size_t>(p)] ==
                        sample.cluster_of[static_cast<size_t>(a)])
        wmat.at(a, p) = w;
  }

  Var g0 = gather_rows(features, sample.indices);
  Var norms = sqrt_(add_scalar(reduce(mul(g0, g0), Reduce::Sum, 1), 1e-12));
  Var g = divide(g0, broadcast_col(norms, D));
  Var logits = scale(matmul(g, transpose(g)), 1.0 / tau);

  // exclude b == a from the denominator
  Array diag_mask(Shape{A, A});
  for (int64_t a = 0; a < A; ++a) diag_mask.at(a, a) = -1e30;
  Var masked = add(logits, tape.constant(std::move(diag_mask)));
  Var mx = reduce(masked, Reduce::Max, 1);
  Var lse = add(log_(reduce(exp_(sub(masked, broadcast_col(mx, A))), Reduce::Sum, 1)), mx);

  Var per_pair = sub(broadcast_col(lse, A), logits);  // lse_a - logit[a,p]
  return reduce_sum_all(mul(per_pair, tape.constant(std::move(wmat))));
}

namespace {

// norm * sum over rows of (logsumexp(row) - logit at the one-hot target);
// the max-subtracted logsumexp keeps saturated rows finite
Var masked_logit_ce(Var logits, const Array& onehot, double norm) {
  Tape& tape = *logits.tape;
  const int64_t cols = tape.val(logits).dim(1);
  Var mx = reduce(logits, Reduce::Max, 1);
  Var lse = add(log_(reduce(exp_(sub(logits, broadcast_col(mx, cols))), Reduce::Sum, 1)), mx);
  Var picked = reduce(mul(logits, tape.constant(onehot)), Reduce::Sum, 1);
  return scale(reduce_sum_all(sub(lse, picked)), norm);
}

}  // namespace

SegLossParts matched_segmentation_loss(Var mask_logits, Var class_logits,
                                       const Matching& matching, const PanopticTarget& target,
                                       const std::vector<Var>& aux_logits,
                                       int32_t background_class, double aux_weight) {
  Tape& tape = *mask_logits.tape;
  const Array& zv = tape.val(mask_logits);
  const int64_t HW = zv.dim(0), N = zv.dim(1);
  if (HW != target.H * target.W)
    throw std::invalid_argument("matched_segmentation_loss: raster size mismatch");
  const Array& cp = tape.val(class_logits);
  const int64_t C = cp.dim(1);  // num_classes + 1, last column = void

  // mask-ID map: background pixels target the last query
  std::vector<int64_t> pixel_query(static_cast<size_t>(HW), N - 1);
  for (const auto& [n, k] : matching.pairs)
    for (int64_t x = 0; x < HW; ++x)
      if (target.masks[static_cast<size_t>(k)][static_cast<size_t>(x)])
        pixel_query[static_cast<size_t>(x)] = n;
  Array mask_onehot(Shape{HW, N});
  for (int64_t x = 0; x < HW; ++x) mask_onehot.at(x, pixel_query[static_cast<size_t>(x)]) = 1.0;

  // class targets: matched -> gt class, last query -> background class when
  // configured, everything else -> void
  std::vector<int64_t> query_class(static_cast<size_t>(N), C - 1);
  if (background_class >= 0) query_class[static_cast<size_t>(N - 1)] = background_class;
  for (const auto& [n, k] : matching.pairs)
    query_class[static_cast<size_t>(n)] = target.classes[static_cast<size_t>(k)];
  Array class_onehot(Shape{N, C});
  for (int64_t n = 0; n < N; ++n) class_onehot.at(n, query_class[static_cast<size_t>(n)]) = 1.0;

  SegLossParts parts;
  Var mask_ce = masked_logit_ce(mask_logits, mask_onehot, 1.0 / static_cast<double>(HW));
  Var class_ce = masked_logit_ce(class_logits, class_onehot, 1.0 / static_cast<double>(N));
  parts.mask_ce = tape.val(mask_ce).data[0];
  parts.class_ce = tape.val(class_ce).data[0];
  Var total = add(mask_ce, class_ce);
  if (!aux_logits.empty()) {
    Var aux;
    bool first = true;
    for (Var za : aux_logits) {
      Var ce = masked_logit_ce(za, mask_onehot, 1.0 / static_cast<double>(HW));
      aux = first ? ce : add(aux, ce);
      first = false;
    }
    aux = scale(aux, aux_weight);
    parts.aux_ce = tape.val(aux).data[0];
    total = add(total, aux);
  }
  parts.total = total;
  return parts;
}

}  // namespace cmt
