#pragma once

#include <cstdint>
#include <vector>

#include "cmt/location.hpp"
#include "cmt/target.hpp"
#include "cmt/tensor.hpp"

// Training objectives: Hungarian assignment of targets to queries, the mask
// approximation loss on reference points, the pixel-wise instance
// discrimination loss, and the matched segmentation losses (mask-ID and
// classification cross-entropy with per-layer auxiliaries).

namespace cmt {

struct Matching {
  // (prediction index, target index), injective on both sides, |pairs| = K
  std::vector<std::pair<int64_t, int64_t>> pairs;
  double total_cost = 0.0;

  // prediction index assigned to target k, or -1
  int64_t pred_of(int64_t k) const;
};

// Exact minimum-cost assignment covering all K columns of an N x K cost
// matrix, N >= K. Kuhn-Munkres with potentials.
Matching hungarian(const Array& cost);

// cost[n,k] = -p_hat_n(c_k) - Dice(Z column n, mask k), eps = 1e-6
Array matching_cost(const Array& Z, const Array& class_probs, const PanopticTarget& target);

// L_ext + L_cen over matched centers; per-axis min/max/avg statistics of the
// predicted reference points vs the ground-truth mask pixels. K=0 -> 0.
Var mask_approximation_loss(const ReferenceState& ref, const Matching& matching,
                            const PanopticTarget& target);

struct SampledPixelSet {
  std::vector<int64_t> indices;     // unique pixel indices
  std::vector<int64_t> cluster_of;  // target mask id per sample, -1 = background
};

// Without replacement; per-pixel weight area^-1/2 of the mask (or background
// region) the pixel belongs to. Deterministic given seed.
SampledPixelSet sample_pixels(const PanopticTarget& target, int64_t count, uint64_t rng_seed,
                              double area_exponent = 0.5);

// Supervised-contrastive loss over sampled pixels; rows of `features` are
// L2-normalized internally, the denominator excludes b == a, and anchors with
// no positives are skipped. Result averaged over contributing anchors.
Var pixel_contrastive_loss(Var features, const SampledPixelSet& sample, double tau);

struct SegLossParts {
  Var total;
  double mask_ce = 0.0;   // final-layer mask-ID cross-entropy (value)
  double class_ce = 0.0;  // classification cross-entropy (value)
  double aux_ce = 0.0;    // weighted auxiliary term (value)
};

// (a) per-pixel CE of the mask logits (rows softmax-normalized internally via
// a stable log-sum-exp) against the matching-induced mask-ID map, with pixels
// outside all masks targeting the last query; (b) classification CE on the
// class-head logits with unmatched queries pushed to the void column (the
// last query instead targets `background_class` when >= 0); (c) the mask CE
// of each auxiliary layer's logits with weight `aux_weight`. Taking logits
// rather than probabilities keeps the loss finite when a softmax saturates.
SegLossParts matched_segmentation_loss(Var mask_logits, Var class_logits,
                                       const Matching& matching, const PanopticTarget& target,
                                       const std::vector<Var>& aux_logits,
                                       int32_t background_class = -1, double aux_weight = 0.5);

}  // namespace cmt
