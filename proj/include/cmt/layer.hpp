#pragma once

#include "cmt/location.hpp"
#include "cmt/tensor.hpp"

// The Clustering Mask Transformer decoder layer. One layer updates the
// quadruple (pixel features F, cluster centers C, carried affinity logits S,
// reference state) with: coordinate injection, pixel-cluster assignment with
// a residual logit path, a combined center update, a pixel feature update,
// then self-attention and a feed-forward block over the centers.

namespace cmt {

struct DecoderState {
  Var F;  // HW x D
  Var C;  // N x D
  Var S;  // HW x N carried affinity logits
  ReferenceState ref;
};

struct LayerParams {
  // cross-attention path (softmax over HW)
  Var w_qc, w_kp, w_vp;
  // clustering affinity path (softmax over N), separate projections
  Var w_qt, w_kt;
  // center -> pixel value projection
  Var w_vc;
  // self-attention over centers
  Var sa_wq, sa_wk, sa_wv;
  // feed-forward D -> 2D -> D
  AffineParams ffn1, ffn2;
  // coordinate injection
  AffineParams coord_f, coord_c;
  RefMlpParams ref_mlp;
};

struct LayerConfig {
  bool baseline_term = true;    // softmax_HW cross-attention contribution
  bool clustering_term = true;  // Z^T pooling contribution
  bool pixel_update = true;
  // Carry the assignment logits across layers (residual path). When off, each
  // layer's logits are its fresh projected affinity alone, as in a plain
  // cross-attention decoder.
  bool carry_affinity = true;
  // Inject reference-mask / coordinate features into pixels and centers.
  bool location = true;
  // Row-wise normalization after each residual update (off by default so the
  // update equations stand alone).
  bool layer_norm = false;
  bool self_attention = true;
  bool ffn = true;
  bool attn_scale = false;  // optional 1/sqrt(D) on affinities, off by default
};

// Per-layer value snapshots for reporting (no gradients).
struct LayerTrace {
  Array Z;           // HW x N
  Array A_baseline;  // N x HW cross-attention rows
};

// Z = softmax_N(S + K~p (Q~c)^T); also returns the new carried logits S'.
std::pair<Var, Var> assign_pixels(const DecoderState& state, Var w_kt, Var w_qt,
                                  bool attn_scale = false);

// softmax_HW(Qc Kp^T) Vp, the additive update term without the +C residual
Var cross_attention_baseline(const DecoderState& state, const LayerParams& p,
                             bool attn_scale = false);

// Z^T Vp: assignment-weighted pooling of pixel values per center
Var cluster_center_update(Var Z, Var Vp);

// C + (softmax_HW(Qc Kp^T) + Z^T) Vp, computed in factored form
Var combined_center_update(const DecoderState& state, const LayerParams& p, Var Z,
                           const LayerConfig& cfg);

// F + Z Vc
Var pixel_feature_update(Var F, Var Z, Var Vc);

// Normalizes each row to zero mean and unit variance (no learned gain/bias).
Var layer_norm_rows(Var x, double eps = 1e-5);

DecoderState cmt_layer(const DecoderState& state, const LayerParams& p, const PixelCoordGrid& grid,
                       const LayerConfig& cfg, LayerTrace* trace = nullptr);

// Shannon entropy (nats) of one center's column per layer, each column
// normalized to a distribution over pixels; all-zero columns report 0.
std::vector<double> attention_entropy_report(const std::vector<Array>& Z_per_layer,
                                             int64_t matched_center);

double column_entropy(const Array& m, int64_t col);

}  // namespace cmt
