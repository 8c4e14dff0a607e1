#include "cmt/layer.hpp"

#include <cmath>
#include <tuple>

namespace cmt {

namespace {

Var maybe_scale(Var aff, bool attn_scale, int64_t D) {
  return attn_scale ? scale(aff, 1.0 / std::sqrt(static_cast<double>(D))) : aff;
}

}  // namespace

std::pair<Var, Var> assign_pixels(const DecoderState& state, Var w_kt, Var w_qt, bool attn_scale) {
  const int64_t D = state.F.tape->val(state.F).dim(1);
  Var Kt = matmul(state.F, w_kt);                   // HW x D
  Var Qt = matmul(state.C, w_qt);                   // N x D
  Var aff = matmul(Kt, transpose(Qt));              // HW x N
  Var S_new = add(state.S, maybe_scale(aff, attn_scale, D));
  Var Z = softmax_axis(S_new, 1);
  return {Z, S_new};
}

Var cross_attention_baseline(const DecoderState& state, const LayerParams& p, bool attn_scale) {
  const int64_t D = state.F.tape->val(state.F).dim(1);
  Var Qc = matmul(state.C, p.w_qc);  // N x D
  Var Kp = matmul(state.F, p.w_kp);  // HW x D
  Var Vp = matmul(state.F, p.w_vp);  // HW x D
  Var A = softmax_axis(maybe_scale(matmul(Qc, transpose(Kp)), attn_scale, D), 1);  // N x HW
  return matmul(A, Vp);
}

Var cluster_center_update(Var Z, Var Vp) { return matmul(transpose(Z), Vp); }

Var combined_center_update(const DecoderState& state, const LayerParams& p, Var Z,
                           const LayerConfig& cfg) {
  const int64_t D = state.F.tape->val(state.F).dim(1);
  Var Vp = matmul(state.F, p.w_vp);
  if (cfg.baseline_term && cfg.clustering_term) {
    Var Qc = matmul(state.C, p.w_qc);
    Var Kp = matmul(state.F, p.w_kp);
    Var A = softmax_axis(maybe_scale(matmul(Qc, transpose(Kp)), cfg.attn_scale, D), 1);
    return add(state.C, matmul(add(A, transpose(Z)), Vp));
  }
  if (cfg.baseline_term) return add(state.C, cross_attention_baseline(state, p, cfg.attn_scale));
  if (cfg.clustering_term) return add(state.C, cluster_center_update(Z, Vp));
  return state.C;
}

Var pixel_feature_update(Var F, Var Z, Var Vc) { return add(F, matmul(Z, Vc)); }

Var layer_norm_rows(Var x, double eps) {
  const int64_t cols = x.tape->val(x).dim(1);
  Var mean = reduce(x, Reduce::Mean, 1);                       // m x 1
  Var centered = sub(x, broadcast_col(mean, cols));            // m x n
  Var var = reduce(mul(centered, centered), Reduce::Mean, 1);  // m x 1
  Var denom = sqrt_(add_scalar(var, eps));
  return divide(centered, broadcast_col(denom, cols));
}

DecoderState cmt_layer(const DecoderState& state, const LayerParams& p, const PixelCoordGrid& grid,
                       const LayerConfig& cfg, LayerTrace* trace) {
  Var F = state.F, C = state.C;
  if (cfg.location) std::tie(F, C) = inject_coordinates(F, C, grid, state.ref, p.coord_f, p.coord_c);
  DecoderState cur{F, C, state.S, state.ref};

  DecoderState assign_in = cur;
  if (!cfg.carry_affinity) {
    const Array& sv = state.F.tape->val(state.S);
    assign_in.S = state.F.tape->constant(Array(sv.shape));
  }
  auto [Z, S_new] = assign_pixels(assign_in, p.w_kt, p.w_qt, cfg.attn_scale);
  Var C_upd = combined_center_update(cur, p, Z, cfg);
  Var F_upd = cfg.pixel_update ? pixel_feature_update(F, Z, matmul(C, p.w_vc)) : F;
  if (cfg.layer_norm) {
    C_upd = layer_norm_rows(C_upd);
    F_upd = layer_norm_rows(F_upd);
  }

  if (trace) {
    trace->Z = state.F.tape->val(Z);
    const int64_t D = state.F.tape->val(F).dim(1);
    Var Qc = matmul(C, p.w_qc);
    Var Kp = matmul(F, p.w_kp);
    Var A = softmax_axis(maybe_scale(matmul(Qc, transpose(Kp)), cfg.attn_scale, D), 1);
    trace->A_baseline = state.F.tape->val(A);
  }

  if (cfg.self_attention) {
    Var Qs = matmul(C_upd, p.sa_wq);
    Var Ks = matmul(C_upd, p.sa_wk);
    Var Vs = matmul(C_upd, p.sa_wv);
    const int64_t D = state.F.tape->val(C_upd).dim(1);
    Var A = softmax_axis(maybe_scale(matmul(Qs, transpose(Ks)), cfg.attn_scale, D), 1);
    C_upd = add(C_upd, matmul(A, Vs));
    if (cfg.layer_norm) C_upd = layer_norm_rows(C_upd);
  }
  if (cfg.ffn) {
    C_upd = add(C_upd, affine(gelu(affine(C_upd, p.ffn1)), p.ffn2));
    if (cfg.layer_norm) C_upd = layer_norm_rows(C_upd);
  }

  DecoderState out;
  out.F = F_upd;
  out.C = C_upd;
  out.S = S_new;
  out.ref = update_reference_masks(state.ref, C_upd, p.ref_mlp);
  return out;
}

double column_entropy(const Array& m, int64_t col) {
  const int64_t rows = m.dim(0);
  double sum = 0.0;
  for (int64_t i = 0; i < rows; ++i) sum += m.at(i, col);
  if (sum <= 0.0) return 0.0;
  double h = 0.0;
  for (int64_t i = 0; i < rows; ++i) {
    const double q = m.at(i, col) / sum;
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

std::vector<double> attention_entropy_report(const std::vector<Array>& Z_per_layer,
                                             int64_t matched_center) {
  std::vector<double> out;
  out.reserve(Z_per_layer.size());
  for (const Array& Z : Z_per_layer) out.push_back(column_entropy(Z, matched_center));
  return out;
}

}  // namespace cmt
