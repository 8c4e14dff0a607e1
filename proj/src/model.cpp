#include "cmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

namespace cmt {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::BaselineEq3: return "baseline_eq3";
    case Variant::ClusteringEq5: return "clustering_eq5";
    default: return "combined_eq7";
  }
}

std::optional<Variant> variant_from_name(const std::string& s) {
  if (s == "baseline_eq3") return Variant::BaselineEq3;
  if (s == "clustering_eq5") return Variant::ClusteringEq5;
  if (s == "combined_eq7") return Variant::CombinedEq7;
  return std::nullopt;
}

double lr_at(const TrainConfig& cfg, int64_t step) {
  const double t = static_cast<double>(step);
  const double total = static_cast<double>(cfg.iterations);
  const double poly = std::pow(std::max(0.0, 1.0 - t / total), cfg.poly_power);
  const double warm = cfg.warmup > 0 ? t / static_cast<double>(cfg.warmup) : 1.0;
  return cfg.base_lr * std::min(warm, poly);
}

Array& ParamStore::at(const std::string& name) {
  for (auto& [n, a] : items)
    if (n == name) return a;
  throw std::invalid_argument("unknown parameter: " + name);
}

const Array& ParamStore::at(const std::string& name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& [n, a] : items)
    if (n == name) return true;
  return false;
}

namespace {

// modified Gram-Schmidt on a square gaussian matrix
Array orthonormal(int64_t n, SplitMix64& rng) {
  Array a = gaussian_array(Shape{n, n}, rng);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (int64_t k = 0; k < n; ++k) dot += a.at(i, k) * a.at(j, k);
      for (int64_t k = 0; k < n; ++k) a.at(i, k) -= dot * a.at(j, k);
    }
    double norm = 0.0;
    for (int64_t k = 0; k < n; ++k) norm += a.at(i, k) * a.at(i, k);
    norm = std::sqrt(std::max(norm, 1e-12));
    for (int64_t k = 0; k < n; ++k) a.at(i, k) /= norm;
  }
  return a;
}

Array he_init(int64_t rows, int64_t cols, SplitMix64& rng) {
  return gaussian_array(Shape{rows, cols}, rng, std::sqrt(2.0 / static_cast<double>(rows)));
}

// feature-passthrough weight for coordinate injection: identity on the first
// D rows, small random on the coordinate rows
Array coord_init(int64_t D, int64_t extra, SplitMix64& rng) {
  Array w(Shape{D + extra, D});
  for (int64_t i = 0; i < D; ++i) w.at(i, i) = 1.0;
  for (int64_t i = D; i < D + extra; ++i)
    for (int64_t j = 0; j < D; ++j) w.at(i, j) = 0.01 * rng.next_gaussian();
  return w;
}

// im2col index map for a 3x3 stride-2 pad-1 convolution over (H x W x C)
std::vector<int64_t> conv3x3s2_indices(int64_t H, int64_t W, int64_t C) {
  const int64_t Ho = H / 2, Wo = W / 2;
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(Ho * Wo * 9 * C));
  for (int64_t oi = 0; oi < Ho; ++oi)
    for (int64_t oj = 0; oj < Wo; ++oj)
      for (int64_t ki = 0; ki < 3; ++ki)
        for (int64_t kj = 0; kj < 3; ++kj) {
          const int64_t i = 2 * oi - 1 + ki;
          const int64_t j = 2 * oj - 1 + kj;
          for (int64_t c = 0; c < C; ++c)
            idx.push_back(i < 0 || i >= H || j < 0 || j >= W ? -1 : (i * W + j) * C + c);
        }
  return idx;
}

LayerConfig layer_config(const ModelConfig& cfg) {
  LayerConfig lc;
  lc.baseline_term = cfg.variant != Variant::ClusteringEq5;
  lc.clustering_term = cfg.variant != Variant::BaselineEq3;
  // The baseline variant is the plain cross-attention decoder: it lacks the
  // whole assignment-driven package (residual logit path, center-to-pixel
  // update) as well as the reference-mask coordinate injection, which are
  // all additions on top of that baseline.
  lc.carry_affinity = cfg.variant != Variant::BaselineEq3;
  lc.pixel_update = cfg.variant != Variant::BaselineEq3;
  lc.location = cfg.location && cfg.variant != Variant::BaselineEq3;
  lc.layer_norm = cfg.layer_norm;
  lc.self_attention = cfg.self_attention;
  lc.ffn = cfg.ffn;
  lc.attn_scale = cfg.attn_scale;
  return lc;
}

std::string lp(int stack, int64_t layer, const char* name) {
  return "s" + std::to_string(stack) + ".l" + std::to_string(layer) + "." + name;
}

}  // namespace

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
  Model m;
  m.cfg = cfg;
  SplitMix64 rng(seed ^ 0xC3D2E1F0A5B49788ULL);
  const int64_t D = cfg.D, N = cfg.N, M = cfg.M;
  auto put = [&](const std::string& name, Array a) {
    m.params.items.emplace_back(name, std::move(a));
  };
  put("stem.conv1.w", he_init(27, D, rng));
  put("stem.conv1.b", Array(Shape{1, D}));
  put("stem.conv2.w", he_init(9 * D, D, rng));
  put("stem.conv2.b", Array(Shape{1, D}));
  put("queries", gaussian_array(Shape{N, D}, rng, 1.0 / std::sqrt(static_cast<double>(D))));
  const int stacks = cfg.rfn ? 2 : 1;
  for (int s = 0; s < stacks; ++s)
    for (int64_t l = 0; l < cfg.num_layers; ++l) {
      put(lp(s, l, "qc.w"), orthonormal(D, rng));
      put(lp(s, l, "kp.w"), orthonormal(D, rng));
      put(lp(s, l, "vp.w"), Array(Shape{D, D}));
      put(lp(s, l, "qt.w"), orthonormal(D, rng));
      put(lp(s, l, "kt.w"), orthonormal(D, rng));
      put(lp(s, l, "vc.w"), Array(Shape{D, D}));
      put(lp(s, l, "sa.q.w"), orthonormal(D, rng));
      put(lp(s, l, "sa.k.w"), orthonormal(D, rng));
      put(lp(s, l, "sa.v.w"), Array(Shape{D, D}));
      put(lp(s, l, "ffn1.w"), he_init(D, 2 * D, rng));
      put(lp(s, l, "ffn1.b"), Array(Shape{1, 2 * D}));
      put(lp(s, l, "ffn2.w"), Array(Shape{2 * D, D}));
      put(lp(s, l, "ffn2.b"), Array(Shape{1, D}));
      put(lp(s, l, "coordf.w"), coord_init(D, 2, rng));
      put(lp(s, l, "coordf.b"), Array(Shape{1, D}));
      put(lp(s, l, "coordc.w"), coord_init(D, 2 * M, rng));
      put(lp(s, l, "coordc.b"), Array(Shape{1, D}));
      put(lp(s, l, "ref.w1"), he_init(D, D, rng));
      put(lp(s, l, "ref.b1"), Array(Shape{1, D}));
      put(lp(s, l, "ref.w2"), Array(Shape{D, 2 * M}));
      put(lp(s, l, "ref.b2"), Array(Shape{1, 2 * M}));
    }
  put("head.class.w", Array(Shape{D, cfg.num_classes + 1}));
  put("head.class.b", Array(Shape{1, cfg.num_classes + 1}));
  return m;
}

std::vector<Var> Model::push_params(Tape& tape, bool requires_grad) const {
  std::vector<Var> pv;
  pv.reserve(params.items.size());
  for (const auto& [name, a] : params.items) pv.push_back(tape.leaf(a, requires_grad));
  return pv;
}

Var Model::param_var(const std::vector<Var>& pv, const std::string& name) const {
  for (size_t i = 0; i < params.items.size(); ++i)
    if (params.items[i].first == name) return pv[i];
  throw std::invalid_argument("unknown parameter: " + name);
}

DecoderState Model::run_stack(Tape& tape, int stack, Var F0, Var C0, Var S0, ReferenceState ref,
                              const PixelCoordGrid& grid, const std::vector<Var>& pv,
                              ForwardOutputs& out, bool want_traces) const {
  const LayerConfig lc = layer_config(cfg);
  DecoderState st{F0, C0, S0, ref};
  for (int64_t l = 0; l < cfg.num_layers; ++l) {
    LayerParams p;
    p.w_qc = param_var(pv, lp(stack, l, "qc.w"));
    p.w_kp = param_var(pv, lp(stack, l, "kp.w"));
    p.w_vp = param_var(pv, lp(stack, l, "vp.w"));
    p.w_qt = param_var(pv, lp(stack, l, "qt.w"));
    p.w_kt = param_var(pv, lp(stack, l, "kt.w"));
    p.w_vc = param_var(pv, lp(stack, l, "vc.w"));
    p.sa_wq = param_var(pv, lp(stack, l, "sa.q.w"));
    p.sa_wk = param_var(pv, lp(stack, l, "sa.k.w"));
    p.sa_wv = param_var(pv, lp(stack, l, "sa.v.w"));
    p.ffn1 = {param_var(pv, lp(stack, l, "ffn1.w")), param_var(pv, lp(stack, l, "ffn1.b"))};
    p.ffn2 = {param_var(pv, lp(stack, l, "ffn2.w")), param_var(pv, lp(stack, l, "ffn2.b"))};
    p.coord_f = {param_var(pv, lp(stack, l, "coordf.w")), param_var(pv, lp(stack, l, "coordf.b"))};
    p.coord_c = {param_var(pv, lp(stack, l, "coordc.w")), param_var(pv, lp(stack, l, "coordc.b"))};
    p.ref_mlp = {param_var(pv, lp(stack, l, "ref.w1")), param_var(pv, lp(stack, l, "ref.b1")),
                 param_var(pv, lp(stack, l, "ref.w2")), param_var(pv, lp(stack, l, "ref.b2"))};
    LayerTrace trace;
    st = cmt_layer(st, p, grid, lc, want_traces ? &trace : nullptr);
    if (want_traces) out.traces.push_back(std::move(trace));
    out.mask_logits_layers.push_back(st.S);
    out.Z_layers.push_back(softmax_axis(st.S, 1));
  }
  return st;
}

ForwardOutputs Model::forward(Tape& tape, const Array& image, int64_t H, int64_t W,
                              const std::vector<Var>& pv, bool want_traces) const {
  if (H % 4 != 0 || W % 4 != 0)
    throw std::invalid_argument("forward: image dims must be divisible by 4");
  ForwardOutputs out;
  out.H4 = H / 4;
  out.W4 = W / 4;

  Var img = tape.constant(image);
  Var col1 = gather_pad(img, conv3x3s2_indices(H, W, 3), Shape{(H / 2) * (W / 2), 27});
  Var f1 = gelu(affine(col1, AffineParams{param_var(pv, "stem.conv1.w"),
                                          param_var(pv, "stem.conv1.b")}));
  Var col2 = gather_pad(f1, conv3x3s2_indices(H / 2, W / 2, cfg.D),
                        Shape{out.H4 * out.W4, 9 * cfg.D});
  Var F0 = gelu(affine(col2, AffineParams{param_var(pv, "stem.conv2.w"),
                                          param_var(pv, "stem.conv2.b")}));
  out.F_stem = F0;

  const PixelCoordGrid grid = make_pixel_grid(out.H4, out.W4);
  Var C0 = param_var(pv, "queries");
  Var S0 = tape.constant(Array(Shape{out.H4 * out.W4, cfg.N}));
  ReferenceState ref = init_reference_state(tape, cfg.N, cfg.M);

  DecoderState st = run_stack(tape, 0, F0, C0, S0, ref, grid, pv, out, want_traces);

  const AffineParams head{param_var(pv, "head.class.w"), param_var(pv, "head.class.b")};
  if (cfg.rfn) {
    out.has_stack1 = true;
    out.Z_stack1 = out.Z_layers.back();
    out.mask_logits_stack1 = out.mask_logits_layers.back();
    out.class_logits_stack1 = affine(st.C, head);
    Var F_in = scale(add(F0, st.F), 0.5);
    st = run_stack(tape, 1, F_in, st.C, st.S, st.ref, grid, pv, out, want_traces);
  }

  out.final_state = st;
  out.ref = st.ref;
  if (cfg.fresh_readout) {
    out.mask_logits = matmul(st.F, transpose(st.C));
    out.Z = softmax_axis(out.mask_logits, 1);
  } else {
    out.mask_logits = out.mask_logits_layers.back();
    out.Z = out.Z_layers.back();
  }
  out.class_logits = affine(st.C, head);
  out.class_probs = softmax_axis(out.class_logits, 1);
  return out;
}

Prediction Model::predict(const Array& image, int64_t H, int64_t W) const {
  Tape tape;
  auto pv = push_params(tape, false);
  ForwardOutputs out = forward(tape, image, H, W, pv);
  Prediction p;
  p.Z = tape.val(out.Z);
  p.class_probs = tape.val(out.class_probs);
  p.H = out.H4;
  p.W = out.W4;
  return p;
}

std::pair<Var, StepLosses> Model::sample_loss(Tape& tape, const Sample& sample,
                                              const std::vector<Var>& pv, uint64_t pixel_seed,
                                              const ForwardOutputs& out) const {
  (void)pv;
  const PanopticTarget t4 = downsample_target(sample.target, 4);
  if (t4.K() > cfg.N - 1)
    throw std::invalid_argument("sample_loss: target has more masks than available queries");

  // Hungarian over the first N-1 queries; the last query is reserved for the
  // background region.
  const Array& zv = tape.val(out.Z);
  const Array& cpv = tape.val(out.class_probs);
  Array cost_full = matching_cost(zv, cpv, t4);
  Array cost_sub(Shape{cfg.N - 1, t4.K()});
  for (int64_t n = 0; n + 1 < cfg.N; ++n)
    for (int64_t k = 0; k < t4.K(); ++k) cost_sub.at(n, k) = cost_full.at(n, k);
  Matching matching = hungarian(cost_sub);

  std::vector<Var> aux(out.mask_logits_layers.begin(), out.mask_logits_layers.end() - 1);
  if (out.has_stack1) {
    // the stack-1 final output gets its own weighted loss term below
    aux.erase(aux.begin() + (cfg.num_layers - 1));
  }
  SegLossParts seg = matched_segmentation_loss(out.mask_logits, out.class_logits, matching, t4,
                                               aux, kClassBackground, cfg.loss_w_aux);
  Var total = seg.total;
  double seg_val = tape.val(seg.total).data[0];
  if (out.has_stack1) {
    SegLossParts seg1 = matched_segmentation_loss(out.mask_logits_stack1, out.class_logits_stack1,
                                                  matching, t4, {}, kClassBackground, 0.5);
    total = add(total, scale(seg1.total, 0.5));
    seg_val += 0.5 * tape.val(seg1.total).data[0];
  }

  // The auxiliary location and pixel-discrimination losses belong to the
  // additions being ablated, so the plain baseline trains without them.
  const bool plain = cfg.variant == Variant::BaselineEq3;
  const double w_loc = plain ? 0.0 : cfg.loss_w_loc;
  const double w_ins = plain ? 0.0 : cfg.loss_w_ins;
  Var loc = mask_approximation_loss(out.ref, matching, t4);
  const int64_t hw4 = out.H4 * out.W4;
  SampledPixelSet px = sample_pixels(t4, std::min(cfg.sample_count, hw4), pixel_seed);
  Var ins = pixel_contrastive_loss(out.final_state.F, px, cfg.tau);

  total = add(total, add(scale(loc, w_loc), scale(ins, w_ins)));

  StepLosses parts;
  parts.seg = seg_val;
  parts.mask_ce = seg.mask_ce;
  parts.loc = tape.val(loc).data[0];
  parts.ins = tape.val(ins).data[0];
  parts.total = tape.val(total).data[0];
  return {total, parts};
}

Trainer::Trainer(Model* m, TrainConfig cfg) : model(m), tcfg(cfg) {
  m_state.reserve(m->params.items.size());
  v_state.reserve(m->params.items.size());
  for (const auto& [name, a] : m->params.items) {
    m_state.emplace_back(a.shape);
    v_state.emplace_back(a.shape);
  }
}

StepLosses Trainer::train_step(const Sample& sample, uint64_t pixel_seed) {
  return train_batch({{&sample, pixel_seed}});
}

StepLosses Trainer::train_batch(const std::vector<std::pair<const Sample*, uint64_t>>& items) {
  if (items.empty()) throw std::invalid_argument("train_batch: empty batch");
  const double inv_b = 1.0 / static_cast<double>(items.size());
  std::vector<Array> acc;
  acc.reserve(model->params.items.size());
  for (const auto& [name, a] : model->params.items) acc.emplace_back(a.shape);
  StepLosses parts;
  for (const auto& [sample, pixel_seed] : items) {
    Tape tape;
    auto pv = model->push_params(tape, true);
    ForwardOutputs out = model->forward(tape, sample->image, sample->H, sample->W, pv);
    auto [loss, one] = model->sample_loss(tape, *sample, pv, pixel_seed, out);
    if (!std::isfinite(one.total))
      throw std::runtime_error("training diverged: loss is not finite at step " +
                               std::to_string(step));
    tape.backward(loss);
    for (size_t i = 0; i < pv.size(); ++i) {
      const Array& g = tape.grad(pv[i]);
      for (size_t j = 0; j < g.data.size(); ++j) acc[i].data[j] += inv_b * g.data[j];
    }
    parts.total += inv_b * one.total;
    parts.seg += inv_b * one.seg;
    parts.loc += inv_b * one.loc;
    parts.ins += inv_b * one.ins;
    parts.mask_ce += inv_b * one.mask_ce;
  }

  double clip_scale = 1.0;
  if (tcfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (const Array& g : acc)
      for (double gv : g.data) sq += gv * gv;
    const double norm = std::sqrt(sq);
    if (norm > tcfg.grad_clip) clip_scale = tcfg.grad_clip / norm;
  }

  const double lr = lr_at(tcfg, step);
  const double t = static_cast<double>(step + 1);
  const double bc1 = 1.0 - std::pow(tcfg.beta1, t);
  const double bc2 = 1.0 - std::pow(tcfg.beta2, t);
  for (size_t i = 0; i < acc.size(); ++i) {
    const Array& g = acc[i];
    Array& p = model->params.items[i].second;
    Array& m = m_state[i];
    Array& v = v_state[i];
    for (size_t j = 0; j < p.data.size(); ++j) {
      const double gj = clip_scale * g.data[j];
      m.data[j] = tcfg.beta1 * m.data[j] + (1.0 - tcfg.beta1) * gj;
      v.data[j] = tcfg.beta2 * v.data[j] + (1.0 - tcfg.beta2) * gj * gj;
      p.data[j] -= lr * (m.data[j] / bc1) / (std::sqrt(v.data[j] / bc2) + tcfg.adam_eps);
    }
  }
  ++step;
  return parts;
}

void train(Model& model, const std::vector<Sample>& dataset, const TrainConfig& tcfg,
           std::ostream* log, Trainer* resume_from) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (tcfg.warmup > tcfg.iterations)
    throw std::invalid_argument("train: warmup exceeds iterations");
  if (tcfg.batch < 1) throw std::invalid_argument("train: batch must be at least 1");
  Trainer local(&model, tcfg);
  Trainer& tr = resume_from ? *resume_from : local;
  tr.tcfg = tcfg;
  SplitMix64 order_rng(tcfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  // fast-forward the draw sequence on resume so sample order stays aligned
  for (int64_t s = 0; s < tr.step * tcfg.batch; ++s) {
    order_rng.next();
    order_rng.next();
  }
  // `iterations` is the total step budget, so a resumed run picks up the
  // schedule where it left off
  const int64_t end_step = tcfg.iterations;
  while (tr.step < end_step) {
    std::vector<std::pair<const Sample*, uint64_t>> items;
    items.reserve(static_cast<size_t>(tcfg.batch));
    for (int64_t b = 0; b < tcfg.batch; ++b) {
      const size_t idx = static_cast<size_t>(order_rng.next_below(dataset.size()));
      const uint64_t pixel_seed = order_rng.next();
      items.emplace_back(&dataset[idx], pixel_seed);
    }
    const int64_t this_step = tr.step;
    StepLosses parts = tr.train_batch(items);
    if (log && (this_step % tcfg.log_interval == 0 || this_step + 1 == end_step)) {
      std::ostringstream line;
      line.setf(std::ios::fixed);
      line.precision(6);
      line << this_step << '\t' << parts.total << '\t' << parts.seg << '\t' << parts.loc << '\t'
           << parts.ins << '\t' << lr_at(tcfg, this_step);
      (*log) << line.str() << '\n';
    }
  }
}

// ---- checkpoint IO ----

namespace {

constexpr char kCkptMagic[4] = {'C', 'M', 'T', 'W'};

void write_entry(std::ofstream& out, const std::string& name, const Array& a) {
  const uint32_t len = static_cast<uint32_t>(name.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(name.data(), len);
  const uint32_t rank = static_cast<uint32_t>(a.shape.size());
  out.write(reinterpret_cast<const char*>(&rank), 4);
  for (int64_t e : a.shape) {
    const uint32_t ext = static_cast<uint32_t>(e);
    out.write(reinterpret_cast<const char*>(&ext), 4);
  }
  for (double v : a.data) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
}

Array scalar_entry(double v) { return Array(Shape{1}, std::vector<double>{v}); }

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const Trainer* trainer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  std::vector<std::pair<std::string, Array>> entries;
  const ModelConfig& c = model.cfg;
  entries.emplace_back("meta.D", scalar_entry(static_cast<double>(c.D)));
  entries.emplace_back("meta.N", scalar_entry(static_cast<double>(c.N)));
  entries.emplace_back("meta.layers", scalar_entry(static_cast<double>(c.num_layers)));
  entries.emplace_back("meta.M", scalar_entry(static_cast<double>(c.M)));
  entries.emplace_back("meta.num_classes", scalar_entry(static_cast<double>(c.num_classes)));
  entries.emplace_back("meta.variant", scalar_entry(static_cast<double>(c.variant)));
  entries.emplace_back("meta.rfn", scalar_entry(c.rfn ? 1 : 0));
  entries.emplace_back("meta.self_attention", scalar_entry(c.self_attention ? 1 : 0));
  entries.emplace_back("meta.ffn", scalar_entry(c.ffn ? 1 : 0));
  entries.emplace_back("meta.attn_scale", scalar_entry(c.attn_scale ? 1 : 0));
  entries.emplace_back("meta.fresh_readout", scalar_entry(c.fresh_readout ? 1 : 0));
  entries.emplace_back("meta.location", scalar_entry(c.location ? 1 : 0));
  entries.emplace_back("meta.layer_norm", scalar_entry(c.layer_norm ? 1 : 0));
  entries.emplace_back("meta.w_aux", scalar_entry(c.loss_w_aux));
  entries.emplace_back("meta.tau", scalar_entry(c.tau));
  entries.emplace_back("meta.w_loc", scalar_entry(c.loss_w_loc));
  entries.emplace_back("meta.w_ins", scalar_entry(c.loss_w_ins));
  entries.emplace_back("meta.sample_count", scalar_entry(static_cast<double>(c.sample_count)));
  entries.emplace_back("meta.step", scalar_entry(trainer ? static_cast<double>(trainer->step) : 0));
  for (const auto& [name, a] : model.params.items) entries.emplace_back(name, a);
  if (trainer) {
    for (size_t i = 0; i < model.params.items.size(); ++i) {
      entries.emplace_back("opt.m." + model.params.items[i].first, trainer->m_state[i]);
      entries.emplace_back("opt.v." + model.params.items[i].first, trainer->v_state[i]);
    }
  }
  out.write(kCkptMagic, 4);
  const uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const uint32_t count = static_cast<uint32_t>(entries.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, a] : entries) write_entry(out, name, a);
  out.close();
  if (!out) throw std::runtime_error("write failure: " + path);
}

Model load_checkpoint(const std::string& path, Trainer* trainer_out, TrainConfig tcfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw FormatError("bad checkpoint magic, expected \"CMTW\"", 0);
  uint32_t version = 0, count = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&count), 4);
  if (version != 1) throw FormatError("unsupported checkpoint version", 4);
  std::map<std::string, Array> entries;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    std::string name(len, '\0');
    in.read(name.data(), len);
    uint32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 4);
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) {
      uint32_t ext = 0;
      in.read(reinterpret_cast<char*>(&ext), 4);
      shape[r] = ext;
    }
    Array a(shape);
    for (double& v : a.data) {
      float f = 0;
      in.read(reinterpret_cast<char*>(&f), 4);
      v = static_cast<double>(f);
    }
    if (!in) throw FormatError("truncated checkpoint", static_cast<uint64_t>(in.tellg()));
    entries.emplace(std::move(name), std::move(a));
  }
  auto meta = [&](const std::string& key) {
    auto it = entries.find(key);
    if (it == entries.end()) throw std::runtime_error("checkpoint missing entry: " + key);
    return it->second.data[0];
  };
  ModelConfig cfg;
  cfg.D = static_cast<int64_t>(meta("meta.D"));
  cfg.N = static_cast<int64_t>(meta("meta.N"));
  cfg.num_layers = static_cast<int64_t>(meta("meta.layers"));
  cfg.M = static_cast<int64_t>(meta("meta.M"));
  cfg.num_classes = static_cast<int64_t>(meta("meta.num_classes"));
  cfg.variant = static_cast<Variant>(static_cast<int>(meta("meta.variant")));
  cfg.rfn = meta("meta.rfn") != 0;
  cfg.self_attention = meta("meta.self_attention") != 0;
  cfg.ffn = meta("meta.ffn") != 0;
  cfg.attn_scale = meta("meta.attn_scale") != 0;
  cfg.fresh_readout = meta("meta.fresh_readout") != 0;
  cfg.location = meta("meta.location") != 0;
  cfg.layer_norm = meta("meta.layer_norm") != 0;
  cfg.loss_w_aux = meta("meta.w_aux");
  cfg.tau = meta("meta.tau");
  cfg.loss_w_loc = meta("meta.w_loc");
  cfg.loss_w_ins = meta("meta.w_ins");
  cfg.sample_count = static_cast<int64_t>(meta("meta.sample_count"));

  Model model = Model::init(cfg, 0);
  for (auto& [name, a] : model.params.items) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint missing parameter: " + name);
    if (it->second.shape != a.shape)
      throw std::runtime_error("checkpoint shape mismatch for parameter " + name + ": file has " +
                               shape_str(it->second.shape) + ", model expects " +
                               shape_str(a.shape));
    a = it->second;
  }
  if (trainer_out) {
    *trainer_out = Trainer(&model, tcfg);  // note: caller must rebind model pointer
    trainer_out->step = static_cast<int64_t>(meta("meta.step"));
    for (size_t i = 0; i < model.params.items.size(); ++i) {
      const std::string& pname = model.params.items[i].first;
      auto mi = entries.find("opt.m." + pname);
      auto vi = entries.find("opt.v." + pname);
      if (mi != entries.end()) trainer_out->m_state[i] = mi->second;
      if (vi != entries.end()) trainer_out->v_state[i] = vi->second;
    }
  }
  return model;
}

}  // namespace cmt
