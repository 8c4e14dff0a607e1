#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmt/data.hpp"
#include "cmt/layer.hpp"
#include "cmt/losses.hpp"

// Toy end-to-end network: a two-convolution stride-4 stem, stacked CMT
// decoder layers, prediction heads, optional recursive (two-stack) variant,
// and the Adam training loop.

namespace cmt {

enum class Variant { BaselineEq3, ClusteringEq5, CombinedEq7 };

std::string variant_name(Variant v);
std::optional<Variant> variant_from_name(const std::string& s);

struct ModelConfig {
  int64_t D = 64;
  int64_t N = 8;
  int64_t num_layers = 3;
  int64_t M = 8;
  int64_t num_classes = kNumClasses;  // excluding void
  Variant variant = Variant::CombinedEq7;
  bool rfn = false;
  bool self_attention = true;
  bool ffn = true;
  bool location = true;     // reference-mask coordinate injection
  bool layer_norm = false;  // row-wise normalization after residual updates
  bool attn_scale = false;
  bool fresh_readout = false;  // final Z from a fresh F x C^T instead of carried logits
  double loss_w_loc = 1.0;
  double loss_w_ins = 0.3;
  double loss_w_aux = 0.5;  // weight of the per-layer auxiliary mask losses
  double tau = 0.3;
  int64_t sample_count = 128;  // |A| for the contrastive loss
};

struct TrainConfig {
  int64_t iterations = 3000;
  int64_t batch = 1;
  double base_lr = 1e-3;
  int64_t warmup = 100;
  double poly_power = 0.9;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
  uint64_t seed = 1;
  int64_t log_interval = 50;
};

double lr_at(const TrainConfig& cfg, int64_t step);

// Ordered, named parameter set.
struct ParamStore {
  std::vector<std::pair<std::string, Array>> items;
  Array& at(const std::string& name);
  const Array& at(const std::string& name) const;
  bool has(const std::string& name) const;
};

struct ForwardOutputs {
  Var Z;            // HW x N final assignment
  Var class_probs;  // N x (num_classes + 1)
  Var mask_logits;  // logits behind Z, for the cross-entropy losses
  Var class_logits;
  std::vector<Var> Z_layers;            // every layer, both stacks, in order
  std::vector<Var> mask_logits_layers;  // parallel to Z_layers
  DecoderState final_state;
  ReferenceState ref;
  Var F_stem;
  // set when rfn is on
  Var Z_stack1;
  Var mask_logits_stack1;
  Var class_logits_stack1;
  bool has_stack1 = false;
  int64_t H4 = 0, W4 = 0;
  std::vector<LayerTrace> traces;  // filled when requested
};

struct StepLosses {
  double total = 0.0, seg = 0.0, loc = 0.0, ins = 0.0;
  double mask_ce = 0.0;  // final-layer mask-ID cross-entropy alone
};

class Model {
 public:
  ModelConfig cfg;
  ParamStore params;

  static Model init(const ModelConfig& cfg, uint64_t seed);

  // Pushes every parameter onto the tape (in store order) and returns the
  // handles, parallel to params.items.
  std::vector<Var> push_params(Tape& tape, bool requires_grad) const;

  ForwardOutputs forward(Tape& tape, const Array& image, int64_t H, int64_t W,
                         const std::vector<Var>& pv, bool want_traces = false) const;

  Prediction predict(const Array& image, int64_t H, int64_t W) const;

  // Builds the full loss for one sample on the given tape.
  std::pair<Var, StepLosses> sample_loss(Tape& tape, const Sample& sample,
                                         const std::vector<Var>& pv, uint64_t pixel_seed,
                                         const ForwardOutputs& out) const;

 private:
  Var param_var(const std::vector<Var>& pv, const std::string& name) const;
  DecoderState run_stack(Tape& tape, int stack, Var F0, Var C0, Var S0, ReferenceState ref,
                         const PixelCoordGrid& grid, const std::vector<Var>& pv,
                         ForwardOutputs& out, bool want_traces) const;
};

struct Trainer {
  Model* model;
  TrainConfig tcfg;
  std::vector<Array> m_state, v_state;  // Adam moments, parallel to params
  int64_t step = 0;

  Trainer(Model* m, TrainConfig cfg);
  // one optimization step on one sample; returns the loss breakdown
  StepLosses train_step(const Sample& sample, uint64_t pixel_seed);
  // one optimization step on a mini-batch: gradients (and the reported
  // losses) are averaged over the samples before the Adam update
  StepLosses train_batch(const std::vector<std::pair<const Sample*, uint64_t>>& items);
};

// Runs the loop and writes tab-separated metrics lines
// (step, loss_total, loss_mask, loss_loc, loss_ins, lr) to `log` when given.
void train(Model& model, const std::vector<Sample>& dataset, const TrainConfig& tcfg,
           std::ostream* log, Trainer* resume_from = nullptr);

// ---- checkpoint ("CMTW") ----
void save_checkpoint(const std::string& path, const Model& model, const Trainer* trainer);
Model load_checkpoint(const std::string& path, Trainer* trainer_out = nullptr,
                      TrainConfig tcfg = {});

}  // namespace cmt
