#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "cmt/data.hpp"
#include "cmt/model.hpp"
#include "cmt/panoptic.hpp"
#include "cmt/pgm.hpp"
#include "cmt/run_config.hpp"

using namespace cmt;

namespace {

// exit-code contract: 0 success, 1 usage/config, 2 I/O, 3 check failure
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitCheck = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::pair<int64_t, int64_t> parse_size(const std::string& s) {
  const size_t x = s.find('x');
  if (x == std::string::npos) throw UsageError("--size expects HxW, got \"" + s + "\"");
  try {
    return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw UsageError("--size expects HxW, got \"" + s + "\"");
  }
}

std::string iso_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
  return buf;
}

RunConfig load_run_config(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig rc;
  if (!config_path.empty()) rc = parse_config_file(config_path);
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got \"" + kv + "\"");
    apply_config_kv(rc, kv.substr(0, eq), kv.substr(eq + 1), "--set " + kv);
  }
  return rc;
}

const char* class_label(int32_t cls) {
  switch (cls) {
    case kClassBackground: return "background";
    case kClassRectangle: return "rectangle";
    case kClassCircle: return "circle";
    case kClassTriangle: return "triangle";
    default: return "?";
  }
}

int cmd_gen(const std::string& out, int64_t samples, uint64_t seed, const std::string& size,
            int64_t max_shapes) {
  GenConfig gc;
  std::tie(gc.H, gc.W) = parse_size(size);
  if (gc.H < 16 || gc.W < 16) throw UsageError("--size below the 16x16 minimum");
  if (samples < 0) throw UsageError("--samples must be >= 0");
  gc.max_shapes = max_shapes;
  std::vector<Sample> out_samples;
  out_samples.reserve(static_cast<size_t>(samples));
  std::map<int32_t, int64_t> hist;
  for (int64_t i = 0; i < samples; ++i) {
    out_samples.push_back(generate_scene(seed + static_cast<uint64_t>(i), gc));
    for (int32_t c : out_samples.back().target.classes) ++hist[c];
  }
  write_dataset(out, out_samples);
  std::cout << "wrote " << samples << " samples to " << out << "\n";
  for (const auto& [cls, count] : hist)
    std::cout << "class " << cls << " (" << class_label(cls) << "): " << count << " masks\n";
  return kExitOk;
}

int cmd_train(const std::string& data_path, const std::string& config_path,
              const std::vector<std::string>& sets, const std::string& variant,
              const std::string& out_ckpt, const std::string& log_path,
              const std::string& resume_path, bool no_timestamp) {
  RunConfig rc = load_run_config(config_path, sets);
  if (!variant.empty()) {
    auto v = variant_from_name(variant);
    if (!v) throw UsageError("unknown --variant \"" + variant + "\"");
    rc.model.variant = *v;
  }
  std::vector<Sample> dataset = read_dataset(data_path);
  if (dataset.empty()) throw UsageError("dataset is empty: " + data_path);

  Model model = Model::init(rc.model, rc.train.seed);
  if (!resume_path.empty()) model = load_checkpoint(resume_path);
  Trainer trainer(&model, rc.train);
  if (!resume_path.empty()) {
    load_checkpoint(resume_path, &trainer, rc.train);
    trainer.model = &model;  // the loader's internal model is gone
  }

  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw std::runtime_error("cannot open for writing: " + log_path);
    log = &log_file;
  }
  (*log) << "# cmt train\n";
  if (!no_timestamp) (*log) << "# time=" << iso_now() << "\n";
  (*log) << "# variant=" << variant_name(model.cfg.variant) << " seed=" << rc.train.seed
         << " iterations=" << rc.train.iterations << " lr=" << rc.train.base_lr
         << " warmup=" << rc.train.warmup << " w_loc=" << model.cfg.loss_w_loc
         << " w_ins=" << model.cfg.loss_w_ins << " tau=" << model.cfg.tau
         << " samples=" << dataset.size() << (resume_path.empty() ? "" : " resumed=1") << "\n";
  (*log) << "# columns=step\tloss_total\tloss_mask\tloss_loc\tloss_ins\tlr\n";

  train(model, dataset, rc.train, log, &trainer);

  save_checkpoint(out_ckpt, model, &trainer);
  std::cout << "wrote checkpoint " << out_ckpt << "\n";
  return kExitOk;
}

void print_pq(const PQResult& res, bool tsv, const std::string& tag) {
  std::ostream& o = std::cout;
  char buf[256];
  if (tsv) {
    o << tag << "\tpq\t" << res.pq << "\n" << tag << "\tsq\t" << res.sq << "\n"
      << tag << "\trq\t" << res.rq << "\n" << tag << "\tpq_things\t" << res.pq_thing << "\n"
      << tag << "\tpq_stuff\t" << res.pq_stuff << "\n";
    for (const auto& r : res.per_class) {
      o << tag << "\tclass\t" << r.class_id << "\t" << r.pq << "\t" << r.sq << "\t" << r.rq << "\t"
        << r.tp << "\t" << r.fp << "\t" << r.fn << "\n";
    }
    return;
  }
  o << "== " << tag << " ==\n";
  std::snprintf(buf, sizeof buf, "PQ %.4f  SQ %.4f  RQ %.4f  PQ[things] %.4f  PQ[stuff] %.4f\n",
                res.pq, res.sq, res.rq, res.pq_thing, res.pq_stuff);
  o << buf;
  for (const auto& r : res.per_class) {
    std::snprintf(buf, sizeof buf,
                  "  class %d (%s): pq %.4f sq %.4f rq %.4f  tp %lld fp %lld fn %lld\n",
                  r.class_id, class_label(r.class_id), r.pq, r.sq, r.rq,
                  static_cast<long long>(r.tp), static_cast<long long>(r.fp),
                  static_cast<long long>(r.fn));
    o << buf;
  }
}

int cmd_eval(const std::string& data_path, const std::string& ckpt_path, const std::string& merge,
             double conf_threshold, double object_threshold, double overlap_threshold, bool tsv,
             bool oracle) {
  if (merge != "argmax" && merge != "maskwise")
    throw UsageError("--merge must be argmax or maskwise, got \"" + merge + "\"");
  std::vector<Sample> dataset = read_dataset(data_path);
  std::optional<Model> model;
  if (!oracle) {
    if (ckpt_path.empty()) throw UsageError("--ckpt is required unless --oracle is given");
    model.emplace(load_checkpoint(ckpt_path));
  }
  PQAccumulator acc(thing_classes_from_mask(kThingClassMask));
  for (const Sample& s : dataset) {
    const PanopticMap gt = target_to_map(s.target, kClassBackground);
    if (oracle) {
      acc.add_image(gt, gt);
      continue;
    }
    Prediction pred = model->predict(s.image, s.H, s.W);
    PanopticMap pm = merge == "argmax"
                         ? pixelwise_argmax(pred, conf_threshold)
                         : maskwise_merge(pred, object_threshold, overlap_threshold);
    acc.add_image(upsample_map(pm, 4), gt);
  }
  print_pq(acc.result(), tsv, merge + (oracle ? "+oracle" : ""));
  return kExitOk;
}

int cmd_attn(const std::string& ckpt_path, const std::string& data_path, int64_t sample_idx,
             int64_t center, const std::string& out_dir) {
  Model model = load_checkpoint(ckpt_path);
  if (center < 0 || center >= model.cfg.N)
    throw UsageError("--center " + std::to_string(center) + " out of range, model has " +
                     std::to_string(model.cfg.N) + " centers");
  std::vector<Sample> dataset = read_dataset(data_path);
  if (sample_idx < 0 || sample_idx >= static_cast<int64_t>(dataset.size()))
    throw UsageError("--sample " + std::to_string(sample_idx) + " out of range, dataset has " +
                     std::to_string(dataset.size()) + " samples");
  const Sample& s = dataset[static_cast<size_t>(sample_idx)];

  Tape tape;
  auto pv = model.push_params(tape, false);
  ForwardOutputs out = model.forward(tape, s.image, s.H, s.W, pv, /*want_traces=*/true);
  const int64_t HW = out.H4 * out.W4, N = model.cfg.N;

  std::filesystem::create_directories(out_dir);
  std::vector<Array> assign_per_layer, attn_per_layer;
  for (size_t l = 0; l < out.traces.size(); ++l) {
    const LayerTrace& tr = out.traces[l];
    assign_per_layer.push_back(tr.Z);
    Array attn_cols(Shape{HW, N});
    for (int64_t n = 0; n < N; ++n)
      for (int64_t x = 0; x < HW; ++x) attn_cols.at(x, n) = tr.A_baseline.at(n, x);
    attn_per_layer.push_back(attn_cols);

    Array zc(Shape{HW}), ac(Shape{HW});
    for (int64_t x = 0; x < HW; ++x) {
      zc.data[static_cast<size_t>(x)] = tr.Z.at(x, center);
      ac.data[static_cast<size_t>(x)] = tr.A_baseline.at(center, x);
    }
    const std::string stem = out_dir + "/layer" + std::to_string(l);
    write_pgm(stem + "_assign.pgm", zc, out.H4, out.W4);
    write_pgm(stem + "_attn.pgm", ac, out.H4, out.W4);
  }

  const auto e_assign = attention_entropy_report(assign_per_layer, center);
  const auto e_attn = attention_entropy_report(attn_per_layer, center);
  std::cout << "layer\tattn_entropy\tassign_entropy\n";
  for (size_t l = 0; l < e_assign.size(); ++l) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\n", l, e_attn[l], e_assign[l]);
    std::cout << buf;
  }
  std::cout << "wrote " << 2 * out.traces.size() << " heatmaps to " << out_dir << "\n";
  return kExitOk;
}

// ---- gradcheck ----

Sample tiny_sample() {
  Sample s;
  s.H = 8;
  s.W = 8;
  SplitMix64 rng(7);
  s.image = random_array(Shape{64, 3}, rng, 0.0, 1.0);
  s.target.H = 8;
  s.target.W = 8;
  std::vector<uint8_t> mask(64, 0);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) mask[static_cast<size_t>(i * 8 + j)] = 1;
  s.target.masks.push_back(mask);
  s.target.classes.push_back(kClassRectangle);
  return s;
}

int cmd_gradcheck(const std::string& size, uint64_t seed, bool inject_fault) {
  if (size != "tiny" && size != "small")
    throw UsageError("--size must be tiny or small, got \"" + size + "\"");
  SplitMix64 rng(seed * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
  std::vector<std::pair<std::string, double>> results;
  auto check = [&](const std::string& name, const ScalarFn& f, std::vector<Array> inputs,
                   double eps = 1e-5, double floor = 1e-8) {
    results.emplace_back(name, finite_diff_check(f, std::move(inputs), eps, floor));
  };
  auto sum = [](Tape& t, Var v) { return reduce_sum_all(v); };

  Array a = random_array(Shape{4, 5}, rng), b = random_array(Shape{5, 3}, rng);
  Array c = random_array(Shape{4, 5}, rng), r = random_array(Shape{1, 5}, rng);
  Array col = random_array(Shape{4, 1}, rng);
  Array pos = random_array(Shape{4, 5}, rng, 0.2, 2.0);
  Array ct = random_array(Shape{5, 4}, rng), ccat = random_array(Shape{4, 10}, rng);

  check("matmul", [&](Tape& t, const std::vector<Var>& v) { return sum(t, matmul(v[0], v[1])); },
        {a, b});
  check("transpose",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, mul(transpose(v[0]), t.constant(ct))); },
        {a});
  for (int axis : {0, 1})
    check("softmax_axis" + std::to_string(axis),
          [&, axis](Tape& t, const std::vector<Var>& v) {
            return sum(t, mul(softmax_axis(v[0], axis), t.constant(c)));
          },
          {a});
  check("add", [&](Tape& t, const std::vector<Var>& v) { return sum(t, add(v[0], v[1])); }, {a, c});
  check("sub", [&](Tape& t, const std::vector<Var>& v) { return sum(t, sub(v[0], v[1])); }, {a, c});
  check("mul", [&](Tape& t, const std::vector<Var>& v) { return sum(t, mul(v[0], v[1])); }, {a, c});
  check("divide", [&](Tape& t, const std::vector<Var>& v) { return sum(t, divide(v[0], v[1])); },
        {a, pos});
  check("sigmoid", [&](Tape& t, const std::vector<Var>& v) { return sum(t, sigmoid(v[0])); }, {a});
  check("gelu", [&](Tape& t, const std::vector<Var>& v) { return sum(t, gelu(v[0])); }, {a});
  check("log", [&](Tape& t, const std::vector<Var>& v) { return sum(t, log_(v[0])); }, {pos});
  check("exp", [&](Tape& t, const std::vector<Var>& v) { return sum(t, exp_(v[0])); }, {a});
  check("abs", [&](Tape& t, const std::vector<Var>& v) { return sum(t, abs_(v[0])); }, {pos});
  check("sqrt", [&](Tape& t, const std::vector<Var>& v) { return sum(t, sqrt_(v[0])); }, {pos});
  check("scale", [&](Tape& t, const std::vector<Var>& v) { return sum(t, scale(v[0], -1.7)); }, {a});
  check("add_scalar",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, add_scalar(v[0], 0.3)); }, {a});
  const std::pair<const char*, Reduce> kinds[] = {
      {"reduce_sum", Reduce::Sum}, {"reduce_mean", Reduce::Mean},
      {"reduce_min", Reduce::Min}, {"reduce_max", Reduce::Max}};
  for (auto [nm, k] : kinds)
    check(nm, [&, k](Tape& t, const std::vector<Var>& v) { return sum(t, reduce(v[0], k, 1)); },
          {a});
  check("concat",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, mul(concat(v[0], v[1], 1), t.constant(ccat))); },
        {a, c});
  check("slice",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, slice(v[0], 1, 1, 3)); }, {a});
  check("gather_pad",
        [&](Tape& t, const std::vector<Var>& v) {
          return sum(t, gather_pad(v[0], {0, 3, -1, 7, 7, 12, -1, 19}, Shape{2, 4}));
        },
        {a});
  check("gather_rows",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, gather_rows(v[0], {2, 0, 2})); },
        {a});
  check("broadcast_col",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, mul(broadcast_col(v[0], 5), t.constant(c))); },
        {col});
  check("add_rowvec",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, add_rowvec(v[0], v[1])); }, {a, r});
  // weighted readout: a plain sum of normalized rows is identically zero
  check("layer_norm",
        [&](Tape& t, const std::vector<Var>& v) { return sum(t, mul(layer_norm_rows(v[0]), t.constant(c))); },
        {a});

  // full forward + loss composite
  ModelConfig mc;
  mc.D = 16;
  mc.N = 3;
  mc.num_layers = size == "tiny" ? 1 : 2;
  mc.M = 4;
  mc.sample_count = 4;
  Model model = Model::init(mc, seed);
  // zero-initialized projections have zero gradient paths; jitter everything
  for (auto& [name, arr] : model.params.items)
    for (double& x : arr.data) x += 0.05 * rng.next_gaussian();
  const Sample s = size == "tiny" ? tiny_sample() : generate_scene(seed, GenConfig{16, 16, 2});
  std::vector<Array> inputs;
  for (const auto& [name, arr] : model.params.items) inputs.push_back(arr);
  // deep composite: bigger step + mixed absolute/relative criterion keeps the
  // check above the central-difference noise floor (see finite_diff_check)
  check("forward_loss",
        [&](Tape& t, const std::vector<Var>& pv) {
          ForwardOutputs out = model.forward(t, s.image, s.H, s.W, pv);
          return model.sample_loss(t, s, pv, 42, out).first;
        },
        inputs, 1e-4, 1e-4);

  if (inject_fault) results.emplace_back("injected-fault", 1.0);

  bool ok = true;
  for (const auto& [name, err] : results) {
    const bool pass = err < 1e-4;
    ok = ok && pass;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%-16s max_rel_err %.3e  %s\n", name.c_str(), err,
                  pass ? "ok" : "FAIL");
    std::cout << buf;
  }
  if (!ok) {
    std::cout << "gradient check FAILED\n";
    return kExitCheck;
  }
  std::cout << "all gradients match finite differences (< 1e-4)\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clustering-mask-transformer toolbox"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string gen_out, gen_size = "64x64";
  int64_t gen_samples = 128, gen_max_shapes = 4;
  uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--samples", gen_samples, "number of samples");
  gen->add_option("--seed", gen_seed, "base seed (sample i uses seed+i)");
  gen->add_option("--size", gen_size, "raster size HxW (min 16x16)");
  gen->add_option("--max-shapes", gen_max_shapes, "max shapes per scene (1..8)");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_config, tr_variant, tr_out, tr_log, tr_resume;
  std::vector<std::string> tr_sets;
  bool tr_no_ts = false;
  tr->add_option("--data", tr_data, "training dataset")->required();
  tr->add_option("--config", tr_config, "key=value config file");
  tr->add_option("--set", tr_sets, "config override key=value (repeatable)");
  tr->add_option("--variant", tr_variant, "baseline_eq3 | clustering_eq5 | combined_eq7");
  tr->add_option("--out", tr_out, "checkpoint output path")->required();
  tr->add_option("--log", tr_log, "metrics log path (default stdout)");
  tr->add_option("--resume", tr_resume, "checkpoint to continue from");
  tr->add_flag("--no-timestamp", tr_no_ts, "omit the timestamp header line");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (PQ table)");
  std::string ev_data, ev_ckpt, ev_merge = "argmax";
  double ev_conf = 0.7, ev_obj = 0.7, ev_overlap = 0.5;
  bool ev_tsv = false, ev_oracle = false;
  ev->add_option("--data", ev_data, "evaluation dataset")->required();
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path");
  ev->add_option("--merge", ev_merge, "argmax | maskwise");
  ev->add_option("--conf-threshold", ev_conf, "argmax: min class confidence");
  ev->add_option("--object-threshold", ev_obj, "maskwise: min class confidence");
  ev->add_option("--overlap-threshold", ev_overlap, "maskwise: retained/owned ratio");
  ev->add_flag("--tsv", ev_tsv, "machine-readable output");
  ev->add_flag("--oracle", ev_oracle, "score ground truth against itself");

  // attn
  auto* at = app.add_subcommand("attn", "export attention heatmaps + entropy table");
  std::string at_ckpt, at_data, at_dir;
  int64_t at_sample = 0, at_center = 0;
  at->add_option("--ckpt", at_ckpt, "checkpoint path")->required();
  at->add_option("--data", at_data, "dataset path")->required();
  at->add_option("--sample", at_sample, "sample index");
  at->add_option("--center", at_center, "cluster center index");
  at->add_option("--out-dir", at_dir, "heatmap output directory")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string gc_size = "tiny";
  uint64_t gc_seed = 1;
  bool gc_fault = false;
  gc->add_option("--size", gc_size, "tiny | small");
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_flag("--inject-fault", gc_fault, "test hook: force a failing entry")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_out, gen_samples, gen_seed, gen_size, gen_max_shapes);
    if (tr->parsed())
      return cmd_train(tr_data, tr_config, tr_sets, tr_variant, tr_out, tr_log, tr_resume,
                       tr_no_ts);
    if (ev->parsed())
      return cmd_eval(ev_data, ev_ckpt, ev_merge, ev_conf, ev_obj, ev_overlap, ev_tsv, ev_oracle);
    if (at->parsed()) return cmd_attn(at_ckpt, at_data, at_sample, at_center, at_dir);
    if (gc->parsed()) return cmd_gradcheck(gc_size, gc_seed, gc_fault);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const GenerationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
