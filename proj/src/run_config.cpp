#include "cmt/run_config.hpp"

#include <fstream>

namespace cmt {

namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& v, const std::string& ctx) {
  try {
    size_t pos = 0;
    const int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": expected an integer, got \"" + v + "\"");
  }
}

double parse_double(const std::string& v, const std::string& ctx) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": expected a number, got \"" + v + "\"");
  }
}

bool parse_bool(const std::string& v, const std::string& ctx) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError(ctx + ": expected a boolean (true/false/1/0), got \"" + v + "\"");
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value,
                     const std::string& ctx) {
  if (key == "d") cfg.model.D = parse_int(value, ctx);
  else if (key == "queries") cfg.model.N = parse_int(value, ctx);
  else if (key == "layers") cfg.model.num_layers = parse_int(value, ctx);
  else if (key == "ref_points") cfg.model.M = parse_int(value, ctx);
  else if (key == "variant") {
    auto v = variant_from_name(value);
    if (!v)
      throw ConfigError(ctx + ": unknown variant \"" + value +
                        "\" (expected baseline_eq3, clustering_eq5 or combined_eq7)");
    cfg.model.variant = *v;
  } else if (key == "rfn") cfg.model.rfn = parse_bool(value, ctx);
  else if (key == "self_attention") cfg.model.self_attention = parse_bool(value, ctx);
  else if (key == "location") cfg.model.location = parse_bool(value, ctx);
  else if (key == "layer_norm") cfg.model.layer_norm = parse_bool(value, ctx);
  else if (key == "ffn") cfg.model.ffn = parse_bool(value, ctx);
  else if (key == "attn_scale") cfg.model.attn_scale = parse_bool(value, ctx);
  else if (key == "fresh_readout") cfg.model.fresh_readout = parse_bool(value, ctx);
  else if (key == "w_loc") cfg.model.loss_w_loc = parse_double(value, ctx);
  else if (key == "w_ins") cfg.model.loss_w_ins = parse_double(value, ctx);
  else if (key == "w_aux") cfg.model.loss_w_aux = parse_double(value, ctx);
  else if (key == "tau") cfg.model.tau = parse_double(value, ctx);
  else if (key == "contrastive_samples") cfg.model.sample_count = parse_int(value, ctx);
  else if (key == "iterations") cfg.train.iterations = parse_int(value, ctx);
  else if (key == "batch") cfg.train.batch = parse_int(value, ctx);
  else if (key == "lr") cfg.train.base_lr = parse_double(value, ctx);
  else if (key == "warmup") cfg.train.warmup = parse_int(value, ctx);
  else if (key == "poly_power") cfg.train.poly_power = parse_double(value, ctx);
  else if (key == "grad_clip") cfg.train.grad_clip = parse_double(value, ctx);
  else if (key == "seed") cfg.train.seed = static_cast<uint64_t>(parse_int(value, ctx));
  else if (key == "log_interval") cfg.train.log_interval = parse_int(value, ctx);
  else if (key == "gen_h") cfg.gen.H = parse_int(value, ctx);
  else if (key == "gen_w") cfg.gen.W = parse_int(value, ctx);
  else if (key == "gen_max_shapes") cfg.gen.max_shapes = parse_int(value, ctx);
  else if (key == "gen_shape_kinds") cfg.gen.shape_kinds = static_cast<uint32_t>(parse_int(value, ctx));
  else if (key == "gen_count") cfg.gen_count = parse_int(value, ctx);
  else if (key == "merge") {
    if (value != "argmax" && value != "maskwise")
      throw ConfigError(ctx + ": merge must be \"argmax\" or \"maskwise\", got \"" + value + "\"");
    cfg.merge = value;
  } else if (key == "conf_threshold") cfg.conf_threshold = parse_double(value, ctx);
  else if (key == "object_threshold") cfg.object_threshold = parse_double(value, ctx);
  else if (key == "overlap_threshold") cfg.overlap_threshold = parse_double(value, ctx);
  else throw ConfigError(ctx + ": unknown key \"" + key + "\"");
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string ctx = path + ":" + std::to_string(lineno);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(ctx + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(ctx + ": empty key");
    apply_config_kv(cfg, key, value, ctx);
  }
  return cfg;
}

}  // namespace cmt
