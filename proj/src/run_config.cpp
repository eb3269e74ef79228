#include "dmckn/run_config.hpp"

#include <fstream>
#include <initializer_list>

#include "dmckn/error.hpp"

namespace dmckn {

namespace {

void check_keys(const json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw ArgumentError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) {
      std::string valid;
      for (const char* k : keys) valid += (valid.empty() ? "" : ", ") + std::string(k);
      throw ArgumentError(std::string(what) + ": unknown key '" + key + "' (valid: " + valid + ")");
    }
  }
}

template <class T>
void opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void to_json(json& j, const GridSpec& g) { j = json{{"rows", g.rows}, {"cols", g.cols}}; }

void from_json(const json& j, GridSpec& g) {
  check_keys(j, {"rows", "cols"}, "grid");
  opt(j, "rows", g.rows);
  opt(j, "cols", g.cols);
}

void to_json(json& j, const LayerConfig& l) {
  j = json{{"max_order", l.max_order}, {"d_out", l.d_out}, {"gamma", l.gamma}, {"thres", l.thres},
           {"project", l.project}};
}

void from_json(const json& j, LayerConfig& l) {
  check_keys(j, {"max_order", "d_out", "gamma", "thres", "project"}, "layer");
  opt(j, "max_order", l.max_order);
  opt(j, "d_out", l.d_out);
  opt(j, "gamma", l.gamma);
  opt(j, "thres", l.thres);
  opt(j, "project", l.project);
}

void to_json(json& j, const NetworkConfig& n) {
  j = json{{"grid", n.grid},
           {"d_visual", n.d_visual},
           {"pos_dim", n.pos_dim},
           {"layers", n.layers},
           {"key_dim", n.key_dim},
           {"value_dim", n.value_dim},
           {"share_attention", n.share_attention},
           {"project_per_direction", n.project_per_direction},
           {"ramp", n.ramp},
           {"identity_block", n.identity_block == IdentityBlock::NetworkInput ? "input" : "previous"}};
}

void from_json(const json& j, NetworkConfig& n) {
  check_keys(j,
             {"grid", "d_visual", "pos_dim", "layers", "key_dim", "value_dim", "share_attention",
              "project_per_direction", "ramp", "identity_block"},
             "network");
  opt(j, "grid", n.grid);
  opt(j, "d_visual", n.d_visual);
  opt(j, "pos_dim", n.pos_dim);
  opt(j, "layers", n.layers);
  opt(j, "key_dim", n.key_dim);
  opt(j, "value_dim", n.value_dim);
  opt(j, "share_attention", n.share_attention);
  opt(j, "project_per_direction", n.project_per_direction);
  opt(j, "ramp", n.ramp);
  if (j.contains("identity_block")) {
    const auto s = j.at("identity_block").get<std::string>();
    if (s == "previous") n.identity_block = IdentityBlock::PreviousLayer;
    else if (s == "input") n.identity_block = IdentityBlock::NetworkInput;
    else throw ArgumentError("network: identity_block must be 'previous' or 'input'");
  }
}

void to_json(json& j, const EvalProtocol& p) {
  if (p.kind == EvalProtocol::Kind::TopK) j = json{{"topk", p.top_k}};
  else j = json{{"threshold", p.threshold}};
}

void from_json(const json& j, EvalProtocol& p) {
  check_keys(j, {"topk", "threshold"}, "protocol");
  if (j.contains("topk") == j.contains("threshold"))
    throw ArgumentError("protocol: give exactly one of topk and threshold");
  if (j.contains("topk")) p = EvalProtocol::top(j.at("topk").get<std::size_t>());
  else p = EvalProtocol::above(j.at("threshold").get<double>());
}

void to_json(json& j, const TrainConfig& t) {
  j = json{{"epochs", t.epochs},
           {"batch_size", t.batch_size},
           {"max_lr", t.max_lr},
           {"weight_decay", t.weight_decay},
           {"neg_ratio", t.neg_ratio},
           {"early_stop_patience", t.early_stop_patience},
           {"seed", t.seed},
           {"groups", t.groups},
           {"grouped", t.grouped},
           {"rho", t.rho},
           {"ema_decay", t.ema_decay},
           {"val_fraction", t.val_fraction},
           {"val_protocol", t.val_protocol},
           {"threads", t.threads}};
}

void from_json(const json& j, TrainConfig& t) {
  check_keys(j,
             {"epochs", "batch_size", "max_lr", "weight_decay", "neg_ratio", "early_stop_patience", "seed", "groups",
              "grouped", "rho", "ema_decay", "val_fraction", "val_protocol", "threads"},
             "train");
  opt(j, "epochs", t.epochs);
  opt(j, "batch_size", t.batch_size);
  opt(j, "max_lr", t.max_lr);
  opt(j, "weight_decay", t.weight_decay);
  opt(j, "neg_ratio", t.neg_ratio);
  opt(j, "early_stop_patience", t.early_stop_patience);
  opt(j, "seed", t.seed);
  opt(j, "groups", t.groups);
  opt(j, "grouped", t.grouped);
  opt(j, "rho", t.rho);
  opt(j, "ema_decay", t.ema_decay);
  opt(j, "val_fraction", t.val_fraction);
  opt(j, "val_protocol", t.val_protocol);
  opt(j, "threads", t.threads);
}

void to_json(json& j, const GroupPartition& p) {
  j = json{{"groups", p.groups}, {"assignment", p.assignment}, {"weights", p.weights}};
}

void from_json(const json& j, GroupPartition& p) {
  check_keys(j, {"groups", "assignment", "weights"}, "partition");
  j.at("groups").get_to(p.groups);
  j.at("assignment").get_to(p.assignment);
  j.at("weights").get_to(p.weights);
}

void to_json(json& j, const TrainingState& s) {
  j = json{{"step", s.step}, {"epoch", s.epoch}, {"seed", s.seed}, {"total_steps", s.total_steps}};
}

void from_json(const json& j, TrainingState& s) {
  check_keys(j, {"step", "epoch", "seed", "total_steps"}, "state");
  opt(j, "step", s.step);
  opt(j, "epoch", s.epoch);
  opt(j, "seed", s.seed);
  opt(j, "total_steps", s.total_steps);
}

void to_json(json& j, const SynthConfig& s) {
  j = json{{"grid", s.grid},
           {"n_images", s.n_images},
           {"n_labels", s.n_labels},
           {"feature_dim", s.feature_dim},
           {"n_patterns", s.n_patterns},
           {"noise", s.noise},
           {"content_rate", s.content_rate},
           {"positive_rate", s.positive_rate},
           {"decoy_rate", s.decoy_rate},
           {"extra_objects", s.extra_objects},
           {"seed", s.seed},
           {"rule_seed", s.rule_seed}};
}

void from_json(const json& j, SynthConfig& s) {
  check_keys(j,
             {"grid", "n_images", "n_labels", "feature_dim", "n_patterns", "noise", "content_rate", "positive_rate", "decoy_rate",
              "extra_objects", "seed", "rule_seed"},
             "synth");
  opt(j, "grid", s.grid);
  opt(j, "n_images", s.n_images);
  opt(j, "n_labels", s.n_labels);
  opt(j, "feature_dim", s.feature_dim);
  opt(j, "n_patterns", s.n_patterns);
  opt(j, "noise", s.noise);
  opt(j, "content_rate", s.content_rate);
  opt(j, "positive_rate", s.positive_rate);
  opt(j, "decoy_rate", s.decoy_rate);
  opt(j, "extra_objects", s.extra_objects);
  opt(j, "seed", s.seed);
  opt(j, "rule_seed", s.rule_seed);
}

void to_json(json& j, const RunConfig& r) { j = json{{"network", r.network}, {"train", r.train}, {"synth", r.synth}}; }

void from_json(const json& j, RunConfig& r) {
  check_keys(j, {"network", "train", "synth"}, "config");
  opt(j, "network", r.network);
  opt(j, "train", r.train);
  opt(j, "synth", r.synth);
}

RunConfig default_run_config() {
  RunConfig r;
  r.synth = SynthConfig{};
  r.network.grid = r.synth.grid;
  r.network.d_visual = r.synth.feature_dim;
  r.network.pos_dim = 4;
  r.network.key_dim = 8;
  r.network.share_attention = true;
  r.network.ramp = true;
  LayerConfig layer;
  layer.d_out = 16;
  layer.gamma = 0.1;
  r.network.layers = {layer};
  r.train.epochs = 30;
  r.train.batch_size = 32;
  r.train.max_lr = 1e-2;
  r.train.early_stop_patience = 10;
  r.train.val_protocol = EvalProtocol::above(0.0);
  return r;
}

RunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("config " + path.string() + ": " + e.what());
  }
  RunConfig r = default_run_config();
  try {
    from_json(j, r);
  } catch (const json::exception& e) {
    throw ArgumentError("config " + path.string() + ": " + e.what());
  }
  return r;
}

void write_run_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << json(config).dump(2) << '\n';
}

}  // namespace dmckn
