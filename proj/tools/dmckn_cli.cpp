#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dmckn/autodiff.hpp"
#include "dmckn/dataio.hpp"
#include "dmckn/error.hpp"
#include "dmckn/kernel_core.hpp"
#include "dmckn/kernels.hpp"
#include "dmckn/run_config.hpp"
#include "dmckn/training.hpp"

namespace fs = std::filesystem;
using namespace dmckn;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kVerify = 2;

struct VerificationFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Exec exec_mode() { return kernels::num_threads() > 1 ? Exec::Parallel : Exec::Serial; }

// ---- shared flags ---------------------------------------------------------

struct ModelFlags {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> depth, orders, d_out, epochs, batch, groups, neg_ratio, patience, key_dim, pos_dim;
  std::optional<double> gamma, thres, lr, weight_decay, rho, ema, val_fraction;
  std::optional<bool> grouped, ramp, share_attention, project_per_direction;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON run description; flags below override it")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Seed for initialisation, shuffling, splits and --synth data");
    app->add_option("--depth", depth, "Number of layers")->check(CLI::PositiveNumber);
    app->add_option("--orders", orders, "Maximum context order per layer (1 = first order only)")
        ->check(CLI::PositiveNumber);
    app->add_option("--gamma", gamma, "Context weight of every layer")->check(CLI::NonNegativeNumber);
    app->add_option("--thres", thres, "Random-walk filter threshold in [0, 1]")->check(CLI::Range(0.0, 1.0));
    app->add_option("--d-out", d_out, "Projected width of every layer")->check(CLI::PositiveNumber);
    app->add_option("--key-dim", key_dim, "Attention key width")->check(CLI::PositiveNumber);
    app->add_option("--pos-dim", pos_dim, "Positional encoding width (even, 0 disables)");
    app->add_option("--ramp", ramp, "ReLU after each projection (true/false)");
    app->add_option("--share-attention", share_attention, "One attention map per (layer, order) for all directions");
    app->add_option("--project-per-direction", project_per_direction,
                    "Project each direction block separately and sum (true/false)");
    app->add_option("--epochs", epochs, "Training epochs")->check(CLI::PositiveNumber);
    app->add_option("--batch", batch, "Mini-batch size")->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Peak learning rate of the cosine schedule")->check(CLI::NonNegativeNumber);
    app->add_option("--weight-decay", weight_decay, "Decoupled weight decay")->check(CLI::NonNegativeNumber);
    app->add_option("--neg-ratio", neg_ratio, "Sampled negatives per positive label")->check(CLI::PositiveNumber);
    app->add_option("--patience", patience, "Early stopping patience in epochs")->check(CLI::PositiveNumber);
    app->add_option("--groups", groups, "Number of label groups G")->check(CLI::PositiveNumber);
    app->add_option("--grouped", grouped, "Grouped classification (true/false)");
    app->add_option("--rho", rho, "Contraction bound enforced on the neighbourhood matrices")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--ema", ema, "Parameter moving-average decay (0 disables)")->check(CLI::Range(0.0, 1.0));
    app->add_option("--val-fraction", val_fraction, "Held-out share of the training data")
        ->check(CLI::Range(0.0, 1.0));
  }

  RunConfig resolve() const {
    RunConfig rc = config ? read_run_config(*config) : default_run_config();
    if (seed) {
      rc.train.seed = *seed;
      rc.synth.seed = *seed;
    }
    auto& layers = rc.network.layers;
    if (depth) layers.resize(*depth, layers.empty() ? LayerConfig{} : layers.front());
    for (auto& l : layers) {
      if (orders) l.max_order = *orders;
      if (gamma) l.gamma = *gamma;
      if (thres) l.thres = *thres;
      if (d_out) l.d_out = *d_out;
    }
    if (key_dim) rc.network.key_dim = *key_dim;
    if (pos_dim) rc.network.pos_dim = *pos_dim;
    if (ramp) rc.network.ramp = *ramp;
    if (share_attention) rc.network.share_attention = *share_attention;
    if (project_per_direction) rc.network.project_per_direction = *project_per_direction;
    if (epochs) rc.train.epochs = *epochs;
    if (batch) rc.train.batch_size = *batch;
    if (lr) rc.train.max_lr = *lr;
    if (weight_decay) rc.train.weight_decay = *weight_decay;
    if (neg_ratio) rc.train.neg_ratio = *neg_ratio;
    if (patience) rc.train.early_stop_patience = *patience;
    if (groups) rc.train.groups = *groups;
    if (grouped) rc.train.grouped = *grouped;
    if (rho) rc.train.rho = *rho;
    if (ema) rc.train.ema_decay = *ema;
    if (val_fraction) rc.train.val_fraction = *val_fraction;
    return rc;
  }
};

struct DataFlags {
  bool synth = false;
  std::optional<std::size_t> images;
  fs::path features, labels, vocab;

  void add(CLI::App* app, bool allow_synth) {
    if (allow_synth) {
      app->add_flag("--synth", synth, "Generate the synthetic context dataset instead of reading files");
      app->add_option("--images", images, "Image count for --synth")->check(CLI::PositiveNumber);
    }
    app->add_option("--features", features, "Feature file (CKNF)");
    app->add_option("--labels", labels, "Label file (id<TAB>label,...)");
    app->add_option("--vocab", vocab, "Vocabulary file (default: <labels>.vocab)");
  }

  LabeledDataset load(RunConfig& rc) const {
    if (synth) {
      if (images) rc.synth.n_images = *images;
      rc.synth.grid = rc.network.grid;
      rc.synth.feature_dim = rc.network.d_visual;
      return synth_dataset(rc.synth).data;
    }
    if (features.empty() || labels.empty()) throw ArgumentError("give --features and --labels (or --synth)");
    for (const fs::path& p : {features, labels})
      if (!fs::exists(p)) throw DataError("no such file: " + p.string());
    return load_dataset(features, labels, vocab);
  }
};

struct ProtocolFlags {
  std::optional<std::size_t> topk;
  std::optional<double> threshold;

  void add(CLI::App* app) {
    auto* k = app->add_option("--topk", topk, "Predict the k highest-scoring labels per image")
                  ->check(CLI::PositiveNumber);
    auto* t = app->add_option("--threshold", threshold, "Predict labels whose logit exceeds this value");
    k->excludes(t);
  }

  EvalProtocol resolve(const EvalProtocol& fallback) const {
    if (topk) return EvalProtocol::top(*topk);
    if (threshold) return EvalProtocol::above(*threshold);
    return fallback;
  }
};

void check_compatible(const NetworkConfig& net, const LabeledDataset& data) {
  if (data.grid != net.grid || data.feature_dim != net.d_visual) {
    throw DataError("dataset is " + std::to_string(data.grid.rows) + "x" + std::to_string(data.grid.cols) + "x" +
                    std::to_string(data.feature_dim) + " but the model expects " + std::to_string(net.grid.rows) +
                    "x" + std::to_string(net.grid.cols) + "x" + std::to_string(net.d_visual));
  }
}

// Data read from files fixes the grid and the visual width of a new model.
void adopt_shape(RunConfig& rc, const LabeledDataset& data) {
  rc.network.grid = data.grid;
  rc.network.d_visual = data.feature_dim;
  rc.synth.grid = data.grid;
  rc.synth.feature_dim = data.feature_dim;
}

std::string protocol_name(const EvalProtocol& p) {
  std::ostringstream s;
  if (p.kind == EvalProtocol::Kind::TopK) s << "top" << p.top_k;
  else s << "threshold" << p.threshold;
  return s.str();
}

void print_report(std::ostream& out, const std::string& title, const MetricsReport& m) {
  out << std::fixed << std::setprecision(6);
  out << title << "  precision " << m.precision << "  recall " << m.recall << "  macro_f1 " << m.macro_f1
      << "  micro_f1 " << m.micro_f1 << "  map " << m.map << '\n';
  out.unsetf(std::ios::floatfield);
}

void write_report_csv(const fs::path& path, const EvalProtocol& protocol, const MetricsReport& m,
                      const std::vector<std::string>& vocab) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(17);
  out << "label,precision,recall,f1,average_precision,tp,fp,fn\n";
  out << "ALL(" << protocol_name(protocol) << ")," << m.precision << ',' << m.recall << ',' << m.macro_f1 << ','
      << m.map << ",,,\n";
  out << "MICRO,,," << m.micro_f1 << ",,,,\n";
  for (std::size_t k = 0; k < m.per_class.size(); ++k) {
    const auto& c = m.per_class[k];
    out << (k < vocab.size() ? vocab[k] : std::to_string(k)) << ',' << c.precision << ',' << c.recall << ','
        << c.f1 << ',' << c.average_precision << ',' << c.tp << ',' << c.fp << ',' << c.fn << '\n';
  }
}

fs::path prepare_out(const fs::path& dir) {
  fs::create_directories(dir);
  return dir;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  ModelFlags model;
  DataFlags data;
  fs::path out = "run";
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = a.model.resolve();
  const LabeledDataset data = a.data.load(rc);
  if (!a.data.synth) adopt_shape(rc, data);
  check_compatible(rc.network, data);
  const fs::path out = prepare_out(a.out);
  write_run_config(out / "config.json", rc);
  if (a.data.synth) save_dataset(data, out / "features.cknf", out / "labels.txt");

  std::ofstream log(out / "train.log");
  std::ostringstream buf;
  const FitResult fitted = fit(data, nullptr, rc.network, rc.train, &buf);
  std::cout << buf.str();
  log << buf.str();

  const auto [tr, va] = validation_split(data.size(), rc.train.val_fraction, rc.train.seed);
  save_checkpoint({fitted.model, fitted.state}, out / "model.ckpt");
  {
    std::ofstream hist(out / "history.csv");
    write_history_csv(hist, fitted.history);
  }
  if (!va.empty()) {
    const LabeledDataset val = data.subset(va);
    const MetricsReport m = evaluate(fitted.model, val, rc.train.val_protocol, {}, exec_mode());
    std::ostringstream line;
    print_report(line, "validation (best epoch " + std::to_string(fitted.best_epoch) + ", " +
                           protocol_name(rc.train.val_protocol) + ")",
                 m);
    std::cout << line.str();
    log << line.str();
    write_report_csv(out / "val_metrics.csv", rc.train.val_protocol, m, data.vocabulary);
  }
  std::cout << "wrote " << (out / "model.ckpt").string() << '\n';
  return kOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  fs::path checkpoint;
  std::optional<fs::path> config;
  DataFlags data;
  ProtocolFlags protocol;
  std::string split = "all";
  fs::path out = "eval";
};

int cmd_eval(const EvalArgs& a) {
  RunConfig rc = a.config ? read_run_config(*a.config) : default_run_config();
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  if (a.config && !(rc.network == ckpt.model.network))
    throw DataError("config " + a.config->string() + " describes a different network than " + a.checkpoint.string());
  rc.network = ckpt.model.network;
  LabeledDataset data = a.data.load(rc);
  check_compatible(ckpt.model.network, data);
  if (data.label_count() != ckpt.model.partition.assignment.size())
    throw DataError("dataset has " + std::to_string(data.label_count()) + " labels, the checkpoint " +
                    std::to_string(ckpt.model.partition.assignment.size()));
  if (a.split != "all") {
    const auto [tr, va] = validation_split(data.size(), rc.train.val_fraction, ckpt.state.seed);
    data = data.subset(a.split == "val" ? va : tr);
  }
  if (data.size() == 0) throw DataError("evaluation set is empty");
  const EvalProtocol protocol = a.protocol.resolve(rc.train.val_protocol);
  const MetricsReport m = evaluate(ckpt.model, data, protocol, {}, exec_mode());
  print_report(std::cout, a.split + " (" + protocol_name(protocol) + ")", m);
  const fs::path out = prepare_out(a.out);
  write_report_csv(out / "metrics.csv", protocol, m, data.vocabulary);
  write_run_config(out / "config.json", rc);
  return kOk;
}

// ---- gramcheck ------------------------------------------------------------

struct GramArgs {
  std::size_t instances = 50;
  std::size_t max_rows = 3, max_cols = 4, max_dim = 8, max_depth = 3;
  std::optional<double> gamma;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  bool inject_fault = false;
};

int cmd_gramcheck(const GramArgs& a) {
  double worst = 0.0;
  std::string worst_dump;
  std::mt19937_64 rng(a.seed);
  for (std::size_t inst = 0; inst < a.instances; ++inst) {
    const std::uint64_t inst_seed = rng();
    std::mt19937_64 r(inst_seed);
    auto uniform = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(r); };
    const GridSpec grid = build_grid(uniform(1, a.max_rows), uniform(1, a.max_cols));
    const std::size_t d0 = uniform(1, a.max_dim), depth = uniform(1, a.max_depth);
    const double gamma = a.gamma ? *a.gamma : std::uniform_real_distribution<double>(0.01, 0.2)(r);
    Tensor x(grid.cells(), d0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = normal(r);
    for (std::size_t c = 0; c < grid.cells(); ++c) x(c, 0) += 3.0;  // keeps rows away from zero
    NeighborhoodSystem ns = init_neighborhood(grid);
    for (auto& w : ns.weights)
      for (std::size_t i = 0; i < w.size(); ++i) w[i] *= std::uniform_real_distribution<double>(0.2, 1.0)(r);
    if (gamma > 0.0) ns = spectral_rescale(std::move(ns), gamma, 0.9);

    ContextMapState state = initial_map_state(normalize_rows(x), gamma);
    for (std::size_t t = 0; t < depth; ++t) state = explicit_map_step(state, ns);
    std::vector<Tensor> p(ns.weights.begin(), ns.weights.end());
    if (a.inject_fault && !p.empty()) {
      for (Tensor& pc : p) {
        const auto it = std::find_if(pc.values().begin(), pc.values().end(), [](double v) { return v != 0.0; });
        if (it != pc.values().end()) {
          *it += 0.25;
          break;
        }
      }
    }
    const Tensor k = gram_iterate(base_similarity(x), p, gamma, depth);
    const Tensor phi_gram = kernels::serial::matmul_nt(state.current, state.current);
    const double err = max_abs_diff(phi_gram, k);
    if (err > worst || inst == 0) {
      worst = err;
      std::ostringstream dump;
      dump << "instance " << inst << " seed " << inst_seed << " grid " << grid.rows << "x" << grid.cols << " d0 "
           << d0 << " depth " << depth << " gamma " << std::setprecision(17) << gamma << " error " << err;
      worst_dump = dump.str();
    }
  }
  std::cout << "gramcheck: " << a.instances << " instances, max |PhiPhi^T - K| = " << std::setprecision(6)
            << std::scientific << worst << " (tol " << a.tol << ")\n"
            << std::defaultfloat;
  if (worst > a.tol) {
    std::cout << "worst case: " << worst_dump << '\n';
    throw VerificationFailed("map/Gram disagreement above tolerance");
  }
  return kOk;
}

// ---- gradcheck ------------------------------------------------------------

int cmd_gradcheck(const ModelGradCheck& a) {
  const ad::GradReport report = check_model_gradients(a);
  std::cout << std::scientific << std::setprecision(3);
  for (const auto& p : report.params)
    std::cout << "  " << std::left << std::setw(28) << p.name << " max rel " << p.max_rel_error << "  max abs "
              << p.max_abs_error << '\n';
  std::cout << "gradcheck: max relative error " << report.max_rel_error << " (tol " << a.tol << ")\n"
            << std::defaultfloat;
  if (!report.passed) {
    const auto worst = std::max_element(report.params.begin(), report.params.end(),
                                        [](const auto& x, const auto& y) { return x.max_rel_error < y.max_rel_error; });
    std::cout << "worst case: seed " << a.seed << " tensor " << worst->name << " entry " << worst->worst_index
              << " analytic " << std::setprecision(17) << worst->analytic << " numeric " << worst->numeric << '\n';
    throw VerificationFailed("analytic and numeric gradients disagree");
  }
  return kOk;
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed, rule_seed;
  std::optional<std::size_t> images, labels, rows, cols, dim;
  std::optional<double> noise;
  fs::path out = "synth";
};

int cmd_synth(const SynthArgs& a) {
  RunConfig rc = a.config ? read_run_config(*a.config) : default_run_config();
  SynthConfig& s = rc.synth;
  if (a.seed) s.seed = *a.seed;
  if (a.rule_seed) s.rule_seed = *a.rule_seed;
  if (a.images) s.n_images = *a.images;
  if (a.labels) s.n_labels = *a.labels;
  if (a.rows) s.grid.rows = *a.rows;
  if (a.cols) s.grid.cols = *a.cols;
  if (a.dim) s.feature_dim = *a.dim;
  if (a.noise) s.noise = *a.noise;
  const SynthDataset sd = synth_dataset(s);
  const fs::path out = prepare_out(a.out);
  save_dataset(sd.data, out / "features.cknf", out / "labels.txt");
  std::ofstream rules(out / "rules.csv");
  rules << "label,kind,pattern_a,pattern_b\n";
  for (std::size_t k = 0; k < sd.rules.size(); ++k) {
    rules << sd.data.vocabulary[k] << ',' << to_string(sd.rules[k].kind) << ',' << sd.rules[k].a << ',';
    if (sd.rules[k].kind != RuleKind::Content) rules << sd.rules[k].b;
    rules << '\n';
  }
  std::ofstream layout(out / "cells.csv");
  layout << "image,cell,pattern\n";
  for (std::size_t i = 0; i < sd.cell_patterns.size(); ++i)
    for (std::size_t c = 0; c < sd.cell_patterns[i].size(); ++c)
      if (sd.cell_patterns[i][c]) layout << sd.data.ids[i] << ',' << c << ',' << sd.cell_patterns[i][c] << '\n';
  write_run_config(out / "config.json", rc);
  std::cout << "wrote " << sd.data.size() << " images, " << sd.data.label_count() << " labels to " << out.string()
            << '\n';
  return kOk;
}

// ---- ablate ---------------------------------------------------------------

struct AblateArgs {
  ModelFlags model;
  DataFlags data;
  DataFlags test;
  ProtocolFlags protocol;
  std::vector<std::string> axes;
  std::vector<std::string> values;
  std::optional<std::size_t> test_images;
  bool cross = false;
  fs::path out = "ablate";
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_ablate(const AblateArgs& a) {
  if (a.axes.size() != a.values.size())
    throw ArgumentError("give one --values list per --axis (" + std::to_string(a.axes.size()) + " axes, " +
                        std::to_string(a.values.size()) + " value lists)");
  std::vector<AblationAxis> axes;
  for (std::size_t i = 0; i < a.axes.size(); ++i) axes.push_back({a.axes[i], split_csv(a.values[i])});
  {
    RunConfig probe = a.model.resolve();
    for (const auto& ax : axes)
      for (const auto& v : ax.values) apply_axis(ax.name, v, probe.network, probe.train);
  }
  RunConfig rc = a.model.resolve();
  LabeledDataset train, test;
  if (a.data.synth) {
    DataFlags all = a.data;
    const std::size_t n_train = a.data.images.value_or(rc.synth.n_images);
    const std::size_t n_test = a.test_images.value_or(std::max<std::size_t>(1, n_train / 4));
    all.images = n_train + n_test;
    const LabeledDataset data = all.load(rc);
    std::vector<std::size_t> tr(n_train), te(n_test);
    for (std::size_t i = 0; i < n_train; ++i) tr[i] = i;
    for (std::size_t i = 0; i < n_test; ++i) te[i] = n_train + i;
    train = data.subset(tr);
    test = data.subset(te);
  } else {
    train = a.data.load(rc);
    test = a.test.load(rc);
    adopt_shape(rc, train);
  }
  check_compatible(rc.network, train);
  check_compatible(rc.network, test);
  if (test.size() == 0) throw DataError("test set is empty");
  const EvalProtocol protocol = a.protocol.resolve(rc.train.val_protocol);
  const fs::path out = prepare_out(a.out);
  write_run_config(out / "config.json", rc);

  auto run = [&](std::span<const AblationAxis> ax, const std::string& name) {
    const AblationTable table = ablation_run(train, test, rc.network, rc.train, ax, protocol, &std::cout);
    std::ofstream csv(out / ("ablation_" + name + ".csv"));
    table.write_csv(csv);
    table.write_csv(std::cout);
  };
  if (a.cross) {
    std::string name = "cross";
    for (const auto& ax : axes) name += "_" + ax.name;
    run(axes, name);
  } else {
    for (const auto& ax : axes) run(std::span<const AblationAxis>(&ax, 1), ax.name);
  }
  return kOk;
}

// ---- inspect --------------------------------------------------------------

struct InspectArgs {
  fs::path checkpoint;
  DataFlags data;
  std::string image;
  fs::path out = "inspect";
};

int cmd_inspect(const InspectArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  RunConfig rc = default_run_config();
  rc.network = ckpt.model.network;
  const LabeledDataset data = a.data.load(rc);
  check_compatible(ckpt.model.network, data);
  const auto it = std::find(data.ids.begin(), data.ids.end(), a.image);
  if (it == data.ids.end()) throw DataError("unknown image id '" + a.image + "'");
  const std::size_t idx = static_cast<std::size_t>(it - data.ids.begin());

  const ForwardPlan plan = make_plan(ckpt.model.network);
  ad::Tape tape;
  const BoundParams bound = bind(tape, ckpt.model.params);
  ForwardTrace trace;
  const ForwardOutput fo = forward(tape, plan, ckpt.model.params, bound, data.features[idx], &trace);
  const Tensor cells = fo.cells.value();
  const Tensor& w = ckpt.model.params[ckpt.model.params.aggregation];
  const GridSpec& grid = ckpt.model.network.grid;

  const fs::path out = prepare_out(a.out);
  std::ofstream impact(out / "impact.csv");
  impact << "cell,row,col,impact\n" << std::setprecision(17);
  for (std::size_t c = 0; c < cells.rows(); ++c) {
    double sq = 0.0;
    for (double v : cells.row(c)) sq += (w[c] * v) * (w[c] * v);
    impact << c << ',' << grid.row_of(c) << ',' << grid.col_of(c) << ',' << std::sqrt(sq) << '\n';
  }
  std::ofstream nb(out / "neighborhood.csv");
  nb << "layer,direction,order,cell,neighbor,probability\n" << std::setprecision(17);
  for (std::size_t l = 0; l < trace.contexts.size(); ++l) {
    const MultiOrderContext& ctx = trace.contexts[l];
    for (Direction d : kDirections)
      for (std::size_t order = 1; order <= ctx.max_order(); ++order)
        for (std::size_t c = 0; c < ctx.cells(); ++c) {
          const ContextEntry& e = ctx.at(c, d, order);
          for (std::size_t j = 0; j < e.indices.size(); ++j)
            nb << l << ',' << to_string(d) << ',' << order << ',' << c << ',' << e.indices[j] << ',' << e.probs[j]
               << '\n';
        }
  }
  std::cout << "wrote " << (out / "impact.csv").string() << " and " << (out / "neighborhood.csv").string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  dmckn::kernels::retain_heap();
  CLI::App app{"Deep multi-order context-aware kernel network"};
  app.require_subcommand(1);
  app.allow_extras(false);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads for batch evaluation (0: default)")
      ->check(CLI::NonNegativeNumber);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write checkpoint, history and resolved config");
  train.model.add(t);
  train.data.add(t, true);
  t->add_option("--out", train.out, "Output directory");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--config", eval.config, "Run config (validation fraction, protocol, --synth generator)")
      ->check(CLI::ExistingFile);
  eval.data.add(e, true);
  eval.protocol.add(e);
  e->add_option("--split", eval.split, "all, train or val (the split training held out)")
      ->check(CLI::IsMember({"all", "train", "val"}));
  e->add_option("--out", eval.out, "Output directory");

  GramArgs gram;
  auto* g = app.add_subcommand("gramcheck", "Compare the explicit map with the Gram recursion on random instances");
  g->add_option("--instances", gram.instances, "Random instances")->check(CLI::PositiveNumber);
  g->add_option("--max-rows", gram.max_rows, "Largest grid height")->check(CLI::PositiveNumber);
  g->add_option("--max-cols", gram.max_cols, "Largest grid width")->check(CLI::PositiveNumber);
  g->add_option("--max-dim", gram.max_dim, "Largest base feature width")->check(CLI::PositiveNumber);
  g->add_option("--max-depth", gram.max_depth, "Largest number of unfolded steps")->check(CLI::PositiveNumber);
  g->add_option("--gamma", gram.gamma, "Fixed context weight (default: random per instance)")
      ->check(CLI::NonNegativeNumber);
  g->add_option("--tol", gram.tol, "Tolerance on the entrywise error");
  g->add_option("--seed", gram.seed, "Seed");
  g->add_flag("--inject-fault", gram.inject_fault, "Test hook: perturb one P_c entry on the Gram side");

  ModelGradCheck grad;
  auto* gc = app.add_subcommand("gradcheck", "Compare backpropagated gradients of the full loss with central differences");
  gc->add_option("--images", grad.images, "Images")->check(CLI::PositiveNumber);
  gc->add_option("--rows", grad.rows, "Grid rows")->check(CLI::PositiveNumber);
  gc->add_option("--cols", grad.cols, "Grid cols")->check(CLI::PositiveNumber);
  gc->add_option("--depth", grad.depth, "Layers")->check(CLI::PositiveNumber);
  gc->add_option("--orders", grad.orders, "Maximum context order")->check(CLI::PositiveNumber);
  gc->add_option("--labels", grad.labels, "Labels")->check(CLI::PositiveNumber);
  gc->add_option("--groups", grad.groups, "Label groups")->check(CLI::PositiveNumber);
  gc->add_option("--dim", grad.dim, "Visual feature width")->check(CLI::PositiveNumber);
  gc->add_option("--tol", grad.tol, "Tolerance on the relative error");
  gc->add_option("--step", grad.step, "Finite-difference step");
  gc->add_option("--seed", grad.seed, "Seed");
  gc->add_flag("--inject-fault", grad.inject_fault, "Test hook: feed one P_c entry into the loss untracked");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write the synthetic context dataset");
  s->add_option("--config", synth.config, "Run config whose synth section is used")->check(CLI::ExistingFile);
  s->add_option("--seed", synth.seed, "Image seed");
  s->add_option("--rule-seed", synth.rule_seed, "Seed of the prototypes and label rules");
  s->add_option("--images", synth.images, "Images")->check(CLI::PositiveNumber);
  s->add_option("--label-count", synth.labels, "Labels (>= 4)")->check(CLI::PositiveNumber);
  s->add_option("--rows", synth.rows, "Grid rows")->check(CLI::PositiveNumber);
  s->add_option("--cols", synth.cols, "Grid cols")->check(CLI::PositiveNumber);
  s->add_option("--dim", synth.dim, "Feature width")->check(CLI::PositiveNumber);
  s->add_option("--noise", synth.noise, "Gaussian feature noise")->check(CLI::NonNegativeNumber);
  s->add_option("--out", synth.out, "Output directory");

  AblateArgs ablate;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate along ablation axes (ca, lg, depth, order, thres)");
  ablate.model.add(ab);
  ablate.data.add(ab, true);
  ab->add_option("--test-features", ablate.test.features, "Test feature file");
  ab->add_option("--test-labels", ablate.test.labels, "Test label file");
  ab->add_option("--test-vocab", ablate.test.vocab, "Test vocabulary (default: <test-labels>.vocab)");
  ab->add_option("--test-images", ablate.test_images, "Held-out images for --synth (default: a quarter of --images)");
  ab->add_option("--axis", ablate.axes, "Ablation axis; repeat with one --values per axis")->required();
  ab->add_option("--values", ablate.values, "Comma-separated values of the matching --axis")->required();
  ab->add_flag("--cross", ablate.cross, "One table over the cross product instead of one per axis");
  ablate.protocol.add(ab);
  ab->add_option("--out", ablate.out, "Output directory");

  InspectArgs inspect;
  auto* in = app.add_subcommand("inspect", "Export per-cell impact and neighbourhood probabilities of one image");
  in->add_option("--checkpoint", inspect.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  inspect.data.add(in, false);
  in->add_option("--image", inspect.image, "Image id")->required();
  in->add_option("--out", inspect.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (threads > 0) kernels::set_num_threads(threads);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*g) return cmd_gramcheck(gram);
    if (*gc) return cmd_gradcheck(grad);
    if (*s) return cmd_synth(synth);
    if (*ab) return cmd_ablate(ablate);
    if (*in) return cmd_inspect(inspect);
  } catch (const VerificationFailed& err) {
    std::cerr << "verification failed: " << err.what() << '\n';
    return kVerify;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
