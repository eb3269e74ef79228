#include "dmckn/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "dmckn/error.hpp"
#include "dmckn/kernels.hpp"

namespace dmckn {

// ---- grouping -------------------------------------------------------------

std::vector<std::vector<std::size_t>> GroupPartition::members() const {
  std::vector<std::vector<std::size_t>> m(groups);
  for (std::size_t k = 0; k < assignment.size(); ++k) m[assignment[k]].push_back(k);
  return m;
}

std::vector<std::size_t> GroupPartition::sizes() const {
  std::vector<std::size_t> s(groups, 0);
  for (std::size_t g : assignment) ++s[g];
  return s;
}

void GroupPartition::validate() const {
  if (groups == 0) throw ArgumentError("partition: no groups");
  if (weights.size() != groups) throw ArgumentError("partition: one weight per group expected");
  for (std::size_t g : assignment)
    if (g >= groups) throw ArgumentError("partition: group id out of range");
  for (double c : weights)
    if (!(c > 0.0)) throw ArgumentError("partition: group weights must be positive");
}

GroupPartition group_labels(const Tensor& labels, std::size_t groups) {
  const std::size_t n = labels.rows(), k = labels.cols();
  if (groups == 0) throw ArgumentError("group_labels: G must be >= 1");
  if (groups > k) {
    throw ArgumentError("group_labels: G = " + std::to_string(groups) + " exceeds the label count " + std::to_string(k));
  }
  std::vector<double> freq(k, 0.0);
  Tensor cooc(k, k);
  std::vector<std::size_t> present;
  for (std::size_t i = 0; i < n; ++i) {
    present.clear();
    for (std::size_t a = 0; a < k; ++a)
      if (labels(i, a) > 0.0) present.push_back(a);
    for (std::size_t a : present) {
      freq[a] += 1.0;
      for (std::size_t b : present) cooc(a, b) += 1.0;
    }
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return freq[a] > freq[b]; });

  GroupPartition p;
  p.groups = groups;
  p.assignment.assign(k, 0);
  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t pos = 0; pos < k; ++pos) {
    const std::size_t label = order[pos];
    const std::size_t remaining = k - pos;
    const auto empty = static_cast<std::size_t>(
        std::count_if(members.begin(), members.end(), [](const auto& m) { return m.empty(); }));
    std::size_t best = 0;
    if (remaining == empty) {
      while (!members[best].empty()) ++best;
    } else {
      double best_score = -1.0;
      for (std::size_t g = 0; g < groups; ++g) {
        double score = 0.0;
        for (std::size_t m : members[g]) score += cooc(label, m);
        if (score > best_score || (score == best_score && members[g].size() < members[best].size())) {
          best = g;
          best_score = score;
        }
      }
    }
    members[best].push_back(label);
    p.assignment[label] = best;
  }
  for (std::size_t g = 0; g < groups; ++g) {
    double positives = 0.0;
    for (std::size_t m : members[g]) positives += freq[m];
    const double c = positives > 0.0 ? static_cast<double>(n) / (static_cast<double>(groups) * positives) : 2.0;
    p.weights.push_back(std::clamp(c, 0.5, 2.0));
  }
  return p;
}

GroupPartition single_group(std::size_t labels) {
  GroupPartition p;
  p.groups = 1;
  p.assignment.assign(labels, 0);
  p.weights = {1.0};
  return p;
}

Tensor sample_negatives(const Tensor& labels, std::size_t ratio, std::uint64_t seed) {
  if (ratio < 1) throw ArgumentError("sample_negatives: ratio must be >= 1");
  std::mt19937_64 rng(seed);
  Tensor mask(labels.rows(), labels.cols());
  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    negatives.clear();
    std::size_t positives = 0;
    for (std::size_t k = 0; k < labels.cols(); ++k) {
      if (labels(i, k) > 0.0) {
        mask(i, k) = 1.0;
        ++positives;
      } else {
        negatives.push_back(k);
      }
    }
    std::size_t want = positives ? ratio * positives : std::max<std::size_t>(ratio, 1);
    want = std::min(want, negatives.size());
    for (std::size_t j = 0; j < want; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, negatives.size() - 1);
      std::swap(negatives[j], negatives[pick(rng)]);
      mask(i, negatives[j]) = 1.0;
    }
  }
  return mask;
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || neg_ratio == 0 || groups == 0)
    throw ArgumentError("train config: epochs, batch size, negative ratio and groups must be positive");
  if (!(max_lr >= 0.0) || !(weight_decay >= 0.0)) throw ArgumentError("train config: negative learning rate or decay");
  if (!(rho > 0.0 && rho < 1.0)) throw ArgumentError("train config: rho must lie in (0, 1)");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ArgumentError("train config: ema decay must lie in [0, 1)");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ArgumentError("train config: val fraction must lie in [0, 1)");
}

// ---- model and loss -------------------------------------------------------

Model init_model(const NetworkConfig& network, const GroupPartition& partition, std::uint64_t seed) {
  partition.validate();
  Model m;
  m.network = network;
  m.partition = partition;
  m.params = init_params(network, partition.sizes(), seed);
  return m;
}

Tensor label_scores(const Model& model, const Tensor& embedding) {
  const auto members = model.partition.members();
  Tensor out(1, model.partition.assignment.size());
  for (std::size_t g = 0; g < members.size(); ++g) {
    const Tensor& w = model.params[model.params.heads[g]];
    if (w.cols() != embedding.cols()) throw ShapeError("label_scores: head width differs from the embedding");
    for (std::size_t r = 0; r < members[g].size(); ++r) {
      double s = 0.0;
      for (std::size_t i = 0; i < w.cols(); ++i) s += w(r, i) * embedding[i];
      out[members[g][r]] = s;
    }
  }
  return out;
}

namespace {

Tensor gather(std::span<const double> row, const std::vector<std::size_t>& idx) {
  Tensor t(1, idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) t[j] = row[idx[j]];
  return t;
}

}  // namespace

ad::Var image_loss(const Model& model, const BoundParams& bound, ad::Var embedding, std::span<const double> signs,
                   std::span<const double> mask, double reg_weight) {
  const auto members = model.partition.members();
  ad::Var loss;
  for (std::size_t g = 0; g < members.size(); ++g) {
    const ad::Var w = bound[model.params.heads[g]];
    const ad::Var logits = ad::matmul(embedding, ad::transpose(w));
    ad::Var term = ad::scale(ad::logistic_loss(logits, gather(signs, members[g]), gather(mask, members[g])),
                             model.partition.weights[g]);
    if (reg_weight != 0.0) term = ad::add(term, ad::scale(ad::sq_frobenius(w), 0.5 * reg_weight));
    loss = loss.valid() ? ad::add(loss, term) : term;
  }
  return loss;
}

ad::Var total_loss(std::span<const ad::Var> embeddings, const Tensor& signs, const Tensor& mask,
                   const GroupPartition& partition, std::span<const ad::Var> heads) {
  partition.validate();
  if (heads.size() != partition.groups) throw ShapeError("total_loss: one head per group expected");
  if (signs.rows() != embeddings.size()) throw ShapeError("total_loss: one label row per embedding expected");
  require_same_shape(signs, mask, "total_loss");
  const auto members = partition.members();
  ad::Var loss;
  for (std::size_t g = 0; g < partition.groups; ++g) {
    ad::Var term = ad::scale(ad::sq_frobenius(heads[g]), 0.5);
    for (std::size_t p = 0; p < embeddings.size(); ++p) {
      const ad::Var logits = ad::matmul(embeddings[p], ad::transpose(heads[g]));
      const ad::Var ce = ad::logistic_loss(logits, gather(signs.row(p), members[g]), gather(mask.row(p), members[g]));
      term = ad::add(term, ad::scale(ce, partition.weights[g]));
    }
    loss = loss.valid() ? ad::add(loss, term) : term;
  }
  return loss;
}

// ---- batch evaluation -----------------------------------------------------

namespace {

double accumulate_image(const ForwardPlan& plan, const Model& model, const LabeledDataset& data, std::size_t i,
                        const Tensor& mask, double reg_weight, std::vector<Tensor>& grads) {
  ad::Tape tape;
  const BoundParams bound = bind(tape, model.params);
  const ForwardOutput out = forward(tape, plan, model.params, bound, data.features[i]);
  const ad::Var loss = image_loss(model, bound, out.embedding, data.labels.row(i), mask.row(i), reg_weight);
  tape.backward(loss);
  for (const auto& sg : tape.parameter_grads())
    if (sg.grad) grads[sg.slot] += *sg.grad;
  return loss.value()[0];
}

std::vector<Tensor> zeros_like(const ModelParams& params) {
  std::vector<Tensor> z;
  z.reserve(params.size());
  for (const auto& p : params.tensors) z.emplace_back(p.value.rows(), p.value.cols());
  return z;
}

}  // namespace

BatchGradient batch_gradient(const ForwardPlan& plan, const Model& model, const LabeledDataset& data,
                             std::span<const std::size_t> batch, const Tensor& mask, double reg_weight, Exec exec) {
  BatchGradient out;
  out.grads = zeros_like(model.params);
  if (batch.empty()) return out;
  if (exec == Exec::Serial) {
    for (std::size_t i : batch) out.loss += accumulate_image(plan, model, data, i, mask, reg_weight, out.grads);
  } else {
    const int threads = kernels::num_threads();
    std::vector<std::vector<Tensor>> partial(static_cast<std::size_t>(threads));
    std::vector<double> partial_loss(static_cast<std::size_t>(threads), 0.0);
    const auto count = static_cast<std::ptrdiff_t>(batch.size());
#pragma omp parallel num_threads(threads)
    {
      const auto tid = static_cast<std::size_t>(kernels::thread_id());
      partial[tid] = zeros_like(model.params);
#pragma omp for schedule(static)
      for (std::ptrdiff_t j = 0; j < count; ++j)
        partial_loss[tid] += accumulate_image(plan, model, data, batch[static_cast<std::size_t>(j)], mask, reg_weight,
                                              partial[tid]);
    }
    for (std::size_t t = 0; t < partial.size(); ++t) {
      if (partial[t].empty()) continue;
      out.loss += partial_loss[t];
      for (std::size_t s = 0; s < out.grads.size(); ++s) out.grads[s] += partial[t][s];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (Tensor& g : out.grads) g *= inv;
  return out;
}

Tensor score_dataset(const ForwardPlan& plan, const Model& model, const LabeledDataset& data, Exec exec) {
  Tensor scores(data.size(), model.partition.assignment.size());
  auto one = [&](std::size_t i) {
    const Tensor s = label_scores(model, embed(plan, model.params, data.features[i]));
    std::copy(s.data(), s.data() + s.size(), scores.row(i).begin());
  };
  if (exec == Exec::Parallel) {
    const auto n = static_cast<std::ptrdiff_t>(data.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) one(static_cast<std::size_t>(i));
  } else {
    for (std::size_t i = 0; i < data.size(); ++i) one(i);
  }
  return scores;
}

MetricsReport evaluate(const Model& model, const LabeledDataset& data, const EvalProtocol& protocol,
                       std::span<const std::size_t> classes, Exec exec) {
  if (data.size() == 0) throw DataError("evaluate: empty dataset");
  if (data.label_count() != model.partition.assignment.size())
    throw DataError("evaluate: dataset label count differs from the model");
  const ForwardPlan plan = make_plan(model.network);
  return compute_metrics(score_dataset(plan, model, data, exec), data.labels, protocol, classes);
}

// ---- optimiser ------------------------------------------------------------

AdamW::AdamW(const ModelParams& params, std::vector<bool> decay, double beta1, double beta2, double eps)
    : decay_(std::move(decay)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_ = zeros_like(params);
  v_ = zeros_like(params);
  if (decay_.size() != params.size()) throw ArgumentError("AdamW: one decay flag per parameter expected");
}

void AdamW::step(ModelParams& params, std::span<const Tensor> grads, double lr, double weight_decay) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t s = 0; s < params.size(); ++s) {
    Tensor& p = params[s];
    const Tensor& g = grads[s];
    Tensor& m = m_[s];
    Tensor& v = v_[s];
    const double shrink = decay_[s] ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      p[i] = p[i] * shrink - lr * update;
    }
  }
}

double cosine_lr(double max_lr, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0) return max_lr;
  const double x = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * max_lr * (1.0 + std::cos(std::numbers::pi * x));
}

// ---- fit ------------------------------------------------------------------

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(std::size_t images, double fraction,
                                                                               std::uint64_t seed) {
  std::vector<std::size_t> idx(images);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t nval = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(images)));
  if (fraction > 0.0 && images >= 2) nval = std::max<std::size_t>(nval, 1);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nval));
  std::vector<std::size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(nval), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(tr.begin(), tr.end());
  return {tr, val};
}

namespace {

std::string parameter_norms(const ModelParams& params) {
  std::ostringstream s;
  for (const auto& p : params.tensors) s << "\n  " << p.name << ": " << frobenius_norm(p.value);
  return s.str();
}

double max_gamma(const NetworkConfig& cfg) {
  double g = 0.0;
  for (const auto& l : cfg.layers) g = std::max(g, l.gamma);
  return g;
}

void enforce_contraction(Model& model, double rho) {
  model.params.reproject_neighborhood(model.network.grid);
  const double gamma = max_gamma(model.network);
  if (gamma <= 0.0) return;
  NeighborhoodSystem ns = model.params.neighborhood_system(model.network.grid);
  model.params.set_neighborhood(spectral_rescale(std::move(ns), gamma, rho));
}

}  // namespace

FitResult fit(const LabeledDataset& train_in, const LabeledDataset* val_in, const NetworkConfig& network,
              const TrainConfig& config, std::ostream* log) {
  config.validate();
  network.validate();
  train_in.validate();
  if (config.threads > 0) kernels::set_num_threads(config.threads);
  const Exec exec = kernels::num_threads() > 1 ? Exec::Parallel : Exec::Serial;

  LabeledDataset train_split, val_split;
  const LabeledDataset* train = &train_in;
  const LabeledDataset* val = val_in;
  if (!val) {
    auto [tr, va] = validation_split(train_in.size(), config.val_fraction, config.seed);
    train_split = train_in.subset(tr);
    val_split = train_in.subset(va);
    train = &train_split;
    val = val_split.size() ? &val_split : nullptr;
  }
  if (train->size() == 0) throw DataError("fit: empty training set");

  const GroupPartition partition =
      config.grouped ? group_labels(train->labels, std::min(config.groups, train->label_count()))
                     : single_group(train->label_count());
  FitResult result;
  result.model = init_model(network, partition, config.seed);
  Model& model = result.model;
  enforce_contraction(model, config.rho);
  const ForwardPlan plan = make_plan(network);

  std::vector<bool> decay(model.params.size(), false);
  for (const auto& layer : model.params.layers) {
    for (const auto& order : layer.attention)
      for (const auto& s : order) decay[s.wq] = decay[s.wk] = decay[s.wv] = true;
    for (std::size_t s : layer.projection) decay[s] = true;
  }
  for (std::size_t s : model.params.heads) decay[s] = true;
  AdamW opt(model.params, decay);

  ModelParams ema = model.params;
  const bool use_ema = config.ema_decay > 0.0;

  const std::size_t n = train->size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  result.state.seed = config.seed;
  result.state.total_steps = steps_per_epoch * config.epochs;
  const double reg_weight = 1.0 / static_cast<double>(n);

  ModelParams best = model.params;
  double best_f1 = -1.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(config.seed * 0x9E3779B97F4A7C15ULL + 1);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const Tensor mask = sample_negatives(train->labels, config.neg_ratio, config.seed * 1000003ULL + epoch);
    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(n, lo + config.batch_size);
      const std::span<const std::size_t> batch(order.data() + lo, hi - lo);
      BatchGradient g = batch_gradient(plan, model, *train, batch, mask, reg_weight, exec);
      if (!std::isfinite(g.loss)) {
        throw TrainingDiverged("fit: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(result.state.step) + "; parameter norms:" + parameter_norms(model.params));
      }
      epoch_loss += g.loss * static_cast<double>(batch.size());
      lr = cosine_lr(config.max_lr, result.state.step, result.state.total_steps);
      opt.step(model.params, g.grads, lr, config.weight_decay);
      enforce_contraction(model, config.rho);
      ++result.state.step;
      if (use_ema) {
        for (std::size_t s = 0; s < ema.size(); ++s)
          for (std::size_t i = 0; i < ema[s].size(); ++i)
            ema[s][i] = config.ema_decay * ema[s][i] + (1.0 - config.ema_decay) * model.params[s][i];
      }
    }
    result.state.epoch = epoch + 1;

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = epoch_loss / static_cast<double>(n);
    rec.lr = lr;
    const ModelParams& current = use_ema ? ema : model.params;
    double f1 = 0.0;
    if (val) {
      Model probe{model.network, model.partition, current};
      rec.val = compute_metrics(score_dataset(plan, probe, *val, exec), val->labels, config.val_protocol);
      f1 = rec.val.macro_f1;
    }
    result.history.push_back(rec);
    if (log) {
      *log << "epoch " << rec.epoch << " loss " << std::setprecision(6) << rec.train_loss << " lr " << rec.lr
           << " val_macro_f1 " << rec.val.macro_f1 << " val_micro_f1 " << rec.val.micro_f1 << " val_map "
           << rec.val.map << '\n';
    }
    if (f1 > best_f1 || !val) {
      best_f1 = f1;
      best = current;
      result.best_epoch = epoch + 1;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      if (log) *log << "early stop after epoch " << rec.epoch << " (best " << result.best_epoch << ")\n";
      break;
    }
  }
  model.params = std::move(best);
  result.best_val_f1 = std::max(best_f1, 0.0);
  return result;
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,train_loss,lr,val_precision,val_recall,val_macro_f1,val_micro_f1,val_map\n";
  out << std::setprecision(17);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.lr << ',' << r.val.precision << ',' << r.val.recall << ','
        << r.val.macro_f1 << ',' << r.val.micro_f1 << ',' << r.val.map << '\n';
  }
}

// ---- ablations ------------------------------------------------------------

const std::vector<std::string>& ablation_axis_names() {
  static const std::vector<std::string> names = {"ca", "lg", "depth", "order", "thres"};
  return names;
}

namespace {

bool parse_switch(const std::string& axis, const std::string& v) {
  if (v == "on" || v == "1" || v == "true") return true;
  if (v == "off" || v == "0" || v == "false") return false;
  throw ArgumentError("ablation: axis " + axis + " takes on/off, got '" + v + "'");
}

std::size_t parse_count(const std::string& axis, const std::string& v) {
  std::size_t pos = 0;
  unsigned long x = 0;
  try {
    x = std::stoul(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || x == 0) throw ArgumentError("ablation: axis " + axis + " takes positive integers, got '" + v + "'");
  return x;
}

}  // namespace

void apply_axis(const std::string& axis, const std::string& value, NetworkConfig& network, TrainConfig& train) {
  if (axis == "ca") {
    if (!parse_switch(axis, value))
      for (auto& l : network.layers) l.gamma = 0.0;
  } else if (axis == "lg") {
    train.grouped = parse_switch(axis, value);
  } else if (axis == "depth") {
    const std::size_t depth = parse_count(axis, value);
    const LayerConfig proto = network.layers.empty() ? LayerConfig{} : network.layers.front();
    network.layers.resize(depth, proto);
  } else if (axis == "order") {
    const std::size_t order = parse_count(axis, value);
    for (auto& l : network.layers) l.max_order = order;
  } else if (axis == "thres") {
    if (value == "none") {
      for (auto& l : network.layers) l.max_order = 1;
    } else {
      double t = 0.0;
      std::size_t pos = 0;
      try {
        t = std::stod(value, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != value.size() || !(t >= 0.0 && t <= 1.0))
        throw ArgumentError("ablation: axis thres takes 'none' or a value in [0, 1], got '" + value + "'");
      for (auto& l : network.layers) {
        l.thres = t;
        l.max_order = std::max<std::size_t>(l.max_order, 2);
      }
    }
  } else {
    std::string valid;
    for (const auto& n : ablation_axis_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ArgumentError("ablation: unknown axis '" + axis + "' (valid: " + valid + ")");
  }
}

void AblationTable::write_csv(std::ostream& out) const {
  for (const auto& a : axes) out << a << ',';
  out << "precision,recall,macro_f1,micro_f1,map\n";
  out << std::setprecision(6) << std::fixed;
  for (const auto& r : rows) {
    for (const auto& s : r.settings) out << s << ',';
    out << r.metrics.precision << ',' << r.metrics.recall << ',' << r.metrics.macro_f1 << ',' << r.metrics.micro_f1
        << ',' << r.metrics.map << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

AblationTable ablation_run(const LabeledDataset& train, const LabeledDataset& test, const NetworkConfig& network,
                           const TrainConfig& config, std::span<const AblationAxis> axes,
                           const EvalProtocol& protocol, std::ostream* log) {
  AblationTable table;
  for (const auto& a : axes) {
    if (a.values.empty()) throw ArgumentError("ablation: axis " + a.name + " has no values");
    NetworkConfig probe_net = network;
    TrainConfig probe_train = config;
    for (const auto& v : a.values) apply_axis(a.name, v, probe_net, probe_train);  // validates early
    table.axes.push_back(a.name);
  }
  std::vector<std::size_t> pick(axes.size(), 0);
  while (true) {
    NetworkConfig net = network;
    TrainConfig tc = config;
    AblationRow row;
    // depth first so later axes see the final layer list
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t a = 0; a < axes.size(); ++a)
        if ((axes[a].name == "depth") == (pass == 0)) apply_axis(axes[a].name, axes[a].values[pick[a]], net, tc);
    for (std::size_t a = 0; a < axes.size(); ++a) row.settings.push_back(axes[a].values[pick[a]]);
    if (log) {
      *log << "ablation:";
      for (std::size_t a = 0; a < axes.size(); ++a) *log << ' ' << axes[a].name << '=' << row.settings[a];
      *log << '\n';
    }
    const FitResult fitted = fit(train, nullptr, net, tc, nullptr);
    row.metrics = evaluate(fitted.model, test, protocol, {}, kernels::num_threads() > 1 ? Exec::Parallel : Exec::Serial);
    table.rows.push_back(std::move(row));
    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++pick[a] < axes[a].values.size()) break;
      pick[a] = 0;
      if (a == 0) return table;
    }
    if (axes.empty()) return table;
  }
}

// ---- gradient check of the full objective -------------------------------

ad::GradReport check_model_gradients(const ModelGradCheck& s) {
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  NetworkConfig net;
  net.grid = build_grid(s.rows, s.cols);
  net.d_visual = s.dim;
  net.pos_dim = 2;
  net.key_dim = 3;
  net.ramp = false;
  for (std::size_t l = 0; l < s.depth; ++l) {
    LayerConfig lc;
    lc.max_order = s.orders;
    lc.d_out = 4;
    lc.gamma = 0.1;
    net.layers.push_back(lc);
  }
  net.validate();
  if (s.groups > s.labels) throw ArgumentError("check_model_gradients: more groups than labels");

  std::vector<Tensor> features;
  Tensor signs(s.images, s.labels, -1.0), mask(s.images, s.labels, 1.0);
  for (std::size_t i = 0; i < s.images; ++i) {
    Tensor f(net.grid.cells(), s.dim);
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = normal(rng);
    features.push_back(std::move(f));
    for (std::size_t k = 0; k < s.labels; ++k)
      if (std::bernoulli_distribution(0.5)(rng)) signs(i, k) = 1.0;
  }
  GroupPartition part;
  part.groups = s.groups;
  for (std::size_t k = 0; k < s.labels; ++k) part.assignment.push_back(k % s.groups);
  for (std::size_t g = 0; g < s.groups; ++g) part.weights.push_back(0.5 + 0.5 * static_cast<double>(g));
  Model model = init_model(net, part, s.seed);
  // perturb the structured weights away from ±1 and from the uniform aggregation
  for (std::size_t c = 0; c < kDirectionCount; ++c) {
    Tensor& p = model.params[model.params.neighborhood[c]];
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] != 0.0) p[i] = 0.5 + 0.3 * normal(rng);
  }
  Tensor& w = model.params[model.params.aggregation];
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += 0.1 * normal(rng);

  const ForwardPlan plan = make_plan(net);
  const std::size_t p_up = model.params.neighborhood[0];
  auto loss = [&](ad::Tape& tape, std::span<const ad::Var> vars) {
    const BoundParams bound{std::vector<ad::Var>(vars.begin(), vars.end())};
    std::vector<ad::Var> embeddings;
    for (const Tensor& f : features) embeddings.push_back(forward(tape, plan, model.params, bound, f).embedding);
    std::vector<ad::Var> heads;
    for (std::size_t slot : model.params.heads) heads.push_back(bound[slot]);
    ad::Var total = total_loss(embeddings, signs, mask, part, heads);
    if (s.inject_fault) {
      // one P_up entry enters the loss off the tape
      const Tensor& p = model.params[p_up];
      const auto it = std::find_if(p.values().begin(), p.values().end(), [](double v) { return v != 0.0; });
      if (it != p.values().end()) total = ad::add(total, tape.constant(Tensor(1, 1, 0.5 * *it * *it)));
    }
    return total;
  };
  std::vector<ad::GradCheckParam> params;
  for (auto& p : model.params.tensors) params.push_back({p.name, &p.value});
  ad::GradCheckOptions opt;
  opt.tol = s.tol;
  opt.step = s.step;
  return ad::check_gradients(loss, params, opt);
}

}  // namespace dmckn
