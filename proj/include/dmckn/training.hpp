#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dmckn/autodiff.hpp"
#include "dmckn/dataset.hpp"
#include "dmckn/error.hpp"
#include "dmckn/kernel_core.hpp"
#include "dmckn/metrics.hpp"
#include "dmckn/network.hpp"

namespace dmckn {

/// Labels split into groups, each with its own classifier head and loss weight C_g.
struct GroupPartition {
  std::size_t groups = 1;
  std::vector<std::size_t> assignment;  // label → group
  std::vector<double> weights;          // C_g

  /// Labels of every group in ascending order; the row order of W_g.
  std::vector<std::vector<std::size_t>> members() const;
  std::vector<std::size_t> sizes() const;
  void validate() const;

  friend bool operator==(const GroupPartition&, const GroupPartition&) = default;
};

/// Greedy co-occurrence grouping: labels in decreasing frequency join the
/// group they co-occur with most (ties → smallest group, then lowest id);
/// C_g = N / (G · positives in g) clipped to [0.5, 2]. Groups are never left empty.
GroupPartition group_labels(const Tensor& labels, std::size_t groups);

/// Everything in one group with C = 1 (grouping disabled).
GroupPartition single_group(std::size_t labels);

/// Active-label mask: all positives plus ratio×positives random negatives per
/// image (all negatives when fewer exist; at least one when there are no positives).
Tensor sample_negatives(const Tensor& labels, std::size_t ratio, std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 128;
  double max_lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t neg_ratio = 3;
  std::size_t early_stop_patience = 20;
  std::uint64_t seed = 0;
  std::size_t groups = 4;
  bool grouped = true;
  double rho = 0.9;  // contraction margin enforced on {P_c}
  double ema_decay = 0.0;  // 0 disables the parameter average
  double val_fraction = 0.1;
  EvalProtocol val_protocol = EvalProtocol::top(5);
  int threads = 0;  // 0: OpenMP default

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct TrainingState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  std::uint64_t total_steps = 0;

  friend bool operator==(const TrainingState&, const TrainingState&) = default;
};

struct Model {
  NetworkConfig network;
  GroupPartition partition;
  ModelParams params;
};

Model init_model(const NetworkConfig& network, const GroupPartition& partition, std::uint64_t seed);

/// Logits of every label (vocabulary order) for one image, 1 × labels.
Tensor label_scores(const Model& model, const Tensor& embedding);

/// Per-image objective on the tape:
/// Σ_g C_g Σ_k mask·CE(W_g φ, y) + reg_weight · ½ Σ_g ‖W_g‖².
ad::Var image_loss(const Model& model, const BoundParams& bound, ad::Var embedding, std::span<const double> signs,
                   std::span<const double> mask, double reg_weight);

/// ½ Σ_g ‖W_g‖² + Σ_g C_g Σ_p CE over a set of embeddings (rows of `signs`/`mask`).
ad::Var total_loss(std::span<const ad::Var> embeddings, const Tensor& signs, const Tensor& mask,
                   const GroupPartition& partition, std::span<const ad::Var> heads);

struct BatchGradient {
  double loss = 0.0;  // mean over the batch
  std::vector<Tensor> grads;  // one per parameter slot
};

/// Mean per-image loss and gradient over `batch`. The parallel flavour keeps
/// one accumulator per thread and reduces them in thread order.
BatchGradient batch_gradient(const ForwardPlan& plan, const Model& model, const LabeledDataset& data,
                             std::span<const std::size_t> batch, const Tensor& mask, double reg_weight,
                             Exec exec = Exec::Serial);

/// images × labels logits.
Tensor score_dataset(const ForwardPlan& plan, const Model& model, const LabeledDataset& data,
                     Exec exec = Exec::Serial);

MetricsReport evaluate(const Model& model, const LabeledDataset& data, const EvalProtocol& protocol,
                       std::span<const std::size_t> classes = {}, Exec exec = Exec::Serial);

/// Decoupled weight decay with adaptive moments.
class AdamW {
 public:
  AdamW(const ModelParams& params, std::vector<bool> decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(ModelParams& params, std::span<const Tensor> grads, double lr, double weight_decay);
  std::uint64_t steps() const noexcept { return t_; }

 private:
  std::vector<Tensor> m_, v_;
  std::vector<bool> decay_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

/// Cosine decay from max_lr to 0 over total_steps.
double cosine_lr(double max_lr, std::uint64_t step, std::uint64_t total_steps);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  MetricsReport val;
};

struct FitResult {
  Model model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_f1 = 0.0;
  TrainingState state;
};

/// Raised when the loss becomes non-finite; the message lists parameter norms.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// End-to-end training. Uses `val` for early stopping when given, otherwise a
/// seeded val_fraction split of `train`. Returns the best-epoch parameters.
FitResult fit(const LabeledDataset& train, const LabeledDataset* val, const NetworkConfig& network,
              const TrainConfig& config, std::ostream* log = nullptr);

/// The split fit() uses when no validation set is given: (train, val) indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(std::size_t images, double fraction,
                                                                               std::uint64_t seed);

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);

// ---- gradient check of the full objective -------------------------------

/// Random problem for check_gradients over every model tensor: features
/// N(0,1), labels ±1 at random, P_c and w perturbed away from their init.
struct ModelGradCheck {
  std::size_t images = 2, rows = 2, cols = 2, depth = 2, orders = 2, labels = 4, groups = 2, dim = 3;
  double tol = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 0;
  bool inject_fault = false;  // adds an untracked P_up term to the loss
};

ad::GradReport check_model_gradients(const ModelGradCheck& setup);

// ---- ablations ------------------------------------------------------------

/// Axis names: ca (on/off), lg (on/off), depth (1..), order (1..), thres (none or [0,1]).
struct AblationAxis {
  std::string name;
  std::vector<std::string> values;
};

const std::vector<std::string>& ablation_axis_names();

struct AblationRow {
  std::vector<std::string> settings;  // one value per axis
  MetricsReport metrics;
};

struct AblationTable {
  std::vector<std::string> axes;
  std::vector<AblationRow> rows;
  void write_csv(std::ostream& out) const;
};

/// Applies one axis value to a base configuration.
void apply_axis(const std::string& axis, const std::string& value, NetworkConfig& network, TrainConfig& train);

/// Trains every configuration of the cross product of `axes` with the same seed
/// and evaluates on `test`.
AblationTable ablation_run(const LabeledDataset& train, const LabeledDataset& test, const NetworkConfig& network,
                           const TrainConfig& config, std::span<const AblationAxis> axes,
                           const EvalProtocol& protocol, std::ostream* log = nullptr);

}  // namespace dmckn
