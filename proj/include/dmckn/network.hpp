#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dmckn/autodiff.hpp"
#include "dmckn/grid.hpp"
#include "dmckn/multiorder.hpp"
#include "dmckn/tensor.hpp"

// The unfolded multi-order context-aware kernel network. Each layer stacks the
// current cell map with, per direction, P_c applied to the concatenation of
// all context orders, scales those blocks by √γ and projects the result with a
// per-cell linear map (a 1×1 convolution).
namespace dmckn {

struct LayerConfig {
  std::size_t max_order = 1;  // 1: first order only, 2: SC, 3: TC
  std::size_t d_out = 256;
  double gamma = 0.1;
  double thres = 0.0;
  bool project = true;  // false keeps the stacked map (pre-projection width)

  friend bool operator==(const LayerConfig&, const LayerConfig&) = default;
};

/// Which map fills the identity block of a layer.
enum class IdentityBlock {
  PreviousLayer,  // Φ(t), the multi-order layer rule
  NetworkInput,   // Φ(0), the first-order explicit map recursion
};

struct NetworkConfig {
  GridSpec grid;
  std::size_t d_visual = 0;
  std::size_t pos_dim = 16;  // 0 disables positional features
  std::vector<LayerConfig> layers;
  std::size_t key_dim = 64;
  std::size_t value_dim = 0;  // 0: the layer input width
  bool share_attention = false;  // one AttentionParams per (layer, order) for all directions
  bool project_per_direction = false;
  bool ramp = false;  // max(0, ·) after each projection
  IdentityBlock identity_block = IdentityBlock::PreviousLayer;

  std::size_t input_dim() const noexcept { return d_visual + pos_dim; }
  void validate() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct LayerWidths {
  std::size_t input = 0;
  std::size_t identity = 0;
  std::size_t value = 0;
  std::size_t direction_block = 0;  // input + (max_order − 1)·value
  std::size_t pre_projection = 0;   // identity + C·direction_block
  std::size_t output = 0;
};

std::vector<LayerWidths> layer_widths(const NetworkConfig& config);
std::size_t embedding_dim(const NetworkConfig& config);

struct Parameter {
  std::string name;
  Tensor value;
};

struct AttentionSlots {
  std::size_t wq = 0, wk = 0, wv = 0;
};

/// Every learnable tensor, addressed by slot.
struct ModelParams {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  struct Layer {
    std::vector<std::array<AttentionSlots, kDirectionCount>> attention;  // index order − 2
    std::vector<std::size_t> projection;  // one map, or identity + one per direction
    std::size_t bias = npos;
  };

  std::vector<Parameter> tensors;
  std::array<std::size_t, kDirectionCount> neighborhood{};
  std::vector<Layer> layers;
  std::size_t aggregation = npos;  // w, 1 × cells
  std::vector<std::size_t> heads;  // W_g, |group| × embedding

  std::size_t add(std::string name, Tensor value);
  Tensor& operator[](std::size_t slot) { return tensors[slot].value; }
  const Tensor& operator[](std::size_t slot) const { return tensors[slot].value; }
  std::size_t size() const noexcept { return tensors.size(); }

  AttentionParams attention(std::size_t layer, std::size_t order, Direction d) const;
  NeighborhoodSystem neighborhood_system(const GridSpec& grid) const;
  /// Writes `ns.weights` back into the P_c slots.
  void set_neighborhood(const NeighborhoodSystem& ns);
  /// Zeroes P_c entries outside the structural masks.
  void reproject_neighborhood(const GridSpec& grid);
};

/// P_c from the grid masks, w_i = 1/n, variance-preserving random projections
/// (scale 1/√fan_in) and zero biases. `head_sizes` gives the label count of each group.
ModelParams init_params(const NetworkConfig& config, const std::vector<std::size_t>& head_sizes,
                        std::uint64_t seed);

/// Precomputed structure shared by all forward passes of one configuration.
struct ForwardPlan {
  NetworkConfig config;
  std::vector<LayerWidths> widths;
  Tensor positional;  // cells × pos_dim
  std::array<std::shared_ptr<const ad::RowSupport>, kDirectionCount> support;
  std::array<CellSets, kDirectionCount> first_order;
  std::array<Tensor, kDirectionCount> masks;
};

ForwardPlan make_plan(const NetworkConfig& config);

/// Per-layer contexts observed during a forward pass (for inspection).
struct ForwardTrace {
  std::vector<MultiOrderContext> contexts;
};

/// Parameters bound as leaves of one tape.
struct BoundParams {
  std::vector<ad::Var> vars;
  const ad::Var& operator[](std::size_t slot) const { return vars[slot]; }
};

BoundParams bind(ad::Tape& tape, const ModelParams& params);

/// Visual features ‖ positional encoding, cells × input_dim.
Tensor network_input(const ForwardPlan& plan, const Tensor& features);

/// Per-cell concatenation of the order-1..max_order context features of one
/// direction (before P_c is applied): [φ(x), φ_{c,2}(x), ..., φ_{c,P}(x)].
ad::Var direction_block(ad::Tape& tape, const ForwardPlan& plan, const ModelParams& params, const BoundParams& bound,
                        std::size_t layer, ad::Var phi, Direction d, ForwardTrace* trace = nullptr);

/// One layer on the tape: stacked multi-order blocks, projection and optional ramp.
ad::Var layer_forward(ad::Tape& tape, const ForwardPlan& plan, const ModelParams& params, const BoundParams& bound,
                      std::size_t layer, ad::Var phi, ad::Var phi0, ForwardTrace* trace = nullptr);

struct ForwardOutput {
  ad::Var cells;      // final cell map, cells × embedding_dim
  ad::Var embedding;  // 1 × embedding_dim, Σ_i w_i φ(x_i)
};

ForwardOutput forward(ad::Tape& tape, const ForwardPlan& plan, const ModelParams& params, const BoundParams& bound,
                      const Tensor& features, ForwardTrace* trace = nullptr);

/// Value-only convenience: the image embedding as a 1 × D tensor.
Tensor embed(const ForwardPlan& plan, const ModelParams& params, const Tensor& features,
             ForwardTrace* trace = nullptr);

/// ⟨φ_K(S_p), φ_K(S_q)⟩
double image_kernel(const Tensor& emb_p, const Tensor& emb_q);

}  // namespace dmckn
