#include "dmckn/network.hpp"

#include <cmath>
#include <random>
#include <string>

#include "dmckn/error.hpp"

namespace dmckn {

void NetworkConfig::validate() const {
  if (grid.cells() == 0) throw ArgumentError("network: empty grid");
  if (d_visual == 0) throw ArgumentError("network: visual feature width must be positive");
  if (pos_dim % 2 != 0) throw ArgumentError("network: positional width must be even");
  if (key_dim == 0) throw ArgumentError("network: key width must be positive");
  for (std::size_t t = 0; t < layers.size(); ++t) {
    const LayerConfig& l = layers[t];
    const std::string where = "network: layer " + std::to_string(t) + ": ";
    if (l.max_order == 0) throw ArgumentError(where + "max_order must be >= 1");
    if (l.project && l.d_out == 0) throw ArgumentError(where + "d_out must be >= 1");
    if (!(l.gamma >= 0.0)) throw ArgumentError(where + "gamma must be >= 0");
    if (!(l.thres >= 0.0 && l.thres <= 1.0)) throw ArgumentError(where + "thres must lie in [0, 1]");
  }
}

std::vector<LayerWidths> layer_widths(const NetworkConfig& config) {
  std::vector<LayerWidths> out;
  std::size_t in = config.input_dim();
  for (const LayerConfig& l : config.layers) {
    LayerWidths w;
    w.input = in;
    w.identity = config.identity_block == IdentityBlock::PreviousLayer ? in : config.input_dim();
    w.value = config.value_dim ? config.value_dim : in;
    w.direction_block = in + (l.max_order - 1) * w.value;
    w.pre_projection = w.identity + kDirectionCount * w.direction_block;
    w.output = l.project ? l.d_out : w.pre_projection;
    out.push_back(w);
    in = w.output;
  }
  return out;
}

std::size_t embedding_dim(const NetworkConfig& config) {
  const auto w = layer_widths(config);
  return w.empty() ? config.input_dim() : w.back().output;
}

std::size_t ModelParams::add(std::string name, Tensor value) {
  tensors.push_back({std::move(name), std::move(value)});
  return tensors.size() - 1;
}

AttentionParams ModelParams::attention(std::size_t layer, std::size_t order, Direction d) const {
  const AttentionSlots& s = layers.at(layer).attention.at(order - 2)[index_of(d)];
  return AttentionParams{tensors[s.wq].value, tensors[s.wk].value, tensors[s.wv].value};
}

NeighborhoodSystem ModelParams::neighborhood_system(const GridSpec& grid) const {
  NeighborhoodSystem ns = init_neighborhood(grid);
  for (std::size_t c = 0; c < kDirectionCount; ++c) ns.weights[c] = tensors[neighborhood[c]].value;
  return ns;
}

void ModelParams::set_neighborhood(const NeighborhoodSystem& ns) {
  for (std::size_t c = 0; c < kDirectionCount; ++c) {
    require_same_shape(tensors[neighborhood[c]].value, ns.weights[c], "set_neighborhood");
    tensors[neighborhood[c]].value = ns.weights[c];
  }
}

void ModelParams::reproject_neighborhood(const GridSpec& grid) {
  NeighborhoodSystem ns = neighborhood_system(grid);
  ns.reproject();
  set_neighborhood(ns);
}

ModelParams init_params(const NetworkConfig& config, const std::vector<std::size_t>& head_sizes,
                        std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto random = [&](std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(rows)));
    Tensor t(rows, cols);
    for (double& v : t.values()) v = dist(rng);
    return t;
  };

  ModelParams p;
  const NeighborhoodSystem ns = init_neighborhood(config.grid);
  for (Direction d : kDirections)
    p.neighborhood[index_of(d)] = p.add("P_" + std::string(to_string(d)), ns.weights[index_of(d)]);

  const auto widths = layer_widths(config);
  for (std::size_t t = 0; t < config.layers.size(); ++t) {
    const LayerConfig& lc = config.layers[t];
    const LayerWidths& w = widths[t];
    const std::string prefix = "layer" + std::to_string(t);
    ModelParams::Layer layer;
    for (std::size_t order = 2; order <= lc.max_order; ++order) {
      std::array<AttentionSlots, kDirectionCount> slots{};
      for (Direction d : kDirections) {
        if (config.share_attention && d != Direction::Up) {
          slots[index_of(d)] = slots[0];
          continue;
        }
        const std::string name = prefix + ".order" + std::to_string(order) +
                                  (config.share_attention ? std::string() : "." + std::string(to_string(d)));
        AttentionSlots& s = slots[index_of(d)];
        s.wq = p.add(name + ".wq", random(w.input, config.key_dim));
        s.wk = p.add(name + ".wk", random(w.input, config.key_dim));
        s.wv = p.add(name + ".wv", random(w.input, w.value));
      }
      layer.attention.push_back(slots);
    }
    if (lc.project) {
      if (config.project_per_direction) {
        layer.projection.push_back(p.add(prefix + ".projection.identity", random(w.identity, lc.d_out)));
        for (Direction d : kDirections)
          layer.projection.push_back(
              p.add(prefix + ".projection." + std::string(to_string(d)), random(w.direction_block, lc.d_out)));
      } else {
        layer.projection.push_back(p.add(prefix + ".projection", random(w.pre_projection, lc.d_out)));
      }
      layer.bias = p.add(prefix + ".bias", Tensor(1, lc.d_out));
    }
    p.layers.push_back(std::move(layer));
  }

  const std::size_t n = config.grid.cells();
  p.aggregation = p.add("aggregation", Tensor(1, n, 1.0 / static_cast<double>(n)));
  const std::size_t dim = embedding_dim(config);
  for (std::size_t g = 0; g < head_sizes.size(); ++g)
    p.heads.push_back(p.add("head" + std::to_string(g), random(dim, head_sizes[g]).transposed()));
  return p;
}

ForwardPlan make_plan(const NetworkConfig& config) {
  config.validate();
  ForwardPlan plan;
  plan.config = config;
  plan.widths = layer_widths(config);
  if (config.pos_dim > 0) plan.positional = positional_encoding(config.grid, config.pos_dim).table;
  for (Direction d : kDirections) {
    const std::size_t c = index_of(d);
    plan.masks[c] = build_adjacency(config.grid, d);
    plan.support[c] = mask_support(plan.masks[c]);
    plan.first_order[c] = mask_neighbors(plan.masks[c]);
  }
  return plan;
}

BoundParams bind(ad::Tape& tape, const ModelParams& params) {
  BoundParams b;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) b.vars.push_back(tape.parameter(params[i], i));
  return b;
}

Tensor network_input(const ForwardPlan& plan, const Tensor& features) {
  const NetworkConfig& cfg = plan.config;
  if (features.rows() != cfg.grid.cells()) {
    throw ShapeError("forward: expected " + std::to_string(cfg.grid.cells()) + " cells, got " +
                     std::to_string(features.rows()));
  }
  if (features.cols() != cfg.d_visual) {
    throw ShapeError("forward: expected visual width " + std::to_string(cfg.d_visual) + ", got " +
                     std::to_string(features.cols()));
  }
  if (cfg.pos_dim == 0) return features;
  const Tensor blocks[] = {features, plan.positional};
  return hstack(blocks);
}

namespace {

// Values φ·Wv shared by all directions when attention is shared, one per order.
struct ValueCache {
  std::vector<ad::Var> values;
};

ad::Var direction_block_impl(ad::Tape& tape, const ForwardPlan& plan, const ModelParams& params,
                             const BoundParams& bound, std::size_t layer, ad::Var phi, Direction d,
                             ForwardTrace* trace, ValueCache* cache) {
  const LayerConfig& lc = plan.config.layers.at(layer);
  const std::size_t c = index_of(d);
  const std::size_t n = plan.config.grid.cells();
  const CellSets& first = plan.first_order[c];
  MultiOrderContext* ctx = trace ? &trace->contexts.at(layer) : nullptr;

  if (ctx) {
    const Tensor& pw = params[params.neighborhood[c]];
    for (std::size_t x = 0; x < n; ++x) ctx->at(x, d, 1) = first_order_entry(x, pw, first);
  }
  if (lc.max_order < 2) return phi;
  std::vector<ad::Var> parts{phi};

  const double scale = 1.0 / std::sqrt(static_cast<double>(plan.config.key_dim));
  ad::IndexSets survivors = first;  // order-1 walk keeps every neighbour
  std::vector<std::vector<std::uint32_t>> candidates(n);
  for (std::size_t order = 2; order <= lc.max_order; ++order) {
    const AttentionSlots& s = params.layers.at(layer).attention.at(order - 2)[c];
    bool trivial = true;
    for (std::size_t x = 0; x < n; ++x) {
      candidates[x] = expand_candidates(x, survivors[x], first);
      trivial = trivial && candidates[x].size() <= 1;
    }
    ad::Var v;
    if (cache && cache->values.size() > order - 2 && cache->values[order - 2].valid()) {
      v = cache->values[order - 2];
    } else {
      v = ad::matmul(phi, bound[s.wv]);
      if (cache) {
        cache->values.resize(std::max(cache->values.size(), order - 1));
        cache->values[order - 2] = v;
      }
    }
    // a softmax over at most one candidate is 1 whatever the scores, so the
    // query and key maps only enter when some set has two or more cells
    ad::Var q, k;
    if (trivial) {
      q = k = tape.constant(Tensor(n, 0));
    } else {
      q = ad::matmul(phi, bound[s.wq]);
      k = ad::matmul(phi, bound[s.wk]);
    }
    auto sets = std::make_shared<ad::IndexSets>(n);
    for (std::size_t x = 0; x < n; ++x) {
      ContextEntry e = score_and_filter(x, std::move(candidates[x]), q.value(), k.value(), scale, lc.thres);
      (*sets)[x] = e.indices;
      if (ctx) ctx->at(x, d, order) = std::move(e);
    }
    survivors = *sets;
    parts.push_back(ad::neighborhood_attention(q, k, v, std::move(sets), scale));
  }
  return ad::concat_cols(parts);
}

}  // namespace

ad::Var direction_block(ad::Tape& tape, const ForwardPlan& plan, const ModelParams& params, const BoundParams& bound,
                        std::size_t layer, ad::Var phi, Direction d, ForwardTrace* trace) {
  return direction_block_impl(tape, plan, params, bound, layer, phi, d, trace, nullptr);
}

ad::Var layer_forward(ad::Tape& tape, const ForwardPlan& plan, const ModelParams& params, const BoundParams& bound,
                      std::size_t layer, ad::Var phi, ad::Var phi0, ForwardTrace* trace) {
  const NetworkConfig& cfg = plan.config;
  const LayerConfig& lc = cfg.layers.at(layer);
  const LayerWidths& w = plan.widths.at(layer);
  if (phi.cols() != w.input) {
    throw ShapeError("layer " + std::to_string(layer) + ": input width " + std::to_string(phi.cols()) +
                     " does not match " + std::to_string(w.input));
  }
  if (trace) {
    if (trace->contexts.size() <= layer) trace->contexts.resize(layer + 1);
    trace->contexts[layer] = MultiOrderContext(cfg.grid.cells(), lc.max_order);
  }
  const ModelParams::Layer& lp = params.layers.at(layer);
  const bool per_direction = lc.project && cfg.project_per_direction;
  const double root = std::sqrt(lc.gamma);
  const ad::Var identity = cfg.identity_block == IdentityBlock::PreviousLayer ? phi : phi0;

  ValueCache cache;
  std::vector<ad::Var> blocks;
  blocks.reserve(kDirectionCount + 1);
  blocks.push_back(per_direction ? ad::matmul(identity, bound[lp.projection[0]]) : identity);
  for (Direction d : kDirections) {
    const std::size_t c = index_of(d);
    ad::Var block =
        direction_block_impl(tape, plan, params, bound, layer, phi, d, trace, cfg.share_attention ? &cache : nullptr);
    if (per_direction) block = ad::matmul(block, bound[lp.projection[1 + c]]);
    const ad::Var mixed = ad::masked_matmul(bound[params.neighborhood[c]], block, plan.support[c]);
    blocks.push_back(ad::scale(mixed, root));
  }

  ad::Var out;
  if (!lc.project) {
    out = ad::concat_cols(blocks);
  } else if (per_direction) {
    out = blocks[0];
    for (std::size_t i = 1; i < blocks.size(); ++i) out = ad::add(out, blocks[i]);
    out = ad::add_row_broadcast(out, bound[lp.bias]);
  } else {
    out = ad::add_row_broadcast(ad::matmul(ad::concat_cols(blocks), bound[lp.projection[0]]), bound[lp.bias]);
  }
  if (cfg.ramp) out = ad::relu(out);
  return out;
}

ForwardOutput forward(ad::Tape& tape, const ForwardPlan& plan, const ModelParams& params, const BoundParams& bound,
                      const Tensor& features, ForwardTrace* trace) {
  const ad::Var x0 = tape.constant(network_input(plan, features));
  ad::Var phi = x0;
  for (std::size_t t = 0; t < plan.config.layers.size(); ++t)
    phi = layer_forward(tape, plan, params, bound, t, phi, x0, trace);
  ForwardOutput out;
  out.cells = phi;
  out.embedding = ad::matmul(bound[params.aggregation], phi);
  return out;
}

Tensor embed(const ForwardPlan& plan, const ModelParams& params, const Tensor& features, ForwardTrace* trace) {
  ad::Tape tape;
  const BoundParams bound = bind(tape, params);
  return forward(tape, plan, params, bound, features, trace).embedding.value();
}

double image_kernel(const Tensor& emb_p, const Tensor& emb_q) {
  require_same_shape(emb_p, emb_q, "image_kernel");
  double s = 0.0;
  for (std::size_t i = 0; i < emb_p.size(); ++i) s += emb_p[i] * emb_q[i];
  return s;
}

}  // namespace dmckn
