#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "dmckn/dataio.hpp"
#include "dmckn/error.hpp"
#include "dmckn/kernels.hpp"
#include "dmckn/training.hpp"
#include "support.hpp"

using namespace dmckn;
using testing_support::random_size;
using testing_support::random_tensor;

namespace {

Tensor random_labels(std::mt19937_64& rng, std::size_t n, std::size_t k, double rate) {
  Tensor y(n, k, -1.0);
  std::bernoulli_distribution b(rate);
  for (std::size_t i = 0; i < y.size(); ++i)
    if (b(rng)) y[i] = 1.0;
  return y;
}

// greedy grouping written against the description: frequency order, best
// co-occurrence, ties to the smaller then lower group, forced fill at the end
GroupPartition reference_grouping(const Tensor& y, std::size_t groups) {
  const std::size_t n = y.rows(), k = y.cols();
  std::vector<double> freq(k);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t i = 0; i < n; ++i) freq[a] += y(i, a) > 0;
  std::vector<std::size_t> order(k);
  for (std::size_t a = 0; a < k; ++a) order[a] = a;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return freq[a] != freq[b] ? freq[a] > freq[b] : a < b;
  });
  std::vector<std::set<std::size_t>> g(groups);
  GroupPartition p;
  p.groups = groups;
  p.assignment.assign(k, 0);
  for (std::size_t pos = 0; pos < k; ++pos) {
    const std::size_t label = order[pos];
    std::size_t empties = 0;
    for (const auto& s : g) empties += s.empty();
    std::size_t pick = 0;
    if (k - pos == empties) {
      while (!g[pick].empty()) ++pick;
    } else {
      std::vector<double> score(groups);
      for (std::size_t q = 0; q < groups; ++q)
        for (std::size_t m : g[q])
          for (std::size_t i = 0; i < n; ++i) score[q] += (y(i, label) > 0) && (y(i, m) > 0);
      for (std::size_t q = 1; q < groups; ++q)
        if (score[q] > score[pick] || (score[q] == score[pick] && g[q].size() < g[pick].size())) pick = q;
    }
    g[pick].insert(label);
    p.assignment[label] = pick;
  }
  for (std::size_t q = 0; q < groups; ++q) {
    double pos = 0;
    for (std::size_t m : g[q]) pos += freq[m];
    p.weights.push_back(pos > 0 ? std::clamp(static_cast<double>(n) / (static_cast<double>(groups) * pos), 0.5, 2.0)
                                : 2.0);
  }
  return p;
}

NetworkConfig tiny_network(const GridSpec& g, std::size_t dim) {
  NetworkConfig c;
  c.grid = g;
  c.d_visual = dim;
  c.pos_dim = 2;
  c.key_dim = 3;
  c.ramp = true;
  LayerConfig l;
  l.max_order = 2;
  l.d_out = 6;
  l.gamma = 0.2;
  c.layers = {l};
  return c;
}

LabeledDataset tiny_data(std::size_t images, std::uint64_t seed) {
  SynthConfig s;
  s.grid = build_grid(4, 5);
  s.n_images = images;
  s.n_labels = 6;
  s.feature_dim = 4;
  s.seed = seed;
  s.rule_seed = seed;
  return synth_dataset(s).data;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 8;
  t.max_lr = 1e-2;
  t.groups = 2;
  t.val_protocol = EvalProtocol::above(0.0);
  t.threads = 1;
  return t;
}

}  // namespace

TEST_CASE("grouping matches the reference greedy") {
  std::mt19937_64 rng(51);
  for (int it = 0; it < 200; ++it) {
    const std::size_t k = random_size(rng, 1, 10), groups = random_size(rng, 1, k);
    const Tensor y = random_labels(rng, random_size(rng, 1, 30), k, std::uniform_real_distribution<double>(0, 0.6)(rng));
    const GroupPartition got = group_labels(y, groups);
    const GroupPartition want = reference_grouping(y, groups);
    CHECK(got.assignment == want.assignment);
    REQUIRE(got.weights.size() == groups);
    for (std::size_t g = 0; g < groups; ++g) CHECK(got.weights[g] == doctest::Approx(want.weights[g]));
    for (std::size_t s : got.sizes()) CHECK(s > 0);
    for (double c : got.weights) CHECK((c >= 0.5 && c <= 2.0));
  }
}

TEST_CASE("grouping keeps co-occurring labels together") {
  // labels 0 and 1 always appear together, 2 and 3 together
  Tensor y(8, 4, -1.0);
  for (std::size_t i = 0; i < 8; ++i) {
    if (i % 2 == 0) y(i, 0) = y(i, 1) = 1;
    else y(i, 2) = y(i, 3) = 1;
  }
  const GroupPartition p = group_labels(y, 2);
  CHECK(p.assignment[0] == p.assignment[1]);
  CHECK(p.assignment[2] == p.assignment[3]);
  CHECK(p.assignment[0] != p.assignment[2]);
  CHECK_THROWS_AS(group_labels(y, 5), ArgumentError);
  CHECK_THROWS_AS(group_labels(y, 0), ArgumentError);
  const GroupPartition one = single_group(4);
  CHECK(one.groups == 1);
  CHECK(one.weights == std::vector<double>{1.0});
}

TEST_CASE("negative sampling") {
  std::mt19937_64 rng(52);
  const Tensor y = random_labels(rng, 200, 10, 0.15);
  const Tensor m = sample_negatives(y, 3, 7);
  CHECK(m == sample_negatives(y, 3, 7));
  CHECK_FALSE(m == sample_negatives(y, 3, 8));
  std::vector<double> picked(10, 0.0);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    std::size_t pos = 0, neg = 0, neg_total = 0;
    for (std::size_t k = 0; k < 10; ++k) {
      if (y(i, k) > 0) {
        CHECK(m(i, k) == 1.0);
        ++pos;
      } else {
        ++neg_total;
        neg += m(i, k) == 1.0;
        picked[k] += m(i, k);
      }
    }
    const std::size_t want = std::min(pos ? 3 * pos : std::size_t{3}, neg_total);
    CHECK(neg == want);
  }
  for (double c : picked) CHECK(c > 0);
  CHECK_THROWS_AS(sample_negatives(y, 0, 1), ArgumentError);
}

TEST_CASE("AdamW matches a scalar reference") {
  NetworkConfig c = tiny_network(build_grid(2, 2), 2);
  ModelParams p = init_params(c, {2}, 1);
  std::vector<bool> decay(p.size(), false);
  decay[p.heads[0]] = true;
  AdamW opt(p, decay);
  std::mt19937_64 rng(53);
  const std::size_t slot = p.heads[0];
  const std::size_t other = p.aggregation;
  double x = p[slot][0], y = p[other][0], mx = 0, vx = 0, my = 0, vy = 0;
  for (int t = 1; t <= 5; ++t) {
    std::vector<Tensor> grads;
    for (const auto& q : p.tensors) grads.push_back(random_tensor(rng, q.value.rows(), q.value.cols()));
    const double lr = 0.01 * t, wd = 0.1;
    opt.step(p, grads, lr, wd);
    auto ref = [&](double& w, double& m, double& v, double g, bool dec) {
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      w = w * (dec ? 1 - lr * wd : 1.0) - lr * mh / (std::sqrt(vh) + 1e-8);
    };
    ref(x, mx, vx, grads[slot][0], true);
    ref(y, my, vy, grads[other][0], false);
    CHECK(p[slot][0] == doctest::Approx(x).epsilon(1e-12));
    CHECK(p[other][0] == doctest::Approx(y).epsilon(1e-12));
  }
  CHECK(opt.steps() == 5);
}

TEST_CASE("a zero learning rate leaves parameters unchanged") {
  NetworkConfig c = tiny_network(build_grid(2, 2), 2);
  ModelParams p = init_params(c, {2}, 1);
  const ModelParams before = p;
  AdamW opt(p, std::vector<bool>(p.size(), true));
  std::mt19937_64 rng(54);
  std::vector<Tensor> grads;
  for (const auto& q : p.tensors) grads.push_back(random_tensor(rng, q.value.rows(), q.value.cols()));
  opt.step(p, grads, 0.0, 0.5);
  for (std::size_t s = 0; s < p.size(); ++s) CHECK(p[s] == before[s]);

  const LabeledDataset data = tiny_data(30, 3);
  TrainConfig t = tiny_train();
  t.max_lr = 0.0;
  const FitResult r = fit(data, nullptr, tiny_network(data.grid, data.feature_dim), t);
  const Model init = init_model(r.model.network, r.model.partition, t.seed);
  for (std::size_t s = 0; s < init.params.size(); ++s) CHECK(r.model.params[s] == init.params[s]);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(1.0, 0, 100) == doctest::Approx(1.0));
  CHECK(cosine_lr(1.0, 50, 100) == doctest::Approx(0.5));
  CHECK(cosine_lr(1.0, 100, 100) == doctest::Approx(0.0));
  CHECK(cosine_lr(2.0, 25, 100) == doctest::Approx(1.0 + std::cos(M_PI / 4)));
  CHECK(cosine_lr(1.0, 500, 100) == doctest::Approx(0.0));
}

TEST_CASE("loss pieces") {
  const LabeledDataset data = tiny_data(4, 5);
  const NetworkConfig c = tiny_network(data.grid, data.feature_dim);
  GroupPartition part = group_labels(data.labels, 2);
  const Model m = init_model(c, part, 2);
  const ForwardPlan plan = make_plan(c);
  const Tensor mask(4, data.label_count(), 1.0);
  // image_loss summed over images equals total_loss with regularisation weight 1/N per image
  ad::Tape tape;
  const BoundParams b = bind(tape, m.params);
  std::vector<ad::Var> embs;
  double sum = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    embs.push_back(forward(tape, plan, m.params, b, data.features[i]).embedding);
    sum += image_loss(m, b, embs.back(), data.labels.row(i), mask.row(i), 0.25).value()[0];
  }
  std::vector<ad::Var> heads;
  for (std::size_t s : m.params.heads) heads.push_back(b[s]);
  CHECK(total_loss(embs, data.labels, mask, part, heads).value()[0] == doctest::Approx(sum).epsilon(1e-12));

  // scores are the head rows in vocabulary order
  const Tensor e = embed(plan, m.params, data.features[0]);
  const Tensor s = label_scores(m, e);
  const auto members = part.members();
  for (std::size_t g = 0; g < members.size(); ++g)
    for (std::size_t r = 0; r < members[g].size(); ++r) {
      double want = 0;
      for (std::size_t i = 0; i < e.cols(); ++i) want += m.params[m.params.heads[g]](r, i) * e[i];
      CHECK(s[members[g][r]] == doctest::Approx(want));
    }
}

TEST_CASE("serial and parallel batch evaluation agree") {
  const LabeledDataset data = tiny_data(24, 6);
  const NetworkConfig c = tiny_network(data.grid, data.feature_dim);
  const Model m = init_model(c, group_labels(data.labels, 2), 3);
  const ForwardPlan plan = make_plan(c);
  const Tensor mask = sample_negatives(data.labels, 2, 1);
  std::vector<std::size_t> batch(24);
  for (std::size_t i = 0; i < 24; ++i) batch[i] = i;
  const int keep = kernels::num_threads();
  kernels::set_num_threads(3);
  const BatchGradient s = batch_gradient(plan, m, data, batch, mask, 0.1, Exec::Serial);
  const BatchGradient p = batch_gradient(plan, m, data, batch, mask, 0.1, Exec::Parallel);
  CHECK(s.loss == doctest::Approx(p.loss).epsilon(1e-13));
  for (std::size_t k = 0; k < s.grads.size(); ++k) CHECK(max_abs_diff(s.grads[k], p.grads[k]) < 1e-13);
  CHECK(score_dataset(plan, m, data, Exec::Serial) == score_dataset(plan, m, data, Exec::Parallel));
  kernels::set_num_threads(keep);
}

TEST_CASE("batch gradient is the mean of per-image gradients") {
  const LabeledDataset data = tiny_data(3, 7);
  const NetworkConfig c = tiny_network(data.grid, data.feature_dim);
  const Model m = init_model(c, single_group(data.label_count()), 4);
  const ForwardPlan plan = make_plan(c);
  const Tensor mask(3, data.label_count(), 1.0);
  const std::size_t all[] = {0, 1, 2};
  const BatchGradient whole = batch_gradient(plan, m, data, all, mask, 0.0);
  std::vector<Tensor> sum;
  double loss = 0;
  for (std::size_t i : all) {
    const std::size_t one[] = {i};
    const BatchGradient g = batch_gradient(plan, m, data, one, mask, 0.0);
    loss += g.loss / 3;
    if (sum.empty()) sum = g.grads;
    else
      for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += g.grads[k];
  }
  CHECK(whole.loss == doctest::Approx(loss));
  for (std::size_t k = 0; k < sum.size(); ++k) CHECK(max_abs_diff((1.0 / 3.0) * sum[k], whole.grads[k]) < 1e-12);
}

TEST_CASE("validation split") {
  const auto [tr, va] = validation_split(50, 0.1, 3);
  CHECK(va.size() == 5);
  CHECK(tr.size() == 45);
  std::set<std::size_t> all(tr.begin(), tr.end());
  all.insert(va.begin(), va.end());
  CHECK(all.size() == 50);
  CHECK(std::is_sorted(va.begin(), va.end()));
  CHECK(validation_split(50, 0.1, 3) == validation_split(50, 0.1, 3));
  CHECK(validation_split(5, 0.1, 3).second.size() == 1);
  CHECK(validation_split(5, 0.0, 3).second.empty());
}

TEST_CASE("fit is deterministic and keeps the contraction bound") {
  const LabeledDataset data = tiny_data(40, 8);
  const NetworkConfig c = tiny_network(data.grid, data.feature_dim);
  const TrainConfig t = tiny_train();
  std::ostringstream log;
  const FitResult a = fit(data, nullptr, c, t, &log);
  const FitResult b = fit(data, nullptr, c, t);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].train_loss == b.history[e].train_loss);
    CHECK(a.history[e].val.macro_f1 == b.history[e].val.macro_f1);
  }
  for (std::size_t s = 0; s < a.model.params.size(); ++s) CHECK(a.model.params[s] == b.model.params[s]);
  CHECK(log.str().find("epoch 1 loss") != std::string::npos);
  CHECK(a.state.total_steps == 3 * 5);
  std::vector<Tensor> w;
  for (std::size_t s : a.model.params.neighborhood) w.push_back(a.model.params[s]);
  CHECK(contraction_factor(w, 0.2) <= t.rho);
  for (Direction d : kDirections) {
    const Tensor mask = build_adjacency(data.grid, d);
    const Tensor& p = a.model.params[a.model.params.neighborhood[index_of(d)]];
    for (std::size_t i = 0; i < p.size(); ++i)
      if (mask[i] == 0) CHECK(p[i] == 0.0);
  }
  std::ostringstream csv;
  write_history_csv(csv, a.history);
  CHECK(csv.str().rfind("epoch,train_loss,lr,", 0) == 0);
}

TEST_CASE("training lowers the loss") {
  const LabeledDataset data = tiny_data(60, 9);
  TrainConfig t = tiny_train();
  t.epochs = 8;
  t.early_stop_patience = 100;
  const FitResult r = fit(data, nullptr, tiny_network(data.grid, data.feature_dim), t);
  CHECK(r.history.back().train_loss < r.history.front().train_loss);
}

TEST_CASE("ablation axes") {
  NetworkConfig n = tiny_network(build_grid(3, 3), 2);
  TrainConfig t = tiny_train();
  apply_axis("depth", "3", n, t);
  CHECK(n.layers.size() == 3);
  apply_axis("ca", "off", n, t);
  for (const auto& l : n.layers) CHECK(l.gamma == 0.0);
  apply_axis("lg", "off", n, t);
  CHECK_FALSE(t.grouped);
  apply_axis("order", "3", n, t);
  CHECK(n.layers[2].max_order == 3);
  apply_axis("thres", "none", n, t);
  CHECK(n.layers[0].max_order == 1);
  apply_axis("thres", "0.5", n, t);
  CHECK(n.layers[0].max_order == 2);
  CHECK(n.layers[0].thres == 0.5);
  CHECK_THROWS_AS(apply_axis("thres", "2", n, t), ArgumentError);
  CHECK_THROWS_AS(apply_axis("depth", "0", n, t), ArgumentError);
  CHECK_THROWS_AS(apply_axis("ca", "maybe", n, t), ArgumentError);
  try {
    apply_axis("width", "3", n, t);
    FAIL("expected ArgumentError");
  } catch (const ArgumentError& e) {
    CHECK(std::string(e.what()).find("ca, lg, depth, order, thres") != std::string::npos);
  }
}

TEST_CASE("ablation runs the cross product in order") {
  const LabeledDataset train = tiny_data(30, 10), test = tiny_data(10, 11);
  TrainConfig t = tiny_train();
  t.epochs = 1;
  const AblationAxis axes[] = {{"ca", {"on", "off"}}, {"order", {"1", "2"}}};
  const AblationTable table =
      ablation_run(train, test, tiny_network(train.grid, train.feature_dim), t, axes, EvalProtocol::above(0.0));
  REQUIRE(table.rows.size() == 4);
  CHECK(table.rows[0].settings == std::vector<std::string>{"on", "1"});
  CHECK(table.rows[1].settings == std::vector<std::string>{"on", "2"});
  CHECK(table.rows[3].settings == std::vector<std::string>{"off", "2"});
  std::ostringstream out;
  table.write_csv(out);
  CHECK(out.str().rfind("ca,order,precision,recall,macro_f1,micro_f1,map\n", 0) == 0);
}
