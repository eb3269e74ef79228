#include "dmckn/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>
#include <unordered_set>

#include "dmckn/run_config.hpp"

namespace dmckn {

namespace fs = std::filesystem;

// ---- LabeledDataset -------------------------------------------------------

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.grid = grid;
  out.feature_dim = feature_dim;
  out.vocabulary = vocabulary;
  out.labels = Tensor(indices.size(), labels.cols());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const std::size_t i = indices[j];
    if (i >= size()) throw ArgumentError("subset: index " + std::to_string(i) + " out of range");
    out.ids.push_back(ids[i]);
    out.features.push_back(features[i]);
    std::copy(labels.row(i).begin(), labels.row(i).end(), out.labels.row(j).begin());
  }
  return out;
}

void LabeledDataset::validate() const {
  if (ids.size() != features.size()) throw DataError("dataset: " + std::to_string(ids.size()) + " ids for " +
                                                     std::to_string(features.size()) + " images");
  if (labels.rows() != size() || labels.cols() != vocabulary.size()) {
    throw DataError("dataset: label matrix is " + std::to_string(labels.rows()) + "x" +
                    std::to_string(labels.cols()) + ", expected " + std::to_string(size()) + "x" +
                    std::to_string(vocabulary.size()));
  }
  for (std::size_t i = 0; i < size(); ++i) {
    if (features[i].rows() != grid.cells() || features[i].cols() != feature_dim)
      throw DataError("dataset: image " + ids[i] + " has a feature matrix of the wrong shape");
  }
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != 1.0 && labels[i] != -1.0) throw DataError("dataset: label entries must be -1 or +1");
  std::unordered_set<std::string> seen;
  for (const auto& id : ids)
    if (!seen.insert(id).second) throw DataError("dataset: duplicate image id '" + id + "'");
}

// ---- binary helpers -------------------------------------------------------

namespace {

template <class T>
void put(std::string& buf, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  auto u = std::bit_cast<U>(v);
  for (std::size_t b = 0; b < sizeof(U); ++b) buf.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
}

void put_string(std::string& buf, const std::string& s) {
  put(buf, static_cast<std::uint32_t>(s.size()));
  buf += s;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

class Reader {
 public:
  Reader(const std::string& buf, const fs::path& path) : buf_(buf), path_(path.string()) {}

  template <class T>
  T get(const char* what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U), what);
    U u = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b)
      u |= static_cast<U>(static_cast<unsigned char>(buf_[off_ + b])) << (8 * b);
    off_ += sizeof(U);
    return std::bit_cast<T>(u);
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(off_, n);
    off_ += n;
    return s;
  }

  std::string str(const char* what) { return bytes(get<std::uint32_t>(what), what); }

  void need(std::size_t n, const char* what) const {
    if (buf_.size() - off_ < n) {
      throw HeaderError(path_ + ": truncated " + what + " at offset " + std::to_string(off_) + " (need " +
                        std::to_string(n) + " bytes, " + std::to_string(buf_.size() - off_) + " left)");
    }
  }

  std::size_t offset() const noexcept { return off_; }
  void seek(std::size_t off) { off_ = off; }
  std::size_t size() const noexcept { return buf_.size(); }
  const std::string& path() const noexcept { return path_; }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t off_ = 0;
};

constexpr std::size_t kFeatureHeaderBytes = 24;

fs::path default_vocab(const fs::path& labels, fs::path vocab) {
  if (!vocab.empty()) return vocab;
  fs::path v = labels;
  v += ".vocab";
  return v;
}

}  // namespace

// ---- features -------------------------------------------------------------

void write_features(const fs::path& path, const LabeledDataset& data) {
  data.validate();
  const std::size_t n = data.grid.cells(), d = data.feature_dim;
  std::string buf = "CKNF";
  put(buf, kFeatureFileVersion);
  put(buf, static_cast<std::uint32_t>(data.size()));
  put(buf, static_cast<std::uint32_t>(data.grid.rows));
  put(buf, static_cast<std::uint32_t>(data.grid.cols));
  put(buf, static_cast<std::uint32_t>(d));
  buf.reserve(buf.size() + data.size() * n * d * 4);
  for (const Tensor& f : data.features)
    for (std::size_t i = 0; i < f.size(); ++i) put(buf, static_cast<float>(f[i]));
  for (const auto& id : data.ids) put_string(buf, id);
  spill(path, buf);
}

FeatureData read_features(const fs::path& path) {
  const std::string buf = slurp(path);
  Reader r(buf, path);
  if (r.bytes(4, "magic") != "CKNF") throw HeaderError(path.string() + ": bad magic at offset 0, expected CKNF");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kFeatureFileVersion)
    throw VersionError(path.string() + ": feature file version " + std::to_string(version) + ", expected " +
                       std::to_string(kFeatureFileVersion));
  const auto count = r.get<std::uint32_t>("image count");
  const auto rows = r.get<std::uint32_t>("grid rows");
  const auto cols = r.get<std::uint32_t>("grid cols");
  const auto dim = r.get<std::uint32_t>("feature dim");
  if (rows == 0 || cols == 0 || dim == 0)
    throw HeaderError(path.string() + ": zero grid or feature dimension in header");
  FeatureData out;
  out.grid = GridSpec{rows, cols};
  out.feature_dim = dim;
  const std::uint64_t per_image = std::uint64_t{rows} * cols * dim;
  const std::uint64_t body = per_image * count * 4;
  const std::uint64_t minimum = kFeatureHeaderBytes + body + std::uint64_t{count} * 4;
  if (buf.size() < minimum) {
    throw HeaderError(path.string() + ": expected at least " + std::to_string(minimum) + " bytes for " +
                      std::to_string(count) + " images of " + std::to_string(rows) + "x" + std::to_string(cols) +
                      "x" + std::to_string(dim) + ", file has " + std::to_string(buf.size()));
  }
  out.features.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor f(std::size_t{rows} * cols, dim);
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = static_cast<double>(r.get<float>("feature body"));
    out.features.push_back(std::move(f));
  }
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    std::string id = r.str("id index");
    if (id.empty()) throw HeaderError(path.string() + ": empty image id at offset " + std::to_string(at));
    if (!seen.insert(id).second)
      throw HeaderError(path.string() + ": duplicate image id '" + id + "' at offset " + std::to_string(at));
    out.ids.push_back(std::move(id));
  }
  if (r.offset() != buf.size()) {
    throw HeaderError(path.string() + ": expected " + std::to_string(r.offset()) + " bytes, file has " +
                      std::to_string(buf.size()));
  }
  return out;
}

// ---- labels ---------------------------------------------------------------

void write_vocabulary(const fs::path& path, const std::vector<std::string>& vocabulary) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& v : vocabulary) out << v << '\n';
}

std::vector<std::string> read_vocabulary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  std::vector<std::string> vocab;
  std::unordered_set<std::string> seen;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.find_first_of("\t,") != std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(no) + ": label names cannot contain tabs or commas");
    if (!seen.insert(line).second)
      throw DataError(path.string() + ":" + std::to_string(no) + ": duplicate label '" + line + "'");
    vocab.push_back(line);
  }
  return vocab;
}

void write_labels(const fs::path& path, const LabeledDataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.ids[i] << '\t';
    bool first = true;
    for (std::size_t k = 0; k < data.label_count(); ++k) {
      if (data.labels(i, k) > 0.0) {
        out << (first ? "" : ",") << data.vocabulary[k];
        first = false;
      }
    }
    out << '\n';
  }
}

LabeledDataset load_dataset(const fs::path& features, const fs::path& labels, fs::path vocab) {
  vocab = default_vocab(labels, std::move(vocab));
  FeatureData fd = read_features(features);
  LabeledDataset ds;
  ds.grid = fd.grid;
  ds.feature_dim = fd.feature_dim;
  ds.ids = std::move(fd.ids);
  ds.features = std::move(fd.features);
  ds.vocabulary = read_vocabulary(vocab);
  ds.labels = Tensor(ds.size(), ds.vocabulary.size(), -1.0);

  std::unordered_map<std::string, std::size_t> label_index, image_index;
  for (std::size_t k = 0; k < ds.vocabulary.size(); ++k) label_index[ds.vocabulary[k]] = k;
  for (std::size_t i = 0; i < ds.size(); ++i) image_index[ds.ids[i]] = i;

  std::ifstream in(labels);
  if (!in) throw DataError("cannot open label file " + labels.string());
  std::vector<bool> covered(ds.size(), false);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = labels.string() + ":" + std::to_string(no);
    const auto tab = line.find('\t');
    const std::string id = line.substr(0, tab);
    const auto it = image_index.find(id);
    if (it == image_index.end()) throw MissingIdError(where + ": image id '" + id + "' not in " + features.string());
    if (covered[it->second]) throw DataError(where + ": second label line for image '" + id + "'");
    covered[it->second] = true;
    if (tab == std::string::npos) continue;
    std::stringstream rest(line.substr(tab + 1));
    std::string label;
    while (std::getline(rest, label, ',')) {
      if (label.empty()) continue;
      const auto lk = label_index.find(label);
      if (lk == label_index.end()) throw UnknownLabelError(where + ": label '" + label + "' not in " + vocab.string());
      ds.labels(it->second, lk->second) = 1.0;
    }
  }
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!covered[i]) throw MissingIdError(labels.string() + ": no label line for image '" + ds.ids[i] + "'");
  ds.validate();
  return ds;
}

void save_dataset(const LabeledDataset& data, const fs::path& features, const fs::path& labels, fs::path vocab) {
  vocab = default_vocab(labels, std::move(vocab));
  write_features(features, data);
  write_labels(labels, data);
  write_vocabulary(vocab, data.vocabulary);
}

// ---- synthetic data -------------------------------------------------------

std::string to_string(RuleKind k) {
  switch (k) {
    case RuleKind::Content: return "content";
    case RuleKind::Adjacent: return "adjacent";
    case RuleKind::LongRange: return "longrange";
  }
  return "?";
}

void SynthConfig::validate() const {
  if (n_labels < 4) throw ArgumentError("synth: n_labels must be >= 4");
  if (grid.rows < 4 || grid.cols < 4) throw ArgumentError("synth: the grid needs at least 4x4 cells");
  if (feature_dim == 0) throw ArgumentError("synth: feature_dim must be positive");
  if (n_patterns != 0 && n_patterns < 2) throw ArgumentError("synth: at least two patterns are needed");
  if (!(noise >= 0.0)) throw ArgumentError("synth: noise must be >= 0");
  for (double p : {content_rate, positive_rate, decoy_rate})
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("synth: rates must lie in [0, 1]");
}

namespace {

bool related(const GridSpec& g, std::size_t i, std::size_t j, RuleKind kind) {
  const auto ri = static_cast<long>(g.row_of(i)), ci = static_cast<long>(g.col_of(i));
  const auto rj = static_cast<long>(g.row_of(j)), cj = static_cast<long>(g.col_of(j));
  const long dist = std::labs(ri - rj) + std::labs(ci - cj);
  const bool inline_ = ri == rj || ci == cj;
  if (kind == RuleKind::Adjacent) return dist == 1;
  return inline_ && (dist == 2 || dist == 3);
}

struct Placer {
  const GridSpec& grid;
  std::vector<std::size_t>& cells;
  std::mt19937_64& rng;

  std::size_t random_cell() { return std::uniform_int_distribution<std::size_t>(0, grid.cells() - 1)(rng); }

  bool free(std::size_t c) const { return cells[c] == 0; }

  std::optional<std::size_t> offset(std::size_t c, long dr, long dc) const {
    const long r = static_cast<long>(grid.row_of(c)) + dr, k = static_cast<long>(grid.col_of(c)) + dc;
    if (r < 0 || k < 0 || r >= static_cast<long>(grid.rows) || k >= static_cast<long>(grid.cols)) return std::nullopt;
    return grid.cell(static_cast<std::size_t>(r), static_cast<std::size_t>(k));
  }

  void single(std::size_t pattern) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const std::size_t c = random_cell();
      if (free(c)) {
        cells[c] = pattern;
        return;
      }
    }
  }

  // a and b along one axis, `dist` steps apart
  bool line(std::size_t a, std::size_t b, long dist) {
    static constexpr long dirs[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    for (int attempt = 0; attempt < 64; ++attempt) {
      const std::size_t c = random_cell();
      const auto& d = dirs[std::uniform_int_distribution<int>(0, 3)(rng)];
      const auto other = offset(c, d[0] * dist, d[1] * dist);
      if (free(c) && other && free(*other)) {
        cells[c] = a;
        cells[*other] = b;
        return true;
      }
    }
    return false;
  }

  void planted(const LabelRule& rule) {
    const long dist = rule.kind == RuleKind::Adjacent ? 1 : std::uniform_int_distribution<long>(2, 3)(rng);
    line(rule.a, rule.b, dist);
  }

  // the rule's two patterns placed so that this pair does not satisfy it;
  // half the time at a near miss along one axis
  void decoy(const LabelRule& rule) {
    if (std::bernoulli_distribution(0.5)(rng)) {
      const long near = rule.kind == RuleKind::Adjacent ? 2 : (std::bernoulli_distribution(0.5)(rng) ? 1 : 4);
      if (line(rule.a, rule.b, near)) return;
    }
    for (int attempt = 0; attempt < 64; ++attempt) {
      const std::size_t i = random_cell(), j = random_cell();
      if (i != j && free(i) && free(j) && !related(grid, i, j, rule.kind)) {
        cells[i] = rule.a;
        cells[j] = rule.b;
        return;
      }
    }
  }
};

}  // namespace

std::vector<bool> apply_rules(const GridSpec& grid, const std::vector<std::size_t>& cells,
                              const std::vector<LabelRule>& rules) {
  std::vector<bool> out(rules.size(), false);
  for (std::size_t k = 0; k < rules.size(); ++k) {
    const LabelRule& rule = rules[k];
    for (std::size_t i = 0; i < cells.size() && !out[k]; ++i) {
      if (cells[i] != rule.a) continue;
      if (rule.kind == RuleKind::Content) {
        out[k] = true;
        continue;
      }
      for (std::size_t j = 0; j < cells.size() && !out[k]; ++j)
        if (cells[j] == rule.b && related(grid, i, j, rule.kind)) out[k] = true;
    }
  }
  return out;
}

std::vector<std::size_t> labels_of_kind(const std::vector<LabelRule>& rules, RuleKind kind) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < rules.size(); ++k)
    if (rules[k].kind == kind) out.push_back(k);
  return out;
}

SynthDataset synth_dataset(const SynthConfig& config) {
  config.validate();
  const std::size_t patterns = (config.n_patterns ? config.n_patterns : 2 * config.n_labels) + 1;
  const std::size_t d = config.feature_dim;
  SynthDataset out;

  std::mt19937_64 rule_rng(config.rule_seed * 0x9E3779B97F4A7C15ULL + 0xC0FFEE);
  std::normal_distribution<double> normal(0.0, 1.0);
  out.prototypes = Tensor(patterns, d);
  for (std::size_t p = 0; p < patterns; ++p) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out.prototypes(p, j) = normal(rule_rng);
      norm += out.prototypes(p, j) * out.prototypes(p, j);
    }
    for (std::size_t j = 0; j < d; ++j) out.prototypes(p, j) /= std::sqrt(norm);
  }
  std::uniform_int_distribution<std::size_t> pick(1, patterns - 1);
  std::set<std::tuple<int, std::size_t, std::size_t>> used;
  std::size_t content_count = 0;
  for (std::size_t k = 0; k < config.n_labels; ++k) {
    LabelRule rule;
    rule.kind = static_cast<RuleKind>(k % 3);
    if (rule.kind == RuleKind::Content) {
      rule.a = 1 + content_count++ % (patterns - 1);
    } else {
      do {
        rule.a = pick(rule_rng);
        do rule.b = pick(rule_rng);
        while (rule.b == rule.a);
      } while (!used.insert({static_cast<int>(rule.kind), std::min(rule.a, rule.b), std::max(rule.a, rule.b)}).second &&
               used.size() < (patterns - 1) * (patterns - 2));
    }
    out.rules.push_back(rule);
    std::string name = to_string(rule.kind) + "_p" + std::to_string(rule.a);
    if (rule.kind != RuleKind::Content) name += "_p" + std::to_string(rule.b);
    out.data.vocabulary.push_back(name);
  }

  LabeledDataset& ds = out.data;
  ds.grid = config.grid;
  ds.feature_dim = d;
  ds.labels = Tensor(config.n_images, config.n_labels, -1.0);
  std::mt19937_64 rng(config.seed * 0xD1B54A32D192ED03ULL + 17);
  const std::size_t n = config.grid.cells();
  for (std::size_t img = 0; img < config.n_images; ++img) {
    std::vector<std::size_t> cells(n, 0);
    Placer placer{config.grid, cells, rng};
    for (const LabelRule& rule : out.rules) {
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      if (rule.kind == RuleKind::Content) {
        if (u < config.content_rate) placer.single(rule.a);
      } else if (u < config.positive_rate) {
        placer.planted(rule);
      } else if (u < config.positive_rate + config.decoy_rate) {
        placer.decoy(rule);
      }
    }
    for (std::size_t e = 0; e < config.extra_objects; ++e) placer.single(pick(rng));

    Tensor f(n, d);
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t j = 0; j < d; ++j)
        f(c, j) = static_cast<double>(static_cast<float>(out.prototypes(cells[c], j) + config.noise * normal(rng)));
    const auto labels = apply_rules(config.grid, cells, out.rules);
    for (std::size_t k = 0; k < labels.size(); ++k)
      if (labels[k]) ds.labels(img, k) = 1.0;
    std::ostringstream id;
    id << "img" << std::setw(6) << std::setfill('0') << img;
    ds.ids.push_back(id.str());
    ds.features.push_back(std::move(f));
    out.cell_patterns.push_back(std::move(cells));
  }
  return out;
}

// ---- checkpoints ----------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const json header{{"network", ckpt.model.network}, {"partition", ckpt.model.partition}, {"state", ckpt.state}};
  const std::string text = header.dump();
  std::string buf = "CKNC";
  put(buf, kCheckpointVersion);
  put(buf, static_cast<std::uint64_t>(text.size()));
  buf += text;
  put(buf, static_cast<std::uint32_t>(ckpt.model.params.size()));
  for (const auto& p : ckpt.model.params.tensors) {
    put_string(buf, p.name);
    put(buf, static_cast<std::uint64_t>(p.value.rows()));
    put(buf, static_cast<std::uint64_t>(p.value.cols()));
    for (std::size_t i = 0; i < p.value.size(); ++i) put(buf, p.value[i]);
  }
  spill(path, buf);
}

Checkpoint load_checkpoint(const fs::path& path, const NetworkConfig* expected) {
  const std::string buf = slurp(path);
  Reader r(buf, path);
  if (r.bytes(4, "magic") != "CKNC") throw HeaderError(path.string() + ": bad magic at offset 0, expected CKNC");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw VersionError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  const auto text_len = r.get<std::uint64_t>("header length");
  const std::string text = r.bytes(text_len, "header");
  Checkpoint ckpt;
  try {
    const json header = json::parse(text);
    header.at("network").get_to(ckpt.model.network);
    header.at("partition").get_to(ckpt.model.partition);
    header.at("state").get_to(ckpt.state);
  } catch (const json::exception& e) {
    throw HeaderError(path.string() + ": malformed header: " + e.what());
  }
  ckpt.model.partition.validate();
  const NetworkConfig& shape_of = expected ? *expected : ckpt.model.network;
  ModelParams reference = init_params(shape_of, ckpt.model.partition.sizes(), 0);

  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != reference.size()) {
    throw ShapeError(path.string() + ": " + std::to_string(count) + " tensors stored, the configuration implies " +
                     std::to_string(reference.size()));
  }
  for (std::size_t s = 0; s < count; ++s) {
    const std::string name = r.str("tensor name");
    const auto rows = r.get<std::uint64_t>("tensor rows");
    const auto cols = r.get<std::uint64_t>("tensor cols");
    Tensor& ref = reference[s];
    if (name != reference.tensors[s].name)
      throw ShapeError(path.string() + ": tensor " + std::to_string(s) + " is '" + name + "', expected '" +
                       reference.tensors[s].name + "'");
    if (rows != ref.rows() || cols != ref.cols()) {
      throw ShapeError(path.string() + ": tensor '" + name + "' is " + std::to_string(rows) + "x" +
                       std::to_string(cols) + ", the configuration implies " + std::to_string(ref.rows()) + "x" +
                       std::to_string(ref.cols()));
    }
    r.need(rows * cols * 8, "tensor data");
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = r.get<double>("tensor data");
  }
  if (r.offset() != buf.size())
    throw HeaderError(path.string() + ": " + std::to_string(buf.size() - r.offset()) + " trailing bytes");
  ckpt.model.params = std::move(reference);
  return ckpt;
}

}  // namespace dmckn
