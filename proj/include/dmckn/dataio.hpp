#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmckn/dataset.hpp"
#include "dmckn/error.hpp"
#include "dmckn/training.hpp"

namespace dmckn {

class HeaderError : public DataError {
 public:
  using DataError::DataError;
};

class UnknownLabelError : public DataError {
 public:
  using DataError::DataError;
};

class MissingIdError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Feature file: "CKNF", u32 version, u32 N, u32 rows, u32 cols, u32 d, N·n·d
// float32 LE (image, cell, channel), then per image a u32 length and the id bytes.
struct FeatureData {
  GridSpec grid;
  std::size_t feature_dim = 0;
  std::vector<std::string> ids;
  std::vector<Tensor> features;
};

void write_features(const std::filesystem::path& path, const LabeledDataset& data);
FeatureData read_features(const std::filesystem::path& path);

// Label file: "id<TAB>label,label,..." per line. Vocabulary: one label per line, index = line.
void write_labels(const std::filesystem::path& path, const LabeledDataset& data);
void write_vocabulary(const std::filesystem::path& path, const std::vector<std::string>& vocabulary);
std::vector<std::string> read_vocabulary(const std::filesystem::path& path);

/// `vocab` defaults to `<labels>.vocab`.
LabeledDataset load_dataset(const std::filesystem::path& features, const std::filesystem::path& labels,
                            std::filesystem::path vocab = {});
void save_dataset(const LabeledDataset& data, const std::filesystem::path& features,
                  const std::filesystem::path& labels, std::filesystem::path vocab = {});

// ---- synthetic data -------------------------------------------------------

enum class RuleKind { Content, Adjacent, LongRange };

std::string to_string(RuleKind k);

/// Content: pattern `a` anywhere. Adjacent: `a` and `b` on 4-adjacent cells.
/// LongRange: `a` and `b` in one row or column, exactly 2 or 3 steps apart.
struct LabelRule {
  RuleKind kind = RuleKind::Content;
  std::size_t a = 0;
  std::size_t b = 0;

  friend bool operator==(const LabelRule&, const LabelRule&) = default;
};

struct SynthConfig {
  GridSpec grid{8, 10};
  std::size_t n_images = 2000;
  std::size_t n_labels = 12;
  std::size_t feature_dim = 8;
  std::size_t n_patterns = 0;   // 0: 2·n_labels; pattern 0 is background on top
  double noise = 0.3;
  double content_rate = 0.3;    // chance a content rule's pattern is planted
  double positive_rate = 0.2;   // chance a relational rule is planted satisfied
  double decoy_rate = 0.3;      // chance its two patterns are planted unrelated
  std::size_t extra_objects = 1;  // random single patterns per image
  std::uint64_t seed = 0;
  std::uint64_t rule_seed = 0;  // prototypes and rules; shared by train/test draws

  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct SynthDataset {
  LabeledDataset data;
  std::vector<LabelRule> rules;  // one per label
  std::vector<std::vector<std::size_t>> cell_patterns;  // image → cell → pattern
  Tensor prototypes;  // patterns × feature_dim
};

SynthDataset synth_dataset(const SynthConfig& config);

/// Labels of each rule for one pattern layout, the scan the generator labels with.
std::vector<bool> apply_rules(const GridSpec& grid, const std::vector<std::size_t>& cells,
                              const std::vector<LabelRule>& rules);

std::vector<std::size_t> labels_of_kind(const std::vector<LabelRule>& rules, RuleKind kind);

// ---- checkpoints ----------------------------------------------------------

struct Checkpoint {
  Model model;
  TrainingState state;
};

// "CKNC", u32 version, u64 length + JSON header (network, partition, state),
// u32 tensor count, then per tensor: u32 name length, name, u64 rows, u64 cols, f64 LE data.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// With `expected`, every stored tensor is checked against the shapes that config implies.
Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkConfig* expected = nullptr);

}  // namespace dmckn
