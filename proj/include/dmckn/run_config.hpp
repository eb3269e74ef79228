#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "dmckn/dataio.hpp"
#include "dmckn/metrics.hpp"
#include "dmckn/network.hpp"
#include "dmckn/training.hpp"

// JSON forms of every configuration. Readers reject unknown keys and keep
// defaults for missing ones.
namespace dmckn {

using json = nlohmann::json;

void to_json(json& j, const GridSpec& g);
void from_json(const json& j, GridSpec& g);
void to_json(json& j, const LayerConfig& l);
void from_json(const json& j, LayerConfig& l);
void to_json(json& j, const NetworkConfig& n);
void from_json(const json& j, NetworkConfig& n);
void to_json(json& j, const EvalProtocol& p);
void from_json(const json& j, EvalProtocol& p);
void to_json(json& j, const TrainConfig& t);
void from_json(const json& j, TrainConfig& t);
void to_json(json& j, const GroupPartition& p);
void from_json(const json& j, GroupPartition& p);
void to_json(json& j, const TrainingState& s);
void from_json(const json& j, TrainingState& s);
void to_json(json& j, const SynthConfig& s);
void from_json(const json& j, SynthConfig& s);

/// A declarative run: model, optimisation and (for --synth runs) the generator.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  SynthConfig synth;
};

void to_json(json& j, const RunConfig& r);
void from_json(const json& j, RunConfig& r);

/// Small defaults that train in seconds on the synthetic task.
RunConfig default_run_config();

RunConfig read_run_config(const std::filesystem::path& path);
void write_run_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace dmckn
