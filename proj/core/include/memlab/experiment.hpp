#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlab/corpus.hpp"
#include "memlab/covsim.hpp"
#include "memlab/csv.hpp"
#include "memlab/model.hpp"
#include "memlab/probing.hpp"
#include "memlab/trainer.hpp"

namespace memlab {

enum class Recipe { GradSim, Multistep, BatchSweep, Probe, Mia, CovSim, Full };

std::string to_string(Recipe r);
Recipe recipe_from_string(const std::string& s);

inline constexpr int kSummarySchemaVersion = 1;

struct GradSimConfig {
  std::size_t batch_size = 8;
  std::size_t n_trials = 50;
  bool mask_check = true;  // also run the strip-masked privacy variant
  // Model the similarity recipes (gradsim, batchsweep, multistep) start from:
  // "init" (freshly initialised) or "base" (after pre-training).
  std::string model_state = "init";
};

struct MultistepConfig {
  std::vector<std::size_t> steps{1, 10, 100};
  std::size_t repetitions = 3;
};

struct BatchSweepConfig {
  std::vector<std::size_t> sizes{1, 4, 8};
  std::size_t n_trials = 50;
};

struct MiaConfig {
  std::size_t per_record = 20;
  double k_percent = 20.0;
};

struct CovSimRecipeConfig {
  covsim::CovSimConfig base;
  std::vector<std::size_t> batch_sizes{2, 4, 8, 32};
};

// Training that produces the "base" model before fine-tuning: clean scene
// questions plus, for a fraction of samples, reading a username strip drawn
// from a public pool disjoint from U1 and U2.
struct PretrainConfig {
  std::size_t n_samples = 2000;
  double reading_fraction = 0.5;
  std::size_t public_records = 200;
  trainer::TrainConfig train;
};

struct ExperimentConfig {
  Recipe recipe = Recipe::Full;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "results";
  std::string preset;
  corpus::CorpusConfig corpus;
  ModelConfig model;
  PretrainConfig pretrain;
  trainer::TrainConfig train;
  probing::ProbeConfig probe;
  GradSimConfig gradsim;
  MultistepConfig multistep;
  BatchSweepConfig batchsweep;
  MiaConfig mia;
  CovSimRecipeConfig covsim;

  // Desk defaults: model sized for the standard vocabulary.
  static ExperimentConfig defaults();
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Unknown keys and invalid values raise ConfigError naming the key path.
// A top-level "preset" is applied before the remaining keys.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& c, const std::filesystem::path& path);
void apply_preset(ExperimentConfig& c, const std::string& name);

// FNV-1a of the canonical config JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

struct PropertyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct RunReport {
  nlohmann::json config;
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json metrics = nlohmann::json::object();
  std::map<std::string, CsvTable> tables;  // file name -> table
  std::vector<PropertyCheck> checks;
  double wall_clock_seconds = 0.0;
  std::map<std::string, double> recipe_seconds;  // not part of summary.json
  std::vector<std::string> files;  // filled by write_report

  bool all_passed() const;
};

// Log sink for progress lines; null silences output.
using ProgressFn = void (*)(const std::string&);

RunReport run_experiment(const ExperimentConfig& config, ProgressFn progress = nullptr);

// Writes every table, summary.json (deterministic) and timing.json.
void write_report(RunReport& report, const std::filesystem::path& dir);

// Base model for a config: initialisation plus pre-training.
ModelParams build_base_model(const ExperimentConfig& config, const corpus::PrivacySets& privacy);
std::vector<corpus::SyntheticSample> pretrain_samples(const ExperimentConfig& config,
                                                      const corpus::PrivacySets& privacy);

}  // namespace memlab
