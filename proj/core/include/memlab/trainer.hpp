#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"
#include "memlab/optim.hpp"

namespace memlab::trainer {

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 1;
  // Reserved; only 1 is supported.
  std::size_t gradient_accumulation = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

enum class Variant { Origin, Privacy, ImageTransform, TextTransform };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
inline constexpr Variant kAllVariants[] = {Variant::Origin, Variant::Privacy, Variant::ImageTransform,
                                           Variant::TextTransform};

ModelInput input_of(const corpus::SyntheticSample& s);

// Mean over samples of the per-sample answer loss, and its gradient.
// Per-sample terms are summed in batch order regardless of thread count.
LossAndGrads batch_gradients(const ModelParams& params, std::span<const corpus::SyntheticSample> batch);
double batch_loss(const ModelParams& params, std::span<const corpus::SyntheticSample> batch);

struct FinetuneResult {
  ModelParams params;
  std::vector<double> loss_curve;  // one entry per optimizer step
};

// Mini-batch training over a seeded shuffle of `data` each epoch. Throws
// TrainingError if the loss stops being finite.
FinetuneResult finetune(const ModelParams& initial, std::span<const corpus::SyntheticSample> data,
                        const TrainConfig& config);

struct GradSnapshot {
  std::vector<double> values;  // trainable entries in canonical order
  std::uint64_t batch_id = 0;
  Variant variant = Variant::Origin;
};

GradSnapshot gradient_snapshot(const ModelParams& params, std::span<const corpus::SyntheticSample> batch,
                               std::uint64_t batch_id = 0, Variant variant = Variant::Origin);

// The batch a variant copy sees. Origin replays the clean batch; Privacy
// renders a seeded U1 record (full mode) on every sample; the transforms
// follow the corpus perturbation baselines.
std::vector<corpus::SyntheticSample> make_variant_batch(std::span<const corpus::SyntheticSample> base,
                                                        Variant variant, const corpus::PrivacySets& privacy,
                                                        std::uint64_t seed);

struct TrialOptions {
  // Zero the watermark strip of both batches before the forward pass.
  bool mask_strip = false;
};

// Gradient cosine between two copies of `params`: one on the clean base
// batch, one on the variant batch. Throws DegenerateError on a zero gradient.
double similarity_trial(const ModelParams& params, std::span<const corpus::SyntheticSample> base_batch,
                        Variant variant, const corpus::PrivacySets& privacy, std::uint64_t seed,
                        TrialOptions options = {});

struct VariantStats {
  Variant variant = Variant::Origin;
  std::vector<double> cosines;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

struct SimilarityReport {
  std::size_t batch_size = 0;
  std::size_t n_trials = 0;
  std::vector<VariantStats> variants;

  const VariantStats& at(Variant v) const;
};

// Trial t draws a fresh batch of clean samples from `data` (watermarks
// stripped) with a seed derived from (seed, t); every variant sees the same
// base batch in a given trial.
SimilarityReport run_similarity_protocol(const ModelParams& params, std::span<const corpus::SyntheticSample> data,
                                         const corpus::PrivacySets& privacy, std::size_t batch_size,
                                         std::size_t n_trials, std::uint64_t seed,
                                         std::span<const Variant> variants = kAllVariants, TrialOptions options = {});

struct MultistepPoint {
  std::size_t step = 0;
  std::vector<double> cosines;  // one per repetition
  double mean = 0.0;
};

// Two copies trained in lockstep on paired batches (clean vs variant); the
// cosine at step k is taken on the k-th paired batch after k-1 updates.
std::vector<MultistepPoint> run_multistep_similarity(const ModelParams& params,
                                                     std::span<const corpus::SyntheticSample> data,
                                                     const corpus::PrivacySets& privacy, const TrainConfig& config,
                                                     std::span<const std::size_t> steps, Variant variant,
                                                     std::size_t repetitions);

struct SweepEntry {
  std::size_t batch_size = 0;
  VariantStats stats;
};

// Privacy-variant protocol per batch size. Trial t uses the same seed for
// every size, and smaller batches are prefixes of larger ones.
std::vector<SweepEntry> batch_size_sweep(const ModelParams& params, std::span<const corpus::SyntheticSample> data,
                                         const corpus::PrivacySets& privacy, std::span<const std::size_t> sizes,
                                         std::size_t n_trials, std::uint64_t seed);

}  // namespace memlab::trainer
