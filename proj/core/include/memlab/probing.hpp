#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"
#include "memlab/tensor.hpp"

namespace memlab::probing {

enum class QueryKind { Username, UserId };

std::string to_string(QueryKind k);
QueryKind query_kind_from_string(const std::string& s);

// "what is the username ?" / "what is the user_id of the username ?"
std::vector<int> query_tokens(QueryKind k);

// Final-query-token hidden states for a set of samples, one matrix per layer.
struct Representations {
  QueryKind query_kind = QueryKind::Username;
  std::vector<std::uint64_t> sample_ids;
  std::vector<int> labels;    // 1 for U1 (seen), 0 for U2
  std::vector<Tensor> layers; // layers[l] is [n_samples, d_model]

  std::size_t size() const { return labels.size(); }
};

// Throws ContractError if a sample carries no username-only watermark.
Representations collect_representations(const ModelParams& params, std::span<const corpus::SyntheticSample> samples,
                                        QueryKind kind);

struct ProbeConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  // Scale features by training-split mean/std before fitting.
  bool standardize = false;
  // Model the fine-tuned curve is compared against: "clean_finetune" (same
  // fine-tune on D_f with the watermarks removed) or "pretrained".
  std::string reference = "pretrained";

  void validate() const;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct LinearProbe {
  std::vector<double> weights;
  double bias = 0.0;
  std::vector<double> feature_mean;  // empty unless standardized
  std::vector<double> feature_scale;

  double logit(std::span<const double> x) const;
  int predict(std::span<const double> x) const { return logit(x) >= 0.0 ? 1 : 0; }
};

double accuracy(const LinearProbe& probe, const Tensor& x, std::span<const int> y);

// Logistic regression, zero-initialised, Adam on mini-batches of a seeded
// shuffle each epoch. Throws ContractError if the training labels hold a
// single class.
LinearProbe train_logistic_probe(const Tensor& x, std::span<const int> y, const ProbeConfig& config);

// Ridge-regularised least squares on +-1 targets, solved in closed form.
LinearProbe least_squares_probe(const Tensor& x, std::span<const int> y, double ridge = 1e-6);

struct ProbeResult {
  QueryKind query_kind = QueryKind::Username;
  std::string model_state;
  std::vector<double> train_accuracy;  // per layer
  std::vector<double> val_accuracy;
  std::vector<double> test_accuracy;
  std::size_t n_train = 0, n_val = 0, n_test = 0;

  std::size_t best_layer() const;  // by test accuracy, first maximum
  double best_test_accuracy() const { return test_accuracy.at(best_layer()); }
};

// One probe per layer. With shuffle_labels, every split's labels are
// replaced by a seeded permutation first (the no-signal control).
ProbeResult probe_layers(const Representations& train, const Representations& val, const Representations& test,
                         const ProbeConfig& config, std::string model_state, bool shuffle_labels = false);

struct LayerwiseCurves {
  ProbeResult base;
  ProbeResult finetuned;
};

LayerwiseCurves layerwise_curve(const ModelParams& base, const ModelParams& finetuned, const corpus::ProbeSet& d_p,
                                QueryKind kind, const ProbeConfig& config);

struct PcaResult {
  Tensor coordinates;                    // [n, out_dims]
  Tensor components;                     // [out_dims, d], orthonormal rows
  std::vector<double> mean;              // [d]
  std::vector<double> explained_ratio;   // [out_dims], non-increasing
};

// Principal components of the rows of x. Each component's sign is fixed so
// that its largest-magnitude entry is positive.
PcaResult pca_project(const Tensor& x, std::size_t out_dims = 2);

struct DirectPromptResult {
  QueryKind query_kind = QueryKind::Username;
  std::vector<int> correct;  // per sample, 0 or 1
  double accuracy = 0.0;
};

// Greedy decoding of the query answer, scored by exact match against the
// watermark's username (Username) or its paired user_id (UserId).
DirectPromptResult direct_prompt_eval(const ModelParams& params, std::span<const corpus::SyntheticSample> samples,
                                      QueryKind kind);

// Expected answer tokens for a sample under the given query.
std::vector<int> expected_answer(const corpus::SyntheticSample& sample, QueryKind kind);

}  // namespace memlab::probing
