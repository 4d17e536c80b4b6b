#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlab/corpus.hpp"
#include "memlab/model.hpp"

namespace memlab::mia {

enum class Method { Loss, Zlib, MinK };

inline constexpr Method kAllMethods[] = {Method::Loss, Method::Zlib, Method::MinK};
std::string to_string(Method m);

struct MiaInstance {
  corpus::SyntheticSample sample;
  bool member = false;  // watermark record drawn from U1
};

// `per_record` fresh scenes for every record of U1 (members) and U2
// (non-members), each carrying its record in full mode.
std::vector<MiaInstance> build_instances(const corpus::PrivacySets& privacy, std::size_t per_record,
                                         std::uint64_t seed);
nlohmann::json instance_manifest(std::span<const MiaInstance> instances);

// Log-probabilities of the answer tokens under teacher forcing (the end
// token is not scored).
std::vector<double> token_logprobs(const ModelParams& params, const corpus::SyntheticSample& sample);

// Raw-DEFLATE (RFC 1951) size at the default compression level.
std::size_t compressed_length(std::string_view text);

double mean_nll(std::span<const double> logprobs);
// Mean of the ceil(k% * T) smallest log-probabilities.
double min_k_from_logprobs(std::span<const double> logprobs, double k_percent);

// Scores are oriented so that higher means more member-like.
double loss_score(const ModelParams& params, const MiaInstance& instance);
double zlib_entropy_score(const ModelParams& params, const MiaInstance& instance);
double min_k_prob(const ModelParams& params, const MiaInstance& instance, double k_percent = 20.0);

// P(member score > non-member score) with ties counted one half.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

struct ScoreRecord {
  std::uint64_t instance_id = 0;
  bool member = false;
  Method method = Method::Loss;
  std::string model_state;
  double raw = 0.0;    // mean NLL, NLL/zlib-length ratio, or min-k mean logprob
  double score = 0.0;
};

struct AucRow {
  Method method = Method::Loss;
  std::string model_state;
  double auc = 0.0;
  std::size_t n_members = 0;
  std::size_t n_nonmembers = 0;
};

struct MiaReport {
  std::vector<AucRow> rows;  // method-major, base before finetuned
  std::vector<ScoreRecord> scores;

  double auc(Method m, std::string_view state) const;
};

MiaReport run_mia_suite(const ModelParams& base, const ModelParams& finetuned,
                        std::span<const MiaInstance> instances, double k_percent = 20.0);

}  // namespace memlab::mia
