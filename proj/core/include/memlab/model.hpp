#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlab/tensor.hpp"

namespace memlab {

class Vocabulary;

struct LowRankConfig {
  bool enabled = false;
  std::size_t rank = 8;
  double alpha = 16.0;

  double scaling() const { return alpha / static_cast<double>(rank); }
  // Adapter setting used for the 7B-scale runs in the literature this lab
  // reproduces (rank 128, alpha 256).
  static LowRankConfig paper_preset() { return {true, 128, 256.0}; }
};

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 0;
  std::size_t patch_size = 4;
  std::size_t image_side = 32;
  std::size_t max_seq_len = 112;
  int sep_token = 0;
  int eos_token = 1;
  LowRankConfig lowrank;

  // Defaults sized for the standard vocabulary.
  static ModelConfig for_vocabulary(const Vocabulary& vocab);

  void validate() const;
  std::size_t patches_per_image() const;
  std::size_t patch_dim() const { return patch_size * patch_size; }
  std::size_t head_dim() const { return d_model / n_heads; }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const LowRankConfig& c);
void from_json(const nlohmann::json& j, LowRankConfig& c);

struct NamedParam {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// All parameters of the multimodal decoder in canonical registration order:
// patch projection, token and position embeddings, each block in order,
// final norm, output head, then (when present) low-rank factors per block.
// Flattened gradients always follow this order.
class ModelParams {
 public:
  struct BlockSlots {
    std::size_t ln1_gamma, ln1_beta, wq, wk, wv, wo, ln2_gamma, ln2_beta, w1, b1, w2, b2;
    long lora_q_a = -1, lora_q_b = -1, lora_v_a = -1, lora_v_b = -1;
  };

  ModelParams() = default;
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedParam>& params() { return params_; }
  std::size_t size() const { return params_.size(); }
  const Tensor& value(std::size_t slot) const { return params_[slot].value; }

  std::size_t patch_w() const { return patch_w_; }
  std::size_t patch_b() const { return patch_b_; }
  std::size_t tok_emb() const { return tok_emb_; }
  std::size_t pos_emb() const { return pos_emb_; }
  const std::vector<BlockSlots>& blocks() const { return blocks_; }
  std::vector<BlockSlots>& blocks() { return blocks_; }
  std::size_t lnf_gamma() const { return lnf_gamma_; }
  std::size_t lnf_beta() const { return lnf_beta_; }
  std::size_t head_w() const { return head_w_; }
  std::size_t head_b() const { return head_b_; }

  bool lowrank_active() const { return !blocks_.empty() && blocks_[0].lora_q_a >= 0; }
  std::size_t scalar_count() const;
  std::size_t trainable_scalar_count() const;
  std::vector<bool> trainable_mask() const;

  // Concatenates the trainable entries of `grads` (aligned with params()).
  std::vector<double> flatten_trainable(const std::vector<Tensor>& grads) const;

  std::size_t add_param(std::string name, Tensor value, bool trainable = true);
  void rebuild_slots_from_names();

  friend bool operator==(const ModelParams& a, const ModelParams& b);

 private:
  ModelConfig config_;
  std::vector<NamedParam> params_;
  std::size_t patch_w_ = 0, patch_b_ = 0, tok_emb_ = 0, pos_emb_ = 0;
  std::vector<BlockSlots> blocks_;
  std::size_t lnf_gamma_ = 0, lnf_beta_ = 0, head_w_ = 0, head_b_ = 0;
};

// Non-owning view of one model input. `answer` excludes the end token; the
// model appends it as the final teacher-forcing target.
struct ModelInput {
  const Tensor* image = nullptr;
  std::span<const int> question;
  std::span<const int> answer;
};

struct LayerRepresentation {
  std::size_t layer_index = 0;
  std::vector<double> values;
};

struct ForwardResult {
  // Row j predicts answer[j]; the last row predicts the end token.
  Tensor answer_logits;
  // Layers 0..n_layers; layer 0 is the embedding output.
  std::vector<LayerRepresentation> representations;
};

// image[side, side] -> [(side/patch)^2, patch^2], patches in row-major grid
// order, each patch flattened row-major.
Tensor patchify(const ModelConfig& config, const Tensor& image);
// Patch tokens after the linear projection: [(side/patch)^2, d_model].
Tensor patch_embeddings(const ModelParams& params, const Tensor& image);

std::size_t sequence_length(const ModelConfig& config, const ModelInput& input);
// Position whose hidden state is reported as the layer representation: the
// last question token.
std::size_t representation_position(const ModelConfig& config, const ModelInput& input);

ForwardResult forward(const ModelParams& params, const ModelInput& input);

struct LossAndGrads {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with params(); empty for frozen slots
};

// Mean cross-entropy over answer tokens (plus end token) and its gradient.
LossAndGrads loss_and_gradients(const ModelParams& params, const ModelInput& input);
double answer_loss(const ModelParams& params, const ModelInput& input);

// Argmax decoding until the end token or max_new tokens. The returned
// sequence excludes the end token.
std::vector<int> generate_greedy(const ModelParams& params, const Tensor& image,
                                 std::span<const int> question, std::size_t max_new);

// Enabling adds zero-initialised adapters on the query/value projections and
// freezes everything except adapters, layer norms and the output head.
// Disabling merges the adapters into the base weights and unfreezes all.
// Throws StateError when enabling an already adapted model.
void apply_lowrank(ModelParams& params, bool enable, std::uint64_t seed);

// Versioned binary checkpoint; loading reproduces every double bit-for-bit.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace memlab
