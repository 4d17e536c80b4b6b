#include "memlab/model.hpp"

#include <algorithm>
#include <cmath>

#include "memlab/autodiff.hpp"
#include "memlab/errors.hpp"
#include "memlab/rng.hpp"
#include "memlab/vocab.hpp"

namespace memlab {

ModelConfig ModelConfig::for_vocabulary(const Vocabulary& vocab) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.sep_token = vocab.sep();
  c.eos_token = vocab.eos();
  return c;
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_mult == 0 || patch_size == 0 || image_side == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (image_side % patch_size != 0) throw ConfigError("image_side must be divisible by patch_size");
  if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
  if (sep_token < 0 || static_cast<std::size_t>(sep_token) >= vocab_size || eos_token < 0 ||
      static_cast<std::size_t>(eos_token) >= vocab_size) {
    throw ConfigError("special token ids outside vocabulary");
  }
  if (max_seq_len <= patches_per_image() + 2) throw ConfigError("max_seq_len too small for image tokens");
  if (lowrank.enabled && lowrank.rank < 1) throw ConfigError("lowrank.rank must be >= 1 when enabled");
  if (lowrank.enabled && !(lowrank.alpha > 0.0)) throw ConfigError("lowrank.alpha must be positive");
}

std::size_t ModelConfig::patches_per_image() const {
  const std::size_t g = image_side / patch_size;
  return g * g;
}

void to_json(nlohmann::json& j, const LowRankConfig& c) {
  j = nlohmann::json{{"enabled", c.enabled}, {"rank", c.rank}, {"alpha", c.alpha}};
}

void from_json(const nlohmann::json& j, LowRankConfig& c) {
  c.enabled = j.value("enabled", c.enabled);
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},       {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                     {"ffn_mult", c.ffn_mult},     {"vocab_size", c.vocab_size}, {"patch_size", c.patch_size},
                     {"image_side", c.image_side}, {"max_seq_len", c.max_seq_len}, {"sep_token", c.sep_token},
                     {"eos_token", c.eos_token},   {"lowrank", c.lowrank}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.image_side = j.value("image_side", c.image_side);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.sep_token = j.value("sep_token", c.sep_token);
  c.eos_token = j.value("eos_token", c.eos_token);
  if (j.contains("lowrank")) c.lowrank = j.at("lowrank").get<LowRankConfig>();
}

namespace {

Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

std::size_t ModelParams::add_param(std::string name, Tensor value, bool trainable) {
  params_.push_back(NamedParam{std::move(name), std::move(value), trainable});
  return params_.size() - 1;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config_ = config;
  p.config_.lowrank.enabled = false;
  const std::size_t d = config.d_model;
  const std::size_t ff = d * config.ffn_mult;
  const std::size_t v = config.vocab_size;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = inv_sqrt_d / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  Rng rng(seed, "model-init");
  p.patch_w_ = p.add_param("patch_proj.weight",
                           normal_tensor(rng, config.patch_dim(), d, 1.0 / std::sqrt(double(config.patch_dim()))));
  p.patch_b_ = p.add_param("patch_proj.bias", Tensor({1, d}));
  p.tok_emb_ = p.add_param("tok_emb", normal_tensor(rng, v, d, 0.5));
  p.pos_emb_ = p.add_param("pos_emb", normal_tensor(rng, config.max_seq_len, d, 0.1));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string pre = "block." + std::to_string(l) + ".";
    BlockSlots b{};
    b.ln1_gamma = p.add_param(pre + "ln1.gamma", Tensor::filled(1, d, 1.0));
    b.ln1_beta = p.add_param(pre + "ln1.beta", Tensor({1, d}));
    b.wq = p.add_param(pre + "attn.wq", normal_tensor(rng, d, d, inv_sqrt_d));
    b.wk = p.add_param(pre + "attn.wk", normal_tensor(rng, d, d, inv_sqrt_d));
    b.wv = p.add_param(pre + "attn.wv", normal_tensor(rng, d, d, inv_sqrt_d));
    b.wo = p.add_param(pre + "attn.wo", normal_tensor(rng, d, d, resid));
    b.ln2_gamma = p.add_param(pre + "ln2.gamma", Tensor::filled(1, d, 1.0));
    b.ln2_beta = p.add_param(pre + "ln2.beta", Tensor({1, d}));
    b.w1 = p.add_param(pre + "ffn.w1", normal_tensor(rng, d, ff, inv_sqrt_d));
    b.b1 = p.add_param(pre + "ffn.b1", Tensor({1, ff}));
    b.w2 = p.add_param(pre + "ffn.w2", normal_tensor(rng, ff, d, resid / std::sqrt(double(config.ffn_mult))));
    b.b2 = p.add_param(pre + "ffn.b2", Tensor({1, d}));
    p.blocks_.push_back(b);
  }
  p.lnf_gamma_ = p.add_param("ln_f.gamma", Tensor::filled(1, d, 1.0));
  p.lnf_beta_ = p.add_param("ln_f.beta", Tensor({1, d}));
  p.head_w_ = p.add_param("head.weight", normal_tensor(rng, d, v, inv_sqrt_d));
  p.head_b_ = p.add_param("head.bias", Tensor({1, v}));
  if (config.lowrank.enabled) {
    p.config_.lowrank = config.lowrank;
    p.config_.lowrank.enabled = false;
    apply_lowrank(p, true, derive_seed(seed, "lowrank-init"));
  }
  return p;
}

void ModelParams::rebuild_slots_from_names() {
  auto find = [&](const std::string& name) -> long {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return static_cast<long>(i);
    }
    return -1;
  };
  auto need = [&](const std::string& name) {
    const long i = find(name);
    if (i < 0) throw ConfigError("checkpoint is missing parameter '" + name + "'");
    return static_cast<std::size_t>(i);
  };
  patch_w_ = need("patch_proj.weight");
  patch_b_ = need("patch_proj.bias");
  tok_emb_ = need("tok_emb");
  pos_emb_ = need("pos_emb");
  blocks_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "block." + std::to_string(l) + ".";
    BlockSlots b{};
    b.ln1_gamma = need(pre + "ln1.gamma");
    b.ln1_beta = need(pre + "ln1.beta");
    b.wq = need(pre + "attn.wq");
    b.wk = need(pre + "attn.wk");
    b.wv = need(pre + "attn.wv");
    b.wo = need(pre + "attn.wo");
    b.ln2_gamma = need(pre + "ln2.gamma");
    b.ln2_beta = need(pre + "ln2.beta");
    b.w1 = need(pre + "ffn.w1");
    b.b1 = need(pre + "ffn.b1");
    b.w2 = need(pre + "ffn.w2");
    b.b2 = need(pre + "ffn.b2");
    b.lora_q_a = find(pre + "lora_q.A");
    b.lora_q_b = find(pre + "lora_q.B");
    b.lora_v_a = find(pre + "lora_v.A");
    b.lora_v_b = find(pre + "lora_v.B");
    blocks_.push_back(b);
  }
  lnf_gamma_ = need("ln_f.gamma");
  lnf_beta_ = need("ln_f.beta");
  head_w_ = need("head.weight");
  head_b_ = need("head.bias");
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ModelParams::trainable_scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.trainable ? p.value.size() : 0;
  return n;
}

std::vector<bool> ModelParams::trainable_mask() const {
  std::vector<bool> m(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) m[i] = params_[i].trainable;
  return m;
}

std::vector<double> ModelParams::flatten_trainable(const std::vector<Tensor>& grads) const {
  if (grads.size() != params_.size()) throw DimensionError("flatten_trainable: gradient count mismatch");
  std::vector<double> flat;
  flat.reserve(trainable_scalar_count());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].trainable) continue;
    if (grads[i].empty()) {
      flat.insert(flat.end(), params_[i].value.size(), 0.0);
    } else {
      if (!grads[i].same_shape(params_[i].value)) throw DimensionError("flatten_trainable: shape mismatch");
      flat.insert(flat.end(), grads[i].data().begin(), grads[i].data().end());
    }
  }
  return flat;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    if (a.params_[i].name != b.params_[i].name || a.params_[i].trainable != b.params_[i].trainable ||
        !(a.params_[i].value == b.params_[i].value)) {
      return false;
    }
  }
  return true;
}

Tensor patchify(const ModelConfig& config, const Tensor& image) {
  if (image.rank() != 2 || image.rows() != config.image_side || image.cols() != config.image_side) {
    throw ConfigError("patchify: image " + image.shape_string() + " does not match configured side " +
                      std::to_string(config.image_side));
  }
  const std::size_t ps = config.patch_size;
  const std::size_t grid = config.image_side / ps;
  Tensor out({grid * grid, ps * ps});
  for (std::size_t gr = 0; gr < grid; ++gr) {
    for (std::size_t gc = 0; gc < grid; ++gc) {
      auto row = out.row_span(gr * grid + gc);
      for (std::size_t r = 0; r < ps; ++r) {
        for (std::size_t c = 0; c < ps; ++c) row[r * ps + c] = image(gr * ps + r, gc * ps + c);
      }
    }
  }
  return out;
}

std::size_t sequence_length(const ModelConfig& config, const ModelInput& input) {
  return config.patches_per_image() + 2 + input.question.size() + input.answer.size();
}

std::size_t representation_position(const ModelConfig& config, const ModelInput& input) {
  return config.patches_per_image() + input.question.size();
}

namespace {

struct Graph {
  Var logits;
  std::vector<std::size_t> rep_rows;
  std::vector<Var> layer_outputs;
};

// Binds parameters lazily so unused slots never appear on the tape.
class Binder {
 public:
  Binder(Tape& tape, const ModelParams& params, bool with_grad)
      : tape_(tape), params_(params), with_grad_(with_grad), vars_(params.size()), bound_(params.size(), false) {}

  Var operator()(std::size_t slot) {
    if (!bound_[slot]) {
      const auto& p = params_.params()[slot];
      vars_[slot] = tape_.parameter(slot, p.value, with_grad_ && p.trainable);
      bound_[slot] = true;
    }
    return vars_[slot];
  }

 private:
  Tape& tape_;
  const ModelParams& params_;
  bool with_grad_;
  std::vector<Var> vars_;
  std::vector<bool> bound_;
};

Var project(Binder& bind, Var h, std::size_t w, long lora_a, long lora_b, double lora_scale) {
  Var out = ad::matmul(h, bind(w));
  if (lora_a >= 0) {
    Var low = ad::matmul(ad::matmul(h, bind(static_cast<std::size_t>(lora_a))), bind(static_cast<std::size_t>(lora_b)));
    out = ad::add(out, ad::scale(low, lora_scale));
  }
  return out;
}

Graph build_graph(Tape& tape, const ModelParams& params, const ModelInput& input, bool with_grad) {
  const ModelConfig& cfg = params.config();
  if (input.image == nullptr) throw ContractError("model input has no image");
  if (input.question.empty()) throw ContractError("model input needs at least one question token");
  const std::size_t seq = sequence_length(cfg, input);
  if (seq > cfg.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(seq) + " tokens exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  Binder bind(tape, params, with_grad);
  const std::size_t n_patch = cfg.patches_per_image();

  Var patches = tape.constant(patchify(cfg, *input.image));
  Var patch_emb = ad::add_row(ad::matmul(patches, bind(params.patch_w())), bind(params.patch_b()));

  std::vector<int> ids;
  ids.reserve(seq - n_patch);
  ids.push_back(cfg.sep_token);
  ids.insert(ids.end(), input.question.begin(), input.question.end());
  ids.push_back(cfg.sep_token);
  ids.insert(ids.end(), input.answer.begin(), input.answer.end());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw DimensionError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  Var tok = ad::gather_rows(bind(params.tok_emb()), ids);
  const Var parts[] = {patch_emb, tok};
  Var x = ad::concat_rows(parts);

  std::vector<std::size_t> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = i;
  x = ad::add(x, ad::take_rows(bind(params.pos_emb()), positions));

  Graph g;
  g.layer_outputs.push_back(x);

  const std::size_t dh = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double lora_scale = cfg.lowrank.scaling();
  for (const auto& b : params.blocks()) {
    Var h = ad::layer_norm(x, bind(b.ln1_gamma), bind(b.ln1_beta));
    Var q = project(bind, h, b.wq, b.lora_q_a, b.lora_q_b, lora_scale);
    Var k = ad::matmul(h, bind(b.wk));
    Var v = project(bind, h, b.wv, b.lora_v_a, b.lora_v_b, lora_scale);
    std::vector<Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      Var scores = ad::scale(ad::matmul_nt(ad::slice_cols(q, c0, c1), ad::slice_cols(k, c0, c1)), attn_scale);
      Var probs = ad::softmax_rows(scores, /*causal=*/true);
      heads.push_back(ad::matmul(probs, ad::slice_cols(v, c0, c1)));
    }
    Var attn = ad::matmul(cfg.n_heads == 1 ? heads[0] : ad::concat_cols(heads), bind(b.wo));
    x = ad::add(x, attn);
    Var h2 = ad::layer_norm(x, bind(b.ln2_gamma), bind(b.ln2_beta));
    Var ff = ad::gelu(ad::add_row(ad::matmul(h2, bind(b.w1)), bind(b.b1)));
    ff = ad::add_row(ad::matmul(ff, bind(b.w2)), bind(b.b2));
    x = ad::add(x, ff);
    g.layer_outputs.push_back(x);
  }

  const std::size_t first_answer_row = n_patch + 1 + input.question.size();
  std::vector<std::size_t> rows(input.answer.size() + 1);
  for (std::size_t j = 0; j < rows.size(); ++j) rows[j] = first_answer_row + j;
  Var hf = ad::layer_norm(ad::take_rows(x, rows), bind(params.lnf_gamma()), bind(params.lnf_beta()));
  g.logits = ad::add_row(ad::matmul(hf, bind(params.head_w())), bind(params.head_b()));
  return g;
}

std::vector<int> teacher_targets(const ModelConfig& cfg, const ModelInput& input) {
  std::vector<int> t(input.answer.begin(), input.answer.end());
  t.push_back(cfg.eos_token);
  return t;
}

}  // namespace

Tensor patch_embeddings(const ModelParams& params, const Tensor& image) {
  Tensor out = matmul(patchify(params.config(), image), params.value(params.patch_w()));
  const Tensor& b = params.value(params.patch_b());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row_span(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return out;
}

ForwardResult forward(const ModelParams& params, const ModelInput& input) {
  Tape tape;
  Graph g = build_graph(tape, params, input, /*with_grad=*/false);
  ForwardResult res;
  res.answer_logits = g.logits.value();
  const std::size_t pos = representation_position(params.config(), input);
  for (std::size_t l = 0; l < g.layer_outputs.size(); ++l) {
    const auto row = g.layer_outputs[l].value().row_span(pos);
    res.representations.push_back(LayerRepresentation{l, std::vector<double>(row.begin(), row.end())});
  }
  return res;
}

LossAndGrads loss_and_gradients(const ModelParams& params, const ModelInput& input) {
  Tape tape;
  Graph g = build_graph(tape, params, input, /*with_grad=*/true);
  const auto targets = teacher_targets(params.config(), input);
  Var loss = ad::cross_entropy(g.logits, targets, std::vector<bool>(targets.size(), true));
  tape.backward(loss);
  LossAndGrads out;
  out.loss = loss.value()[0];
  out.grads = tape.take_param_grads();
  out.grads.resize(params.size());
  return out;
}

double answer_loss(const ModelParams& params, const ModelInput& input) {
  const ForwardResult fr = forward(params, input);
  const auto targets = teacher_targets(params.config(), input);
  double s = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    s -= log_softmax(fr.answer_logits.row_span(r))[static_cast<std::size_t>(targets[r])];
  }
  return s / static_cast<double>(targets.size());
}

std::vector<int> generate_greedy(const ModelParams& params, const Tensor& image, std::span<const int> question,
                                 std::size_t max_new) {
  if (max_new == 0) throw ContractError("generate_greedy: max_new must be >= 1");
  std::vector<int> out;
  while (out.size() < max_new) {
    ModelInput in{&image, question, out};
    if (sequence_length(params.config(), in) > params.config().max_seq_len) break;
    const ForwardResult fr = forward(params, in);
    const auto last = fr.answer_logits.row_span(fr.answer_logits.rows() - 1);
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    if (next == params.config().eos_token) break;
    out.push_back(next);
  }
  return out;
}

void apply_lowrank(ModelParams& params, bool enable, std::uint64_t seed) {
  ModelConfig& cfg = params.mutable_config();
  auto& ps = params.params();
  if (enable) {
    if (params.lowrank_active()) throw StateError("low-rank adapters are already enabled");
    if (cfg.lowrank.rank < 1) throw ConfigError("lowrank.rank must be >= 1");
    if (!(cfg.lowrank.alpha > 0.0)) throw ConfigError("lowrank.alpha must be positive");
    const std::size_t d = cfg.d_model, r = cfg.lowrank.rank;
    Rng rng(seed, "lowrank");
    const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& p : ps) p.trainable = false;
    auto& blocks = params.blocks();
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const std::string pre = "block." + std::to_string(l) + ".";
      auto& b = blocks[l];
      ps[b.ln1_gamma].trainable = ps[b.ln1_beta].trainable = true;
      ps[b.ln2_gamma].trainable = ps[b.ln2_beta].trainable = true;
      Tensor qa({d, r}), va({d, r});
      for (auto& v : qa.data()) v = rng.normal(0.0, a_std);
      for (auto& v : va.data()) v = rng.normal(0.0, a_std);
      b.lora_q_a = static_cast<long>(params.add_param(pre + "lora_q.A", std::move(qa)));
      b.lora_q_b = static_cast<long>(params.add_param(pre + "lora_q.B", Tensor({r, d})));
      b.lora_v_a = static_cast<long>(params.add_param(pre + "lora_v.A", std::move(va)));
      b.lora_v_b = static_cast<long>(params.add_param(pre + "lora_v.B", Tensor({r, d})));
    }
    auto& ps2 = params.params();
    ps2[params.lnf_gamma()].trainable = ps2[params.lnf_beta()].trainable = true;
    ps2[params.head_w()].trainable = ps2[params.head_b()].trainable = true;
    cfg.lowrank.enabled = true;
    return;
  }
  if (!params.lowrank_active()) return;
  const double s = cfg.lowrank.scaling();
  std::vector<std::size_t> drop;
  for (auto& b : params.blocks()) {
    auto merge = [&](std::size_t w, long a, long bb) {
      Tensor delta = matmul(ps[static_cast<std::size_t>(a)].value, ps[static_cast<std::size_t>(bb)].value);
      delta *= s;
      ps[w].value += delta;
      drop.push_back(static_cast<std::size_t>(a));
      drop.push_back(static_cast<std::size_t>(bb));
    };
    merge(b.wq, b.lora_q_a, b.lora_q_b);
    merge(b.wv, b.lora_v_a, b.lora_v_b);
  }
  std::sort(drop.begin(), drop.end());
  for (auto it = drop.rbegin(); it != drop.rend(); ++it) ps.erase(ps.begin() + static_cast<long>(*it));
  for (auto& p : ps) p.trainable = true;
  cfg.lowrank.enabled = false;
  params.rebuild_slots_from_names();
}

}  // namespace memlab
