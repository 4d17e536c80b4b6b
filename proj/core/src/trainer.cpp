#include "memlab/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "memlab/errors.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"
#include "memlab/stats.hpp"

namespace memlab::trainer {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train.learning_rate must be a finite value >= 0");
  }
  if (gradient_accumulation != 1) throw ConfigError("train.gradient_accumulation: only 1 is supported");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", to_string(c.optimizer)},
                     {"seed", c.seed},
                     {"gradient_accumulation", c.gradient_accumulation}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer")) c.optimizer = optimizer_kind_from_string(j.at("optimizer").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.gradient_accumulation = j.value("gradient_accumulation", c.gradient_accumulation);
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Origin: return "origin";
    case Variant::Privacy: return "privacy";
    case Variant::ImageTransform: return "image_transform";
    case Variant::TextTransform: return "text_transform";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + s + "'");
}

ModelInput input_of(const corpus::SyntheticSample& s) { return ModelInput{&s.image, s.question, s.answer}; }

LossAndGrads batch_gradients(const ModelParams& params, std::span<const corpus::SyntheticSample> batch) {
  if (batch.empty()) throw ContractError("batch_gradients: empty batch");
  std::vector<LossAndGrads> per(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { per[i] = loss_and_gradients(params, input_of(batch[i])); });
  const auto m = static_cast<double>(batch.size());
  LossAndGrads out;
  out.grads.resize(params.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < per.size(); ++i) {
    loss += per[i].loss;
    for (std::size_t s = 0; s < params.size(); ++s) {
      if (per[i].grads[s].empty()) continue;
      if (out.grads[s].empty()) {
        out.grads[s] = per[i].grads[s];
      } else {
        out.grads[s] += per[i].grads[s];
      }
    }
  }
  out.loss = loss / m;
  for (auto& g : out.grads) {
    for (double& v : g.data()) v /= m;
  }
  return out;
}

double batch_loss(const ModelParams& params, std::span<const corpus::SyntheticSample> batch) {
  if (batch.empty()) throw ContractError("batch_loss: empty batch");
  std::vector<double> per(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { per[i] = answer_loss(params, input_of(batch[i])); });
  double loss = 0.0;
  for (double v : per) loss += v;
  return loss / static_cast<double>(batch.size());
}

namespace {

void apply_step(ModelParams& params, Optimizer& opt, const std::vector<Tensor>& grads) {
  std::vector<Tensor*> ptrs;
  std::vector<Tensor> g;
  std::vector<bool> active;
  ptrs.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.params()[i];
    ptrs.push_back(&p.value);
    const bool use = p.trainable && !grads[i].empty();
    active.push_back(use);
    g.push_back(use ? grads[i] : Tensor(p.value.shape()));
  }
  opt.step(ptrs, g, &active);
}

std::vector<corpus::SyntheticSample> draw_batch(std::span<const corpus::SyntheticSample> data, std::size_t size,
                                                std::uint64_t seed, std::uint64_t trial) {
  if (size > data.size()) {
    throw ConfigError("batch of " + std::to_string(size) + " requested from " + std::to_string(data.size()) +
                      " samples");
  }
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed, "trial-batch", trial);
  // Partial Fisher-Yates: the first `size` entries are a uniform draw.
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<corpus::SyntheticSample> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(corpus::clear_watermark(data[idx[i]]));
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return cosine_similarity_flat(a, b);
}

VariantStats summarize(Variant v, std::vector<double> cosines) {
  VariantStats s;
  s.variant = v;
  s.mean = stats::mean(cosines);
  s.std = stats::stddev(cosines);
  s.cosines = std::move(cosines);
  return s;
}

}  // namespace

FinetuneResult finetune(const ModelParams& initial, std::span<const corpus::SyntheticSample> data,
                        const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw ContractError("finetune: empty dataset");
  FinetuneResult res{initial, {}};
  Optimizer opt(config.optimizer, config.learning_rate);
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(config.seed, "epoch-order", e);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<corpus::SyntheticSample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
      LossAndGrads lg = batch_gradients(res.params, batch);
      if (!std::isfinite(lg.loss)) {
        throw TrainingError("loss diverged at epoch " + std::to_string(e) + ", step " +
                            std::to_string(res.loss_curve.size()));
      }
      res.loss_curve.push_back(lg.loss);
      apply_step(res.params, opt, lg.grads);
    }
  }
  return res;
}

GradSnapshot gradient_snapshot(const ModelParams& params, std::span<const corpus::SyntheticSample> batch,
                               std::uint64_t batch_id, Variant variant) {
  if (batch.empty()) throw ContractError("gradient_snapshot: empty batch");
  LossAndGrads lg = batch_gradients(params, batch);
  return GradSnapshot{params.flatten_trainable(lg.grads), batch_id, variant};
}

std::vector<corpus::SyntheticSample> make_variant_batch(std::span<const corpus::SyntheticSample> base,
                                                        Variant variant, const corpus::PrivacySets& privacy,
                                                        std::uint64_t seed) {
  std::vector<corpus::SyntheticSample> out;
  out.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto& s = base[i];
    switch (variant) {
      case Variant::Origin:
        out.push_back(s);
        break;
      case Variant::Privacy: {
        if (privacy.u1.empty()) throw ConfigError("privacy variant needs a non-empty U1");
        Rng rng(seed, "privacy-variant", i);
        const std::size_t idx = rng.below(privacy.u1.size());
        out.push_back(corpus::render_watermark(s, privacy.u1[idx], corpus::WatermarkMode::Full, idx));
        break;
      }
      case Variant::ImageTransform:
        out.push_back(corpus::transform_image(s, derive_seed(seed, "image-variant", i)));
        break;
      case Variant::TextTransform:
        out.push_back(corpus::transform_text(s, derive_seed(seed, "text-variant", i)).sample);
        break;
    }
  }
  return out;
}

double similarity_trial(const ModelParams& params, std::span<const corpus::SyntheticSample> base_batch,
                        Variant variant, const corpus::PrivacySets& privacy, std::uint64_t seed,
                        TrialOptions options) {
  if (base_batch.empty()) throw ContractError("similarity_trial: empty batch");
  std::vector<corpus::SyntheticSample> a(base_batch.begin(), base_batch.end());
  std::vector<corpus::SyntheticSample> b = make_variant_batch(base_batch, variant, privacy, seed);
  if (options.mask_strip) {
    for (auto& s : a) corpus::clear_strip(s.image);
    for (auto& s : b) corpus::clear_strip(s.image);
  }
  const ModelParams copy_a = params;
  const ModelParams copy_b = params;
  const GradSnapshot ga = gradient_snapshot(copy_a, a, 0, Variant::Origin);
  const GradSnapshot gb = gradient_snapshot(copy_b, b, 0, variant);
  return cosine(ga.values, gb.values);
}

const VariantStats& SimilarityReport::at(Variant v) const {
  for (const auto& s : variants) {
    if (s.variant == v) return s;
  }
  throw ContractError("similarity report has no variant " + to_string(v));
}

SimilarityReport run_similarity_protocol(const ModelParams& params, std::span<const corpus::SyntheticSample> data,
                                         const corpus::PrivacySets& privacy, std::size_t batch_size,
                                         std::size_t n_trials, std::uint64_t seed, std::span<const Variant> variants,
                                         TrialOptions options) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (n_trials < 1) throw ConfigError("n_trials must be >= 1");
  if (data.size() < batch_size) throw ConfigError("not enough samples for one batch");
  SimilarityReport rep;
  rep.batch_size = batch_size;
  rep.n_trials = n_trials;
  std::vector<std::vector<double>> cos(variants.size(), std::vector<double>(n_trials));
  for (std::size_t t = 0; t < n_trials; ++t) {
    const auto batch = draw_batch(data, batch_size, seed, t);
    const std::uint64_t trial_seed = derive_seed(seed, "trial", t);
    for (std::size_t v = 0; v < variants.size(); ++v) {
      cos[v][t] = similarity_trial(params, batch, variants[v], privacy, trial_seed, options);
    }
  }
  for (std::size_t v = 0; v < variants.size(); ++v) rep.variants.push_back(summarize(variants[v], std::move(cos[v])));
  return rep;
}

std::vector<MultistepPoint> run_multistep_similarity(const ModelParams& params,
                                                     std::span<const corpus::SyntheticSample> data,
                                                     const corpus::PrivacySets& privacy, const TrainConfig& config,
                                                     std::span<const std::size_t> steps, Variant variant,
                                                     std::size_t repetitions) {
  config.validate();
  if (steps.empty() || !std::is_sorted(steps.begin(), steps.end()) || steps.front() < 1) {
    throw ConfigError("multistep step counts must be ascending and >= 1");
  }
  if (repetitions < 1) throw ConfigError("multistep repetitions must be >= 1");
  if (data.size() < config.batch_size) throw ConfigError("not enough samples for one batch");
  std::vector<MultistepPoint> points(steps.size());
  for (std::size_t i = 0; i < steps.size(); ++i) points[i].step = steps[i];
  const std::size_t last = steps.back();
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    const std::uint64_t rep_seed = derive_seed(config.seed, "multistep", rep);
    ModelParams a = params;
    ModelParams b = params;
    Optimizer opt_a(config.optimizer, config.learning_rate);
    Optimizer opt_b(config.optimizer, config.learning_rate);
    std::size_t next = 0;
    for (std::size_t k = 1; k <= last; ++k) {
      const auto batch = draw_batch(data, config.batch_size, rep_seed, k);
      const auto vbatch = make_variant_batch(batch, variant, privacy, derive_seed(rep_seed, "variant", k));
      LossAndGrads ga = batch_gradients(a, batch);
      LossAndGrads gb = batch_gradients(b, vbatch);
      if (!std::isfinite(ga.loss) || !std::isfinite(gb.loss)) {
        throw TrainingError("loss diverged during multistep run at step " + std::to_string(k));
      }
      if (k == steps[next]) {
        points[next].cosines.push_back(cosine(a.flatten_trainable(ga.grads), b.flatten_trainable(gb.grads)));
        ++next;
      }
      if (k < last) {
        apply_step(a, opt_a, ga.grads);
        apply_step(b, opt_b, gb.grads);
      }
    }
  }
  for (auto& p : points) p.mean = stats::mean(p.cosines);
  return points;
}

std::vector<SweepEntry> batch_size_sweep(const ModelParams& params, std::span<const corpus::SyntheticSample> data,
                                         const corpus::PrivacySets& privacy, std::span<const std::size_t> sizes,
                                         std::size_t n_trials, std::uint64_t seed) {
  std::vector<SweepEntry> out;
  const Variant only[] = {Variant::Privacy};
  for (std::size_t b : sizes) {
    if (b < 1) throw ConfigError("batch sizes must be >= 1");
    SimilarityReport rep = run_similarity_protocol(params, data, privacy, b, n_trials, seed, only);
    out.push_back(SweepEntry{b, rep.variants.front()});
  }
  return out;
}

}  // namespace memlab::trainer
