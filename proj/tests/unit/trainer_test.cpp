#include <gtest/gtest.h>

#include <cmath>

#include "memlab/corpus.hpp"
#include "memlab/errors.hpp"
#include "memlab/model.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"
#include "memlab/trainer.hpp"
#include "memlab/vocab.hpp"

using namespace memlab;
using corpus::SyntheticSample;
namespace tr = memlab::trainer;

namespace {

ModelConfig small_config() {
  ModelConfig c = ModelConfig::for_vocabulary(Vocabulary::standard());
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.patch_size = 8;
  c.max_seq_len = 64;
  return c;
}

std::vector<SyntheticSample> clean_samples(std::size_t n, std::uint64_t seed) {
  std::vector<SyntheticSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = corpus::make_scene_sample(derive_seed(seed, "s", i));
    s.id = i;
    out.push_back(std::move(s));
  }
  return out;
}

const corpus::PrivacySets& privacy() {
  static const corpus::PrivacySets p = corpus::privacy_preset("paper-table7");
  return p;
}

double raw_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<long double>(a[i]) * b[i];
    aa += static_cast<long double>(a[i]) * a[i];
    bb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>(ab / std::sqrt(aa * bb));
}

}  // namespace

TEST(Finetune, ZeroLearningRateKeepsParams) {
  const ModelParams p = ModelParams::init(small_config(), 1);
  tr::TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.batch_size = 4;
  const auto res = tr::finetune(p, clean_samples(8, 2), tc);
  EXPECT_EQ(res.params, p);
  EXPECT_EQ(res.loss_curve.size(), 2u);
}

TEST(Finetune, OverfitsFourSamples) {
  const ModelParams p = ModelParams::init(small_config(), 3);
  tr::TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 200;
  tc.learning_rate = 1e-2;
  const auto data = clean_samples(4, 4);
  const auto res = tr::finetune(p, data, tc);
  EXPECT_LT(tr::batch_loss(res.params, data), 0.01);
}

TEST(Finetune, DeterministicGivenSeed) {
  const ModelParams p = ModelParams::init(small_config(), 5);
  tr::TrainConfig tc;
  tc.batch_size = 3;
  tc.seed = 17;
  const auto data = clean_samples(9, 6);
  const auto a = tr::finetune(p, data, tc);
  const auto b = tr::finetune(p, data, tc);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
}

TEST(Finetune, InvalidConfig) {
  tr::TrainConfig tc;
  tc.gradient_accumulation = 2;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = {};
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  EXPECT_THROW(tr::variant_from_string("rotate"), ConfigError);
}

TEST(Snapshot, DuplicatedSampleMatchesSingle) {
  const ModelParams p = ModelParams::init(small_config(), 7);
  const auto data = clean_samples(1, 8);
  const std::vector<SyntheticSample> twice{data[0], data[0]};
  const auto a = tr::gradient_snapshot(p, data);
  const auto b = tr::gradient_snapshot(p, twice);
  ASSERT_EQ(a.values.size(), b.values.size());
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-15);
}

TEST(Snapshot, BatchIsMeanOfSingles) {
  const ModelParams before = ModelParams::init(small_config(), 9);
  const ModelParams p = before;
  const auto data = clean_samples(2, 10);
  const auto both = tr::gradient_snapshot(p, data);
  const auto g0 = tr::gradient_snapshot(p, std::span(data).subspan(0, 1));
  const auto g1 = tr::gradient_snapshot(p, std::span(data).subspan(1, 1));
  for (std::size_t i = 0; i < both.values.size(); ++i)
    EXPECT_NEAR(both.values[i], 0.5 * (g0.values[i] + g1.values[i]), 1e-12);
  EXPECT_EQ(p, before);
}

TEST(Snapshot, ThreadCountDoesNotChangeBits) {
  const ModelParams p = ModelParams::init(small_config(), 11);
  const auto data = clean_samples(6, 12);
  tr::GradSnapshot one, four;
  {
    const std::size_t saved = max_threads();
    set_max_threads(1);
    one = tr::gradient_snapshot(p, data);
    set_max_threads(4);
    four = tr::gradient_snapshot(p, data);
    set_max_threads(saved);
  }
  EXPECT_EQ(one.values, four.values);
}

TEST(Similarity, OriginIsExactlyOneAndParamsUntouched) {
  const ModelParams before = ModelParams::init(small_config(), 13);
  const ModelParams p = before;
  const auto batch = clean_samples(4, 14);
  EXPECT_NEAR(tr::similarity_trial(p, batch, tr::Variant::Origin, privacy(), 1), 1.0, 1e-12);
  const double priv = tr::similarity_trial(p, batch, tr::Variant::Privacy, privacy(), 1);
  EXPECT_LT(priv, 1.0 - 1e-3);
  EXPECT_EQ(p, before);
}

TEST(Similarity, MaskedStripRestoresOne) {
  const ModelParams p = ModelParams::init(small_config(), 15);
  const auto batch = clean_samples(4, 16);
  tr::TrialOptions opt;
  opt.mask_strip = true;
  EXPECT_NEAR(tr::similarity_trial(p, batch, tr::Variant::Privacy, privacy(), 2, opt), 1.0, 1e-12);
}

TEST(Similarity, CosineMatchesIndependentComputation) {
  const ModelParams p = ModelParams::init(small_config(), 17);
  const auto batch = clean_samples(3, 18);
  const auto variant = tr::make_variant_batch(batch, tr::Variant::ImageTransform, privacy(), 5);
  const double want = raw_cosine(tr::gradient_snapshot(p, batch).values, tr::gradient_snapshot(p, variant).values);
  EXPECT_NEAR(tr::similarity_trial(p, batch, tr::Variant::ImageTransform, privacy(), 5), want, 1e-12);
}

TEST(Similarity, VariantBatchesArePaired) {
  const auto batch = clean_samples(5, 19);
  const auto priv = tr::make_variant_batch(batch, tr::Variant::Privacy, privacy(), 3);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    EXPECT_EQ(priv[i].question, batch[i].question);
    ASSERT_TRUE(priv[i].watermark.has_value());
    EXPECT_EQ(priv[i].watermark->record.set_tag, corpus::SetTag::U1);
    EXPECT_TRUE(corpus::clear_watermark(priv[i]).image == batch[i].image);
  }
}

TEST(Protocol, SingleTrialHasZeroStd) {
  const ModelParams p = ModelParams::init(small_config(), 21);
  const auto data = clean_samples(10, 22);
  const auto rep = tr::run_similarity_protocol(p, data, privacy(), 2, 1, 3);
  for (const auto& v : rep.variants) {
    EXPECT_EQ(v.std, 0.0);
    EXPECT_EQ(v.cosines.size(), 1u);
  }
  EXPECT_NEAR(rep.at(tr::Variant::Origin).mean, 1.0, 1e-12);
  EXPECT_THROW(tr::run_similarity_protocol(p, data, privacy(), 20, 1, 3), ConfigError);
}

TEST(Protocol, DeterministicAcrossCalls) {
  const ModelParams p = ModelParams::init(small_config(), 23);
  const auto data = clean_samples(12, 24);
  const auto a = tr::run_similarity_protocol(p, data, privacy(), 3, 3, 9);
  const auto b = tr::run_similarity_protocol(p, data, privacy(), 3, 3, 9);
  for (std::size_t v = 0; v < a.variants.size(); ++v) EXPECT_EQ(a.variants[v].cosines, b.variants[v].cosines);
}

TEST(Multistep, FirstStepReducesToSimilarityTrial) {
  const ModelParams p = ModelParams::init(small_config(), 25);
  const auto data = clean_samples(1, 26);
  tr::TrainConfig tc;
  tc.batch_size = 1;
  tc.seed = 31;
  const std::vector<std::size_t> steps{1};
  const auto pts = tr::run_multistep_similarity(p, data, privacy(), tc, steps, tr::Variant::Privacy, 1);
  const std::uint64_t rep_seed = derive_seed(31, "multistep", 0);
  const double direct =
      tr::similarity_trial(p, data, tr::Variant::Privacy, privacy(), derive_seed(rep_seed, "variant", 1));
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_EQ(pts[0].cosines.at(0), direct);
}

TEST(Multistep, StepsMustAscend) {
  const ModelParams p = ModelParams::init(small_config(), 27);
  const auto data = clean_samples(4, 28);
  const std::vector<std::size_t> bad{10, 1};
  EXPECT_THROW(tr::run_multistep_similarity(p, data, privacy(), {}, bad, tr::Variant::Privacy, 1), ConfigError);
}

TEST(Sweep, SmallerBatchesArePrefixes) {
  const ModelParams p = ModelParams::init(small_config(), 29);
  const auto data = clean_samples(16, 30);
  const std::vector<std::size_t> sizes{1, 4};
  const auto sweep = tr::batch_size_sweep(p, data, privacy(), sizes, 4, 5);
  ASSERT_EQ(sweep.size(), 2u);
  EXPECT_EQ(sweep[0].batch_size, 1u);
  EXPECT_EQ(sweep[0].stats.cosines.size(), 4u);
  EXPECT_EQ(sweep[0].stats.variant, tr::Variant::Privacy);
}
