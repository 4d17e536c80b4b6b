#include <gtest/gtest.h>

#include <filesystem>

#include "memlab/corpus.hpp"
#include "memlab/errors.hpp"
#include "memlab/model.hpp"
#include "memlab/rng.hpp"
#include "memlab/trainer.hpp"
#include "memlab/vocab.hpp"
#include "oracles.hpp"

using namespace memlab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::for_vocabulary(Vocabulary::standard());
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.patch_size = 4;
  c.image_side = 8;
  c.max_seq_len = 24;
  return c;
}

Tensor random_image(std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({side, side});
  for (double& v : t.data()) v = rng.uniform();
  return t;
}

struct Fixture {
  Tensor image = random_image(8, 3);
  std::vector<int> question = Vocabulary::standard().encode_words("what color is the object ?");
  std::vector<int> answer = Vocabulary::standard().encode_words("red");
  ModelInput input() const { return {&image, question, answer}; }
};

void expect_model_fd(ModelParams& params, const ModelInput& input) {
  const LossAndGrads lg = loss_and_gradients(params, input);
  EXPECT_DOUBLE_EQ(lg.loss, answer_loss(params, input));
  std::size_t checked = 0;
  double worst_rel = 0.0;
  for (std::size_t slot = 0; slot < params.size(); ++slot) {
    auto& p = params.params()[slot];
    if (!p.trainable) {
      EXPECT_TRUE(lg.grads[slot].empty()) << p.name;
      continue;
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double numeric =
          oracle::central_difference([&] { return answer_loss(params, input); }, p.value.storage()[i], 1e-5);
      const double analytic = lg.grads[slot][i];
      ASSERT_TRUE(oracle::gradients_agree(analytic, numeric, 1e-4, 1e-9))
          << p.name << "[" << i << "] analytic " << analytic << " numeric " << numeric;
      const double scale = std::max(std::fabs(analytic), std::fabs(numeric));
      if (scale > 1e-6) worst_rel = std::max(worst_rel, std::fabs(analytic - numeric) / scale);
      ++checked;
    }
  }
  EXPECT_GT(checked, 500u);
  ::testing::Test::RecordProperty("worst_relative_error", std::to_string(worst_rel));
}

}  // namespace

TEST(Patchify, CountsAndLayout) {
  ModelConfig c = ModelConfig::for_vocabulary(Vocabulary::standard());
  Tensor img({32, 32});
  img(5, 6) = 1.0;
  const Tensor p = patchify(c, img);
  EXPECT_EQ(p.rows(), 64u);
  EXPECT_EQ(p.cols(), 16u);
  // (5,6) lies in grid cell (1,1), local offset (1,2).
  EXPECT_EQ(p(9, 1 * 4 + 2), 1.0);
  EXPECT_THROW(patchify(c, Tensor({16, 16})), ConfigError);
}

TEST(Patchify, ZeroImageProjectsToBias) {
  ModelParams params = ModelParams::init(tiny_config(), 1);
  params.params()[params.patch_b()].value = Tensor::from_rows({{1, 2, 3, 4, 5, 6, 7, 8}});
  const Tensor e = patch_embeddings(params, Tensor({8, 8}));
  for (std::size_t r = 0; r < e.rows(); ++r)
    for (std::size_t c = 0; c < e.cols(); ++c) EXPECT_EQ(e(r, c), static_cast<double>(c + 1));
}

TEST(Patchify, LitPixelMovesBetweenPatches) {
  ModelParams params = ModelParams::init(tiny_config(), 1);
  Tensor a({8, 8}), b({8, 8});
  a(1, 3) = 1.0;  // patch 0
  b(1, 4) = 1.0;  // patch 1
  const Tensor ea = patch_embeddings(params, a);
  const Tensor eb = patch_embeddings(params, b);
  std::vector<std::size_t> changed;
  for (std::size_t r = 0; r < ea.rows(); ++r) {
    bool diff = false;
    for (std::size_t c = 0; c < ea.cols(); ++c) diff |= ea(r, c) != eb(r, c);
    if (diff) changed.push_back(r);
  }
  EXPECT_EQ(changed, (std::vector<std::size_t>{0, 1}));
  // Same patch, different pixel: only that patch changes.
  Tensor c({8, 8});
  c(2, 2) = 1.0;
  const Tensor ec = patch_embeddings(params, c);
  for (std::size_t r = 1; r < ea.rows(); ++r)
    for (std::size_t k = 0; k < ea.cols(); ++k) EXPECT_EQ(ea(r, k), ec(r, k));
}

TEST(Forward, DeterministicAndLayerCount) {
  ModelConfig c = tiny_config();
  c.n_layers = 4;
  ModelParams params = ModelParams::init(c, 7);
  Fixture f;
  const ForwardResult a = forward(params, f.input());
  const ForwardResult b = forward(params, f.input());
  EXPECT_TRUE(a.answer_logits == b.answer_logits);
  ASSERT_EQ(a.representations.size(), 5u);
  for (std::size_t l = 0; l < 5; ++l) {
    EXPECT_EQ(a.representations[l].layer_index, l);
    EXPECT_EQ(a.representations[l].values, b.representations[l].values);
  }
  EXPECT_EQ(a.answer_logits.rows(), f.answer.size() + 1);
  EXPECT_EQ(ModelParams::init(c, 7), params);
}

TEST(Forward, AnswerPermutationLeavesRepresentationsUnchanged) {
  ModelParams params = ModelParams::init(tiny_config(), 2);
  Fixture f;
  const auto& v = Vocabulary::standard();
  f.answer = v.encode_words("red square blue");
  const ForwardResult a = forward(params, f.input());
  f.answer = v.encode_words("blue red square");
  const ForwardResult b = forward(params, f.input());
  for (std::size_t l = 0; l < a.representations.size(); ++l)
    EXPECT_EQ(a.representations[l].values, b.representations[l].values);
}

TEST(Forward, CausalityOfAnswerLogits) {
  ModelParams params = ModelParams::init(tiny_config(), 4);
  Fixture f;
  const auto& v = Vocabulary::standard();
  f.answer = v.encode_words("red square blue");
  const ForwardResult a = forward(params, f.input());
  f.answer = v.encode_words("red square green");
  const ForwardResult b = forward(params, f.input());
  // Row j sees answer tokens < j, so rows 0..2 cannot depend on the last token.
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < a.answer_logits.cols(); ++c) EXPECT_EQ(a.answer_logits(r, c), b.answer_logits(r, c));
  bool last_differs = false;
  for (std::size_t c = 0; c < a.answer_logits.cols(); ++c) last_differs |= a.answer_logits(3, c) != b.answer_logits(3, c);
  EXPECT_TRUE(last_differs);
}

TEST(Forward, RepresentationPositionIsLastQuestionToken) {
  ModelConfig c = tiny_config();
  Fixture f;
  EXPECT_EQ(representation_position(c, f.input()), 4 + 1 + f.question.size() - 1);
  EXPECT_EQ(sequence_length(c, f.input()), 4 + 1 + f.question.size() + 1 + f.answer.size());
}

TEST(Forward, OverlongSequenceIsLengthError) {
  ModelConfig c = tiny_config();
  c.max_seq_len = 10;
  ModelParams params = ModelParams::init(c, 1);
  Fixture f;
  EXPECT_THROW(forward(params, f.input()), LengthError);
}

TEST(ModelConfigTest, ValidationErrors) {
  ModelConfig c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.patch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.lowrank.enabled = true;
  c.lowrank.rank = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelFd, FullTinyModel) {
  ModelParams params = ModelParams::init(tiny_config(), 11);
  // Non-trivial norms and biases so their gradients are exercised.
  Rng rng(12);
  for (auto& p : params.params())
    if (p.name.find("beta") != std::string::npos || p.name.find("bias") != std::string::npos ||
        p.name.find(".b") != std::string::npos)
      for (double& v : p.value.storage()) v = 0.1 * rng.normal();
  Fixture f;
  f.answer = Vocabulary::standard().encode_words("red square");
  expect_model_fd(params, f.input());
}

TEST(ModelFd, LowRankAdapters) {
  ModelParams params = ModelParams::init(tiny_config(), 13);
  params.mutable_config().lowrank = {false, 2, 4.0};
  apply_lowrank(params, true, 14);
  Rng rng(15);
  for (auto& p : params.params())
    if (p.name.find("lora") != std::string::npos)
      for (double& v : p.value.storage()) v = 0.2 * rng.normal();
  Fixture f;
  expect_model_fd(params, f.input());
}

TEST(LowRank, ZeroInitLeavesOutputsIdentical) {
  ModelParams base = ModelParams::init(tiny_config(), 5);
  ModelParams adapted = base;
  adapted.mutable_config().lowrank = {false, 4, 8.0};
  apply_lowrank(adapted, true, 6);
  EXPECT_TRUE(adapted.lowrank_active());
  Fixture f;
  const ForwardResult a = forward(base, f.input());
  const ForwardResult b = forward(adapted, f.input());
  EXPECT_TRUE(a.answer_logits == b.answer_logits);
  EXPECT_LT(adapted.trainable_scalar_count(), base.trainable_scalar_count());
  EXPECT_THROW(apply_lowrank(adapted, true, 6), StateError);
}

TEST(LowRank, AdapterCountScalesWithRank) {
  auto adapter_scalars = [](std::size_t rank) {
    ModelConfig c = ModelConfig::for_vocabulary(Vocabulary::standard());
    c.lowrank = {true, rank, 16.0};
    ModelParams p = ModelParams::init(c, 1);
    std::size_t n = 0;
    for (const auto& np : p.params())
      if (np.name.find("lora") != std::string::npos) n += np.value.size();
    return n;
  };
  EXPECT_EQ(adapter_scalars(16), 2 * adapter_scalars(8));
  // Two adapted matrices per block, each A[d,r] + B[r,d].
  EXPECT_EQ(adapter_scalars(8), 4u * 2u * (64u * 8u * 2u));
}

TEST(LowRank, MergeKeepsFunction) {
  ModelConfig c = tiny_config();
  c.lowrank = {true, 2, 4.0};
  ModelParams p = ModelParams::init(c, 5);
  Rng rng(7);
  for (auto& np : p.params())
    if (np.name.find("lora") != std::string::npos)
      for (double& v : np.value.storage()) v = 0.3 * rng.normal();
  Fixture f;
  const ForwardResult before = forward(p, f.input());
  apply_lowrank(p, false, 0);
  EXPECT_FALSE(p.lowrank_active());
  const ForwardResult after = forward(p, f.input());
  for (std::size_t i = 0; i < before.answer_logits.size(); ++i)
    EXPECT_NEAR(before.answer_logits[i], after.answer_logits[i], 1e-12);
}

TEST(Generate, OverfitOneSampleReproducesAnswer) {
  ModelConfig c = tiny_config();
  c.d_model = 16;
  corpus::SyntheticSample s;
  s.image = random_image(8, 21);
  s.question = Vocabulary::standard().encode_words("what shape is the object ?");
  s.answer = Vocabulary::standard().encode_words("blue cross green");
  ModelParams params = ModelParams::init(c, 22);
  std::vector<corpus::SyntheticSample> data{s};
  trainer::TrainConfig tc;
  tc.batch_size = 1;
  tc.epochs = 200;
  tc.learning_rate = 1e-2;
  const auto res = trainer::finetune(params, data, tc);
  EXPECT_LT(res.loss_curve.back(), 0.05);
  EXPECT_EQ(generate_greedy(res.params, s.image, s.question, 5), s.answer);
}

TEST(Generate, DeterministicAndBounded) {
  ModelParams params = ModelParams::init(tiny_config(), 31);
  Fixture f;
  const auto a = generate_greedy(params, f.image, f.question, 3);
  EXPECT_EQ(a, generate_greedy(ModelParams::init(tiny_config(), 31), f.image, f.question, 3));
  EXPECT_LE(a.size(), 3u);
  EXPECT_THROW(generate_greedy(params, f.image, f.question, 0), ContractError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  ModelConfig c = tiny_config();
  c.lowrank = {true, 2, 4.0};
  ModelParams p = ModelParams::init(c, 41);
  const auto path = std::filesystem::temp_directory_path() / "memlab_ckpt_test.bin";
  save_checkpoint(p, path);
  const ModelParams q = load_checkpoint(path);
  EXPECT_EQ(p, q);
  EXPECT_EQ(q.trainable_mask(), p.trainable_mask());
  std::filesystem::remove(path);
}
