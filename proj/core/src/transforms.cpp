#include <algorithm>
#include <cmath>
#include <numbers>

#include "memlab/corpus.hpp"
#include "memlab/errors.hpp"
#include "memlab/rng.hpp"

namespace memlab::corpus {

ImageTransformParams draw_image_transform(std::uint64_t seed) {
  Rng rng(seed, "image-transform");
  ImageTransformParams p;
  p.angle_deg = rng.uniform(-30.0, 30.0);
  p.flip = rng.bernoulli(0.5);
  p.brightness = rng.uniform(0.8, 1.2);
  p.contrast = rng.uniform(0.8, 1.2);
  return p;
}

Tensor apply_image_transform(const Tensor& image, const ImageTransformParams& params) {
  const std::size_t h = image.rows();
  const std::size_t w = image.cols();
  Tensor out = image;
  if (params.angle_deg != 0.0) {
    // Inverse-map each output pixel to its nearest source pixel.
    const double a = params.angle_deg * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const double dy = static_cast<double>(r) - cy;
        const double dx = static_cast<double>(c) - cx;
        const double sy = std::round(cy + ca * dy - sa * dx);
        const double sx = std::round(cx + sa * dy + ca * dx);
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<double>(h) && sx < static_cast<double>(w);
        out(r, c) = inside ? image(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) : 0.0;
      }
    }
  }
  if (params.flip) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w / 2; ++c) std::swap(out(r, c), out(r, w - 1 - c));
    }
  }
  for (auto& v : out.data()) {
    v *= params.brightness;
    v = (v - 0.5) * params.contrast + 0.5;
    v = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

SyntheticSample transform_image(const SyntheticSample& sample, std::uint64_t seed) {
  SyntheticSample out = sample;
  out.image = apply_image_transform(sample.image, draw_image_transform(seed));
  return out;
}

const std::vector<std::pair<std::string, std::string>>& synonym_table() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"what", "which"}, {"color", "colour"}, {"shape", "form"}, {"object", "item"}, {"cell", "slot"}};
  return table;
}

namespace {

int synonym_of(const Vocabulary& vocab, int id) {
  const std::string& tok = vocab.token(id);
  for (const auto& [a, b] : synonym_table()) {
    if (tok == a) return vocab.id(b);
    if (tok == b) return vocab.id(a);
  }
  return -1;
}

}  // namespace

TextTransformResult transform_text(const SyntheticSample& sample, std::uint64_t seed) {
  const Vocabulary& vocab = Vocabulary::standard();
  TextTransformResult res{sample, 0, false};
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < sample.question.size(); ++i) {
    if (synonym_of(vocab, sample.question[i]) >= 0) candidates.push_back(i);
  }
  if (candidates.empty()) {
    res.unchanged = true;
    return res;
  }
  Rng rng(seed, "text-transform");
  rng.shuffle(candidates.begin(), candidates.end());
  const std::size_t want = 1 + rng.below(2);
  const std::size_t n = std::min(want, candidates.size());
  for (std::size_t i = 0; i < n; ++i) {
    auto& tok = res.sample.question[candidates[i]];
    tok = synonym_of(vocab, tok);
  }
  res.substitutions = n;
  return res;
}

std::string serialize_sample_text(const SyntheticSample& sample) {
  const Vocabulary& vocab = Vocabulary::standard();
  std::string out = "Q:" + vocab.decode_words(sample.question) + " A:" + vocab.decode_words(sample.answer) + " W:";
  if (sample.watermark) out += sample.watermark->record.username;
  return out;
}

ParsedSampleText parse_sample_text(std::string_view text) {
  const auto a = text.find(" A:");
  const auto w = text.rfind(" W:");
  if (text.substr(0, 2) != "Q:" || a == std::string_view::npos || w == std::string_view::npos || w < a) {
    throw ContractError("malformed sample text: '" + std::string(text) + "'");
  }
  const Vocabulary& vocab = Vocabulary::standard();
  ParsedSampleText p;
  p.question = vocab.encode_words(text.substr(2, a - 2));
  p.answer = vocab.encode_words(text.substr(a + 3, w - a - 3));
  p.username = std::string(text.substr(w + 3));
  return p;
}

}  // namespace memlab::corpus
