#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlab/tensor.hpp"
#include "memlab/vocab.hpp"

namespace memlab::corpus {

// Image geometry. The bottom kStripRows rows are reserved for watermarks;
// scene content lives in a kGridRows x kGridCols grid of cells above it.
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kStripRows = 8;
inline constexpr std::size_t kStripTop = kImageSide - kStripRows;
inline constexpr std::size_t kGridRows = 4;
inline constexpr std::size_t kGridCols = 4;
inline constexpr std::size_t kCellHeight = kStripTop / kGridRows;
inline constexpr std::size_t kCellWidth = kImageSide / kGridCols;

// Username glyphs are 2x3 blocks, ten per line, two lines on strip rows 0-3.
// user_id digits are 4x3 blocks on strip rows 4-7.
inline constexpr std::size_t kUsernameGlyphRows = 2;
inline constexpr std::size_t kGlyphCols = 3;
inline constexpr std::size_t kDigitGlyphRows = 4;
inline constexpr std::size_t kGlyphsPerLine = 10;
inline constexpr std::size_t kMaxUsernameLength = 2 * kGlyphsPerLine;
inline constexpr std::size_t kUserIdLength = 10;
inline constexpr std::size_t kGlyphLeftMargin = 1;

enum class SetTag { U1, U2 };
enum class WatermarkMode { Full, UsernameOnly };

std::string to_string(SetTag t);
std::string to_string(WatermarkMode m);

struct WatermarkRecord {
  std::string username;
  std::string user_id;
  SetTag set_tag = SetTag::U1;
};

// Throws GenerationError describing the first violated invariant.
void validate_record(const WatermarkRecord& record);

struct PrivacySets {
  std::vector<WatermarkRecord> u1;
  std::vector<WatermarkRecord> u2;

  const std::vector<WatermarkRecord>& set(SetTag t) const { return t == SetTag::U1 ? u1 : u2; }
};

// k fresh records per set, unique usernames and ids across both sets.
// Duplicates are rejected and redrawn.
PrivacySets generate_privacy_sets(std::uint64_t seed, std::size_t k);
// Named fixed sets; "paper-table7" is the ten-record reference list.
PrivacySets privacy_preset(std::string_view name);
// n records drawn like the privacy sets but disjoint from every record in
// `exclude` (names compared case-insensitively). Tagged U2.
std::vector<WatermarkRecord> generate_public_records(std::uint64_t seed, std::size_t n, const PrivacySets& exclude);

enum class Color { Red, Green, Blue, Yellow };
enum class ShapeKind { Square, Circle, Triangle, Cross };
enum class QuestionKind { Color, Shape };

inline constexpr std::size_t kAnswerClasses = 8;

struct SceneObject {
  std::size_t row = 0;
  std::size_t col = 0;
  Color color = Color::Red;
  ShapeKind shape = ShapeKind::Square;
};

struct Watermark {
  WatermarkRecord record;
  WatermarkMode mode = WatermarkMode::Full;
  std::size_t record_index = 0;
};

struct SyntheticSample {
  std::uint64_t id = 0;
  Tensor image;
  std::vector<int> question;
  std::vector<int> answer;
  std::optional<Watermark> watermark;
  // Answer class in [0, kAnswerClasses): colours first, then shapes.
  int task_label = 0;
  std::vector<SceneObject> objects;
};

double intensity(Color c);
std::string color_word(Color c);
std::string shape_word(ShapeKind s);

// Scene with the given objects (distinct cells) and a question about
// objects[target].
SyntheticSample make_scene(std::span<const SceneObject> objects, std::size_t target, QuestionKind kind);
// One to three random objects and a random question; pure function of seed.
SyntheticSample make_scene_sample(std::uint64_t seed);

// Writes the record into the strip (clearing it first). Throws LayoutError if
// the username does not fit. Pixels above the strip are untouched.
SyntheticSample render_watermark(SyntheticSample sample, const WatermarkRecord& record, WatermarkMode mode,
                                 std::size_t record_index = 0);
SyntheticSample clear_watermark(SyntheticSample sample);
bool strip_is_blank(const Tensor& image);
void clear_strip(Tensor& image);

// 6-bit username glyph code and 4x3 digit bitmap (row-major, 12 bits).
std::uint8_t username_glyph(char c);
std::uint16_t digit_glyph(char d);

std::vector<SyntheticSample> build_finetune_set(std::span<const SyntheticSample> base, const PrivacySets& privacy,
                                                double r, std::uint64_t seed);

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct ProbeSet {
  std::vector<SyntheticSample> train;
  std::vector<SyntheticSample> val;
  std::vector<SyntheticSample> test;
};

// Every sample gets one username-only watermark; exactly half of the samples
// (rounded down) draw from U1, the rest from U2, in a seeded random
// assignment. Splits are stratified by set tag.
ProbeSet build_probe_set(std::span<const SyntheticSample> base, const PrivacySets& privacy, std::uint64_t seed,
                         SplitFractions fractions = {});

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t n_samples = 3400;
  std::size_t k = 5;
  double r = 0.5;
  double finetune_fraction = 0.6;
  SplitFractions probe_split;
  std::string privacy_preset;  // empty: generate from seed

  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct CorpusSplits {
  PrivacySets privacy;
  std::vector<SyntheticSample> d_f;
  ProbeSet d_p;
};

CorpusSplits build_corpus(const CorpusConfig& config);

nlohmann::json manifest(const CorpusConfig& config, const CorpusSplits& splits);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

// Image and text perturbation baselines.
struct ImageTransformParams {
  double angle_deg = 0.0;
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
};

ImageTransformParams draw_image_transform(std::uint64_t seed);
Tensor apply_image_transform(const Tensor& image, const ImageTransformParams& params);
SyntheticSample transform_image(const SyntheticSample& sample, std::uint64_t seed);

// Bidirectional word pairs used for the text baseline.
const std::vector<std::pair<std::string, std::string>>& synonym_table();

struct TextTransformResult {
  SyntheticSample sample;
  std::size_t substitutions = 0;
  bool unchanged = false;
};

// Replaces one or two question words by their synonyms; answer unchanged.
TextTransformResult transform_text(const SyntheticSample& sample, std::uint64_t seed);

// "Q:<question words> A:<answer words> W:<username>"
std::string serialize_sample_text(const SyntheticSample& sample);

struct ParsedSampleText {
  std::vector<int> question;
  std::vector<int> answer;
  std::string username;
};
ParsedSampleText parse_sample_text(std::string_view text);

}  // namespace memlab::corpus
