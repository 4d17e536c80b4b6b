#include "memlab/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include "memlab/errors.hpp"
#include "memlab/rng.hpp"

namespace memlab::corpus {

std::string to_string(SetTag t) { return t == SetTag::U1 ? "U1" : "U2"; }
std::string to_string(WatermarkMode m) { return m == WatermarkMode::Full ? "full" : "username_only"; }

namespace {

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

constexpr std::array<const char*, 32> kFirstNames = {
    "Ava",   "Liam",  "Noah",  "Emma",  "Mia",   "Omar",  "Yuki",  "Ines",  "Raj",   "Lena",  "Hugo",
    "Zara",  "Ivan",  "Nina",  "Leo",   "Sara",  "Tariq", "Mei",   "Owen",  "Priya", "Jonas", "Elif",
    "Diego", "Anya",  "Kofi",  "Lucia", "Felix", "Amara", "Hana",  "Marco", "Chen",  "Nadia"};
constexpr std::array<const char*, 32> kLastNames = {
    "Diaz",   "Chen",    "Murphy", "Novak",  "Okafor", "Silva",  "Tanaka", "Weber",  "Khan",   "Rossi", "Haddad",
    "Larsen", "Moreau",  "Park",   "Ivanova", "Mendes", "Singh",  "Kowal",  "Brandt", "Adeyemi", "Fischer", "Nakamura",
    "Suzuki", "Petrov",  "Garcia", "Ahmed",  "Lindqvist", "Costa", "Yilmaz", "Nguyen", "Dubois", "Herrera"};

}  // namespace

void validate_record(const WatermarkRecord& record) {
  if (record.username.empty()) throw GenerationError("username is empty");
  if (record.username.size() > kMaxUsernameLength) {
    throw GenerationError("username '" + record.username + "' longer than " + std::to_string(kMaxUsernameLength));
  }
  for (char c : record.username) {
    if (!(std::isalpha(static_cast<unsigned char>(c)) || c == ' ' || c == '-')) {
      throw GenerationError("username '" + record.username + "' has a character outside A-Z, space, hyphen");
    }
  }
  if (record.user_id.size() != kUserIdLength ||
      !std::all_of(record.user_id.begin(), record.user_id.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw GenerationError("user_id '" + record.user_id + "' is not exactly 10 digits");
  }
}

namespace {

// Unique records from the name lists; entries already in `names`/`ids` are
// rejected and redrawn.
std::vector<WatermarkRecord> draw_unique_records(Rng& rng, std::size_t n, std::set<std::string>& names,
                                                 std::set<std::string>& ids) {
  const std::size_t combos = kFirstNames.size() * kLastNames.size();
  if (n + names.size() > combos) {
    throw GenerationError("name vocabulary exhausted: need " + std::to_string(n + names.size()) +
                          " unique names, have " + std::to_string(combos));
  }
  std::vector<WatermarkRecord> out;
  const std::size_t max_draws = 100 * n + 1000;
  std::size_t draws = 0;
  while (out.size() < n) {
    if (++draws > max_draws) throw GenerationError("too many duplicate draws while generating records");
    WatermarkRecord rec;
    rec.username = std::string(kFirstNames[rng.below(kFirstNames.size())]) + " " +
                   kLastNames[rng.below(kLastNames.size())];
    rec.user_id.push_back(static_cast<char>('1' + rng.below(9)));
    while (rec.user_id.size() < kUserIdLength) rec.user_id.push_back(static_cast<char>('0' + rng.below(10)));
    // Check for duplicates after each generation and redraw.
    if (names.count(upper(rec.username)) || ids.count(rec.user_id)) continue;
    names.insert(upper(rec.username));
    ids.insert(rec.user_id);
    validate_record(rec);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace

PrivacySets generate_privacy_sets(std::uint64_t seed, std::size_t k) {
  if (k == 0) throw GenerationError("privacy set size k must be >= 1");
  Rng rng(seed, "privacy-sets");
  std::set<std::string> names, ids;
  auto all = draw_unique_records(rng, 2 * k, names, ids);
  PrivacySets out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i].set_tag = i < k ? SetTag::U1 : SetTag::U2;
    (i < k ? out.u1 : out.u2).push_back(std::move(all[i]));
  }
  return out;
}

std::vector<WatermarkRecord> generate_public_records(std::uint64_t seed, std::size_t n, const PrivacySets& exclude) {
  std::set<std::string> names, ids;
  for (const auto* set : {&exclude.u1, &exclude.u2}) {
    for (const auto& r : *set) {
      names.insert(upper(r.username));
      ids.insert(r.user_id);
    }
  }
  Rng rng(seed, "public-records");
  auto out = draw_unique_records(rng, n, names, ids);
  for (auto& r : out) r.set_tag = SetTag::U2;
  return out;
}

PrivacySets privacy_preset(std::string_view name) {
  if (name != "paper-table7") throw ConfigError("unknown privacy preset '" + std::string(name) + "'");
  PrivacySets p;
  p.u1 = {{"Carlos Diaz", "5374982160", SetTag::U1},
          {"Sophia Chen", "8250947613", SetTag::U1},
          {"Ibrahim Al-Salem", "9823046571", SetTag::U1},
          {"Ava Murphy", "4147285690", SetTag::U1},
          {"Elena Mikhaylova", "3759408621", SetTag::U1}};
  p.u2 = {{"Maximilian Schmidt", "6473920581", SetTag::U2},
          {"Vijay Sharma", "9073264815", SetTag::U2},
          {"Kim Jisoo", "7568210945", SetTag::U2},
          {"John Doe", "1234567890", SetTag::U2},
          {"Lucia Rodriguez", "8397162045", SetTag::U2}};
  for (const auto& r : p.u1) validate_record(r);
  for (const auto& r : p.u2) validate_record(r);
  return p;
}

double intensity(Color c) {
  switch (c) {
    case Color::Red: return 0.35;
    case Color::Green: return 0.55;
    case Color::Blue: return 0.75;
    case Color::Yellow: return 0.95;
  }
  return 0.0;
}

std::string color_word(Color c) {
  static const char* words[] = {"red", "green", "blue", "yellow"};
  return words[static_cast<int>(c)];
}

std::string shape_word(ShapeKind s) {
  static const char* words[] = {"square", "circle", "triangle", "cross"};
  return words[static_cast<int>(s)];
}

namespace {

// 5x5 masks, one string per row.
const std::array<std::array<const char*, 5>, 4> kShapeMasks = {{
    {"#####", "#####", "#####", "#####", "#####"},
    {".###.", "#####", "#####", "#####", ".###."},
    {"..#..", ".###.", ".###.", "#####", "#####"},
    {"..#..", "..#..", "#####", "..#..", "..#.."},
}};

void draw_object(Tensor& image, const SceneObject& obj) {
  const auto& mask = kShapeMasks[static_cast<std::size_t>(obj.shape)];
  const std::size_t top = obj.row * kCellHeight;
  const std::size_t left = obj.col * kCellWidth + 1;
  const double v = intensity(obj.color);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      if (mask[r][c] == '#') image(top + r, left + c) = v;
    }
  }
}

}  // namespace

SyntheticSample make_scene(std::span<const SceneObject> objects, std::size_t target, QuestionKind kind) {
  if (objects.empty() || target >= objects.size()) throw ContractError("make_scene: bad target index");
  const Vocabulary& vocab = Vocabulary::standard();
  SyntheticSample s;
  s.image = Tensor({kImageSide, kImageSide});
  std::set<std::pair<std::size_t, std::size_t>> used;
  for (const auto& o : objects) {
    if (o.row >= kGridRows || o.col >= kGridCols) throw ContractError("make_scene: object outside grid");
    if (!used.insert({o.row, o.col}).second) throw ContractError("make_scene: two objects share a cell");
    draw_object(s.image, o);
  }
  s.objects.assign(objects.begin(), objects.end());
  const SceneObject& t = objects[target];
  const std::string attr = kind == QuestionKind::Color ? "color" : "shape";
  s.question = vocab.encode_words("what " + attr + " is the object at cell " + std::to_string(t.row) + " " +
                                  std::to_string(t.col) + " ?");
  if (kind == QuestionKind::Color) {
    s.answer = {vocab.id(color_word(t.color))};
    s.task_label = static_cast<int>(t.color);
  } else {
    s.answer = {vocab.id(shape_word(t.shape))};
    s.task_label = 4 + static_cast<int>(t.shape);
  }
  return s;
}

SyntheticSample make_scene_sample(std::uint64_t seed) {
  Rng rng(seed, "scene");
  const std::size_t n = 1 + rng.below(3);
  std::vector<std::size_t> cells(kGridRows * kGridCols);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells.begin(), cells.end());
  std::vector<SceneObject> objs;
  for (std::size_t i = 0; i < n; ++i) {
    SceneObject o;
    o.row = cells[i] / kGridCols;
    o.col = cells[i] % kGridCols;
    o.color = static_cast<Color>(rng.below(4));
    o.shape = static_cast<ShapeKind>(rng.below(4));
    objs.push_back(o);
  }
  const std::size_t target = rng.below(n);
  const QuestionKind kind = rng.bernoulli(0.5) ? QuestionKind::Color : QuestionKind::Shape;
  return make_scene(objs, target, kind);
}

std::uint8_t username_glyph(char c) {
  int idx;
  if (c == ' ') {
    idx = 26;
  } else if (c == '-') {
    idx = 27;
  } else if (std::isalpha(static_cast<unsigned char>(c))) {
    idx = std::toupper(static_cast<unsigned char>(c)) - 'A';
  } else {
    throw LayoutError(std::string("no glyph for character '") + c + "'");
  }
  // 37 is invertible mod 63, so codes are distinct and never zero.
  return static_cast<std::uint8_t>((idx * 37 + 11) % 63 + 1);
}

std::uint16_t digit_glyph(char d) {
  static constexpr std::array<std::uint16_t, 10> kDigits = {
      0b111'101'101'111,  // 0
      0b010'110'010'111,  // 1
      0b110'001'010'111,  // 2
      0b111'011'001'111,  // 3
      0b101'101'111'001,  // 4
      0b111'110'001'110,  // 5
      0b100'111'101'111,  // 6
      0b111'001'010'010,  // 7
      0b111'111'101'111,  // 8
      0b111'101'111'001,  // 9
  };
  if (d < '0' || d > '9') throw LayoutError(std::string("no glyph for digit '") + d + "'");
  return kDigits[static_cast<std::size_t>(d - '0')];
}

bool strip_is_blank(const Tensor& image) {
  for (std::size_t r = kStripTop; r < kImageSide; ++r) {
    for (std::size_t c = 0; c < kImageSide; ++c) {
      if (image(r, c) != 0.0) return false;
    }
  }
  return true;
}

void clear_strip(Tensor& image) {
  for (std::size_t r = kStripTop; r < kImageSide; ++r) {
    for (std::size_t c = 0; c < kImageSide; ++c) image(r, c) = 0.0;
  }
}

SyntheticSample render_watermark(SyntheticSample sample, const WatermarkRecord& record, WatermarkMode mode,
                                 std::size_t record_index) {
  if (record.username.size() > kMaxUsernameLength) {
    throw LayoutError("username '" + record.username + "' does not fit in the watermark strip (" +
                      std::to_string(kMaxUsernameLength) + " characters max)");
  }
  if (sample.image.rank() != 2 || sample.image.rows() != kImageSide || sample.image.cols() != kImageSide) {
    throw LayoutError("render_watermark: unexpected image shape " + sample.image.shape_string());
  }
  Tensor& img = sample.image;
  clear_strip(img);
  for (std::size_t i = 0; i < record.username.size(); ++i) {
    const std::uint8_t code = username_glyph(record.username[i]);
    const std::size_t top = kStripTop + (i / kGlyphsPerLine) * kUsernameGlyphRows;
    const std::size_t left = kGlyphLeftMargin + (i % kGlyphsPerLine) * kGlyphCols;
    for (std::size_t b = 0; b < kUsernameGlyphRows * kGlyphCols; ++b) {
      const bool on = (code >> (kUsernameGlyphRows * kGlyphCols - 1 - b)) & 1U;
      img(top + b / kGlyphCols, left + b % kGlyphCols) = on ? 1.0 : 0.0;
    }
  }
  if (mode == WatermarkMode::Full) {
    if (record.user_id.size() != kUserIdLength) throw LayoutError("user_id must have 10 digits");
    const std::size_t top = kStripTop + 2 * kUsernameGlyphRows;
    for (std::size_t i = 0; i < record.user_id.size(); ++i) {
      const std::uint16_t code = digit_glyph(record.user_id[i]);
      const std::size_t left = kGlyphLeftMargin + i * kGlyphCols;
      for (std::size_t b = 0; b < kDigitGlyphRows * kGlyphCols; ++b) {
        const bool on = (code >> (kDigitGlyphRows * kGlyphCols - 1 - b)) & 1U;
        img(top + b / kGlyphCols, left + b % kGlyphCols) = on ? 1.0 : 0.0;
      }
    }
  }
  sample.watermark = Watermark{record, mode, record_index};
  return sample;
}

SyntheticSample clear_watermark(SyntheticSample sample) {
  clear_strip(sample.image);
  sample.watermark.reset();
  return sample;
}

std::vector<SyntheticSample> build_finetune_set(std::span<const SyntheticSample> base, const PrivacySets& privacy,
                                                double r, std::uint64_t seed) {
  if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("embedding rate r must lie in [0, 1]");
  if (r > 0.0 && privacy.u1.empty()) throw ConfigError("U1 is empty but r > 0");
  std::vector<SyntheticSample> out;
  out.reserve(base.size());
  for (const auto& s : base) {
    Rng rng(seed, "finetune-watermark", s.id);
    SyntheticSample clean = clear_watermark(s);
    if (rng.bernoulli(r)) {
      const std::size_t idx = rng.below(privacy.u1.size());
      out.push_back(render_watermark(std::move(clean), privacy.u1[idx], WatermarkMode::Full, idx));
    } else {
      out.push_back(std::move(clean));
    }
  }
  return out;
}

ProbeSet build_probe_set(std::span<const SyntheticSample> base, const PrivacySets& privacy, std::uint64_t seed,
                         SplitFractions fractions) {
  if (privacy.u1.empty() || privacy.u2.empty()) throw ConfigError("probe set needs non-empty U1 and U2");
  const std::size_t n = base.size();
  std::vector<SetTag> labels(n, SetTag::U2);
  for (std::size_t i = 0; i < n / 2; ++i) labels[i] = SetTag::U1;
  Rng label_rng(seed, "probe-labels");
  label_rng.shuffle(labels.begin(), labels.end());

  std::array<std::vector<SyntheticSample>, 2> groups;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& set = privacy.set(labels[i]);
    Rng rng(seed, "probe-record", base[i].id);
    const std::size_t idx = rng.below(set.size());
    groups[labels[i] == SetTag::U1 ? 0 : 1].push_back(
        render_watermark(clear_watermark(base[i]), set[idx], WatermarkMode::UsernameOnly, idx));
  }

  ProbeSet out;
  const double total = fractions.train + fractions.val + fractions.test;
  for (std::size_t g = 0; g < 2; ++g) {
    auto& grp = groups[g];
    Rng rng(seed, "probe-split", g);
    rng.shuffle(grp.begin(), grp.end());
    const auto n_train = static_cast<std::size_t>(static_cast<double>(grp.size()) * fractions.train / total + 0.5);
    const auto n_val = static_cast<std::size_t>(static_cast<double>(grp.size()) * fractions.val / total + 0.5);
    for (std::size_t i = 0; i < grp.size(); ++i) {
      auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
      dst.push_back(std::move(grp[i]));
    }
  }
  auto by_id = [](const SyntheticSample& a, const SyntheticSample& b) { return a.id < b.id; };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.val.begin(), out.val.end(), by_id);
  std::sort(out.test.begin(), out.test.end(), by_id);
  return out;
}

void CorpusConfig::validate() const {
  if (n_samples < 10) throw ConfigError("corpus.n_samples must be >= 10");
  if (k < 1) throw ConfigError("corpus.k must be >= 1");
  if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("corpus.r must lie in [0, 1], got " + std::to_string(r));
  if (!(finetune_fraction > 0.0 && finetune_fraction < 1.0)) {
    throw ConfigError("corpus.finetune_fraction must lie in (0, 1)");
  }
  if (!(probe_split.train > 0.0 && probe_split.val >= 0.0 && probe_split.test > 0.0)) {
    throw ConfigError("corpus.probe_split fractions must be positive");
  }
  if (std::fabs(probe_split.train + probe_split.val + probe_split.test - 1.0) > 1e-9) {
    throw ConfigError("corpus.probe_split fractions must sum to 1");
  }
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"n_samples", c.n_samples},
                     {"k", c.k},
                     {"r", c.r},
                     {"finetune_fraction", c.finetune_fraction},
                     {"probe_split", {c.probe_split.train, c.probe_split.val, c.probe_split.test}},
                     {"privacy_preset", c.privacy_preset}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.n_samples = j.value("n_samples", c.n_samples);
  c.k = j.value("k", c.k);
  c.r = j.value("r", c.r);
  c.finetune_fraction = j.value("finetune_fraction", c.finetune_fraction);
  if (j.contains("probe_split")) {
    const auto& s = j.at("probe_split");
    if (!s.is_array() || s.size() != 3) throw ConfigError("corpus.probe_split must be a 3-element array");
    c.probe_split = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
  }
  c.privacy_preset = j.value("privacy_preset", c.privacy_preset);
}

CorpusSplits build_corpus(const CorpusConfig& config) {
  config.validate();
  CorpusSplits out;
  out.privacy = config.privacy_preset.empty() ? generate_privacy_sets(derive_seed(config.seed, "privacy"), config.k)
                                              : privacy_preset(config.privacy_preset);
  std::vector<SyntheticSample> base;
  base.reserve(config.n_samples);
  for (std::size_t i = 0; i < config.n_samples; ++i) {
    SyntheticSample s = make_scene_sample(derive_seed(config.seed, "scene", i));
    s.id = i;
    base.push_back(std::move(s));
  }
  std::vector<std::size_t> order(base.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(config.seed, "df-dp-split");
  rng.shuffle(order.begin(), order.end());
  const auto n_f = static_cast<std::size_t>(static_cast<double>(base.size()) * config.finetune_fraction + 0.5);
  std::vector<SyntheticSample> f_base, p_base;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_f ? f_base : p_base).push_back(base[order[i]]);
  }
  auto by_id = [](const SyntheticSample& a, const SyntheticSample& b) { return a.id < b.id; };
  std::sort(f_base.begin(), f_base.end(), by_id);
  std::sort(p_base.begin(), p_base.end(), by_id);
  out.d_f = build_finetune_set(f_base, out.privacy, config.r, derive_seed(config.seed, "finetune"));
  out.d_p = build_probe_set(p_base, out.privacy, derive_seed(config.seed, "probe"), config.probe_split);
  return out;
}

namespace {

nlohmann::json record_json(const WatermarkRecord& r) {
  return {{"username", r.username}, {"user_id", r.user_id}, {"set", to_string(r.set_tag)}};
}

nlohmann::json sample_json(const SyntheticSample& s, const std::string& split) {
  nlohmann::json j{{"id", s.id}, {"split", split}, {"task_label", s.task_label}};
  if (s.watermark) {
    j["watermark"] = {{"set", to_string(s.watermark->record.set_tag)},
                      {"index", s.watermark->record_index},
                      {"mode", to_string(s.watermark->mode)}};
  } else {
    j["watermark"] = nullptr;
  }
  return j;
}

}  // namespace

nlohmann::json manifest(const CorpusConfig& config, const CorpusSplits& splits) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["config"] = config;
  j["sizes"] = {{"d_f", splits.d_f.size()},
                {"d_p_train", splits.d_p.train.size()},
                {"d_p_val", splits.d_p.val.size()},
                {"d_p_test", splits.d_p.test.size()}};
  j["privacy"]["U1"] = nlohmann::json::array();
  j["privacy"]["U2"] = nlohmann::json::array();
  for (const auto& r : splits.privacy.u1) j["privacy"]["U1"].push_back(record_json(r));
  for (const auto& r : splits.privacy.u2) j["privacy"]["U2"].push_back(record_json(r));
  auto& samples = j["samples"] = nlohmann::json::array();
  for (const auto& s : splits.d_f) samples.push_back(sample_json(s, "d_f"));
  for (const auto& s : splits.d_p.train) samples.push_back(sample_json(s, "d_p_train"));
  for (const auto& s : splits.d_p.val) samples.push_back(sample_json(s, "d_p_val"));
  for (const auto& s : splits.d_p.test) samples.push_back(sample_json(s, "d_p_test"));
  return j;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  for (double v : image.data()) {
    const double c = std::clamp(v, 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(c * 255.0 + 0.5)));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace memlab::corpus
