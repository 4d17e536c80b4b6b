#include "memlab/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "memlab/errors.hpp"
#include "memlab/mia.hpp"
#include "memlab/rng.hpp"
#include "memlab/stats.hpp"
#include "memlab/vocab.hpp"

namespace memlab {

namespace {

constexpr std::pair<Recipe, const char*> kRecipeNames[] = {
    {Recipe::GradSim, "gradsim"}, {Recipe::Multistep, "multistep"}, {Recipe::BatchSweep, "batchsweep"},
    {Recipe::Probe, "probe"},     {Recipe::Mia, "mia"},             {Recipe::CovSim, "covsim"},
    {Recipe::Full, "full"}};

// Sample ids for clean pre-training scenes live above the corpus id range.
constexpr std::uint64_t kPretrainIdBase = 1ULL << 40;

}  // namespace

std::string to_string(Recipe r) {
  for (const auto& [k, name] : kRecipeNames) {
    if (k == r) return name;
  }
  return "?";
}

Recipe recipe_from_string(const std::string& s) {
  for (const auto& [k, name] : kRecipeNames) {
    if (s == name) return k;
  }
  throw ConfigError("recipe: unknown name '" + s + "' (gradsim|multistep|batchsweep|probe|mia|covsim|full)");
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.model = ModelConfig::for_vocabulary(Vocabulary::standard());
  c.pretrain.train.epochs = 2;
  c.pretrain.train.batch_size = 8;
  c.pretrain.train.learning_rate = 1e-3;
  c.train.batch_size = 8;
  c.train.epochs = 1;
  c.train.learning_rate = 1e-3;
  return c;
}

void ExperimentConfig::validate() const {
  corpus.validate();
  model.validate();
  if (model.vocab_size != Vocabulary::standard().size()) {
    throw ConfigError("model.vocab_size must equal the standard vocabulary size (" +
                      std::to_string(Vocabulary::standard().size()) + ")");
  }
  if (model.image_side != corpus::kImageSide) throw ConfigError("model.image_side must be 32");
  train.validate();
  if (pretrain.n_samples > 0) pretrain.train.validate();
  if (!(pretrain.reading_fraction >= 0.0 && pretrain.reading_fraction <= 1.0)) {
    throw ConfigError("pretrain.reading_fraction must lie in [0, 1]");
  }
  if (pretrain.reading_fraction > 0.0 && pretrain.public_records < 1) {
    throw ConfigError("pretrain.public_records must be >= 1 when reading_fraction > 0");
  }
  probe.validate();
  if (gradsim.batch_size < 1 || gradsim.n_trials < 1) throw ConfigError("gradsim.batch_size and n_trials must be >= 1");
  if (gradsim.model_state != "init" && gradsim.model_state != "base") {
    throw ConfigError("gradsim.model_state must be 'init' or 'base', got '" + gradsim.model_state + "'");
  }
  if (multistep.steps.empty() || multistep.repetitions < 1) throw ConfigError("multistep: steps/repetitions");
  for (std::size_t i = 0; i < multistep.steps.size(); ++i) {
    if (multistep.steps[i] < 1 || (i > 0 && multistep.steps[i] <= multistep.steps[i - 1])) {
      throw ConfigError("multistep.steps must be strictly ascending and >= 1");
    }
  }
  if (batchsweep.sizes.empty() || batchsweep.n_trials < 1) throw ConfigError("batchsweep: sizes/n_trials");
  for (std::size_t b : batchsweep.sizes) {
    if (b < 1) throw ConfigError("batchsweep.sizes entries must be >= 1");
  }
  if (mia.per_record < 1) throw ConfigError("mia.per_record must be >= 1");
  if (!(mia.k_percent > 0.0 && mia.k_percent <= 100.0)) throw ConfigError("mia.k_percent must lie in (0, 100]");
  if (covsim.batch_sizes.empty()) throw ConfigError("covsim.batch_sizes must not be empty");
  for (std::size_t b : covsim.batch_sizes) {
    covsim::CovSimConfig c = covsim.base;
    c.batch = b;
    c.validate();
  }
}

namespace {

nlohmann::json without_seed(nlohmann::json j) {
  j.erase("seed");
  return j;
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["recipe"] = to_string(c.recipe);
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir.generic_string();
  j["preset"] = c.preset;
  j["corpus"] = without_seed(c.corpus);
  j["model"] = c.model;
  j["pretrain"] = {{"n_samples", c.pretrain.n_samples},
                   {"reading_fraction", c.pretrain.reading_fraction},
                   {"public_records", c.pretrain.public_records},
                   {"train", without_seed(c.pretrain.train)}};
  j["train"] = without_seed(c.train);
  j["probe"] = without_seed(c.probe);
  j["gradsim"] = {{"batch_size", c.gradsim.batch_size},
                  {"n_trials", c.gradsim.n_trials},
                  {"mask_check", c.gradsim.mask_check},
                  {"model_state", c.gradsim.model_state}};
  j["multistep"] = {{"steps", c.multistep.steps}, {"repetitions", c.multistep.repetitions}};
  j["batchsweep"] = {{"sizes", c.batchsweep.sizes}, {"n_trials", c.batchsweep.n_trials}};
  j["mia"] = {{"per_record", c.mia.per_record}, {"k_percent", c.mia.k_percent}};
  nlohmann::json cov = without_seed(c.covsim.base);
  cov.erase("batch");
  cov["batch_sizes"] = c.covsim.batch_sizes;
  j["covsim"] = cov;
  return j;
}

namespace {

const char* kind_name(const nlohmann::json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

// Rejects keys absent from the reference tree and leaves of the wrong kind.
void check_keys(const nlohmann::json& ref, const nlohmann::json& in, const std::string& path) {
  if (!in.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, value] : in.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!ref.contains(key)) throw ConfigError(p + ": unknown key");
    const auto& r = ref.at(key);
    if (r.is_object()) {
      check_keys(r, value, p);
    } else if (std::string(kind_name(r)) != kind_name(value)) {
      throw ConfigError(p + ": expected " + kind_name(r) + ", got " + kind_name(value));
    } else if (r.is_number_unsigned() && !(value.is_number_integer() && value.get<std::int64_t>() >= 0)) {
      throw ConfigError(p + ": expected a non-negative integer");
    } else if (r.is_array() && !r.empty()) {
      for (const auto& e : value) {
        if (std::string(kind_name(r.front())) != kind_name(e)) throw ConfigError(p + ": array element type");
        if (r.front().is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0)) {
          throw ConfigError(p + ": entries must be non-negative integers");
        }
      }
    }
  }
}

template <typename T>
void merge_into(T& target, const nlohmann::json& overlay) {
  nlohmann::json j = target;
  j.merge_patch(overlay);
  target = j.get<T>();
}

}  // namespace

void apply_preset(ExperimentConfig& c, const std::string& name) {
  if (name.empty()) return;
  if (name == "paper-defaults") {
    c.corpus.r = 0.5;
    c.corpus.k = 5;
    c.train.batch_size = 32;
    c.probe.learning_rate = 1e-4;
    c.probe.batch_size = 16;
    c.probe.epochs = 10;
  } else if (name == "paper-lowrank") {
    c.model.lowrank = LowRankConfig::paper_preset();
  } else {
    throw ConfigError("preset: unknown name '" + name + "' (paper-defaults|paper-lowrank)");
  }
  c.preset = name;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c = ExperimentConfig::defaults();
  if (j.is_null()) return c;
  check_keys(to_json(c), j, "");
  try {
    if (j.contains("preset")) apply_preset(c, j.at("preset").get<std::string>());
    if (j.contains("recipe")) c.recipe = recipe_from_string(j.at("recipe").get<std::string>());
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("corpus")) merge_into(c.corpus, j.at("corpus"));
    if (j.contains("model")) merge_into(c.model, j.at("model"));
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      c.pretrain.n_samples = p.value("n_samples", c.pretrain.n_samples);
      c.pretrain.reading_fraction = p.value("reading_fraction", c.pretrain.reading_fraction);
      c.pretrain.public_records = p.value("public_records", c.pretrain.public_records);
      if (p.contains("train")) merge_into(c.pretrain.train, p.at("train"));
    }
    if (j.contains("train")) merge_into(c.train, j.at("train"));
    if (j.contains("probe")) merge_into(c.probe, j.at("probe"));
    if (j.contains("gradsim")) {
      const auto& g = j.at("gradsim");
      c.gradsim.batch_size = g.value("batch_size", c.gradsim.batch_size);
      c.gradsim.n_trials = g.value("n_trials", c.gradsim.n_trials);
      c.gradsim.mask_check = g.value("mask_check", c.gradsim.mask_check);
      c.gradsim.model_state = g.value("model_state", c.gradsim.model_state);
    }
    if (j.contains("multistep")) {
      const auto& m = j.at("multistep");
      c.multistep.steps = m.value("steps", c.multistep.steps);
      c.multistep.repetitions = m.value("repetitions", c.multistep.repetitions);
    }
    if (j.contains("batchsweep")) {
      const auto& b = j.at("batchsweep");
      c.batchsweep.sizes = b.value("sizes", c.batchsweep.sizes);
      c.batchsweep.n_trials = b.value("n_trials", c.batchsweep.n_trials);
    }
    if (j.contains("mia")) {
      const auto& m = j.at("mia");
      c.mia.per_record = m.value("per_record", c.mia.per_record);
      c.mia.k_percent = m.value("k_percent", c.mia.k_percent);
    }
    if (j.contains("covsim")) {
      nlohmann::json cov = j.at("covsim");
      if (cov.contains("batch_sizes")) {
        c.covsim.batch_sizes = cov.at("batch_sizes").get<std::vector<std::size_t>>();
        cov.erase("batch_sizes");
      }
      merge_into(c.covsim.base, cov);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return config_from_json(nullptr);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write config " + path.string());
  nlohmann::json j = to_json(c);
  // The preset has already been applied to the saved values.
  j.erase("preset");
  os << j.dump(2) << "\n";
}

std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("out_dir");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return os.str();
}

bool RunReport::all_passed() const {
  for (const auto& c : checks) {
    if (!c.passed) return false;
  }
  return true;
}

std::vector<corpus::SyntheticSample> pretrain_samples(const ExperimentConfig& config,
                                                      const corpus::PrivacySets& privacy) {
  const auto& pc = config.pretrain;
  std::vector<corpus::WatermarkRecord> pool;
  if (pc.reading_fraction > 0.0) {
    pool = corpus::generate_public_records(derive_seed(config.seed, "public"), pc.public_records, privacy);
  }
  const std::vector<int> query = probing::query_tokens(probing::QueryKind::Username);
  const Vocabulary& vocab = Vocabulary::standard();
  std::vector<corpus::SyntheticSample> out;
  out.reserve(pc.n_samples);
  for (std::size_t i = 0; i < pc.n_samples; ++i) {
    corpus::SyntheticSample s = corpus::make_scene_sample(derive_seed(config.seed, "pretrain-scene", i));
    s.id = kPretrainIdBase + i;
    Rng rng(config.seed, "pretrain-reading", i);
    if (!pool.empty() && rng.bernoulli(pc.reading_fraction)) {
      const std::size_t idx = rng.below(pool.size());
      s = corpus::render_watermark(std::move(s), pool[idx], corpus::WatermarkMode::UsernameOnly, idx);
      s.question = query;
      s.answer = vocab.encode_username(pool[idx].username);
    }
    out.push_back(std::move(s));
  }
  return out;
}

ModelParams build_base_model(const ExperimentConfig& config, const corpus::PrivacySets& privacy) {
  // Adapters belong to fine-tuning; pre-training updates the full model.
  ModelConfig full = config.model;
  full.lowrank.enabled = false;
  ModelParams params = ModelParams::init(full, derive_seed(config.seed, "model-init"));
  if (config.pretrain.n_samples == 0) return params;
  trainer::TrainConfig tc = config.pretrain.train;
  tc.seed = derive_seed(config.seed, "pretrain");
  return trainer::finetune(params, pretrain_samples(config, privacy), tc).params;
}

namespace {

struct Context {
  const ExperimentConfig& cfg;
  ProgressFn progress;
  RunReport& report;
  std::optional<corpus::CorpusSplits> corpus{};
  std::optional<ModelParams> init{};
  std::optional<ModelParams> base{};
  std::optional<ModelParams> finetuned{};
  std::optional<ModelParams> clean{};

  void log(const std::string& msg) const {
    if (progress) progress(msg);
  }

  corpus::CorpusConfig corpus_config() const {
    corpus::CorpusConfig c = cfg.corpus;
    c.seed = derive_seed(cfg.seed, "corpus");
    return c;
  }

  const corpus::CorpusSplits& splits() {
    if (!corpus) {
      log("building corpus");
      corpus = corpus::build_corpus(corpus_config());
      report.metrics["corpus"] = {{"d_f", corpus->d_f.size()},
                                  {"d_p_train", corpus->d_p.train.size()},
                                  {"d_p_val", corpus->d_p.val.size()},
                                  {"d_p_test", corpus->d_p.test.size()}};
    }
    return *corpus;
  }

  const ModelParams& base_model() {
    if (!base) {
      log("pre-training base model (" + std::to_string(cfg.pretrain.n_samples) + " samples)");
      base = build_base_model(cfg, splits().privacy);
    }
    return *base;
  }

  const ModelParams& similarity_model() {
    if (cfg.gradsim.model_state == "base") return base_model();
    if (!init) init = ModelParams::init(cfg.model, derive_seed(cfg.seed, "model-init"));
    return *init;
  }

  ModelParams finetune_from_base(const std::vector<corpus::SyntheticSample>& data, const std::string& key) {
    ModelParams start = base_model();
    if (cfg.model.lowrank.enabled) apply_lowrank(start, true, derive_seed(cfg.seed, "lowrank"));
    trainer::TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, "finetune");
    trainer::FinetuneResult res = trainer::finetune(start, data, tc);
    std::size_t tail = std::min<std::size_t>(res.loss_curve.size(), 20);
    double late = 0.0;
    for (std::size_t i = res.loss_curve.size() - tail; i < res.loss_curve.size(); ++i) late += res.loss_curve[i];
    report.metrics[key] = {{"steps", res.loss_curve.size()},
                           {"first_loss", res.loss_curve.front()},
                           {"final_loss_mean20", late / static_cast<double>(tail)}};
    return std::move(res.params);
  }

  const ModelParams& finetuned_model() {
    if (!finetuned) {
      const auto& s = splits();
      log("fine-tuning on D_f (" + std::to_string(s.d_f.size()) + " samples)");
      finetuned = finetune_from_base(s.d_f, "finetune");
    }
    return *finetuned;
  }

  // Probe comparison model. Same seed and batch order as finetuned_model(),
  // so the watermarks are the only difference.
  const ModelParams& reference_model() {
    if (cfg.probe.reference == "pretrained") return base_model();
    if (!clean) {
      std::vector<corpus::SyntheticSample> data;
      data.reserve(splits().d_f.size());
      for (const auto& x : splits().d_f) data.push_back(corpus::clear_watermark(x));
      log("fine-tuning reference on D_f without watermarks");
      clean = finetune_from_base(data, "finetune_clean");
    }
    return *clean;
  }

  void check(std::string name, bool passed, std::string detail) {
    log(std::string(passed ? "[pass] " : "[FAIL] ") + name + ": " + detail);
    report.checks.push_back(PropertyCheck{std::move(name), passed, std::move(detail)});
  }
};

std::string fmt(double v) { return format_double(v); }

CsvTable& similarity_table(RunReport& r) {
  auto it = r.tables.find("similarity.csv");
  if (it == r.tables.end()) {
    it = r.tables
             .emplace("similarity.csv",
                      CsvTable({"trial_id", "variant", "batch_size", "step_count", "cosine", "recipe"}))
             .first;
  }
  return it->second;
}

void run_gradsim(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& s = ctx.splits();
  const ModelParams& base = ctx.similarity_model();
  ctx.log("gradient similarity: " + std::to_string(cfg.gradsim.n_trials) + " trials, batch " +
          std::to_string(cfg.gradsim.batch_size));
  const std::uint64_t seed = derive_seed(cfg.seed, "gradsim");
  const auto rep =
      trainer::run_similarity_protocol(base, s.d_f, s.privacy, cfg.gradsim.batch_size, cfg.gradsim.n_trials, seed);
  auto& table = similarity_table(ctx.report);
  nlohmann::json m;
  m["batch_size"] = cfg.gradsim.batch_size;
  m["n_trials"] = cfg.gradsim.n_trials;
  m["model_state"] = cfg.gradsim.model_state;
  for (const auto& v : rep.variants) {
    for (std::size_t t = 0; t < v.cosines.size(); ++t) {
      table.row() << t << trainer::to_string(v.variant) << cfg.gradsim.batch_size << std::size_t{1} << v.cosines[t]
                  << "gradsim";
    }
    m["mean"][trainer::to_string(v.variant)] = v.mean;
    m["std"][trainer::to_string(v.variant)] = v.std;
  }
  const double origin = rep.at(trainer::Variant::Origin).mean;
  const double privacy = rep.at(trainer::Variant::Privacy).mean;
  const double text = rep.at(trainer::Variant::TextTransform).mean;
  ctx.check("gradsim.origin_is_one", std::fabs(origin - 1.0) <= 1e-9, "mean origin cosine " + fmt(origin));
  ctx.check("gradsim.origin_exceeds_privacy", origin - privacy >= 1e-3,
            "origin - privacy = " + fmt(origin - privacy));
  ctx.check("gradsim.privacy_exceeds_text", privacy > text, "privacy " + fmt(privacy) + " vs text " + fmt(text));
  if (cfg.gradsim.mask_check) {
    const trainer::Variant only[] = {trainer::Variant::Privacy};
    const auto masked = trainer::run_similarity_protocol(base, s.d_f, s.privacy, cfg.gradsim.batch_size,
                                                         cfg.gradsim.n_trials, seed, only, {true});
    const auto& mv = masked.variants.front();
    double worst = 0.0;
    for (std::size_t t = 0; t < mv.cosines.size(); ++t) {
      table.row() << t << "privacy_masked" << cfg.gradsim.batch_size << std::size_t{1} << mv.cosines[t]
                  << "gradsim";
      worst = std::max(worst, std::fabs(mv.cosines[t] - 1.0));
    }
    m["mean"]["privacy_masked"] = mv.mean;
    m["std"]["privacy_masked"] = mv.std;
    ctx.check("gradsim.masked_strip_restores_one", worst <= 1e-9, "max |cos - 1| = " + fmt(worst));
  }
  ctx.report.metrics["gradsim"] = m;
}

void run_multistep(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& s = ctx.splits();
  const ModelParams& base = ctx.similarity_model();
  trainer::TrainConfig tc = cfg.train;
  tc.batch_size = cfg.gradsim.batch_size;
  tc.seed = derive_seed(cfg.seed, "multistep");
  ctx.log("multi-step similarity up to step " + std::to_string(cfg.multistep.steps.back()));
  const auto points = trainer::run_multistep_similarity(base, s.d_f, s.privacy, tc, cfg.multistep.steps,
                                                        trainer::Variant::Privacy, cfg.multistep.repetitions);
  auto& table = similarity_table(ctx.report);
  nlohmann::json m;
  for (const auto& p : points) {
    for (std::size_t r = 0; r < p.cosines.size(); ++r) {
      table.row() << r << "privacy" << tc.batch_size << p.step << p.cosines[r] << "multistep";
    }
    m["mean"][std::to_string(p.step)] = p.mean;
  }
  ctx.report.metrics["multistep"] = m;
  ctx.check("multistep.last_not_above_first", points.back().mean <= points.front().mean,
            "step " + std::to_string(points.back().step) + ": " + fmt(points.back().mean) + ", step " +
                std::to_string(points.front().step) + ": " + fmt(points.front().mean));
}

void run_batchsweep(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& s = ctx.splits();
  const ModelParams& base = ctx.similarity_model();
  ctx.log("batch-size sweep");
  const auto entries = trainer::batch_size_sweep(base, s.d_f, s.privacy, cfg.batchsweep.sizes,
                                                 cfg.batchsweep.n_trials, derive_seed(cfg.seed, "batchsweep"));
  auto& table = similarity_table(ctx.report);
  nlohmann::json m;
  for (const auto& e : entries) {
    for (std::size_t t = 0; t < e.stats.cosines.size(); ++t) {
      table.row() << t << "privacy" << e.batch_size << std::size_t{1} << e.stats.cosines[t] << "batchsweep";
    }
    m[std::to_string(e.batch_size)] = {{"mean", e.stats.mean}, {"variance", stats::variance(e.stats.cosines)}};
  }
  const auto lo = std::min_element(entries.begin(), entries.end(),
                                   [](const auto& a, const auto& b) { return a.batch_size < b.batch_size; });
  const auto hi = std::max_element(entries.begin(), entries.end(),
                                   [](const auto& a, const auto& b) { return a.batch_size < b.batch_size; });
  const auto mw = stats::mann_whitney(lo->stats.cosines, hi->stats.cosines);
  m["mann_whitney_p_less"] = mw.p_less;
  ctx.report.metrics["batchsweep"] = m;
  if (lo->batch_size != hi->batch_size) {
    const std::string tag = "B=" + std::to_string(lo->batch_size) + " vs B=" + std::to_string(hi->batch_size);
    ctx.check("batchsweep.small_batch_lower", lo->stats.mean < hi->stats.mean && mw.p_less < 0.05,
              tag + ": means " + fmt(lo->stats.mean) + " / " + fmt(hi->stats.mean) + ", p=" + fmt(mw.p_less));
    const double vlo = stats::variance(lo->stats.cosines);
    const double vhi = stats::variance(hi->stats.cosines);
    ctx.check("batchsweep.small_batch_more_variable", vlo >= vhi, tag + ": variances " + fmt(vlo) + " / " + fmt(vhi));
  }
}

void run_probe(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& s = ctx.splits();
  const ModelParams& tuned = ctx.finetuned_model();
  const ModelParams& base = ctx.reference_model();
  probing::ProbeConfig pc = cfg.probe;
  pc.seed = derive_seed(cfg.seed, "probe");
  CsvTable layer_table({"layer", "query_kind", "model_state", "split", "accuracy"});
  CsvTable pca_table({"model_state", "sample_id", "set_tag", "x", "y"});
  nlohmann::json m;
  const std::size_t n_test = s.d_p.test.size();
  const double se = stats::binomial_se(0.5, n_test);
  m["n_test"] = n_test;
  m["binomial_se"] = se;
  auto emit = [&](const probing::ProbeResult& r, const std::string& state) {
    for (std::size_t l = 0; l < r.test_accuracy.size(); ++l) {
      const std::string q = probing::to_string(r.query_kind);
      layer_table.row() << l << q << state << "train" << r.train_accuracy[l];
      layer_table.row() << l << q << state << "val" << r.val_accuracy[l];
      layer_table.row() << l << q << state << "test" << r.test_accuracy[l];
    }
    m[probing::to_string(r.query_kind)][state] = {{"best_layer", r.best_layer()},
                                                  {"best_test_accuracy", r.best_test_accuracy()},
                                                  {"test_accuracy", r.test_accuracy}};
  };
  for (probing::QueryKind q : {probing::QueryKind::Username, probing::QueryKind::UserId}) {
    ctx.log("probing query '" + probing::to_string(q) + "'");
    struct Reps {
      probing::Representations train, val, test;
    };
    auto collect = [&](const ModelParams& p) {
      return Reps{probing::collect_representations(p, s.d_p.train, q),
                  probing::collect_representations(p, s.d_p.val, q),
                  probing::collect_representations(p, s.d_p.test, q)};
    };
    const Reps rb = collect(base);
    const Reps rf = collect(tuned);
    const auto pb = probing::probe_layers(rb.train, rb.val, rb.test, pc, "base");
    const auto pf = probing::probe_layers(rf.train, rf.val, rf.test, pc, "finetuned");
    const auto control = probing::probe_layers(rf.train, rf.val, rf.test, pc, "control", true);
    emit(pb, "base");
    emit(pf, "finetuned");
    emit(control, "control");
    const std::string qn = probing::to_string(q);
    if (q == probing::QueryKind::Username) {
      const double gap = pf.best_test_accuracy() - pb.best_test_accuracy();
      m[qn]["gap"] = gap;
      ctx.check("probe.username_gap", gap >= 0.05,
                "finetuned best " + fmt(pf.best_test_accuracy()) + " (layer " + std::to_string(pf.best_layer()) +
                    ") vs base best " + fmt(pb.best_test_accuracy()) + " (layer " + std::to_string(pb.best_layer()) +
                    ")");
      ctx.check("probe.username_above_chance", pf.best_test_accuracy() >= 0.5 + 3.0 * se,
                "best " + fmt(pf.best_test_accuracy()) + " vs 0.5 + 3SE = " + fmt(0.5 + 3.0 * se));
      double worst = 0.0;
      for (double a : control.test_accuracy) worst = std::max(worst, std::fabs(a - 0.5));
      ctx.check("probe.shuffled_control_at_chance", worst <= 3.0 * se,
                "max |acc - 0.5| = " + fmt(worst) + " vs 3SE = " + fmt(3.0 * se));
      for (const auto& [reps, state] : {std::pair{&rb, "base"}, std::pair{&rf, "finetuned"}}) {
        const auto pca = probing::pca_project(reps->test.layers.back(), 2);
        pca_table.preamble().push_back(std::string("explained_variance_ratio,") + state + "," +
                                       fmt(pca.explained_ratio[0]) + "," + fmt(pca.explained_ratio[1]));
        for (std::size_t i = 0; i < reps->test.size(); ++i) {
          pca_table.row() << state << static_cast<std::size_t>(reps->test.sample_ids[i])
                          << (reps->test.labels[i] ? "U1" : "U2") << pca.coordinates(i, 0) << pca.coordinates(i, 1);
        }
      }
    } else {
      const double best = pf.best_test_accuracy();
      ctx.check("probe.user_id_above_chance", best >= 0.5 + 3.0 * se,
                "best " + fmt(best) + " (layer " + std::to_string(pf.best_layer()) + ") vs " + fmt(0.5 + 3.0 * se));
    }
    const auto dp_base = probing::direct_prompt_eval(base, s.d_p.test, q);
    const auto dp_tuned = probing::direct_prompt_eval(tuned, s.d_p.test, q);
    m["direct_prompt"][qn] = {{"base", dp_base.accuracy}, {"finetuned", dp_tuned.accuracy}};
    if (q == probing::QueryKind::UserId) {
      ctx.check("probe.user_id_direct_prompt_zero", dp_tuned.accuracy == 0.0,
                "exact-match accuracy " + fmt(dp_tuned.accuracy));
    }
  }
  m["reference"] = cfg.probe.reference;
  ctx.report.metrics["probe"] = m;
  ctx.report.tables.emplace("layerwise.csv", std::move(layer_table));
  ctx.report.tables.emplace("pca.csv", std::move(pca_table));
}

void run_mia(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& s = ctx.splits();
  const ModelParams& base = ctx.base_model();
  const ModelParams& tuned = ctx.finetuned_model();
  ctx.log("membership inference");
  const auto instances = mia::build_instances(s.privacy, cfg.mia.per_record, derive_seed(cfg.seed, "mia"));
  const auto rep = mia::run_mia_suite(base, tuned, instances, cfg.mia.k_percent);
  CsvTable table({"method", "model_state", "auc", "n_members", "n_nonmembers"});
  CsvTable scores({"instance_id", "member", "method", "model_state", "raw", "score"});
  nlohmann::json m;
  for (const auto& r : rep.rows) {
    table.row() << mia::to_string(r.method) << r.model_state << r.auc << r.n_members << r.n_nonmembers;
    m["auc"][mia::to_string(r.method)][r.model_state] = r.auc;
  }
  for (const auto& sc : rep.scores) {
    scores.row() << static_cast<std::size_t>(sc.instance_id) << (sc.member ? 1 : 0) << mia::to_string(sc.method)
                 << sc.model_state << sc.raw << sc.score;
  }
  for (mia::Method meth : mia::kAllMethods) {
    const double d = rep.auc(meth, "finetuned") - rep.auc(meth, "base");
    m["delta"][mia::to_string(meth)] = d;
    ctx.check("mia." + mia::to_string(meth) + "_marginal", std::fabs(d) <= 0.15, "AUC change " + fmt(d));
  }
  ctx.report.metrics["mia"] = m;
  ctx.report.tables.emplace("mia.csv", std::move(table));
  ctx.report.tables.emplace("mia_scores.csv", std::move(scores));
}

void run_covsim(Context& ctx) {
  const auto& cfg = ctx.cfg;
  ctx.log("covariance Monte Carlo");
  CsvTable table({"B", "entry_i", "entry_j", "emp_mean", "emp_var", "bound", "t", "emp_tail", "cheb_bound", "xi"});
  nlohmann::json m;
  std::vector<std::pair<std::size_t, std::vector<double>>> pooled;
  bool mean_ok = true, var_ok = true, tail_ok = true;
  for (std::size_t b : cfg.covsim.batch_sizes) {
    covsim::CovSimConfig c = cfg.covsim.base;
    c.batch = b;
    c.seed = derive_seed(cfg.seed, "covsim", b);
    const auto st = covsim::run_mc(c);
    double max_ratio = 0.0;
    for (const auto& e : st.entries) {
      for (const auto& t : e.tails) {
        table.row() << b << e.i << e.j << e.mean << e.variance << e.bound << t.t << t.empirical << t.bound << e.xi;
        const double se_tail = std::sqrt(t.bound * (1.0 - t.bound) / static_cast<double>(c.trials));
        if (t.empirical > t.bound + 3.0 * se_tail) tail_ok = false;
      }
      if (std::fabs(e.mean) > 4.0 * std::sqrt(e.variance / static_cast<double>(c.trials))) mean_ok = false;
      if (e.variance > e.bound) var_ok = false;
      max_ratio = std::max(max_ratio, e.variance / e.bound);
    }
    std::vector<double> tails;
    for (double k : c.t_multipliers) tails.push_back(covsim::pooled_tail(st, k));
    m[std::to_string(b)] = {{"max_var_over_bound", max_ratio}, {"pooled_tail", tails}};
    pooled.emplace_back(b, std::move(tails));
  }
  bool decreasing = true;
  std::sort(pooled.begin(), pooled.end());
  for (std::size_t i = 1; i < pooled.size(); ++i) {
    for (std::size_t k = 0; k < pooled[i].second.size(); ++k) {
      if (!(pooled[i].second[k] < pooled[i - 1].second[k])) decreasing = false;
    }
  }
  ctx.report.metrics["covsim"] = m;
  ctx.report.tables.emplace("covsim.csv", std::move(table));
  ctx.check("covsim.mean_near_zero", mean_ok, "every entry within 4 sqrt(Var/trials) of 0");
  ctx.check("covsim.variance_below_bound", var_ok, "every entry Var <= 3/(B-1) scaled bound");
  ctx.check("covsim.tail_below_chebyshev", tail_ok, "every entry and threshold");
  ctx.check("covsim.tail_decreasing_in_B", decreasing, "pooled tails at fixed t strictly decrease with B");
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config, ProgressFn progress) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  RunReport report;
  report.config = to_json(config);
  report.config_hash = config_hash(config);
  report.seed = config.seed;
  Context ctx{.cfg = config, .progress = progress, .report = report};
  const Recipe r = config.recipe;
  const bool full = r == Recipe::Full;
  try {
    // Shared state (corpus, models) is charged to the first recipe that needs it.
    auto timed = [&](Recipe which, void (*fn)(Context&)) {
      if (!full && r != which) return;
      const auto t0 = std::chrono::steady_clock::now();
      fn(ctx);
      report.recipe_seconds[to_string(which)] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    timed(Recipe::CovSim, run_covsim);
    timed(Recipe::GradSim, run_gradsim);
    timed(Recipe::BatchSweep, run_batchsweep);
    timed(Recipe::Multistep, run_multistep);
    timed(Recipe::Probe, run_probe);
    timed(Recipe::Mia, run_mia);
  } catch (const Error& e) {
    throw Error("recipe " + to_string(r) + ": " + e.what());
  }
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void write_report(RunReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  report.files.clear();
  for (const auto& [name, table] : report.tables) {
    table.write(dir / name);
    report.files.push_back(name);
  }
  nlohmann::json summary;
  summary["schema_version"] = kSummarySchemaVersion;
  summary["config_hash"] = report.config_hash;
  summary["seed"] = report.seed;
  summary["config"] = report.config;
  summary["metrics"] = report.metrics;
  summary["checks"] = nlohmann::json::array();
  for (const auto& c : report.checks) {
    summary["checks"].push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  }
  summary["all_passed"] = report.all_passed();
  summary["files"] = report.files;
  auto write_json = [&](const std::string& name, const nlohmann::json& j) {
    std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    os << j.dump(2) << "\n";
    if (!os) throw IoError("failed writing " + (dir / name).string());
  };
  write_json("summary.json", summary);
  write_json("timing.json", {{"wall_clock_seconds", report.wall_clock_seconds}, {"recipes", report.recipe_seconds}});
  report.files.push_back("summary.json");
  report.files.push_back("timing.json");
}

}  // namespace memlab
