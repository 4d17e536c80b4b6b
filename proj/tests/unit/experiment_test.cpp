#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "memlab/csv.hpp"
#include "memlab/errors.hpp"
#include "memlab/experiment.hpp"
#include "oracles.hpp"

using namespace memlab;
namespace fs = std::filesystem;

namespace {

std::string error_of(const nlohmann::json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_run(Recipe r) {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.recipe = r;
  c.seed = 5;
  c.corpus.n_samples = 60;
  c.model.d_model = 16;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.patch_size = 8;
  c.model.max_seq_len = 64;
  c.pretrain.n_samples = 16;
  c.pretrain.public_records = 10;
  c.gradsim.batch_size = 2;
  c.gradsim.n_trials = 2;
  c.multistep.steps = {1, 2};
  c.multistep.repetitions = 1;
  c.batchsweep.sizes = {1, 2};
  c.batchsweep.n_trials = 3;
  c.mia.per_record = 1;
  c.probe.epochs = 1;
  c.covsim.base.trials = 200;
  c.covsim.batch_sizes = {2, 4};
  return c;
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  const ExperimentConfig c = ExperimentConfig::defaults();
  c.validate();
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(back.gradsim.model_state, "init");
}

TEST(Config, UnknownKeyNamesPath) {
  EXPECT_NE(error_of({{"gradsim", {{"nope", 1}}}}).find("gradsim.nope"), std::string::npos);
  EXPECT_NE(error_of({{"colour", 1}}).find("colour"), std::string::npos);
}

TEST(Config, WrongTypeNamesPath) {
  EXPECT_NE(error_of({{"train", {{"epochs", "two"}}}}).find("train.epochs"), std::string::npos);
  EXPECT_NE(error_of({{"corpus", {{"k", -3}}}}).find("corpus.k"), std::string::npos);
  EXPECT_NE(error_of({{"recipe", "everything"}}).find("recipe"), std::string::npos);
}

TEST(Config, InvalidValues) {
  EXPECT_FALSE(error_of({{"corpus", {{"r", 1.5}}}}).empty());
  EXPECT_FALSE(error_of({{"gradsim", {{"model_state", "pretrained"}}}}).empty());
  EXPECT_FALSE(error_of({{"multistep", {{"steps", {10, 1}}}}}).empty());
  EXPECT_FALSE(error_of({{"mia", {{"k_percent", 0.0}}}}).empty());
  EXPECT_FALSE(error_of({{"model", {{"n_heads", 3}}}}).empty());
}

TEST(Config, PresetsApplyBeforeExplicitKeys) {
  const ExperimentConfig p = config_from_json({{"preset", "paper-defaults"}});
  EXPECT_EQ(p.corpus.r, 0.5);
  EXPECT_EQ(p.corpus.k, 5u);
  EXPECT_EQ(p.train.batch_size, 32u);
  EXPECT_EQ(p.probe.learning_rate, 1e-4);
  EXPECT_EQ(p.probe.batch_size, 16u);
  EXPECT_EQ(p.probe.epochs, 10u);
  const ExperimentConfig q = config_from_json({{"preset", "paper-defaults"}, {"train", {{"batch_size", 4}}}});
  EXPECT_EQ(q.train.batch_size, 4u);
  const ExperimentConfig l = config_from_json({{"preset", "paper-lowrank"}});
  EXPECT_TRUE(l.model.lowrank.enabled);
  EXPECT_EQ(l.model.lowrank.rank, 128u);
  EXPECT_EQ(l.model.lowrank.alpha, 256.0);
  EXPECT_FALSE(error_of({{"preset", "paper-huge"}}).empty());
}

TEST(Config, HashIgnoresOutDirOnly) {
  ExperimentConfig a = ExperimentConfig::defaults();
  ExperimentConfig b = a;
  b.out_dir = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.seed = 2;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, EmptyFileGivesDefaultsAndSaveLoads) {
  const fs::path dir = fs::temp_directory_path() / "memlab_cfg_test";
  fs::create_directories(dir);
  { std::ofstream(dir / "empty.json"); }
  EXPECT_EQ(to_json(load_config(dir / "empty.json")).dump(), to_json(ExperimentConfig::defaults()).dump());
  ExperimentConfig c = tiny_run(Recipe::Mia);
  save_config(c, dir / "saved.json");
  EXPECT_EQ(config_hash(load_config(dir / "saved.json")), config_hash(c));
  { std::ofstream(dir / "bad.json") << "{ not json"; }
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), IoError);
  fs::remove_all(dir);
}

TEST(Recipes, CovsimTableShape) {
  ExperimentConfig c = tiny_run(Recipe::CovSim);
  const RunReport r = run_experiment(c);
  const CsvTable& t = r.tables.at("covsim.csv");
  EXPECT_EQ(t.header(), (std::vector<std::string>{"B", "entry_i", "entry_j", "emp_mean", "emp_var", "bound", "t",
                                                   "emp_tail", "cheb_bound", "xi"}));
  EXPECT_EQ(t.rows().size(), 2u * 16u * 3u);
  for (const auto& chk : r.checks) EXPECT_FALSE(chk.name.empty());
}

TEST(Recipes, FullTinyRunIsByteIdentical) {
  const fs::path a = fs::temp_directory_path() / "memlab_run_a";
  const fs::path b = fs::temp_directory_path() / "memlab_run_b";
  fs::remove_all(a);
  fs::remove_all(b);
  ExperimentConfig c = tiny_run(Recipe::Full);
  RunReport ra = run_experiment(c);
  write_report(ra, a);
  RunReport rb = run_experiment(c);
  write_report(rb, b);
  for (const char* f : {"summary.json", "similarity.csv", "layerwise.csv", "pca.csv", "mia.csv", "covsim.csv"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_TRUE(fs::exists(a / "timing.json"));
  const auto summary = nlohmann::json::parse(slurp(a / "summary.json"));
  EXPECT_EQ(summary.at("schema_version"), kSummarySchemaVersion);
  EXPECT_EQ(summary.at("config_hash"), config_hash(c));
  EXPECT_EQ(summary.at("seed"), 5);
  const auto layer = read_csv(a / "layerwise.csv");
  EXPECT_EQ(layer.header(), (std::vector<std::string>{"layer", "query_kind", "model_state", "split", "accuracy"}));
  const auto sim = read_csv(a / "similarity.csv");
  EXPECT_EQ(sim.header(),
            (std::vector<std::string>{"trial_id", "variant", "batch_size", "step_count", "cosine", "recipe"}));
  const auto pca = read_csv(a / "pca.csv");
  EXPECT_EQ(pca.header(), (std::vector<std::string>{"model_state", "sample_id", "set_tag", "x", "y"}));
  const auto mia = read_csv(a / "mia.csv");
  EXPECT_EQ(mia.header(), (std::vector<std::string>{"method", "model_state", "auc", "n_members", "n_nonmembers"}));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Recipes, SeedChangesResults) {
  ExperimentConfig c = tiny_run(Recipe::GradSim);
  const RunReport r1 = run_experiment(c);
  c.seed = 6;
  const RunReport r2 = run_experiment(c);
  EXPECT_NE(r1.tables.at("similarity.csv").to_string(), r2.tables.at("similarity.csv").to_string());
}

TEST(Recipes, SummaryMetricsEqualCsvAggregates) {
  const RunReport r = run_experiment(tiny_run(Recipe::Full));
  const nlohmann::json& m = r.metrics;
  auto table = [&](const std::string& name) { return parse_csv(r.tables.at(name).to_string()); };

  const CsvTable sim = table("similarity.csv");
  std::map<std::string, std::vector<double>> groups;
  for (const auto& row : sim.rows()) {
    const std::string& recipe = row[sim.column("recipe")];
    const std::string key = recipe == "gradsim"     ? row[sim.column("variant")]
                            : recipe == "multistep" ? row[sim.column("step_count")]
                                                    : row[sim.column("batch_size")];
    groups[recipe + "/" + key].push_back(std::stod(row[sim.column("cosine")]));
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  std::size_t compared = 0;
  for (const auto& [key, vals] : groups) {
    const std::string recipe = key.substr(0, key.find('/'));
    const std::string k = key.substr(key.find('/') + 1);
    const double reported = recipe == "gradsim"     ? m.at("gradsim").at("mean").at(k).get<double>()
                            : recipe == "multistep" ? m.at("multistep").at("mean").at(k).get<double>()
                                                    : m.at("batchsweep").at(k).at("mean").get<double>();
    EXPECT_NEAR(reported, mean(vals), 1e-12) << key;
    ++compared;
  }
  EXPECT_GE(compared, 9u);

  const CsvTable scores = table("mia_scores.csv");
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> split;
  for (const auto& row : scores.rows()) {
    auto& [pos, neg] = split[row[scores.column("method")] + "/" + row[scores.column("model_state")]];
    (row[scores.column("member")] == "1" ? pos : neg).push_back(std::stod(row[scores.column("score")]));
  }
  ASSERT_EQ(split.size(), 6u);
  for (const auto& [key, pn] : split) {
    const std::string method = key.substr(0, key.find('/'));
    const std::string state = key.substr(key.find('/') + 1);
    EXPECT_NEAR(m.at("mia").at("auc").at(method).at(state).get<double>(), oracle::pairwise_auc(pn.first, pn.second),
                1e-12)
        << key;
  }

  const CsvTable layer = table("layerwise.csv");
  std::map<std::string, double> best;
  for (const auto& row : layer.rows()) {
    if (row[layer.column("split")] != "test") continue;
    const std::string key = row[layer.column("query_kind")] + "/" + row[layer.column("model_state")];
    best[key] = std::max(best[key], std::stod(row[layer.column("accuracy")]));
  }
  for (const char* q : {"username", "user_id"})
    for (const char* st : {"base", "finetuned"})
      EXPECT_DOUBLE_EQ(m.at("probe").at(q).at(st).at("best_test_accuracy").get<double>(),
                       best.at(std::string(q) + "/" + st))
          << q << " " << st;
}

TEST(Recipes, CleanReferenceMatchesFinetuneWhenNothingIsWatermarked) {
  ExperimentConfig c = tiny_run(Recipe::Probe);
  c.corpus.r = 0.0;
  c.probe.reference = "clean_finetune";
  const RunReport r = run_experiment(c);
  const auto& probe = r.metrics.at("probe");
  EXPECT_EQ(probe.at("reference"), "clean_finetune");
  for (const char* q : {"username", "user_id"})
    EXPECT_EQ(probe.at(q).at("base").at("test_accuracy"), probe.at(q).at("finetuned").at("test_accuracy")) << q;
  EXPECT_EQ(r.metrics.at("finetune"), r.metrics.at("finetune_clean"));
}

TEST(Recipes, PretrainedReferenceSkipsCleanFinetune) {
  ExperimentConfig c = tiny_run(Recipe::Probe);
  const RunReport r = run_experiment(c);
  EXPECT_EQ(r.metrics.at("probe").at("reference"), "pretrained");
  EXPECT_FALSE(r.metrics.contains("finetune_clean"));
  c.probe.reference = "other";
  EXPECT_THROW(c.validate(), ConfigError);
}
