#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "memlab/corpus.hpp"
#include "memlab/errors.hpp"
#include "memlab/experiment.hpp"
#include "memlab/parallel.hpp"
#include "memlab/rng.hpp"

namespace {

void print_progress(const std::string& line) { std::cerr << "[lab] " << line << std::endl; }

int cmd_run(const std::string& path, std::optional<std::uint64_t> seed, std::optional<std::string> out,
            std::optional<std::string> recipe) {
  memlab::ExperimentConfig cfg = memlab::load_config(path);
  if (seed) cfg.seed = *seed;
  if (out) cfg.out_dir = *out;
  if (recipe) cfg.recipe = memlab::recipe_from_string(*recipe);
  cfg.validate();
  std::cerr << "[lab] recipe " << memlab::to_string(cfg.recipe) << ", seed " << cfg.seed << ", config "
            << memlab::config_hash(cfg) << ", threads " << memlab::max_threads() << std::endl;
  memlab::RunReport report = memlab::run_experiment(cfg, print_progress);
  memlab::write_report(report, cfg.out_dir);
  std::size_t failed = 0;
  for (const auto& c : report.checks) failed += c.passed ? 0 : 1;
  std::cout << "wrote " << report.files.size() << " files to " << cfg.out_dir.string() << " in "
            << report.wall_clock_seconds << " s; " << report.checks.size() - failed << "/" << report.checks.size()
            << " checks passed\n";
  return failed == 0 ? 0 : 1;
}

int cmd_check(const std::string& path, bool print) {
  const memlab::ExperimentConfig cfg = memlab::load_config(path);
  if (print) {
    std::cout << memlab::to_json(cfg).dump(2) << "\n";
    return 0;
  }
  std::cout << "ok: recipe " << memlab::to_string(cfg.recipe) << ", config " << memlab::config_hash(cfg) << "\n";
  return 0;
}

int cmd_corpus(const std::string& path, const std::string& out, std::size_t pgm) {
  const memlab::ExperimentConfig cfg = memlab::load_config(path);
  memlab::corpus::CorpusConfig cc = cfg.corpus;
  cc.seed = memlab::derive_seed(cfg.seed, "corpus");
  const auto splits = memlab::corpus::build_corpus(cc);
  std::filesystem::create_directories(out);
  std::ofstream os(std::filesystem::path(out) / "manifest.json");
  os << memlab::corpus::manifest(cc, splits).dump(2) << "\n";
  for (std::size_t i = 0; i < std::min(pgm, splits.d_f.size()); ++i) {
    memlab::corpus::write_pgm(std::filesystem::path(out) / ("d_f_" + std::to_string(splits.d_f[i].id) + ".pgm"),
                              splits.d_f[i].image);
  }
  for (std::size_t i = 0; i < std::min(pgm, splits.d_p.train.size()); ++i) {
    const auto& s = splits.d_p.train[i];
    memlab::corpus::write_pgm(std::filesystem::path(out) / ("d_p_" + std::to_string(s.id) + ".pgm"), s.image);
  }
  std::cout << "d_f " << splits.d_f.size() << ", d_p " << splits.d_p.train.size() << "/" << splits.d_p.val.size()
            << "/" << splits.d_p.test.size() << " -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"memorization lab: synthetic multimodal fine-tuning experiments"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, recipe;
  auto* run = app.add_subcommand("run", "run a recipe and write CSV/JSON reports");
  run->add_option("config", config, "config file (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "master seed (overrides the config)");
  run->add_option("--out", out, "output directory (overrides the config)");
  run->add_option("--recipe", recipe, "gradsim|multistep|batchsweep|probe|mia|covsim|full");

  auto* check = app.add_subcommand("check", "validate a config without running it");
  check->add_option("config", config, "config file (JSON)")->required()->check(CLI::ExistingFile);
  bool print = false;
  check->add_flag("--print", print, "print the resolved config with every default filled in");

  std::string corpus_out = "corpus";
  std::size_t pgm = 0;
  auto* corpus = app.add_subcommand("corpus", "write the corpus manifest and optional PGM images");
  corpus->add_option("config", config, "config file (JSON)")->required()->check(CLI::ExistingFile);
  corpus->add_option("--out", corpus_out, "output directory");
  corpus->add_option("--pgm", pgm, "number of images per split to export");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config, seed, out, recipe);
    if (*check) return cmd_check(config, print);
    if (*corpus) return cmd_corpus(config, corpus_out, pgm);
  } catch (const memlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
