#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtl/experiment.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool no_timestamp = false;
};

mtl::ExperimentConfig resolve(const Common& o) {
  auto c = o.config.empty() ? mtl::default_experiment() : mtl::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task training on synthetic vision tasks"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "Override the config seed");
  app.add_option("--out", common.out, "Output directory");
  app.add_flag("--no-timestamp", common.no_timestamp, "Omit wall-clock fields from JSON outputs");

  auto* generate = app.add_subcommand("generate", "Generate task datasets")->fallthrough();

  std::string resume;
  auto* train = app.add_subcommand("train", "Train the shared model")->fallthrough();
  train->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  std::string checkpoint, export_masks;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the eval splits")->fallthrough();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint (default <out>/checkpoint.mtlc)")->check(CLI::ExistingFile);
  eval->add_option("--export-masks", export_masks, "Directory for predicted and ground-truth masks");

  std::size_t window = 10;
  auto* diagnose = app.add_subcommand("diagnose", "Loss smoothing and gradient cosine diagnostics")->fallthrough();
  diagnose->add_option("--window", window, "Smoothing and pairwise window")->check(CLI::PositiveNumber);

  std::string pred, gt;
  bool class_aware = false;
  auto* pq = app.add_subcommand("pq", "Panoptic quality between two mask files")->fallthrough();
  pq->add_option("pred", pred, "Predicted mask file")->required()->check(CLI::ExistingFile);
  pq->add_option("gt", gt, "Ground-truth mask file")->required()->check(CLI::ExistingFile);
  pq->add_flag("--class-aware", class_aware, "Match only within equal classes");

  std::vector<std::size_t> dims{4, 16, 100, 1024, 10000};
  std::size_t pairs = 100000;
  auto* conc = app.add_subcommand("concentration", "Cosine concentration of random Gaussian pairs")->fallthrough();
  conc->add_option("--dims", dims, "Dimensions")->delimiter(',');
  conc->add_option("--pairs", pairs, "Pairs per dimension");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    mtl::RunMeta meta{!common.no_timestamp, &std::cerr};
    if (*generate) {
      mtl::cmd_generate(resolve(common), meta);
    } else if (*train) {
      std::optional<mtl::fs::path> r;
      if (!resume.empty()) r = resume;
      mtl::cmd_train(resolve(common), meta, r);
    } else if (*eval) {
      std::optional<mtl::fs::path> ck, ex;
      if (!checkpoint.empty()) ck = checkpoint;
      if (!export_masks.empty()) ex = export_masks;
      mtl::cmd_eval(resolve(common), ck, ex, meta);
    } else if (*diagnose) {
      mtl::cmd_diagnose(resolve(common), window, meta);
    } else if (*pq) {
      std::optional<mtl::fs::path> out;
      if (!common.out.empty()) out = common.out;
      mtl::cmd_pq(pred, gt, class_aware, out);
    } else if (*conc) {
      const auto seed = common.seed.value_or(common.config.empty() ? 0 : mtl::load_config(common.config).seed);
      const auto stats =
          mtl::cmd_concentration(dims, pairs, seed, common.out.empty() ? "runs/concentration" : common.out, meta);
      if (stats.size() >= 2) std::cout << "slope " << mtl::concentration_slope(stats) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return mtl::exit_code_for(e);
  }
  return 0;
}
