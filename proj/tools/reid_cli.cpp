#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "reid/reid.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string kernel;
};

reid::ExperimentConfig resolve(const Globals& g) {
  if (g.config.empty()) throw reid::Error(reid::ErrorKind::invalid_config, "--config is required");
  reid::ExperimentConfig cfg = reid::load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.output_dir = g.out;
  if (!g.kernel.empty()) cfg.kernel = reid::parse_rank_backend(g.kernel);
  return cfg;
}

void print_report(const std::string& label, const reid::EvalReport& r) {
  std::cout << label << ": rank1=" << r.rank1 << " rank20=" << r.rank20 << " mAP=" << r.map
            << " queries=" << r.valid_queries << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental person re-identification toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--kernel", g.kernel, "Ranking backend")->check(CLI::IsMember({"reference", "native"}));
  app.add_flag_function("--version", [](std::int64_t) {
    std::cout << reid::kToolVersion << '\n';
    throw CLI::Success();
  }, "Print the version");

  std::string root, layout = "market";
  auto* ingest = app.add_subcommand("ingest", "Index a dataset tree into manifest.jsonl");
  ingest->add_option("--root", root, "Dataset root")->required();
  ingest->add_option("--layout", layout, "market or duke")->check(CLI::IsMember({"market", "duke"}));

  std::size_t phase = 0;
  auto* train = app.add_subcommand("train", "Train one phase");
  train->add_option("--phase", phase, "Phase index, 1-based")->required()->check(CLI::PositiveNumber);

  std::string checkpoint, task;
  auto* eval = app.add_subcommand("eval", "Evaluate trained tasks from a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint (default: latest in --out)");
  eval->add_option("--task", task, "Only this task");

  auto* incremental = app.add_subcommand("run-incremental", "Train and evaluate every task in order");
  bool quiet = false;
  incremental->add_flag("--quiet", quiet, "No per-row progress");

  std::string param;
  std::vector<double> values;
  bool parallel = false;
  auto* sweep = app.add_subcommand("sweep", "One incremental run per parameter value");
  sweep->add_option("--param", param, "lambda or batch_size")->required()->check(CLI::IsMember({"lambda", "batch_size"}));
  sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',')->check(CLI::Number);
  sweep->add_flag("--parallel", parallel, "Run values concurrently");

  reid::SyntheticSpec fixture;
  std::string fixture_dir;
  auto* make_fixture = app.add_subcommand("make-fixture", "Write a synthetic Market-style dataset");
  make_fixture->add_option("dir", fixture_dir, "Target directory")->required();
  make_fixture->add_option("--identities", fixture.identities, "Number of identities");
  make_fixture->add_option("--first-id", fixture.first_person_id, "First person id");
  make_fixture->add_option("--train-per-id", fixture.train_per_id, "Training images per identity");
  make_fixture->add_option("--gallery-per-id", fixture.gallery_per_id, "Cross-camera gallery images per identity");
  make_fixture->add_option("--cameras", fixture.cameras, "Camera count (>= 2)");
  make_fixture->add_option("--distractors", fixture.distractors, "Extra gallery images with id -1");
  make_fixture->add_option("--fixture-seed", fixture.seed, "Rendering seed");

  auto* schema = app.add_subcommand("schema", "Print the config JSON schema");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*ingest) {
      const std::string out = g.out.empty() ? "." : g.out;
      const auto s = reid::cmd_ingest(root, reid::parse_layout(layout), out);
      std::cout << "train=" << s.train << " query=" << s.query << " gallery=" << s.gallery
                << " train_identities=" << s.train_identities << '\n';
    } else if (*train) {
      const auto cfg = resolve(g);
      print_report("phase " + std::to_string(phase), reid::cmd_train(cfg, phase, cfg.output_dir));
    } else if (*eval) {
      const auto cfg = resolve(g);
      for (const auto& r : reid::cmd_eval(cfg, checkpoint, cfg.output_dir, task)) print_report(r.task, r.report);
    } else if (*incremental) {
      const auto cfg = resolve(g);
      const auto rows = reid::cmd_run_incremental(cfg, cfg.output_dir, !quiet);
      std::cout << reid::kResultsHeader << '\n';
      for (std::size_t i = 0; i < rows.size(); ++i)
        std::cout << i + 1 << ',' << rows[i].task << ',' << rows[i].report.rank1 << ',' << rows[i].report.rank20
                  << ',' << rows[i].report.map << '\n';
    } else if (*sweep) {
      const auto cfg = resolve(g);
      for (const auto& r : reid::cmd_sweep(cfg, reid::parse_sweep_param(param), values, cfg.output_dir, parallel))
        std::cout << param << '=' << r.value << " rank1=" << r.rank1 << (r.best ? " *" : "") << '\n';
    } else if (*make_fixture) {
      reid::make_synthetic_dataset(fixture_dir, fixture);
    } else if (*schema) {
      std::cout << reid::kConfigSchema << '\n';
    }
  } catch (const reid::Error& e) {
    std::cerr << "error [" << reid::to_string(e.kind()) << "]: " << e.what() << '\n';
    return reid::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
