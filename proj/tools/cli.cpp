#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "pchnet/error.hpp"
#include "pchnet/experiment.hpp"

namespace pchnet::cli {

namespace {

namespace fs = std::filesystem;

std::string fmt(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return {buf, res.ptr};
}

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  bool wall_time = false;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool config_required,
                const std::string& seed_help = "Override the training seed") {
  auto* config = cmd->add_option("--config", o.config, "JSON experiment file");
  if (config_required) config->required();
  cmd->add_option("--seed", o.seed, seed_help);
  cmd->add_option("--out", o.out_dir, "Output directory")->capture_default_str();
}

ExperimentSpec load_spec(const CommonOptions& o) {
  ExperimentSpec spec = load_experiment_spec(o.config);
  if (o.seed) spec.train.seed = *o.seed;
  if (o.wall_time) spec.train.record_wall_time = true;
  return spec;
}

int cmd_train(const CommonOptions& o, std::ostream& out) {
  const ExperimentSpec spec = load_spec(o);
  const Dataset data = load_dataset(spec.dataset);
  const auto widths = spec.widths_for(data);
  const TrainReport report =
      train(initial_model(widths, spec.activation, spec.train.seed), data, spec.criterion, spec.train);
  write_file_atomic(fs::path(o.out_dir) / "metrics.jsonl", metrics_jsonl(report));
  const std::string summary = train_summary_csv(spec.train, report);
  write_file_atomic(fs::path(o.out_dir) / "summary.csv", summary);
  out << summary;
  return kSuccess;
}

int cmd_grid(const CommonOptions& o, std::size_t threads, std::ostream& out, std::ostream& err) {
  const ExperimentSpec spec = load_spec(o);
  const Dataset data = load_dataset(spec.dataset);
  const auto widths = spec.widths_for(data);
  const GridResult result =
      grid_search(data, widths, spec.activation, spec.criterion, spec.train, spec.grid, threads);

  std::string lines;
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    if (!result.runs[i].report) {
      err << "run " << i << " diverged: " << result.runs[i].failure << '\n';
      continue;
    }
    for (const EpochMetrics& m : result.runs[i].report->epochs) {
      nlohmann::json line = {{"run", i},           {"epoch", m.epoch},   {"loss", m.loss},
                             {"test_acc", m.test_acc}, {"wall_s", m.wall_s}};
      lines += line.dump();
      lines += '\n';
    }
  }
  write_file_atomic(fs::path(o.out_dir) / "grid_metrics.jsonl", lines);
  const std::string summary = grid_summary_csv(result);
  write_file_atomic(fs::path(o.out_dir) / "grid.csv", summary);
  out << summary;
  return result.best_by_loss ? kSuccess : kNumericalFailure;
}

int cmd_compare(const CommonOptions& o, std::optional<std::size_t> steps, std::ostream& out) {
  ExperimentSpec spec = load_spec(o);
  if (steps) spec.compare_steps = *steps;
  if (spec.compare_steps < 1) throw ConfigError("--steps must be at least 1");
  const Dataset data = load_dataset(spec.dataset);
  const CurvatureTable table = compare_curvatures(spec, data);
  const std::string csv = table.to_csv();
  write_file_atomic(fs::path(o.out_dir) / "curvature_errors.csv", csv);
  out << csv;
  return kSuccess;
}

int cmd_bound(const CommonOptions& o, std::optional<std::size_t> layer,
              std::optional<double> lipschitz, std::optional<std::size_t> batch,
              std::ostream& out) {
  ExperimentSpec spec = load_spec(o);
  if (layer) spec.bound_check.layer = *layer;
  if (lipschitz) spec.bound_check.lipschitz = *lipschitz;
  if (batch) spec.bound_check.batch_size = *batch;
  const Dataset data = load_dataset(spec.dataset);
  const std::vector<BoundCheckRow> rows = run_bound_check(spec, data);

  std::ostringstream csv;
  csv << "layer,lhs,rhs,status\n";
  bool all_hold = true;
  for (const BoundCheckRow& r : rows) {
    const char* status = r.check.holds() ? "PASS" : "FAIL";
    all_hold = all_hold && r.check.holds();
    out << "layer=" << r.layer << " lhs=" << fmt(r.check.lhs) << " rhs=" << fmt(r.check.rhs) << ' '
        << status << '\n';
    csv << r.layer << ',' << fmt(r.check.lhs) << ',' << fmt(r.check.rhs) << ',' << status << '\n';
  }
  write_file_atomic(fs::path(o.out_dir) / "bound_check.csv", csv.str());
  return all_hold ? kSuccess : kNumericalFailure;
}

struct BlobOptions {
  std::optional<std::size_t> classes;
  std::optional<std::size_t> dim;
  std::optional<std::size_t> per_class;
  std::optional<double> spread;
};

int cmd_gen_data(const CommonOptions& o, const BlobOptions& b, std::ostream& out) {
  DatasetSource source;
  if (!o.config.empty()) source = load_experiment_spec(o.config).dataset;
  if (b.classes || b.dim || b.per_class || b.spread) source.kind = DatasetSource::Kind::Blobs;
  if (b.classes) source.classes = *b.classes;
  if (b.dim) source.dim = *b.dim;
  if (b.per_class) source.per_class = *b.per_class;
  if (b.spread) source.spread = *b.spread;
  if (o.seed) source.seed = *o.seed;
  const Dataset data = load_dataset(source);
  const fs::path path = fs::path(o.out_dir) / "data.csv";
  write_file_atomic(path, to_csv(data));
  out << "wrote " << data.size() << " rows (" << data.num_classes << " classes, dim "
      << data.dim() << ") to " << path.string() << '\n';
  return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Second-order training and curvature experiments for fully-connected networks",
               "pchnet"};
  app.require_subcommand(1);

  CommonOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train one configuration, emit per-epoch metrics");
  add_common(train_cmd, train_opts, true);
  train_cmd->add_flag("--wall-time", train_opts.wall_time, "Record wall-clock seconds (breaks byte-identical reruns)");

  CommonOptions grid_opts;
  std::size_t threads = 1;
  auto* grid_cmd = app.add_subcommand("grid", "Grid search over the configured axes");
  add_common(grid_cmd, grid_opts, true);
  grid_cmd->add_flag("--wall-time", grid_opts.wall_time, "Record wall-clock seconds (breaks byte-identical reruns)");
  grid_cmd->add_option("--threads", threads, "Concurrent runs")->check(CLI::PositiveNumber);

  CommonOptions compare_opts;
  std::optional<std::size_t> steps;
  auto* compare_cmd = app.add_subcommand(
      "compare-curvature", "Layer-wise errors of curvature approximations vs the exact blocks");
  add_common(compare_cmd, compare_opts, true);
  compare_cmd->add_option("--steps", steps, "Optimizer steps to average over");

  CommonOptions bound_opts;
  std::optional<std::size_t> bound_layer;
  std::optional<double> lipschitz;
  std::optional<std::size_t> bound_batch;
  auto* bound_cmd =
      app.add_subcommand("bound-check", "Check the covariance bound of the expectation approximation");
  add_common(bound_cmd, bound_opts, true);
  bound_cmd->add_option("--layer", bound_layer, "Layer number t (2..k)");
  bound_cmd->add_option("--lipschitz", lipschitz, "Lipschitz constant L");
  bound_cmd->add_option("--batch", bound_batch, "Batch size");

  CommonOptions gen_opts;
  BlobOptions blobs;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a dataset as CSV (label first)");
  add_common(gen_cmd, gen_opts, false, "Blob generator seed");
  gen_cmd->add_option("--classes", blobs.classes, "Blob classes");
  gen_cmd->add_option("--dim", blobs.dim, "Feature dimension");
  gen_cmd->add_option("--per-class", blobs.per_class, "Instances per class");
  gen_cmd->add_option("--spread", blobs.spread, "Std. deviation around each center");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kSuccess;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n"
        << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kConfigError;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_opts, out);
    if (grid_cmd->parsed()) return cmd_grid(grid_opts, threads, out, err);
    if (compare_cmd->parsed()) return cmd_compare(compare_opts, steps, out);
    if (bound_cmd->parsed()) return cmd_bound(bound_opts, bound_layer, lipschitz, bound_batch, out);
    if (gen_cmd->parsed()) return cmd_gen_data(gen_opts, blobs, out);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    // ConfigError, DimensionError and SymmetryError.
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kConfigError;
}

}  // namespace pchnet::cli
