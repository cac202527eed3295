#include "pchnet/experiment.hpp"

#include <charconv>
#include <cmath>
#include <initializer_list>
#include <set>
#include <sstream>

#include "json.hpp"

#include "pchnet/error.hpp"

namespace pchnet {

namespace {

using nlohmann::json;

std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return {buf, res.ptr};
}

void reject_unknown(const json& obj, const char* where, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("key '") + key + "': " + e.what());
  }
}

std::size_t get_count(const json& obj, const char* key, std::size_t fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(std::string("key '") + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

template <typename T>
std::vector<T> get_list(const json& obj, const char* key, std::vector<T> fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<std::vector<T>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("key '") + key + "': " + e.what());
  }
}

Criterion parse_criterion(const json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "cross_entropy") return Criterion::cross_entropy();
    if (name == "sigmoid_gate") return Criterion::sigmoid_gate();
    throw ConfigError("unknown criterion '" + name + "'");
  }
  reject_unknown(j, "criterion", {"type", "delta", "epsilon"});
  const auto type = get_or<std::string>(j, "type", "cross_entropy");
  if (type == "cross_entropy") return Criterion::cross_entropy();
  if (type == "sigmoid_gate") {
    return Criterion::sigmoid_gate(get_or(j, "delta", 5.0), get_or(j, "epsilon", 0.2));
  }
  throw ConfigError("unknown criterion '" + type + "'");
}

DatasetSource parse_dataset(const json& j) {
  reject_unknown(j, "dataset",
                 {"type", "classes", "dim", "per_class", "spread", "seed", "images", "labels",
                  "path", "label_column", "header", "normalize", "test_fraction"});
  DatasetSource s;
  const auto type = get_or<std::string>(j, "type", "blobs");
  if (type == "blobs") {
    s.kind = DatasetSource::Kind::Blobs;
  } else if (type == "idx") {
    s.kind = DatasetSource::Kind::Idx;
  } else if (type == "csv") {
    s.kind = DatasetSource::Kind::Csv;
  } else {
    throw ConfigError("unknown dataset type '" + type + "'");
  }
  s.classes = get_count(j, "classes", s.classes);
  s.dim = get_count(j, "dim", s.dim);
  s.per_class = get_count(j, "per_class", s.per_class);
  s.spread = get_or(j, "spread", s.spread);
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed);
  s.images = get_or<std::string>(j, "images", "");
  s.labels = get_or<std::string>(j, "labels", "");
  s.path = get_or<std::string>(j, "path", "");
  s.csv.label_column = get_count(j, "label_column", 0);
  s.csv.header = get_or(j, "header", false);
  s.csv.normalize = get_or(j, "normalize", true);
  s.test_fraction = get_or(j, "test_fraction", s.test_fraction);
  if (s.kind == DatasetSource::Kind::Idx && (s.images.empty() || s.labels.empty())) {
    throw ConfigError("idx dataset needs 'images' and 'labels'");
  }
  if (s.kind == DatasetSource::Kind::Csv && s.path.empty()) throw ConfigError("csv dataset needs 'path'");
  return s;
}

Optimizer parse_optimizer(const json& j) {
  reject_unknown(j, "optimizer",
                 {"type", "momentum", "curvature", "solver", "alpha", "max_cg", "eps_cg",
                  "hvp_mode", "pi_policy", "sherman_morrison_first_layer"});
  const auto type = get_or<std::string>(j, "type", "sgd");
  if (type == "sgd") return SgdMomentum{get_or(j, "momentum", 0.9)};
  if (type != "second_order") throw ConfigError("unknown optimizer '" + type + "'");
  SecondOrder so;
  so.curvature = CurvatureKind::parse(get_or<std::string>(j, "curvature", "pch1"));
  so.solver = parse_solver_kind(get_or<std::string>(j, "solver", "ea_cg"));
  so.solver_cfg.alpha = get_or(j, "alpha", so.solver_cfg.alpha);
  so.solver_cfg.max_cg = get_count(j, "max_cg", so.solver_cfg.max_cg);
  so.solver_cfg.eps_cg = get_or(j, "eps_cg", so.solver_cfg.eps_cg);
  so.solver_cfg.hvp_mode = parse_hvp_mode(get_or<std::string>(j, "hvp_mode", "ea_one_rank"));
  so.solver_cfg.pi_policy = parse_pi_policy(get_or<std::string>(j, "pi_policy", "unit"));
  so.kfi_sherman_morrison_first_layer = get_or(j, "sherman_morrison_first_layer", false);
  return so;
}

TrainConfig parse_train(const json& j) {
  reject_unknown(j, "train",
                 {"learning_rate", "batch_size", "epochs", "seed", "optimizer", "record_wall_time"});
  TrainConfig cfg;
  cfg.learning_rate = get_or(j, "learning_rate", cfg.learning_rate);
  cfg.batch_size = get_count(j, "batch_size", cfg.batch_size);
  cfg.epochs = get_count(j, "epochs", cfg.epochs);
  cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
  cfg.record_wall_time = get_or(j, "record_wall_time", cfg.record_wall_time);
  if (j.contains("optimizer")) cfg.optimizer = parse_optimizer(j.at("optimizer"));
  return cfg;
}

GridSpec default_grid(const TrainConfig& cfg) {
  GridSpec g{{cfg.learning_rate}, {cfg.batch_size}, {}, {}, {}};
  if (const auto* so = std::get_if<SecondOrder>(&cfg.optimizer)) {
    g.alpha = {so->solver_cfg.alpha};
    g.max_cg = {so->solver_cfg.max_cg};
    g.eps_cg = {so->solver_cfg.eps_cg};
  }
  return g;
}

}  // namespace

const std::vector<std::size_t>& default_hidden_widths() {
  static const std::vector<std::size_t> widths{32, 16, 16, 8, 8, 8, 8};
  return widths;
}

std::vector<std::size_t> ExperimentSpec::widths_for(const Dataset& data) const {
  std::vector<std::size_t> widths = architecture;
  if (widths.empty()) {
    widths.push_back(data.dim());
    widths.insert(widths.end(), default_hidden_widths().begin(), default_hidden_widths().end());
    widths.push_back(data.num_classes);
  }
  if (widths.size() < 2) throw ConfigError("architecture needs at least two widths");
  if (widths.front() != data.dim()) {
    throw ConfigError("architecture input width " + std::to_string(widths.front()) +
                      " does not match dataset dimension " + std::to_string(data.dim()));
  }
  if (widths.back() != data.num_classes) {
    throw ConfigError("architecture output width " + std::to_string(widths.back()) +
                      " does not match class count " + std::to_string(data.num_classes));
  }
  return widths;
}

ExperimentSpec parse_experiment_spec(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, "config",
                 {"architecture", "activation", "criterion", "dataset", "train", "grid",
                  "compare_steps", "bound_check"});
  ExperimentSpec spec;
  spec.architecture = get_list<std::size_t>(j, "architecture", {});
  for (std::size_t w : spec.architecture)
    if (w == 0) throw ConfigError("architecture widths must be >= 1");
  spec.activation = parse_activation(get_or<std::string>(j, "activation", "sigmoid"));
  if (j.contains("criterion")) spec.criterion = parse_criterion(j.at("criterion"));
  if (j.contains("dataset")) spec.dataset = parse_dataset(j.at("dataset"));
  if (j.contains("train")) spec.train = parse_train(j.at("train"));
  spec.train.validate();

  spec.grid = default_grid(spec.train);
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    reject_unknown(g, "grid", {"learning_rate", "batch_size", "alpha", "max_cg", "eps_cg"});
    spec.grid.learning_rate = get_list(g, "learning_rate", spec.grid.learning_rate);
    spec.grid.batch_size = get_list(g, "batch_size", spec.grid.batch_size);
    spec.grid.alpha = get_list(g, "alpha", spec.grid.alpha);
    spec.grid.max_cg = get_list(g, "max_cg", spec.grid.max_cg);
    spec.grid.eps_cg = get_list(g, "eps_cg", spec.grid.eps_cg);
  }

  spec.compare_steps = get_count(j, "compare_steps", spec.compare_steps);
  if (spec.compare_steps < 1) throw ConfigError("compare_steps must be at least 1");
  if (j.contains("bound_check")) {
    const json& b = j.at("bound_check");
    reject_unknown(b, "bound_check", {"layer", "lipschitz", "batch_size"});
    if (b.contains("layer")) spec.bound_check.layer = get_count(b, "layer", 0);
    if (b.contains("lipschitz")) spec.bound_check.lipschitz = get_or(b, "lipschitz", 0.0);
    spec.bound_check.batch_size = get_count(b, "batch_size", spec.bound_check.batch_size);
  }
  return spec;
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  ExperimentSpec spec =
      parse_experiment_spec(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  // Dataset paths are relative to the config file.
  const std::filesystem::path base = path.parent_path();
  for (std::string* p : {&spec.dataset.images, &spec.dataset.labels, &spec.dataset.path}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).string();
  }
  return spec;
}

Dataset load_dataset(const DatasetSource& source) {
  Dataset d;
  switch (source.kind) {
    case DatasetSource::Kind::Blobs:
      d = synth_blobs(source.classes, source.dim, source.per_class, source.spread, source.seed);
      break;
    case DatasetSource::Kind::Idx:
      d = load_idx(source.images, source.labels);
      break;
    case DatasetSource::Kind::Csv:
      d = load_csv(source.path, source.csv);
      break;
  }
  split_train_test(d, source.test_fraction, source.seed);
  d.validate();
  return d;
}

std::string metrics_jsonl(const TrainReport& report) {
  std::string out;
  for (const EpochMetrics& m : report.epochs) {
    json line = {{"epoch", m.epoch}, {"loss", m.loss}, {"test_acc", m.test_acc}, {"wall_s", m.wall_s}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::string train_summary_csv(const TrainConfig& cfg, const TrainReport& report) {
  const EpochMetrics& last = report.epochs.back();
  std::ostringstream out;
  out << "optimizer,learning_rate,batch_size,epochs,steps,final_loss,final_test_acc,wall_s\n";
  out << cfg.optimizer_name() << ',' << format_double(cfg.learning_rate) << ',' << cfg.batch_size
      << ',' << cfg.epochs << ',' << report.steps << ',' << format_double(last.loss) << ','
      << format_double(last.test_acc) << ',' << format_double(last.wall_s) << '\n';
  return out.str();
}

std::string grid_summary_csv(const GridResult& result) {
  std::ostringstream out;
  out << "run,optimizer,learning_rate,batch_size,alpha,max_cg,eps_cg,status,final_loss,"
         "final_test_acc,wall_s,best_loss,best_acc\n";
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    const GridRun& run = result.runs[i];
    out << i << ',' << run.config.optimizer_name() << ',' << format_double(run.config.learning_rate)
        << ',' << run.config.batch_size << ',';
    if (const auto* so = std::get_if<SecondOrder>(&run.config.optimizer)) {
      out << format_double(so->solver_cfg.alpha) << ',' << so->solver_cfg.max_cg << ','
          << format_double(so->solver_cfg.eps_cg) << ',';
    } else {
      out << ",,,";
    }
    if (run.report) {
      const EpochMetrics& last = run.report->epochs.back();
      out << "ok," << format_double(last.loss) << ',' << format_double(last.test_acc) << ','
          << format_double(last.wall_s) << ',';
    } else {
      out << "diverged,,,,";
    }
    out << (result.best_by_loss == i ? 1 : 0) << ',' << (result.best_by_accuracy == i ? 1 : 0)
        << '\n';
  }
  return out.str();
}

std::string CurvatureTable::to_csv() const {
  std::ostringstream out;
  out << "layer";
  for (const auto& m : methods) out << ',' << m;
  out << '\n';
  const std::size_t layers = error.empty() ? 0 : error.front().size();
  for (std::size_t l = 0; l < layers; ++l) {
    out << "Layer-" << (l + 1);
    for (std::size_t m = 0; m < methods.size(); ++m) out << ',' << format_double(error[m][l]);
    out << '\n';
  }
  out << "Total";
  for (double t : total) out << ',' << format_double(t);
  out << '\n';
  return out.str();
}

CurvatureTable compare_curvatures(const ExperimentSpec& spec, const Dataset& data) {
  const std::vector<std::size_t> widths = spec.widths_for(data);
  std::vector<CurvatureKind> kinds{CurvatureKind::fisher()};
  // The Gauss-Newton blocks are only PSD for convex criteria.
  if (spec.criterion.is_convex()) kinds.push_back(CurvatureKind::gauss_newton());
  kinds.push_back(CurvatureKind::pch1());
  kinds.push_back(CurvatureKind::pch2());

  CurvatureTable table;
  for (const auto& k : kinds) table.methods.push_back(k.name());
  table.error.assign(kinds.size(), Vector(widths.size() - 1, 0.0));

  Trainer trainer(initial_model(widths, spec.activation, spec.train.seed), spec.criterion,
                  spec.train);
  std::size_t epoch = 1;
  while (table.steps < spec.compare_steps) {
    const auto batches = trainer.epoch_batches(data, epoch++);
    if (batches.empty()) throw ConfigError("compare_curvatures: dataset has no training rows");
    for (const auto& rows : batches) {
      if (table.steps == spec.compare_steps) break;
      const Batch batch = gather(data, rows);
      const FcnnModel& model = trainer.model();
      const ForwardTrace trace = forward(model, batch.inputs);
      const CurvatureInputs in = curvature_inputs(model, trace, spec.criterion, batch.labels);
      const std::vector<Matrix> exact =
          propagate_bias_hessian(model, trace, in, {Propagation::PerInstance, true, std::nullopt});
      for (std::size_t m = 0; m < kinds.size(); ++m) {
        const std::vector<LayerCurvature> curv = ea_curvature(model, trace, in, kinds[m]);
        std::vector<Matrix> approx;
        approx.reserve(curv.size());
        for (const auto& c : curv) approx.push_back(c.hb);
        const ErrorReport report = layerwise_error(approx, exact);
        for (std::size_t l = 0; l < report.per_layer.size(); ++l) table.error[m][l] += report.per_layer[l];
      }
      trainer.step(batch);
      ++table.steps;
    }
  }

  const double inv = 1.0 / static_cast<double>(table.steps);
  for (auto& per_layer : table.error) {
    double sum_sq = 0.0;
    for (double& e : per_layer) {
      e *= inv;
      sum_sq += e * e;
    }
    table.total.push_back(std::sqrt(sum_sq));
  }
  return table;
}

std::vector<BoundCheckRow> run_bound_check(const ExperimentSpec& spec, const Dataset& data) {
  const std::vector<std::size_t> widths = spec.widths_for(data);
  const std::size_t k = widths.size() - 1;
  const std::size_t batch_size = std::min(spec.bound_check.batch_size, data.train.size());
  const double lipschitz = spec.bound_check.lipschitz.value_or(lipschitz_constant(spec.activation));

  std::vector<std::size_t> layers;
  if (spec.bound_check.layer) {
    const std::size_t t = *spec.bound_check.layer;
    if (t < 2 || t > k) {
      throw ConfigError("bound_check layer must lie in [2, " + std::to_string(k) + "]");
    }
    layers.push_back(t);
  } else {
    for (std::size_t t = 2; t <= k; ++t) layers.push_back(t);
  }

  const FcnnModel model = initial_model(widths, spec.activation, spec.train.seed);
  const std::vector<std::size_t> rows(data.train.begin(),
                                      data.train.begin() + static_cast<std::ptrdiff_t>(batch_size));
  const Batch batch = gather(data, rows);
  const ForwardTrace trace = forward(model, batch.inputs);

  std::vector<BoundCheckRow> out;
  for (std::size_t t : layers) {
    out.push_back({t, covariance_bound_check(model, trace, spec.criterion, batch.labels, t - 1,
                                             lipschitz)});
  }
  return out;
}

}  // namespace pchnet
