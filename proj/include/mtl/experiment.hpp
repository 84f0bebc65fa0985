#pragma once

// Experiment runner: JSON configuration, dataset generation, training,
// evaluation and diagnostics with CSV outputs. Each cmd_* function is one
// CLI subcommand.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtl/diagnostics.hpp"
#include "mtl/files.hpp"
#include "mtl/metrics.hpp"
#include "mtl/tasks.hpp"
#include "mtl/trainer.hpp"

namespace mtl {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// A task is either generated from a recipe or read from a dataset file.
struct TaskSource {
  std::optional<TaskRecipe> recipe;
  std::optional<fs::path> file;

  std::string name() const { return recipe ? recipe->name : file->stem().string(); }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<TaskSource> tasks;
  ModelConfig model;
  std::optional<std::vector<double>> alpha;  // nullopt: uniform
  std::uint64_t T = 5000;
  std::size_t batch_size = 8;
  AdamConfig adam;
  std::uint64_t log_every = 500;
  std::uint64_t checkpoint_every = 0;
  std::optional<TraceMode> diagnostics = TraceMode::exact;
  EvalOptions eval;
  fs::path output_dir = "runs/default";
  std::optional<fs::path> data_dir;  // default: <output_dir>/data

  fs::path datasets() const { return data_dir ? *data_dir : output_dir / "data"; }
  SamplerConfig sampler() const { return alpha ? SamplerConfig(*alpha) : SamplerConfig::uniform(tasks.size()); }
};

inline ExperimentConfig default_experiment() {
  ExperimentConfig c;
  for (auto& r : default_suite()) c.tasks.push_back({r, std::nullopt});
  return c;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Rows are written with '\n' endings and fields quoted when needed.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : out_(path, std::ios::trunc) {
    if (!out_) throw DataError("cannot write " + path.string());
    row(header);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << csv_field(fields[i]);
    out_ << '\n';
  }

  ~CsvWriter() { out_.flush(); }

 private:
  std::ofstream out_;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(where + ": unknown key \"" + key + "\"");
  }
}

inline LayerSpec parse_layer(const json& j) {
  const auto type = j.at("type").get<std::string>();
  if (type == "conv") {
    reject_unknown(j, {"type", "in", "out", "kernel", "stride", "padding"}, "conv layer");
    return ConvLayer{get_or<std::size_t>(j, "in", 0), j.at("out").get<std::size_t>(), get_or<std::size_t>(j, "kernel", 3),
                     get_or<std::size_t>(j, "stride", 1), get_or<std::size_t>(j, "padding", 0)};
  }
  if (type == "dense") {
    reject_unknown(j, {"type", "in", "out"}, "dense layer");
    return DenseLayer{get_or<std::size_t>(j, "in", 0), j.at("out").get<std::size_t>()};
  }
  if (type == "relu") return ActivationLayer{Activation::relu};
  if (type == "sigmoid") return ActivationLayer{Activation::sigmoid};
  if (type == "softmax") return ActivationLayer{Activation::softmax};
  if (type == "global_avg_pool") return GlobalAvgPoolLayer{};
  if (type == "upsample") return UpsampleLayer{get_or<std::size_t>(j, "factor", 2)};
  throw ConfigError("unknown layer type \"" + type + "\"");
}

inline json layer_json(const LayerSpec& spec) {
  return std::visit(
      [](const auto& l) -> json {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, ConvLayer>) {
          return {{"type", "conv"}, {"in", l.in_channels}, {"out", l.out_channels}, {"kernel", l.kernel},
                  {"stride", l.stride}, {"padding", l.padding}};
        } else if constexpr (std::is_same_v<L, DenseLayer>) {
          return {{"type", "dense"}, {"in", l.in_features}, {"out", l.out_features}};
        } else if constexpr (std::is_same_v<L, ActivationLayer>) {
          return {{"type", activation_name(l.kind)}};
        } else if constexpr (std::is_same_v<L, GlobalAvgPoolLayer>) {
          return {{"type", "global_avg_pool"}};
        } else {
          return {{"type", "upsample"}, {"factor", l.factor}};
        }
      },
      spec);
}

inline const char* style_name(ShapeStyle s) {
  switch (s) {
    case ShapeStyle::mixed: return "mixed";
    case ShapeStyle::rectangles: return "rectangles";
    case ShapeStyle::disks: return "disks";
  }
  return "?";
}

inline ShapeStyle parse_style(const std::string& s) {
  if (s == "mixed") return ShapeStyle::mixed;
  if (s == "rectangles") return ShapeStyle::rectangles;
  if (s == "disks") return ShapeStyle::disks;
  throw ConfigError("unknown shape style \"" + s + "\"");
}

inline fs::path resolve_path(const fs::path& p, const fs::path& base) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

inline TaskSource parse_task(const json& j, const fs::path& base) {
  if (j.contains("file")) {
    reject_unknown(j, {"file"}, "task");
    return {std::nullopt, resolve_path(j.at("file").get<std::string>(), base)};
  }
  reject_unknown(j,
                 {"name", "kind", "classes", "image_size", "n_train", "n_eval", "difficulty", "max_instances", "shapes",
                  "min_size", "max_size", "noise"},
                 "task");
  TaskRecipe r;
  r.name = j.at("name").get<std::string>();
  r.kind = parse_task_kind(get_or<std::string>(j, "kind", "classification"));
  r.num_classes = get_or<std::size_t>(j, "classes", r.kind == TaskKind::binary_segmentation ? 1 : 2);
  r.image_size = get_or<std::size_t>(j, "image_size", r.image_size);
  r.n_train = get_or<std::size_t>(j, "n_train", r.n_train);
  r.n_eval = get_or<std::size_t>(j, "n_eval", r.n_eval);
  r.difficulty = get_or<double>(j, "difficulty", r.difficulty);
  r.max_instances = get_or<std::size_t>(j, "max_instances", r.max_instances);
  r.segmentation.style = parse_style(get_or<std::string>(j, "shapes", "mixed"));
  r.segmentation.min_size = get_or<std::size_t>(j, "min_size", r.segmentation.min_size);
  r.segmentation.max_size = get_or<std::size_t>(j, "max_size", r.segmentation.max_size);
  r.segmentation.noise = get_or<double>(j, "noise", r.segmentation.noise);
  return {r, std::nullopt};
}

inline json task_json(const TaskSource& t) {
  if (t.file) return {{"file", t.file->string()}};
  const auto& r = *t.recipe;
  json j{{"name", r.name}, {"kind", task_kind_name(r.kind)}, {"classes", r.num_classes}, {"image_size", r.image_size},
         {"n_train", r.n_train}, {"n_eval", r.n_eval}};
  if (r.kind == TaskKind::classification) {
    j["difficulty"] = r.difficulty;
  } else {
    j["max_instances"] = r.max_instances;
    j["shapes"] = style_name(r.segmentation.style);
    j["min_size"] = r.segmentation.min_size;
    j["max_size"] = r.segmentation.max_size;
    j["noise"] = r.segmentation.noise;
  }
  return j;
}

}  // namespace detail

inline json config_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  json tasks = json::array();
  for (const auto& t : c.tasks) tasks.push_back(detail::task_json(t));
  j["tasks"] = tasks;
  json enc = json::array();
  for (const auto& l : c.model.encoder) enc.push_back(detail::layer_json(l));
  j["encoder"] = enc;
  j["classification_activation"] = activation_name(c.model.classification_activation);
  json stages = json::array();
  for (const auto& s : c.model.segmentation.stages) stages.push_back({{"factor", s.factor}, {"kernel", s.kernel}});
  j["segmentation_decoder"] = {{"stages", stages}, {"hidden_channels", c.model.segmentation.hidden_channels}};
  if (c.alpha) {
    j["alpha"] = *c.alpha;
  } else {
    j["alpha"] = "uniform";
  }
  j["T"] = c.T;
  j["batch_size"] = c.batch_size;
  j["adam"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  j["log_every"] = c.log_every;
  j["checkpoint_every"] = c.checkpoint_every;
  j["diagnostics"] = !c.diagnostics ? "off" : *c.diagnostics == TraceMode::exact ? "exact" : "sketch";
  j["eval"] = {{"batch_size", c.eval.batch_size}, {"min_area", c.eval.min_area}};
  j["output_dir"] = c.output_dir.string();
  if (c.data_dir) j["data_dir"] = c.data_dir->string();
  return j;
}

// Parses a config document; relative paths resolve against base. Missing
// keys keep their defaults; unknown keys are errors.
inline ExperimentConfig parse_config(const json& j, const fs::path& base = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    detail::reject_unknown(j,
                           {"seed", "tasks", "encoder", "classification_activation", "segmentation_decoder", "alpha",
                            "T", "batch_size", "adam", "log_every", "checkpoint_every", "diagnostics", "eval",
                            "output_dir", "data_dir"},
                           "config");
    ExperimentConfig c = default_experiment();
    c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
    if (j.contains("tasks") && !(j.at("tasks").is_string() && j.at("tasks").get<std::string>() == "default")) {
      c.tasks.clear();
      for (const auto& t : j.at("tasks")) c.tasks.push_back(detail::parse_task(t, base));
    }
    if (j.contains("encoder")) {
      c.model.encoder.clear();
      for (const auto& l : j.at("encoder")) c.model.encoder.push_back(detail::parse_layer(l));
    }
    if (j.contains("classification_activation")) {
      const auto a = j.at("classification_activation").get<std::string>();
      if (a == "softmax") {
        c.model.classification_activation = Activation::softmax;
      } else if (a == "sigmoid") {
        c.model.classification_activation = Activation::sigmoid;
      } else {
        throw ConfigError("classification_activation must be softmax or sigmoid");
      }
    }
    if (j.contains("segmentation_decoder")) {
      const auto& s = j.at("segmentation_decoder");
      detail::reject_unknown(s, {"stages", "hidden_channels"}, "segmentation_decoder");
      c.model.segmentation.hidden_channels =
          detail::get_or<std::size_t>(s, "hidden_channels", c.model.segmentation.hidden_channels);
      if (s.contains("stages")) {
        c.model.segmentation.stages.clear();
        for (const auto& st : s.at("stages")) {
          c.model.segmentation.stages.push_back(
              {detail::get_or<std::size_t>(st, "factor", 2), detail::get_or<std::size_t>(st, "kernel", 3)});
        }
      }
    }
    if (j.contains("alpha")) {
      const auto& a = j.at("alpha");
      if (a.is_string()) {
        if (a.get<std::string>() != "uniform") throw ConfigError("alpha must be \"uniform\" or a list");
      } else {
        c.alpha = a.get<std::vector<double>>();
      }
    }
    c.T = detail::get_or<std::uint64_t>(j, "T", c.T);
    c.batch_size = detail::get_or<std::size_t>(j, "batch_size", c.batch_size);
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      detail::reject_unknown(a, {"lr", "beta1", "beta2", "eps"}, "adam");
      c.adam.lr = detail::get_or<double>(a, "lr", c.adam.lr);
      c.adam.beta1 = detail::get_or<double>(a, "beta1", c.adam.beta1);
      c.adam.beta2 = detail::get_or<double>(a, "beta2", c.adam.beta2);
      c.adam.eps = detail::get_or<double>(a, "eps", c.adam.eps);
    }
    c.log_every = detail::get_or<std::uint64_t>(j, "log_every", c.log_every);
    c.checkpoint_every = detail::get_or<std::uint64_t>(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("diagnostics")) {
      const auto d = j.at("diagnostics").get<std::string>();
      if (d == "off") {
        c.diagnostics.reset();
      } else if (d == "exact") {
        c.diagnostics = TraceMode::exact;
      } else if (d == "sketch") {
        c.diagnostics = TraceMode::sketch;
      } else {
        throw ConfigError("diagnostics must be off, exact or sketch");
      }
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      detail::reject_unknown(e, {"batch_size", "min_area"}, "eval");
      c.eval.batch_size = detail::get_or<std::size_t>(e, "batch_size", c.eval.batch_size);
      c.eval.min_area = detail::get_or<std::size_t>(e, "min_area", c.eval.min_area);
    }
    if (j.contains("output_dir")) {
      c.output_dir = detail::resolve_path(j.at("output_dir").get<std::string>(), base);
    }
    if (j.contains("data_dir")) {
      c.data_dir = detail::resolve_path(j.at("data_dir").get<std::string>(), base);
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

// Task specs as configured: recipes give them directly, dataset files are
// read. Task i always gets id i.
inline std::vector<TaskSpec> task_specs(const ExperimentConfig& c) {
  std::vector<TaskSpec> specs;
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    const auto& t = c.tasks[i];
    TaskSpec s = t.recipe ? t.recipe->spec(static_cast<std::uint32_t>(i)) : load_dataset(*t.file).spec;
    s.id = static_cast<std::uint32_t>(i);
    specs.push_back(std::move(s));
  }
  return specs;
}

// Checks every invariant of the config without touching the output
// directory. Problems surface as ConfigError.
inline void validate_config(const ExperimentConfig& c) {
  try {
    if (c.tasks.empty()) throw ConfigError("config has no tasks");
    for (const auto& t : c.tasks) {
      if (t.file && !fs::exists(*t.file)) throw ConfigError("dataset file " + t.file->string() + " does not exist");
      if (t.recipe) t.recipe->validate();
    }
    if (c.alpha && c.alpha->size() != c.tasks.size()) {
      throw ConfigError("alpha has " + std::to_string(c.alpha->size()) + " entries for " +
                        std::to_string(c.tasks.size()) + " tasks");
    }
    (void)c.sampler();
    if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (c.log_every == 0) throw ConfigError("log_every must be >= 1");
    if (c.eval.batch_size == 0 || c.eval.min_area == 0) throw ConfigError("eval batch_size and min_area must be >= 1");
    c.adam.validate();
    build_model(task_specs(c), c.model, c.seed);
  } catch (const ConfigError&) {
    throw;
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

inline fs::path dataset_path(const ExperimentConfig& c, std::size_t i) {
  if (c.tasks.at(i).file) return *c.tasks[i].file;
  char prefix[8];
  std::snprintf(prefix, sizeof prefix, "%02zu_", i);
  return c.datasets() / (prefix + c.tasks[i].recipe->name + ".mtld");
}

// Loads every task's dataset and checks it against the configured spec.
inline std::vector<TaskDataset> load_datasets(const ExperimentConfig& c) {
  const auto specs = task_specs(c);
  std::vector<TaskDataset> out;
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    const auto path = dataset_path(c, i);
    if (!fs::exists(path)) throw DataError("dataset " + path.string() + " is missing (run generate first)");
    auto ds = load_dataset(path);
    if (ds.spec.kind != specs[i].kind || ds.spec.num_classes != specs[i].num_classes ||
        ds.spec.input_shape != specs[i].input_shape) {
      throw DataError("dataset " + path.string() + " does not match task " + std::to_string(i) + " of the config");
    }
    ds.spec.id = static_cast<std::uint32_t>(i);
    out.push_back(std::move(ds));
  }
  return out;
}

struct RunMeta {
  bool timestamp = true;
  std::ostream* progress = &std::cerr;
};

inline json manifest_entry(const TaskDataset& ds, const fs::path& path) {
  return {{"index", ds.spec.id},       {"name", ds.spec.name},
          {"kind", task_kind_name(ds.spec.kind)}, {"classes", ds.spec.num_classes},
          {"input_shape", ds.spec.input_shape},   {"examples", ds.size()},
          {"train", ds.indices(Split::train).size()}, {"eval", ds.indices(Split::eval).size()},
          {"seed", ds.seed},                      {"path", path.filename().string()}};
}

// One dataset file per recipe task plus manifest.json in the data directory.
inline std::vector<fs::path> cmd_generate(const ExperimentConfig& c, const RunMeta& meta = {}) {
  validate_config(c);
  fs::create_directories(c.datasets());
  json manifest{{"seed", c.seed}, {"tasks", json::array()}};
  std::vector<fs::path> written;
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    const auto path = dataset_path(c, i);
    TaskDataset ds;
    if (c.tasks[i].recipe) {
      ds = generate_task(*c.tasks[i].recipe, static_cast<std::uint32_t>(i), c.seed);
      save_dataset(path, ds);
      written.push_back(path);
    } else {
      ds = load_dataset(path);
      ds.spec.id = static_cast<std::uint32_t>(i);
    }
    auto entry = manifest_entry(ds, path);
    entry["path"] = c.tasks[i].file ? path.string() : path.filename().string();
    manifest["tasks"].push_back(entry);
    *meta.progress << "task " << i << " " << ds.spec.name << ": " << ds.size() << " examples -> " << path.string()
                   << '\n';
  }
  if (meta.timestamp) manifest["timestamp"] = detail::utc_timestamp();
  detail::write_json(c.datasets() / "manifest.json", manifest);
  return written;
}

struct TrainOutputs {
  TrainState state;
  TrainLog log;  // full log, including rows carried over from a resumed run
  double seconds = 0.0;
};

namespace detail {

inline void write_log_csv(const fs::path& path, const std::vector<LogRecord>& records) {
  CsvWriter csv(path, {"t", "task_id", "loss"});
  for (const auto& r : records) csv.row({std::to_string(r.t), std::to_string(r.task), format_double(r.loss)});
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += ch;
    }
  }
  out.push_back(std::move(field));
  return out;
}

}  // namespace detail

inline std::vector<LogRecord> read_log_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "t,task_id,loss") throw DataError(path.string() + ": not a training log");
  std::vector<LogRecord> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw DataError(path.string() + ": malformed row " + std::to_string(row));
    try {
      out.push_back({std::stoull(f[0]), static_cast<std::uint32_t>(std::stoul(f[1])), std::stod(f[2])});
    } catch (const std::exception&) {
      throw DataError(path.string() + ": malformed row " + std::to_string(row));
    }
  }
  return out;
}

// Runs the training loop and writes train_log.csv, checkpoint.mtlc,
// grad_trace.mtlt (diagnostics on) and run_info.json into the output dir.
// With `resume`, training continues from that checkpoint and rows of an
// existing log/trace from before the checkpoint are kept.
inline TrainOutputs cmd_train(const ExperimentConfig& c, const RunMeta& meta = {},
                              const std::optional<fs::path>& resume = std::nullopt) {
  validate_config(c);
  const auto data = load_datasets(c);
  std::vector<TaskSpec> specs;
  for (const auto& d : data) specs.push_back(d.spec);
  TrainOutputs out{init_train_state(specs, c.model, c.seed, c.adam), {}, 0.0};
  std::vector<LogRecord> carried;
  std::optional<GradTrace> carried_trace;
  if (resume) {
    restore_checkpoint(out.state, load_checkpoint(*resume));
    if (out.state.seed != c.seed) throw DataError("checkpoint was written with seed " + std::to_string(out.state.seed));
    if (out.state.t > c.T) throw DataError("checkpoint is past T");
    const auto old_log = c.output_dir / "train_log.csv";
    if (fs::exists(old_log)) {
      for (const auto& r : read_log_csv(old_log)) {
        if (r.t < out.state.t) carried.push_back(r);
      }
    }
    const auto old_trace = c.output_dir / "grad_trace.mtlt";
    if (c.diagnostics && fs::exists(old_trace)) {
      const auto tr = load_trace(old_trace);
      carried_trace.emplace(tr.mode(), tr.sketch_seed());
      for (const auto& e : tr.entries()) {
        if (e.t < out.state.t) carried_trace->append_recorded(e, tr.source_dim());
      }
    }
  }
  fs::create_directories(c.output_dir);
  if (c.checkpoint_every > 0) fs::create_directories(c.output_dir / "checkpoints");

  TrainConfig tc;
  tc.T = c.T;
  tc.batch_size = c.batch_size;
  tc.seed = c.seed;
  tc.adam = c.adam;
  tc.trace = c.diagnostics;
  const auto start = std::chrono::steady_clock::now();
  out.log = train(out.state, data, c.sampler(), tc, [&](const TrainState& s) {
    if (s.t % c.log_every == 0 || s.t == c.T) *meta.progress << "iteration " << s.t << "/" << c.T << '\n';
    if (c.checkpoint_every > 0 && s.t % c.checkpoint_every == 0) {
      save_checkpoint(c.output_dir / "checkpoints" / ("ckpt_" + std::to_string(s.t) + ".mtlc"), s);
    }
  });
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  carried.insert(carried.end(), out.log.records.begin(), out.log.records.end());
  out.log.records = std::move(carried);
  if (out.log.trace && carried_trace) {
    for (const auto& e : out.log.trace->entries()) carried_trace->append_recorded(e, out.log.trace->source_dim());
    out.log.trace = std::move(carried_trace);
  }
  detail::write_log_csv(c.output_dir / "train_log.csv", out.log.records);
  save_checkpoint(c.output_dir / "checkpoint.mtlc", out.state);
  if (out.log.trace) save_trace(c.output_dir / "grad_trace.mtlt", *out.log.trace);
  json info{{"command", "train"}, {"config", config_json(c)}, {"iterations", out.state.t}};
  if (resume) info["resumed_from"] = resume->string();
  if (meta.timestamp) {
    info["timestamp"] = detail::utc_timestamp();
    info["seconds"] = out.seconds;
  }
  detail::write_json(c.output_dir / "run_info.json", info);
  return out;
}

// Evaluates a checkpoint on every task's eval split and writes results.csv.
// With export_dir, the first few eval images of each segmentation task are
// saved as predicted/ground-truth mask files.
inline std::vector<TaskEval> cmd_eval(const ExperimentConfig& c, const std::optional<fs::path>& checkpoint = std::nullopt,
                                      const std::optional<fs::path>& export_dir = std::nullopt,
                                      const RunMeta& meta = {}) {
  validate_config(c);
  const auto data = load_datasets(c);
  std::vector<TaskSpec> specs;
  for (const auto& d : data) specs.push_back(d.spec);
  auto state = init_train_state(specs, c.model, c.seed, c.adam);
  const auto path = checkpoint ? *checkpoint : c.output_dir / "checkpoint.mtlc";
  if (!fs::exists(path)) throw DataError("checkpoint " + path.string() + " is missing");
  restore_checkpoint(state, load_checkpoint(path));
  std::vector<TaskEval> results;
  for (std::size_t i = 0; i < data.size(); ++i) {
    results.push_back(evaluate_task(state.model, i, data[i], Split::eval, c.eval));
    *meta.progress << results.back().name << ": " << (results.back().metric == MetricKind::pq ? "PQ " : "accuracy ")
                   << results.back().value << '\n';
  }
  fs::create_directories(c.output_dir);
  detail::CsvWriter csv(c.output_dir / "results.csv",
                        {"task_id", "task", "kind", "metric", "value", "sq", "rq", "examples"});
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const bool pq = r.metric == MetricKind::pq;
    csv.row({std::to_string(i), r.name, task_kind_name(data[i].spec.kind), pq ? "pq" : "accuracy",
             detail::format_double(r.value), pq ? detail::format_double(r.sq) : "", pq ? detail::format_double(r.rq) : "",
             std::to_string(r.examples)});
  }
  if (export_dir) {
    fs::create_directories(*export_dir);
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!is_segmentation(data[i].spec.kind)) continue;
      const auto idx = data[i].indices(Split::eval);
      for (std::size_t n = 0; n < std::min<std::size_t>(4, idx.size()); ++n) {
        const std::string stem = "task" + std::to_string(i) + "_eval" + std::to_string(n);
        save_mask(*export_dir / (stem + "_pred.mtlm"),
                  predict_mask(state.model, i, data[i], idx[n], c.eval.min_area));
        save_mask(*export_dir / (stem + "_gt.mtlm"), data[i].mask(idx[n]));
      }
    }
  }
  return results;
}

struct DiagnoseOutputs {
  std::vector<double> smoothed;
  ConsecutiveSeries consecutive;
  PairwiseCosMatrix matrix;
};

// Reads train_log.csv and grad_trace.mtlt from the run directory and writes
// loss_smoothed.csv, consecutive_cosine.csv and pairwise_cosine.csv.
inline DiagnoseOutputs cmd_diagnose(const ExperimentConfig& c, std::size_t window = 10, const RunMeta& meta = {}) {
  if (window == 0) throw ConfigError("window must be >= 1");
  const auto log_path = c.output_dir / "train_log.csv";
  const auto trace_path = c.output_dir / "grad_trace.mtlt";
  if (!fs::exists(log_path)) throw DataError("no training log at " + log_path.string());
  if (!fs::exists(trace_path)) {
    throw DataError("no gradient trace at " + trace_path.string() + " (was the run trained with diagnostics off?)");
  }
  const auto records = read_log_csv(log_path);
  const auto trace = load_trace(trace_path);
  std::vector<double> loss;
  for (const auto& r : records) loss.push_back(r.loss);
  DiagnoseOutputs out{rolling_mean(loss, window), consecutive_trace(trace), {}};
  std::uint32_t k = static_cast<std::uint32_t>(c.tasks.size());
  for (const auto& e : trace.entries()) k = std::max(k, e.task + 1);
  out.matrix = pairwise_matrix(out.consecutive, k, window);

  {
    detail::CsvWriter csv(c.output_dir / "loss_smoothed.csv", {"t", "task_id", "loss", "loss_smoothed"});
    for (std::size_t i = 0; i < records.size(); ++i) {
      csv.row({std::to_string(records[i].t), std::to_string(records[i].task), detail::format_double(records[i].loss),
               detail::format_double(out.smoothed[i])});
    }
  }
  {
    detail::CsvWriter csv(c.output_dir / "consecutive_cosine.csv",
                          {"t", "task_prev", "task_curr", "cos_similarity", "cos_distance"});
    for (const auto& p : out.consecutive.points) {
      csv.row({std::to_string(p.t), std::to_string(p.task_prev), std::to_string(p.task_curr),
               detail::format_double(p.similarity), detail::format_double(p.distance)});
    }
  }
  {
    detail::CsvWriter csv(c.output_dir / "pairwise_cosine.csv", {"task_prev", "task_curr", "cos_distance", "count"});
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const auto& d = out.matrix.at(i, j);
        csv.row({std::to_string(i), std::to_string(j), d ? detail::format_double(*d) : "",
                 std::to_string(out.matrix.count_at(i, j))});
      }
    }
  }
  *meta.progress << records.size() << " log rows, " << out.consecutive.points.size() << " consecutive pairs ("
                 << out.consecutive.skipped.size() << " skipped), " << k << "x" << k << " matrix\n";
  return out;
}

// PQ between two mask files, printed and optionally written as pq.csv.
inline PQReport cmd_pq(const fs::path& pred, const fs::path& gt, bool class_aware,
                       const std::optional<fs::path>& out_dir = std::nullopt, std::ostream& os = std::cout) {
  const auto p = load_mask(pred);
  const auto g = load_mask(gt);
  PQReport r;
  try {
    r = panoptic_quality(p, g, class_aware);
  } catch (const ShapeError& e) {
    throw DataError(e.what());
  }
  os << "PQ " << detail::format_double(r.pq) << "\nSQ " << detail::format_double(r.sq) << "\nRQ "
     << detail::format_double(r.rq) << "\nTP " << r.matches.size() << "\nFP " << r.false_positives.size() << "\nFN "
     << r.false_negatives.size() << '\n';
  if (out_dir) {
    fs::create_directories(*out_dir);
    detail::CsvWriter csv(*out_dir / "pq.csv", {"pq", "sq", "rq", "tp", "fp", "fn", "class_aware"});
    csv.row({detail::format_double(r.pq), detail::format_double(r.sq), detail::format_double(r.rq),
             std::to_string(r.matches.size()), std::to_string(r.false_positives.size()),
             std::to_string(r.false_negatives.size()), class_aware ? "1" : "0"});
  }
  return r;
}

// Writes concentration.csv (dim, mean, std, p05, p95) and
// concentration_hist.csv (dim, bin_lo, bin_hi, count).
inline std::vector<ConcentrationStats> cmd_concentration(const std::vector<std::size_t>& dims, std::size_t n_pairs,
                                                         std::uint64_t seed, const fs::path& out_dir,
                                                         const RunMeta& meta = {}) {
  if (dims.empty()) throw ConfigError("no dimensions given");
  for (auto d : dims) {
    if (d < 2) throw ConfigError("dimension " + std::to_string(d) + " < 2");
  }
  if (n_pairs < 1000) throw ConfigError("pairs must be >= 1000");
  const auto stats = concentration_experiment(dims, n_pairs, seed);
  fs::create_directories(out_dir);
  {
    detail::CsvWriter csv(out_dir / "concentration.csv", {"dim", "mean", "std", "p05", "p95"});
    for (const auto& s : stats) {
      csv.row({std::to_string(s.dim), detail::format_double(s.mean), detail::format_double(s.std),
               detail::format_double(s.p05), detail::format_double(s.p95)});
    }
  }
  {
    detail::CsvWriter csv(out_dir / "concentration_hist.csv", {"dim", "bin_lo", "bin_hi", "count"});
    for (const auto& s : stats) {
      const double width = 2.0 / static_cast<double>(s.histogram.size());
      for (std::size_t b = 0; b < s.histogram.size(); ++b) {
        csv.row({std::to_string(s.dim), detail::format_double(-1.0 + width * static_cast<double>(b)),
                 detail::format_double(-1.0 + width * static_cast<double>(b + 1)), std::to_string(s.histogram[b])});
      }
    }
  }
  for (const auto& s : stats) *meta.progress << "d=" << s.dim << " std=" << s.std << '\n';
  if (stats.size() >= 2) *meta.progress << "log-log slope " << concentration_slope(stats) << '\n';
  return stats;
}

// Exit status by failure class: 2 config, 3 data, 4 anything else.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  return 4;
}

}  // namespace mtl
