#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtl/autodiff.hpp"
#include "mtl/binary_io.hpp"
#include "mtl/diagnostics.hpp"
#include "mtl/error.hpp"
#include "mtl/metrics.hpp"
#include "mtl/model.hpp"
#include "mtl/optim.hpp"
#include "mtl/rng.hpp"
#include "mtl/tasks.hpp"

namespace mtl {

// Task probabilities α, normalised to sum to one.
class SamplerConfig {
 public:
  explicit SamplerConfig(std::vector<double> alpha) : alpha_(std::move(alpha)) {
    if (alpha_.empty()) throw ValueError("sampler: need at least one task");
    double total = 0.0;
    for (double p : alpha_) {
      if (!std::isfinite(p) || p < 0.0) throw ValueError("sampler: probabilities must be finite and >= 0");
      total += p;
    }
    if (total <= 0.0) throw ValueError("sampler: probabilities sum to zero");
    for (double& p : alpha_) p /= total;
  }

  static SamplerConfig uniform(std::size_t k) {
    if (k == 0) throw ValueError("sampler: need at least one task");
    return SamplerConfig(std::vector<double>(k, 1.0));
  }

  std::size_t k() const noexcept { return alpha_.size(); }
  const std::vector<double>& alpha() const noexcept { return alpha_; }

 private:
  std::vector<double> alpha_;
};

// Inverse CDF over α in index order. R needs uniform() in [0, 1).
template <class R>
std::size_t sample_task(const SamplerConfig& sampler, R& rng) {
  const double u = rng.uniform();
  const auto& a = sampler.alpha();
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] <= 0.0) continue;
    cumulative += a[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  // u landed above a cumulative sum that rounded below one.
  return last_positive;
}

struct ModelConfig {
  std::vector<LayerSpec> encoder{ConvLayer{0, 8, 3, 1, 1}, ActivationLayer{Activation::relu},
                                 ConvLayer{0, 16, 3, 2, 1}, ActivationLayer{Activation::relu}, GlobalAvgPoolLayer{}};
  Activation classification_activation = Activation::softmax;
  UpsampleSpec segmentation{{SegmentationStage{2, 3}}, 8};
};

// Builds the shared encoder and one decoder per task. All tasks must share
// the input shape.
inline MultiTaskModel build_model(const std::vector<TaskSpec>& tasks, const ModelConfig& config, std::uint64_t seed) {
  if (tasks.empty()) throw ValueError("build_model: no tasks");
  for (const auto& t : tasks) {
    t.validate();
    if (t.input_shape != tasks.front().input_shape) {
      throw ShapeError("task " + t.name + " input " + shape_string(t.input_shape) + " differs from " +
                       shape_string(tasks.front().input_shape));
    }
  }
  MultiTaskModel m;
  Rng rng = Rng::derived({seed, 1});
  m.encoder = build_encoder(config.encoder, tasks.front().input_shape, m.params, rng);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    if (t.kind == TaskKind::classification) {
      if (!m.encoder.feature_dim) throw ShapeError("task " + t.name + ": encoder has no vector features");
      m.decoders.push_back(build_classification_decoder(i, *m.encoder.feature_dim, t.num_classes,
                                                        config.classification_activation, m.params, rng));
    } else {
      if (!m.encoder.spatial_shape) throw ShapeError("task " + t.name + ": encoder has no spatial features");
      m.decoders.push_back(build_segmentation_decoder(i, *m.encoder.spatial_shape, t.num_classes, config.segmentation,
                                                      {t.input_shape[1], t.input_shape[2]}, m.params, rng));
    }
  }
  m.params.check_partition();
  return m;
}

// Mean loss of a task head over a batch.
inline Var task_loss(Graph& g, const TaskSpec& spec, Var logits, const Batch& batch) {
  switch (spec.loss) {
    case LossKind::softmax_ce:
    case LossKind::pixel_softmax_ce:
      return cross_entropy(g, logits, batch.labels);
    case LossKind::sigmoid_bce:
      return binary_cross_entropy_with_logits(g, logits, batch.targets);
  }
  throw ValueError("unknown loss");
}

struct TrainConfig {
  std::uint64_t T = 5000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  AdamConfig adam{};
  std::optional<TraceMode> trace;  // nullopt: diagnostics off
  std::uint64_t checkpoint_every = 0;  // 0: no periodic checkpoints

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    try {
      adam.validate();
    } catch (const ValueError& e) {
      throw ConfigError(e.what());
    }
  }
};

struct LogRecord {
  std::uint64_t t = 0;
  std::uint32_t task = 0;
  double loss = 0.0;

  friend bool operator==(const LogRecord& a, const LogRecord& b) {
    return a.t == b.t && a.task == b.task && std::bit_cast<std::uint64_t>(a.loss) == std::bit_cast<std::uint64_t>(b.loss);
  }
};

struct TrainLog {
  std::vector<LogRecord> records;
  std::optional<GradTrace> trace;
};

// Everything that evolves during training.
struct TrainState {
  MultiTaskModel model;
  std::vector<TaskSpec> tasks;
  AdamState encoder_opt;
  std::vector<AdamState> decoder_opt;
  Rng task_rng;
  std::uint64_t seed = 0;
  std::uint64_t t = 0;  // iterations completed
};

inline TrainState init_train_state(const std::vector<TaskSpec>& tasks, const ModelConfig& model, std::uint64_t seed,
                                   const AdamConfig& adam = {}) {
  TrainState s;
  s.tasks = tasks;
  s.model = build_model(tasks, model, seed);
  s.encoder_opt = adam_init(s.model.params, s.model.params.ids(GroupId::encoder()), adam);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    s.decoder_opt.push_back(adam_init(s.model.params, s.model.params.ids(GroupId::decoder(i)), adam));
  }
  s.task_rng = Rng::derived({seed, 3});
  s.seed = seed;
  return s;
}

// Batch stream for iteration t; independent of the task sequence so resumed
// runs draw the same batches.
inline Rng batch_rng(std::uint64_t seed, std::uint64_t t) { return Rng::derived({seed, 2, t}); }

struct StepResult {
  double loss = 0.0;
  std::vector<double> encoder_grad;  // raw gradient, flattened in parameter-id order
};

// One iteration of the training loop body for task i: forward through the
// encoder and decoder i, then Adam on the encoder group and decoder group i.
inline StepResult train_step(TrainState& s, std::size_t task, const Batch& batch, bool want_grad = false) {
  if (task >= s.model.decoders.size()) throw ValueError("train_step: task index out of range");
  Graph g;
  const auto out = forward_task(g, s.model.encoder, s.model.decoders[task], s.model.params, g.constant(batch.x));
  const Var loss = task_loss(g, s.tasks[task], out.logits, batch);
  StepResult r;
  r.loss = g.value(loss).item();
  if (!std::isfinite(r.loss)) throw Error("non-finite loss");
  GradMap grads = backward(g, loss);
  GradMap encoder_grads, decoder_grads;
  for (auto& [id, grad] : grads) {
    const auto group = s.model.params.group(id);
    if (group.is_encoder()) {
      encoder_grads.emplace(id, std::move(grad));
    } else if (group == GroupId::decoder(task)) {
      decoder_grads.emplace(id, std::move(grad));
    } else {
      throw Error("gradient reached decoder of another task");
    }
  }
  if (want_grad) {
    for (auto id : s.model.params.ids(GroupId::encoder())) {
      auto it = encoder_grads.find(id);
      if (it == encoder_grads.end()) {
        r.encoder_grad.insert(r.encoder_grad.end(), s.model.params.value(id).size(), 0.0);
      } else {
        const auto d = it->second.data();
        r.encoder_grad.insert(r.encoder_grad.end(), d.begin(), d.end());
      }
    }
  }
  adam_step(s.encoder_opt, s.model.params, encoder_grads);
  adam_step(s.decoder_opt[task], s.model.params, decoder_grads);
  return r;
}

// Hook called after each iteration with the completed count.
using IterationHook = std::function<void(const TrainState&)>;

// Runs iterations s.t .. T−1. Any failure is rethrown as TrainingError
// carrying the iteration index.
inline TrainLog train(TrainState& s, const std::vector<TaskDataset>& data, const SamplerConfig& sampler,
                      const TrainConfig& config, const IterationHook& after_iteration = {}) {
  config.validate();
  const std::size_t k = s.tasks.size();
  if (data.size() != k || sampler.k() != k || s.model.decoders.size() != k) {
    throw ConfigError("train: " + std::to_string(k) + " tasks, " + std::to_string(data.size()) + " datasets, " +
                      std::to_string(sampler.k()) + " probabilities");
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (data[i].spec.kind != s.tasks[i].kind || data[i].spec.num_classes != s.tasks[i].num_classes ||
        data[i].spec.input_shape != s.tasks[i].input_shape) {
      throw ConfigError("train: dataset " + data[i].spec.name + " does not match task " + std::to_string(i));
    }
  }
  TrainLog log;
  if (config.trace) log.trace.emplace(*config.trace, Rng::derived({s.seed, 4}).next_u64());
  while (s.t < config.T) {
    const std::uint64_t t = s.t;
    try {
      const std::size_t task = sample_task(sampler, s.task_rng);
      Rng rng = batch_rng(s.seed, t);
      const Batch batch = sample_batch(data[task], Split::train, config.batch_size, rng);
      auto r = train_step(s, task, batch, log.trace.has_value());
      log.records.push_back({t, static_cast<std::uint32_t>(task), r.loss});
      if (log.trace) log.trace->append(t, static_cast<std::uint32_t>(task), r.encoder_grad);
    } catch (const TrainingError&) {
      throw;
    } catch (const std::exception& e) {
      throw TrainingError(t, e.what());
    }
    s.t = t + 1;
    if (after_iteration) after_iteration(s);
  }
  return log;
}

// Checkpoint file "MTLC".
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t seed = 0;
  std::uint64_t t = 0;
  std::vector<std::pair<TaskKind, std::size_t>> tasks;  // (kind, K) per task
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::pair<std::uint64_t, AdamConfig>> optimizers;  // by group name
  std::string rng_state;
};

namespace detail {

inline void put_optimizer(Checkpoint& c, const std::string& group, const AdamState& opt, const ParamStore& params) {
  c.optimizers[group] = {opt.step, opt.config};
  for (const auto& [id, m] : opt.m) c.tensors["adam/m/" + params.name(id)] = m;
  for (const auto& [id, v] : opt.v) c.tensors["adam/v/" + params.name(id)] = v;
}

inline const Tensor& find_tensor(const Checkpoint& c, const std::string& name, const Shape& shape) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw DataError("checkpoint lacks tensor " + name);
  if (it->second.shape() != shape) {
    throw DataError("checkpoint tensor " + name + " has shape " + shape_string(it->second.shape()) + ", expected " +
                    shape_string(shape));
  }
  return it->second;
}

inline AdamState take_optimizer(const Checkpoint& c, const std::string& group, const AdamState& like,
                                const ParamStore& params) {
  auto it = c.optimizers.find(group);
  if (it == c.optimizers.end()) throw DataError("checkpoint lacks optimizer state for " + group);
  AdamState out = like;
  out.step = it->second.first;
  out.config = it->second.second;
  for (auto& [id, m] : out.m) m = find_tensor(c, "adam/m/" + params.name(id), m.shape());
  for (auto& [id, v] : out.v) v = find_tensor(c, "adam/v/" + params.name(id), v.shape());
  return out;
}

}  // namespace detail

inline Checkpoint make_checkpoint(const TrainState& s) {
  Checkpoint c;
  c.seed = s.seed;
  c.t = s.t;
  for (const auto& t : s.tasks) c.tasks.emplace_back(t.kind, t.num_classes);
  const auto& params = s.model.params;
  for (auto id : params.ids()) c.tensors["param/" + params.name(id)] = params.value(id);
  detail::put_optimizer(c, "encoder", s.encoder_opt, params);
  for (std::size_t i = 0; i < s.decoder_opt.size(); ++i) {
    detail::put_optimizer(c, group_name(GroupId::decoder(i)), s.decoder_opt[i], params);
  }
  c.rng_state = s.task_rng.serialize();
  return c;
}

// Replaces the evolving parts of s with the checkpoint's. Everything is
// validated first; on error s is untouched.
inline void restore_checkpoint(TrainState& s, const Checkpoint& c) {
  if (c.tasks.size() != s.tasks.size()) throw DataError("checkpoint has a different task count");
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    if (c.tasks[i].first != s.tasks[i].kind || c.tasks[i].second != s.tasks[i].num_classes) {
      throw DataError("checkpoint task " + std::to_string(i) + " does not match the configured task");
    }
  }
  const auto& params = s.model.params;
  ParamStore restored = params;
  for (auto id : params.ids()) restored.set_value(id, detail::find_tensor(c, "param/" + params.name(id), params.value(id).shape()));
  auto encoder_opt = detail::take_optimizer(c, "encoder", s.encoder_opt, params);
  std::vector<AdamState> decoder_opt;
  for (std::size_t i = 0; i < s.decoder_opt.size(); ++i) {
    decoder_opt.push_back(detail::take_optimizer(c, group_name(GroupId::decoder(i)), s.decoder_opt[i], params));
  }
  Rng rng = Rng::deserialize(c.rng_state);
  s.model.params = std::move(restored);
  s.encoder_opt = std::move(encoder_opt);
  s.decoder_opt = std::move(decoder_opt);
  s.task_rng = rng;
  s.seed = c.seed;
  s.t = c.t;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  io::Writer w;
  w.magic("MTLC");
  w.u16(kCheckpointVersion);
  w.u64(c.seed);
  w.u64(c.t);
  w.u32(static_cast<std::uint32_t>(c.tasks.size()));
  for (const auto& [kind, k] : c.tasks) {
    w.u8(static_cast<std::uint8_t>(kind));
    w.u16(static_cast<std::uint16_t>(k));
  }
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.string(name);
    w.block(t);
  }
  w.u32(static_cast<std::uint32_t>(c.optimizers.size()));
  for (const auto& [group, opt] : c.optimizers) {
    w.string(group);
    w.u64(opt.first);
    w.f64(opt.second.lr);
    w.f64(opt.second.beta1);
    w.f64(opt.second.beta2);
    w.f64(opt.second.eps);
  }
  w.long_string(c.rng_state);
  w.finish_with_crc();
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  r.expect_magic("MTLC");
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  c.seed = r.u64();
  c.t = r.u64();
  const auto k = r.u32();
  for (std::uint32_t i = 0; i < k; ++i) {
    const auto kind = r.u8();
    if (kind > 2) throw DataError("checkpoint: unknown task kind " + std::to_string(kind));
    c.tasks.emplace_back(static_cast<TaskKind>(kind), r.u16());
  }
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.string();
    c.tensors[name] = r.f64_block(name.c_str());
  }
  const auto n_opt = r.u32();
  for (std::uint32_t i = 0; i < n_opt; ++i) {
    auto group = r.string();
    const auto step = r.u64();
    AdamConfig cfg;
    cfg.lr = r.f64();
    cfg.beta1 = r.f64();
    cfg.beta2 = r.f64();
    cfg.eps = r.f64();
    c.optimizers[group] = {step, cfg};
  }
  c.rng_state = r.long_string();
  r.verify_crc();
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  io::write_file(path, encode_checkpoint(make_checkpoint(s)));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_checkpoint(bytes);
}

struct EvalOptions {
  std::size_t batch_size = 32;
  std::size_t min_area = 1;  // predicted components smaller than this are dropped
};

struct TaskEval {
  std::string name;
  MetricKind metric = MetricKind::accuracy;
  double value = 0.0;  // accuracy or PQ
  double sq = 0.0;
  double rq = 0.0;
  std::size_t examples = 0;
};

// Metric of task i on one split: accuracy of the argmax class, or PQ pooled
// over all images. Segmentation predictions are turned into instances by
// connected components of the per-pixel class (argmax, or p > 0.5 for a
// sigmoid head); the instance task is scored class-aware.
// Per-pixel class of example r in segmentation logits [N,K,H,W]: argmax
// over K, or logit > 0 for a single-channel head.
inline std::vector<std::int32_t> pixel_classes(const Tensor& logits, std::size_t r, std::size_t k, std::size_t hw) {
  std::vector<std::int32_t> cls(hw, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    if (k == 1) {
      cls[p] = logits[r * hw + p] > 0.0 ? 1 : 0;
    } else {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (logits[(r * k + c) * hw + p] > logits[(r * k + best) * hw + p]) best = c;
      }
      cls[p] = static_cast<std::int32_t>(best);
    }
  }
  return cls;
}

// Predicted instance mask for example i of a segmentation dataset.
inline InstanceMask predict_mask(const MultiTaskModel& model, std::size_t task, const TaskDataset& ds, std::size_t i,
                                 std::size_t min_area = 1) {
  const Batch batch = make_batch(ds, {i});
  Graph g;
  const auto o = forward_task(g, model.encoder, model.decoders.at(task), model.params, g.constant(batch.x));
  const std::size_t hw = ds.height() * ds.width();
  return connected_components(pixel_classes(g.value(o.logits), 0, model.decoders.at(task).num_classes, hw),
                              ds.height(), ds.width(), min_area);
}

inline TaskEval evaluate_task(const MultiTaskModel& model, std::size_t task, const TaskDataset& ds,
                              Split split = Split::eval, const EvalOptions& opts = {}) {
  const auto& dec = model.decoders.at(task);
  const auto idx = ds.indices(split);
  if (idx.empty()) throw DataError("evaluate: task " + ds.spec.name + " has an empty split");
  TaskEval out{ds.spec.name, ds.spec.metric, 0.0, 0.0, 0.0, idx.size()};
  std::vector<std::int32_t> predicted, truth;
  PQAccumulator pq;
  const std::size_t h = ds.height(), w = ds.width(), hw = h * w;
  for (std::size_t start = 0; start < idx.size(); start += opts.batch_size) {
    const std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + opts.batch_size)));
    const Batch batch = make_batch(ds, chunk);
    Graph g;
    const auto o = forward_task(g, model.encoder, dec, model.params, g.constant(batch.x));
    const auto& logits = g.value(o.logits);
    const std::size_t k = dec.num_classes;
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      if (ds.spec.kind == TaskKind::classification) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
          if (logits[r * k + c] > logits[r * k + best]) best = c;
        }
        predicted.push_back(static_cast<std::int32_t>(best));
        truth.push_back(ds.labels[chunk[r]]);
        continue;
      }
      const auto pred = connected_components(pixel_classes(logits, r, k, hw), h, w, opts.min_area);
      pq.add(panoptic_quality(pred, ds.mask(chunk[r]), ds.spec.kind == TaskKind::instance_segmentation));
    }
  }
  if (ds.spec.kind == TaskKind::classification) {
    out.value = accuracy(predicted, truth);
  } else {
    out.value = pq.pq();
    out.sq = pq.sq();
    out.rq = pq.rq();
  }
  return out;
}

}  // namespace mtl
