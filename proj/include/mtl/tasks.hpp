#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtl/binary_io.hpp"
#include "mtl/error.hpp"
#include "mtl/metrics.hpp"
#include "mtl/rng.hpp"
#include "mtl/tensor.hpp"

namespace mtl {

enum class TaskKind : std::uint8_t { classification = 0, binary_segmentation = 1, instance_segmentation = 2 };
enum class LossKind : std::uint8_t { softmax_ce = 0, sigmoid_bce = 1, pixel_softmax_ce = 2 };
enum class MetricKind : std::uint8_t { accuracy = 0, pq = 1 };
enum class Split : std::int32_t { train = 0, eval = 1 };

inline std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::classification: return "classification";
    case TaskKind::binary_segmentation: return "binary-segmentation";
    case TaskKind::instance_segmentation: return "instance-segmentation";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "binary-segmentation") return TaskKind::binary_segmentation;
  if (s == "instance-segmentation") return TaskKind::instance_segmentation;
  throw ConfigError("unknown task kind \"" + s + "\"");
}

inline bool is_segmentation(TaskKind k) { return k != TaskKind::classification; }

// K is the class count for classification, 1 for binary segmentation (a
// single sigmoid channel) and the number of pixel classes including
// background for instance segmentation.
struct TaskSpec {
  std::uint32_t id = 0;
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::size_t num_classes = 2;
  Shape input_shape{3, 32, 32};
  LossKind loss = LossKind::softmax_ce;
  MetricKind metric = MetricKind::accuracy;

  void validate() const {
    if (input_shape.size() != 3 || shape_size(input_shape) == 0) {
      throw ValueError("task " + name + ": input shape must be [C,H,W], got " + shape_string(input_shape));
    }
    switch (kind) {
      case TaskKind::classification:
        if (num_classes < 2) throw ValueError("task " + name + ": classification needs K >= 2");
        if (loss != LossKind::softmax_ce || metric != MetricKind::accuracy) {
          throw ValueError("task " + name + ": classification pairs with softmax-ce and accuracy");
        }
        break;
      case TaskKind::binary_segmentation:
        if (num_classes != 1) throw ValueError("task " + name + ": binary segmentation has K = 1");
        if (loss != LossKind::sigmoid_bce || metric != MetricKind::pq) {
          throw ValueError("task " + name + ": binary segmentation pairs with sigmoid-bce and PQ");
        }
        break;
      case TaskKind::instance_segmentation:
        if (num_classes < 2) throw ValueError("task " + name + ": instance segmentation needs K >= 2");
        if (loss != LossKind::pixel_softmax_ce || metric != MetricKind::pq) {
          throw ValueError("task " + name + ": instance segmentation pairs with pixel-softmax-ce and PQ");
        }
        break;
    }
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

inline TaskSpec make_task_spec(std::uint32_t id, std::string name, TaskKind kind, std::size_t k, Shape input_shape) {
  TaskSpec s{id, std::move(name), kind, k, std::move(input_shape), LossKind::softmax_ce, MetricKind::accuracy};
  if (kind == TaskKind::binary_segmentation) {
    s.loss = LossKind::sigmoid_bce;
    s.metric = MetricKind::pq;
  } else if (kind == TaskKind::instance_segmentation) {
    s.loss = LossKind::pixel_softmax_ce;
    s.metric = MetricKind::pq;
  }
  s.validate();
  return s;
}

// Examples are stored as whole-dataset arrays.
struct TaskDataset {
  TaskSpec spec;
  std::uint64_t seed = 0;
  Tensor inputs;                           // [N,C,H,W]
  std::vector<std::int32_t> split;         // [N], Split values
  std::vector<std::int32_t> labels;        // classification: [N]
  std::vector<std::int32_t> class_map;     // segmentation: [N,H,W] pixel class (binary: 0/1)
  std::vector<std::int32_t> instance_map;  // segmentation: [N,H,W] instance id, 0 = background

  std::size_t size() const { return split.size(); }
  std::size_t height() const { return spec.input_shape[1]; }
  std::size_t width() const { return spec.input_shape[2]; }
  std::size_t example_size() const { return shape_size(spec.input_shape); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] == static_cast<std::int32_t>(s)) out.push_back(i);
    }
    return out;
  }

  // Ground-truth instances of example i; an instance's class is its pixel class.
  InstanceMask mask(std::size_t i) const {
    if (!is_segmentation(spec.kind)) throw ValueError("task " + spec.name + " has no masks");
    const std::size_t hw = height() * width();
    InstanceMask m(height(), width());
    for (std::size_t p = 0; p < hw; ++p) {
      const auto id = instance_map[i * hw + p];
      m.ids[p] = id;
      if (id != 0) m.classes[id] = class_map[i * hw + p];
    }
    return m;
  }

  void validate() const {
    spec.validate();
    const std::size_t n = size();
    if (n == 0) throw DataError("task " + spec.name + ": empty dataset");
    Shape expect = spec.input_shape;
    expect.insert(expect.begin(), n);
    if (inputs.shape() != expect) {
      throw DataError("task " + spec.name + ": inputs " + shape_string(inputs.shape()) + ", expected " +
                      shape_string(expect));
    }
    for (auto s : split) {
      if (s != 0 && s != 1) throw DataError("task " + spec.name + ": bad split tag " + std::to_string(s));
    }
    const auto k = static_cast<std::int32_t>(spec.num_classes);
    if (spec.kind == TaskKind::classification) {
      if (labels.size() != n) throw DataError("task " + spec.name + ": label count mismatch");
      for (auto y : labels) {
        if (y < 0 || y >= k) throw DataError("task " + spec.name + ": label " + std::to_string(y) + " outside [0,K)");
      }
      return;
    }
    const std::size_t hw = height() * width();
    if (class_map.size() != n * hw || instance_map.size() != n * hw) {
      throw DataError("task " + spec.name + ": mask size mismatch");
    }
    const std::int32_t classes = spec.kind == TaskKind::binary_segmentation ? 2 : k;
    for (std::size_t i = 0; i < n; ++i) {
      std::map<std::int32_t, std::int32_t> cls;
      for (std::size_t p = 0; p < hw; ++p) {
        const auto c = class_map[i * hw + p], id = instance_map[i * hw + p];
        if (c < 0 || c >= classes) throw DataError("task " + spec.name + ": pixel class outside range");
        if (id < 0) throw DataError("task " + spec.name + ": negative instance id");
        if ((id == 0) != (c == 0)) throw DataError("task " + spec.name + ": background disagrees between maps");
        if (id != 0) {
          auto [it, fresh] = cls.emplace(id, c);
          if (!fresh && it->second != c) throw DataError("task " + spec.name + ": instance spans several classes");
        }
      }
    }
  }

  friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

namespace detail {

inline std::vector<std::int32_t> make_splits(std::size_t n_train, std::size_t n_eval) {
  std::vector<std::int32_t> s(n_train, static_cast<std::int32_t>(Split::train));
  s.insert(s.end(), n_eval, static_cast<std::int32_t>(Split::eval));
  return s;
}

// Separable box blur, wrapping at the borders.
inline void blur(std::vector<double>& img, std::size_t h, std::size_t w, std::size_t radius) {
  std::vector<double> tmp(img.size());
  const double norm = 1.0 / static_cast<double>(2 * radius + 1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t d = 0; d <= 2 * radius; ++d) acc += img[y * w + (x + w + d - radius) % w];
      tmp[y * w + x] = acc * norm;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t d = 0; d <= 2 * radius; ++d) acc += tmp[((y + h + d - radius) % h) * w + x];
      img[y * w + x] = acc * norm;
    }
  }
}

// Channel means spread over [−1,1]^C with pairwise distance at least 0.8
// where the rejection search finds it, relaxing the bound otherwise.
inline std::vector<std::vector<double>> class_means(std::size_t k, std::size_t channels, Rng& rng) {
  std::vector<std::vector<double>> means;
  double min_dist = 0.8;
  int tries = 0;
  while (means.size() < k) {
    std::vector<double> m(channels);
    for (auto& v : m) v = rng.uniform(-1.0, 1.0);
    bool ok = true;
    for (const auto& other : means) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < channels; ++c) d2 += (m[c] - other[c]) * (m[c] - other[c]);
      if (d2 < min_dist * min_dist) ok = false;
    }
    if (ok) {
      means.push_back(std::move(m));
    } else if (++tries % 2000 == 0) {
      min_dist *= 0.9;
    }
  }
  return means;
}

}  // namespace detail

// K prototypes, each a per-channel mean plus a smooth Gaussian texture;
// examples are a prototype plus white noise of std 0.5 + difficulty. Labels
// cycle through the classes so every split is balanced within one.
inline TaskDataset gen_classification_task(std::size_t k, const Shape& input_shape, std::size_t n_train,
                                           std::size_t n_eval, double difficulty, std::uint64_t seed,
                                           std::uint32_t task_id = 0, std::string name = "classification") {
  if (k < 2) throw ValueError("gen_classification_task: K must be >= 2");
  if (n_train < k || n_eval < k) throw ValueError("gen_classification_task: each split needs at least K examples");
  if (difficulty < 0.0) throw ValueError("gen_classification_task: difficulty must be >= 0");
  TaskDataset ds;
  ds.spec = make_task_spec(task_id, std::move(name), TaskKind::classification, k, input_shape);
  ds.seed = seed;
  const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2], hw = h * w;

  Rng proto_rng = Rng::derived({seed, 0xffffffffu});
  const auto means = detail::class_means(k, c, proto_rng);
  std::vector<std::vector<double>> protos(k, std::vector<double>(c * hw));
  for (std::size_t cls = 0; cls < k; ++cls) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::vector<double> tex(hw);
      for (auto& v : tex) v = proto_rng.normal();
      detail::blur(tex, h, w, 2);
      // Box blur of radius 2 shrinks the std by 5; scale back to 0.5.
      for (std::size_t p = 0; p < hw; ++p) protos[cls][ch * hw + p] = means[cls][ch] + 2.5 * tex[p];
    }
  }

  const std::size_t n = n_train + n_eval;
  ds.split = detail::make_splits(n_train, n_eval);
  ds.labels.resize(n);
  const double sigma = 0.5 + difficulty;
  Shape shape = input_shape;
  shape.insert(shape.begin(), n);
  std::vector<double> data(n * c * hw);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t local = i < n_train ? i : i - n_train;
    const auto label = static_cast<std::int32_t>(local % k);
    ds.labels[i] = label;
    Rng rng = Rng::derived({seed, i});
    for (std::size_t j = 0; j < c * hw; ++j) data[i * c * hw + j] = protos[label][j] + sigma * rng.normal();
  }
  ds.inputs = Tensor(std::move(shape), std::move(data));
  return ds;
}

enum class ShapeStyle : std::uint8_t { mixed = 0, rectangles = 1, disks = 2 };

struct SegmentationOptions {
  ShapeStyle style = ShapeStyle::mixed;
  std::size_t min_size = 6;   // shape extent in pixels
  std::size_t max_size = 12;
  double noise = 0.2;
};

namespace detail {

// Foreground colours; row c is used for class c (binary tasks use row 1).
inline constexpr std::array<std::array<double, 3>, 6> kPalette{{
    {0.0, 0.0, 0.0},
    {1.2, 0.9, -0.6},
    {-0.8, 1.2, 0.9},
    {0.9, -0.9, 1.2},
    {1.2, 1.2, 1.2},
    {-1.0, -0.4, -1.2},
}};

}  // namespace detail

// Images with randomly placed, non-touching rectangles and disks (at least
// one background pixel between shapes, so 4-connected components recover
// the instances). Instance tasks give each shape a class in [1, K) that
// determines its colour; binary tasks mark every shape as foreground.
inline TaskDataset gen_segmentation_task(TaskKind kind, std::size_t image_size, std::size_t max_instances,
                                         std::size_t k, std::size_t n_train, std::size_t n_eval, std::uint64_t seed,
                                         std::uint32_t task_id = 0, std::string name = "segmentation",
                                         const SegmentationOptions& opts = {}) {
  if (!is_segmentation(kind)) throw ValueError("gen_segmentation_task: kind must be a segmentation kind");
  if (image_size < 8) throw ValueError("gen_segmentation_task: image_size must be >= 8");
  if (max_instances < 1) throw ValueError("gen_segmentation_task: max_instances must be >= 1");
  if (n_train < 1 || n_eval < 1) throw ValueError("gen_segmentation_task: both splits need examples");
  if (opts.min_size < 2 || opts.max_size < opts.min_size || opts.max_size > image_size - 2) {
    throw ValueError("gen_segmentation_task: shape sizes must satisfy 2 <= min <= max <= image_size - 2");
  }
  if (kind == TaskKind::instance_segmentation && k > detail::kPalette.size()) {
    throw ValueError("gen_segmentation_task: at most " + std::to_string(detail::kPalette.size()) + " pixel classes");
  }
  TaskDataset ds;
  const std::size_t channels = 3;
  ds.spec = make_task_spec(task_id, std::move(name), kind, k, {channels, image_size, image_size});
  ds.seed = seed;
  const std::size_t s = image_size, hw = s * s, n = n_train + n_eval;
  ds.split = detail::make_splits(n_train, n_eval);
  ds.class_map.assign(n * hw, 0);
  ds.instance_map.assign(n * hw, 0);
  std::vector<double> data(n * channels * hw);

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::derived({seed, i});
    std::int32_t* ids = ds.instance_map.data() + i * hw;
    std::int32_t* cls = ds.class_map.data() + i * hw;
    const std::size_t wanted = 1 + rng.below(max_instances);
    std::int32_t next_id = 1;
    for (std::size_t attempt = 0; attempt < 100 && static_cast<std::size_t>(next_id) <= wanted; ++attempt) {
      const std::size_t extent = opts.min_size + rng.below(opts.max_size - opts.min_size + 1);
      const std::size_t extent2 = opts.min_size + rng.below(opts.max_size - opts.min_size + 1);
      bool disk = opts.style == ShapeStyle::disks || (opts.style == ShapeStyle::mixed && rng.below(2) == 1);
      const std::size_t bh = extent, bw = disk ? extent : extent2;
      const std::size_t y0 = rng.below(s - bh + 1), x0 = rng.below(s - bw + 1);
      auto inside = [&](std::size_t y, std::size_t x) {
        if (!disk) return true;
        const double cy = static_cast<double>(bh - 1) / 2.0, cx = static_cast<double>(bw - 1) / 2.0;
        const double r = static_cast<double>(bh) / 2.0;
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        return dy * dy + dx * dx <= r * r;
      };
      // Reject if any pixel of the shape, grown by one, is taken.
      bool free = true;
      for (std::size_t y = 0; y < bh && free; ++y) {
        for (std::size_t x = 0; x < bw && free; ++x) {
          if (!inside(y, x)) continue;
          for (int dy = -1; dy <= 1 && free; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const auto yy = static_cast<std::ptrdiff_t>(y0 + y) + dy, xx = static_cast<std::ptrdiff_t>(x0 + x) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(s) || xx >= static_cast<std::ptrdiff_t>(s)) {
                continue;
              }
              if (ids[static_cast<std::size_t>(yy) * s + static_cast<std::size_t>(xx)] != 0) free = false;
            }
          }
        }
      }
      if (!free) continue;
      const std::int32_t c =
          kind == TaskKind::instance_segmentation ? static_cast<std::int32_t>(1 + rng.below(k - 1)) : 1;
      for (std::size_t y = 0; y < bh; ++y) {
        for (std::size_t x = 0; x < bw; ++x) {
          if (!inside(y, x)) continue;
          ids[(y0 + y) * s + x0 + x] = next_id;
          cls[(y0 + y) * s + x0 + x] = c;
        }
      }
      ++next_id;
    }
    double* img = data.data() + i * channels * hw;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) img[ch * hw + p] = detail::kPalette[cls[p]][ch] + opts.noise * rng.normal();
    }
  }
  ds.inputs = Tensor({n, channels, s, s}, std::move(data));
  return ds;
}

// One minibatch. Targets depend on the loss: class labels for softmax-ce,
// flattened [B,H,W] pixel classes for pixel-softmax-ce, {0,1} floats of shape
// [B,1,H,W] for sigmoid-bce.
struct Batch {
  Tensor x;
  std::vector<std::int32_t> labels;
  Tensor targets;
  std::vector<std::size_t> indices;
};

inline Batch make_batch(const TaskDataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ValueError("make_batch: no indices");
  const std::size_t b = indices.size(), ex = ds.example_size(), hw = ds.height() * ds.width();
  Shape shape = ds.spec.input_shape;
  shape.insert(shape.begin(), b);
  std::vector<double> x(b * ex);
  const auto src = ds.inputs.data();
  for (std::size_t r = 0; r < b; ++r) {
    if (indices[r] >= ds.size()) throw ValueError("make_batch: index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[r] * ex), ex, x.begin() + static_cast<std::ptrdiff_t>(r * ex));
  }
  Batch batch{Tensor(std::move(shape), std::move(x)), {}, {}, indices};
  switch (ds.spec.loss) {
    case LossKind::softmax_ce:
      for (auto i : indices) batch.labels.push_back(ds.labels[i]);
      break;
    case LossKind::pixel_softmax_ce:
      for (auto i : indices) {
        batch.labels.insert(batch.labels.end(), ds.class_map.begin() + static_cast<std::ptrdiff_t>(i * hw),
                            ds.class_map.begin() + static_cast<std::ptrdiff_t>((i + 1) * hw));
      }
      break;
    case LossKind::sigmoid_bce: {
      std::vector<double> t;
      t.reserve(b * hw);
      for (auto i : indices) {
        for (std::size_t p = 0; p < hw; ++p) t.push_back(ds.class_map[i * hw + p] != 0 ? 1.0 : 0.0);
      }
      batch.targets = Tensor({b, 1, ds.height(), ds.width()}, std::move(t));
      break;
    }
  }
  return batch;
}

// Uniform draws with replacement from one split. R needs below(n).
template <class R>
Batch sample_batch(const TaskDataset& ds, Split split, std::size_t batch_size, R& rng) {
  if (batch_size == 0) throw ValueError("sample_batch: batch_size must be >= 1");
  const auto pool = ds.indices(split);
  if (pool.empty()) throw DataError("sample_batch: task " + ds.spec.name + " has an empty split");
  std::vector<std::size_t> picks(batch_size);
  for (auto& p : picks) p = pool[static_cast<std::size_t>(rng.below(pool.size()))];
  return make_batch(ds, picks);
}

inline constexpr std::uint16_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const TaskDataset& ds) {
  ds.validate();
  io::Writer w;
  w.magic("MTLD");
  w.u16(kDatasetVersion);
  w.u8(static_cast<std::uint8_t>(ds.spec.kind));
  w.u16(static_cast<std::uint16_t>(ds.spec.num_classes));
  w.u8(static_cast<std::uint8_t>(ds.spec.input_shape.size()));
  for (auto d : ds.spec.input_shape) w.u32(static_cast<std::uint32_t>(d));
  w.u8(static_cast<std::uint8_t>(ds.spec.loss));
  w.u8(static_cast<std::uint8_t>(ds.spec.metric));
  w.u32(ds.spec.id);
  w.u64(ds.seed);
  w.string(ds.spec.name);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.block(ds.inputs);
  const std::size_t n = ds.size();
  w.block(io::IntTensor{{n}, ds.split});
  if (ds.spec.kind == TaskKind::classification) {
    w.block(io::IntTensor{{n}, ds.labels});
  } else {
    w.block(io::IntTensor{{n, ds.height(), ds.width()}, ds.class_map});
    w.block(io::IntTensor{{n, ds.height(), ds.width()}, ds.instance_map});
  }
  w.finish_with_crc();
  return w.bytes();
}

inline TaskDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes);
  r.expect_magic("MTLD");
  const auto version = r.u16();
  if (version != kDatasetVersion) {
    throw VersionError("dataset format version " + std::to_string(version) + ", expected " +
                       std::to_string(kDatasetVersion));
  }
  TaskDataset ds;
  const auto kind = r.u8();
  if (kind > 2) throw DataError("unknown task kind " + std::to_string(kind));
  ds.spec.kind = static_cast<TaskKind>(kind);
  ds.spec.num_classes = r.u16();
  ds.spec.input_shape.assign(r.u8(), 0);
  for (auto& d : ds.spec.input_shape) d = r.u32();
  const auto loss = r.u8(), metric = r.u8();
  if (loss > 2 || metric > 1) throw DataError("unknown loss or metric code");
  ds.spec.loss = static_cast<LossKind>(loss);
  ds.spec.metric = static_cast<MetricKind>(metric);
  ds.spec.id = r.u32();
  ds.seed = r.u64();
  ds.spec.name = r.string();
  const std::size_t n = r.u32();
  ds.inputs = r.f64_block("inputs");
  auto split = r.i32_block("split");
  if (split.shape != Shape{n}) throw DataError("split block does not match example count");
  ds.split = std::move(split.data);
  if (ds.spec.kind == TaskKind::classification) {
    auto labels = r.i32_block("labels");
    if (labels.shape != Shape{n}) throw DataError("label block does not match example count");
    ds.labels = std::move(labels.data);
  } else {
    auto cls = r.i32_block("class map");
    auto ids = r.i32_block("instance map");
    if (cls.shape.size() != 3 || cls.shape[0] != n || ids.shape != cls.shape) {
      throw DataError("mask blocks do not match example count");
    }
    ds.class_map = std::move(cls.data);
    ds.instance_map = std::move(ids.data);
  }
  r.verify_crc();
  try {
    ds.validate();
  } catch (const ValueError& e) {
    throw DataError(e.what());
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& path, const TaskDataset& ds) {
  io::write_file(path, encode_dataset(ds));
}

inline TaskDataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_dataset(bytes);
}

// Generation parameters for one task of a suite.
struct TaskRecipe {
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::size_t num_classes = 2;
  std::size_t image_size = 32;
  std::size_t n_train = 512;
  std::size_t n_eval = 128;
  double difficulty = 0.0;         // classification
  std::size_t max_instances = 3;   // segmentation
  SegmentationOptions segmentation;

  // Same argument checks as the generators, without generating.
  void validate() const {
    if (name.empty()) throw ValueError("task recipe needs a name");
    if (kind == TaskKind::classification) {
      if (num_classes < 2) throw ValueError("task " + name + ": K must be >= 2");
      if (n_train < num_classes || n_eval < num_classes) {
        throw ValueError("task " + name + ": each split needs at least K examples");
      }
      if (!(difficulty >= 0.0)) throw ValueError("task " + name + ": difficulty must be >= 0");
      if (image_size < 1) throw ValueError("task " + name + ": image_size must be >= 1");
      return;
    }
    const std::size_t k = kind == TaskKind::binary_segmentation ? 1 : num_classes;
    make_task_spec(0, name, kind, k, {3, image_size, image_size});
    if (image_size < 8) throw ValueError("task " + name + ": image_size must be >= 8");
    if (max_instances < 1) throw ValueError("task " + name + ": max_instances must be >= 1");
    if (n_train < 1 || n_eval < 1) throw ValueError("task " + name + ": both splits need examples");
    if (segmentation.min_size < 2 || segmentation.max_size < segmentation.min_size ||
        segmentation.max_size > image_size - 2) {
      throw ValueError("task " + name + ": shape sizes must satisfy 2 <= min <= max <= image_size - 2");
    }
    if (!(segmentation.noise >= 0.0)) throw ValueError("task " + name + ": noise must be >= 0");
    if (kind == TaskKind::instance_segmentation && num_classes > detail::kPalette.size()) {
      throw ValueError("task " + name + ": at most " + std::to_string(detail::kPalette.size()) + " pixel classes");
    }
  }

  TaskSpec spec(std::uint32_t id) const {
    return make_task_spec(id, name, kind, num_classes, {3, image_size, image_size});
  }

  friend bool operator==(const TaskRecipe& a, const TaskRecipe& b) {
    return a.name == b.name && a.kind == b.kind && a.num_classes == b.num_classes && a.image_size == b.image_size &&
           a.n_train == b.n_train && a.n_eval == b.n_eval && a.difficulty == b.difficulty &&
           a.max_instances == b.max_instances && a.segmentation.style == b.segmentation.style &&
           a.segmentation.min_size == b.segmentation.min_size && a.segmentation.max_size == b.segmentation.max_size &&
           a.segmentation.noise == b.segmentation.noise;
  }
};

// Task i of a suite generated with `seed` uses its own stream (seed, i).
inline TaskDataset generate_task(const TaskRecipe& recipe, std::uint32_t task_id, std::uint64_t seed) {
  const std::uint64_t task_seed = Rng::derived({seed, task_id}).next_u64();
  if (recipe.kind == TaskKind::classification) {
    return gen_classification_task(recipe.num_classes, {3, recipe.image_size, recipe.image_size}, recipe.n_train,
                                   recipe.n_eval, recipe.difficulty, task_seed, task_id, recipe.name);
  }
  return gen_segmentation_task(recipe.kind, recipe.image_size, recipe.max_instances, recipe.num_classes,
                               recipe.n_train, recipe.n_eval, task_seed, task_id, recipe.name, recipe.segmentation);
}

// Seven classification tasks with arities 2, 9, 6, 3, 4, 3, 5 and four
// segmentation tasks (one with instance classes, three binary).
inline std::vector<TaskRecipe> default_suite() {
  std::vector<TaskRecipe> suite;
  const std::array<std::size_t, 7> arities{2, 9, 6, 3, 4, 3, 5};
  for (std::size_t i = 0; i < arities.size(); ++i) {
    TaskRecipe r;
    r.name = "classify-" + std::to_string(i) + "-k" + std::to_string(arities[i]);
    r.num_classes = arities[i];
    suite.push_back(r);
  }
  TaskRecipe inst;
  inst.name = "instances-k3";
  inst.kind = TaskKind::instance_segmentation;
  inst.num_classes = 3;
  suite.push_back(inst);
  for (auto [name, style] : {std::pair{"binary-rects", ShapeStyle::rectangles}, std::pair{"binary-disks", ShapeStyle::disks},
                             std::pair{"binary-mixed", ShapeStyle::mixed}}) {
    TaskRecipe r;
    r.name = name;
    r.kind = TaskKind::binary_segmentation;
    r.num_classes = 1;
    r.segmentation.style = style;
    suite.push_back(r);
  }
  return suite;
}

}  // namespace mtl
