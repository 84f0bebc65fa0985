#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mtl/autodiff.hpp"
#include "mtl/error.hpp"
#include "mtl/rng.hpp"
#include "mtl/tensor.hpp"

namespace mtl {

// Owner of a parameter: the shared encoder, or the decoder of one task.
struct GroupId {
  int value = -1;

  static constexpr GroupId encoder() { return GroupId{-1}; }
  static constexpr GroupId decoder(std::size_t task) { return GroupId{static_cast<int>(task)}; }
  bool is_encoder() const noexcept { return value < 0; }
  std::size_t task() const { return static_cast<std::size_t>(value); }

  friend auto operator<=>(const GroupId&, const GroupId&) = default;
};

inline std::string group_name(GroupId g) {
  return g.is_encoder() ? std::string("encoder") : "decoder" + std::to_string(g.value);
}

// All trainable tensors, each owned by exactly one group. Iteration is in
// ascending id order.
class ParamStore {
 public:
  ParamId add(GroupId group, std::string name, Tensor value) {
    const ParamId id{next_++};
    entries_.emplace(id, Entry{group, std::move(name), std::move(value)});
    return id;
  }

  const Tensor& value(ParamId id) const { return entry(id).value; }

  void set_value(ParamId id, Tensor value) {
    auto& e = entry(id);
    if (e.value.shape() != value.shape()) {
      throw ShapeError("parameter " + e.name + ": expected " + shape_string(e.value.shape()) + ", got " +
                       shape_string(value.shape()));
    }
    e.value = std::move(value);
  }

  std::span<double> mutable_data(ParamId id) { return entry(id).value.data(); }

  GroupId group(ParamId id) const { return entry(id).group; }
  const std::string& name(ParamId id) const { return entry(id).name; }
  bool contains(ParamId id) const { return entries_.count(id) != 0; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::vector<ParamId> ids() const {
    std::vector<ParamId> out;
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
  }

  std::vector<ParamId> ids(GroupId group) const {
    std::vector<ParamId> out;
    for (const auto& [id, e] : entries_) {
      if (e.group == group) out.push_back(id);
    }
    return out;
  }

  std::vector<GroupId> groups() const {
    std::set<GroupId> seen;
    for (const auto& [id, e] : entries_) seen.insert(e.group);
    return {seen.begin(), seen.end()};
  }

  std::size_t element_count(GroupId group) const {
    std::size_t n = 0;
    for (const auto& [id, e] : entries_) {
      if (e.group == group) n += e.value.size();
    }
    return n;
  }

  // Every id is listed by exactly one group and the groups cover the store.
  void check_partition() const {
    std::map<ParamId, int> seen;
    for (auto g : groups()) {
      for (auto id : ids(g)) ++seen[id];
    }
    if (seen.size() != entries_.size()) throw Error("parameter groups do not cover the store");
    for (const auto& [id, count] : seen) {
      if (count != 1) throw Error("parameter " + std::to_string(id.value) + " belongs to several groups");
    }
  }

  friend bool bit_identical(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (auto ia = a.entries_.begin(), ib = b.entries_.begin(); ia != a.entries_.end(); ++ia, ++ib) {
      if (ia->first != ib->first || ia->second.group != ib->second.group ||
          !mtl::bit_identical(ia->second.value, ib->second.value)) {
        return false;
      }
    }
    return true;
  }

 private:
  struct Entry {
    GroupId group;
    std::string name;
    Tensor value;
  };

  Entry& entry(ParamId id) {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw ValueError("unknown parameter id " + std::to_string(id.value));
    return it->second;
  }
  const Entry& entry(ParamId id) const { return const_cast<ParamStore*>(this)->entry(id); }

  std::map<ParamId, Entry> entries_;
  std::uint32_t next_ = 0;
};

// ---------------------------------------------------------------------------
// Layer specifications

struct ConvLayer {
  std::size_t in_channels = 0;  // 0: take the predecessor's channel count
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct DenseLayer {
  std::size_t in_features = 0;  // 0: take the predecessor's (flattened) size
  std::size_t out_features = 1;
};

struct ActivationLayer {
  Activation kind = Activation::relu;
};

struct GlobalAvgPoolLayer {};

struct UpsampleLayer {
  std::size_t factor = 2;
};

using LayerSpec = std::variant<ConvLayer, DenseLayer, ActivationLayer, GlobalAvgPoolLayer, UpsampleLayer>;

// Spec composition failure; index() is the first offending layer.
class LayerSpecError : public ShapeError {
 public:
  LayerSpecError(std::size_t index, const std::string& what)
      : ShapeError("layer " + std::to_string(index) + ": " + what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

struct Layer {
  LayerSpec spec;
  std::optional<ParamId> weight;
  std::optional<ParamId> bias;
};

namespace detail {

inline bool is_spatial(const Shape& s) { return s.size() == 3; }

// Uniform(−s, s) with s = sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

// Validates and instantiates a stack of layers. Shapes are per example.
// Returns the per-layer output shapes.
inline std::vector<Shape> build_stack(const std::vector<LayerSpec>& specs, const Shape& input, GroupId group,
                                      const std::string& prefix, ParamStore& store, Rng& rng,
                                      std::vector<Layer>& layers) {
  std::vector<Shape> shapes;
  Shape current = input;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Layer layer{specs[i], std::nullopt, std::nullopt};
    const std::string name = prefix + "." + std::to_string(i);
    if (auto* conv = std::get_if<ConvLayer>(&layer.spec)) {
      if (!is_spatial(current)) throw LayerSpecError(i, "conv needs a spatial input, got " + shape_string(current));
      if (conv->in_channels == 0) conv->in_channels = current[0];
      if (conv->in_channels != current[0]) {
        throw LayerSpecError(i, "conv expects " + std::to_string(conv->in_channels) + " channels, input has " +
                                    std::to_string(current[0]));
      }
      if (conv->out_channels == 0 || conv->kernel == 0 || conv->stride == 0) {
        throw LayerSpecError(i, "conv extents and stride must be positive");
      }
      if (conv->kernel > current[1] + 2 * conv->padding || conv->kernel > current[2] + 2 * conv->padding) {
        throw LayerSpecError(i, "conv kernel larger than padded input " + shape_string(current));
      }
      const std::size_t k = conv->kernel;
      const std::size_t oh = conv_output_extent(current[1], k, conv->stride, conv->padding);
      const std::size_t ow = conv_output_extent(current[2], k, conv->stride, conv->padding);
      layer.weight = store.add(group, name + ".weight",
                               glorot_uniform({conv->out_channels, conv->in_channels, k, k},
                                              conv->in_channels * k * k, conv->out_channels * k * k, rng));
      layer.bias = store.add(group, name + ".bias", Tensor({conv->out_channels}, 0.0));
      current = {conv->out_channels, oh, ow};
    } else if (auto* dense = std::get_if<DenseLayer>(&layer.spec)) {
      const std::size_t flat = shape_size(current);
      if (dense->in_features == 0) dense->in_features = flat;
      if (dense->in_features != flat) {
        throw LayerSpecError(i, "dense expects " + std::to_string(dense->in_features) + " features, input has " +
                                    std::to_string(flat));
      }
      if (dense->out_features == 0) throw LayerSpecError(i, "dense output size must be positive");
      layer.weight = store.add(group, name + ".weight",
                               glorot_uniform({dense->in_features, dense->out_features}, dense->in_features,
                                              dense->out_features, rng));
      layer.bias = store.add(group, name + ".bias", Tensor({dense->out_features}, 0.0));
      current = {dense->out_features};
    } else if (std::holds_alternative<GlobalAvgPoolLayer>(layer.spec)) {
      if (!is_spatial(current)) throw LayerSpecError(i, "pooling needs a spatial input");
      current = {current[0]};
    } else if (auto* up = std::get_if<UpsampleLayer>(&layer.spec)) {
      if (!is_spatial(current)) throw LayerSpecError(i, "upsampling needs a spatial input");
      if (up->factor == 0) throw LayerSpecError(i, "upsample factor must be positive");
      current = {current[0], current[1] * up->factor, current[2] * up->factor};
    }
    shapes.push_back(current);
    layers.push_back(std::move(layer));
  }
  return shapes;
}

// Runs layers [first, last) on a batched input [N, ...].
inline Var run_stack(Graph& g, const ParamStore& store, const std::vector<Layer>& layers, std::size_t first,
                     std::size_t last, Var x) {
  for (std::size_t i = first; i < last; ++i) {
    const auto& layer = layers[i];
    if (const auto* conv = std::get_if<ConvLayer>(&layer.spec)) {
      const auto w = g.parameter(*layer.weight, store.value(*layer.weight));
      const auto b = g.parameter(*layer.bias, store.value(*layer.bias));
      x = add_bias(g, conv2d(g, x, w, conv->stride, conv->padding), b, 1);
    } else if (std::holds_alternative<DenseLayer>(layer.spec)) {
      const auto& shape = g.value(x).shape();
      if (shape.size() != 2) x = reshape(g, x, Shape{shape[0], shape_size(shape) / shape[0]});
      const auto w = g.parameter(*layer.weight, store.value(*layer.weight));
      const auto b = g.parameter(*layer.bias, store.value(*layer.bias));
      x = add_bias(g, matmul(g, x, w), b, 1);
    } else if (const auto* act = std::get_if<ActivationLayer>(&layer.spec)) {
      x = apply_activation(g, x, act->kind);
    } else if (std::holds_alternative<GlobalAvgPoolLayer>(layer.spec)) {
      x = global_avg_pool(g, x);
    } else if (const auto* up = std::get_if<UpsampleLayer>(&layer.spec)) {
      x = upsample_nearest(g, x, up->factor);
    }
  }
  return x;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder

// Shared feature extractor. Exposes a feature vector (when the stack ends in
// vector form, or is empty) and the last spatial map before pooling/flattening.
struct EncoderModel {
  Shape input_shape;
  std::vector<Layer> layers;
  std::optional<std::size_t> feature_dim;
  std::optional<Shape> spatial_shape;
  std::size_t spatial_depth = 0;  // layers [0, spatial_depth) produce the spatial map
};

inline EncoderModel build_encoder(const std::vector<LayerSpec>& spec, const Shape& input_shape, ParamStore& store,
                                  Rng& rng) {
  if (input_shape.size() != 3 || shape_size(input_shape) == 0) {
    throw ShapeError("encoder input must be [C,H,W], got " + shape_string(input_shape));
  }
  EncoderModel enc;
  enc.input_shape = input_shape;
  const auto shapes = detail::build_stack(spec, input_shape, GroupId::encoder(), "encoder", store, rng, enc.layers);
  if (spec.empty()) {
    enc.feature_dim = shape_size(input_shape);
    enc.spatial_shape = input_shape;
    return enc;
  }
  enc.spatial_shape = input_shape;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (!detail::is_spatial(shapes[i])) break;
    enc.spatial_shape = shapes[i];
    enc.spatial_depth = i + 1;
  }
  if (!detail::is_spatial(shapes.back())) enc.feature_dim = shapes.back()[0];
  return enc;
}

struct EncoderFeatures {
  std::optional<Var> vector;   // [N, D]
  std::optional<Var> spatial;  // [N, C, h, w]
};

inline EncoderFeatures encode(Graph& g, const EncoderModel& enc, const ParamStore& store, Var x) {
  const auto& shape = g.value(x).shape();
  if (shape.size() != 4 || Shape(shape.begin() + 1, shape.end()) != enc.input_shape) {
    throw ShapeError("encoder expects [N]" + shape_string(enc.input_shape) + " input, got " + shape_string(shape));
  }
  EncoderFeatures out;
  const Var spatial = detail::run_stack(g, store, enc.layers, 0, enc.spatial_depth, x);
  out.spatial = spatial;
  if (enc.layers.empty()) {
    out.vector = reshape(g, x, Shape{shape[0], shape_size(enc.input_shape)});
  } else if (enc.feature_dim) {
    out.vector = detail::run_stack(g, store, enc.layers, enc.spatial_depth, enc.layers.size(), spatial);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoders

enum class DecoderKind { classification, segmentation };

struct SegmentationStage {
  std::size_t factor = 2;
  std::size_t kernel = 3;
};

// Upsample+conv stages that bring a feature map back to the input resolution.
// Intermediate stages emit `hidden_channels` followed by relu; the last stage
// emits the class logits.
struct UpsampleSpec {
  std::vector<SegmentationStage> stages;
  std::size_t hidden_channels = 8;
};

struct DecoderModel {
  std::size_t task_id = 0;
  DecoderKind kind = DecoderKind::classification;
  Activation output_activation = Activation::softmax;
  std::size_t num_classes = 0;
  Shape input_shape;   // [D] or [C,h,w]
  Shape output_shape;  // [K] or [K,H,W]
  std::vector<Layer> layers;
};

// A single dense layer followed by softmax or sigmoid.
inline DecoderModel build_classification_decoder(std::size_t task_id, std::size_t feature_dim,
                                                 std::size_t num_classes, Activation nonlinearity,
                                                 ParamStore& store, Rng& rng) {
  if (feature_dim == 0 || num_classes == 0) throw ValueError("classification decoder dimensions must be positive");
  if (nonlinearity == Activation::softmax && num_classes < 2) {
    throw ValueError("softmax classification decoder needs at least 2 classes");
  }
  if (nonlinearity == Activation::relu) throw ValueError("decoder output must be softmax or sigmoid");
  DecoderModel dec;
  dec.task_id = task_id;
  dec.kind = DecoderKind::classification;
  dec.output_activation = nonlinearity;
  dec.num_classes = num_classes;
  dec.input_shape = {feature_dim};
  dec.output_shape = {num_classes};
  detail::build_stack({DenseLayer{feature_dim, num_classes}}, dec.input_shape, GroupId::decoder(task_id),
                      "decoder" + std::to_string(task_id), store, rng, dec.layers);
  return dec;
}

// Per-pixel head: K = 1 gives a sigmoid mask, K >= 2 a K-way softmax.
inline DecoderModel build_segmentation_decoder(std::size_t task_id, const Shape& feature_map_shape,
                                               std::size_t num_classes, const UpsampleSpec& upsample,
                                               const Shape& output_hw, ParamStore& store, Rng& rng) {
  if (feature_map_shape.size() != 3 || shape_size(feature_map_shape) == 0) {
    throw ShapeError("segmentation decoder needs a [C,h,w] feature map, got " + shape_string(feature_map_shape));
  }
  if (num_classes == 0) throw ValueError("segmentation decoder needs at least one class");
  if (output_hw.size() != 2) throw ShapeError("output resolution must be [H,W]");
  std::size_t h = feature_map_shape[1], w = feature_map_shape[2];
  for (const auto& stage : upsample.stages) {
    if (stage.factor == 0 || stage.kernel % 2 == 0) throw ValueError("stage factor must be >= 1 and kernel odd");
    h *= stage.factor;
    w *= stage.factor;
  }
  if (h != output_hw[0] || w != output_hw[1]) {
    throw ShapeError("upsampling yields " + std::to_string(h) + "x" + std::to_string(w) + ", input resolution is " +
                     std::to_string(output_hw[0]) + "x" + std::to_string(output_hw[1]));
  }
  if (upsample.stages.size() > 1 && upsample.hidden_channels == 0) {
    throw ValueError("hidden_channels must be positive with several stages");
  }
  std::vector<LayerSpec> spec;
  if (upsample.stages.empty()) {
    spec.push_back(ConvLayer{0, num_classes, 1, 1, 0});
  }
  for (std::size_t s = 0; s < upsample.stages.size(); ++s) {
    const auto& stage = upsample.stages[s];
    const bool last = s + 1 == upsample.stages.size();
    if (stage.factor > 1) spec.push_back(UpsampleLayer{stage.factor});
    spec.push_back(ConvLayer{0, last ? num_classes : upsample.hidden_channels, stage.kernel, 1, stage.kernel / 2});
    if (!last) spec.push_back(ActivationLayer{Activation::relu});
  }
  DecoderModel dec;
  dec.task_id = task_id;
  dec.kind = DecoderKind::segmentation;
  dec.output_activation = num_classes == 1 ? Activation::sigmoid : Activation::softmax;
  dec.num_classes = num_classes;
  dec.input_shape = feature_map_shape;
  dec.output_shape = {num_classes, output_hw[0], output_hw[1]};
  detail::build_stack(spec, feature_map_shape, GroupId::decoder(task_id), "decoder" + std::to_string(task_id), store,
                      rng, dec.layers);
  return dec;
}

struct TaskOutput {
  Var logits;      // [N, K] or [N, K, H, W]
  Var prediction;  // probabilities, same shape
};

// ŷ = D_i(E(x)). x is [N,C,H,W] or a single [C,H,W] example (outputs then
// carry a leading batch axis of 1).
inline TaskOutput forward_task(Graph& g, const EncoderModel& enc, const DecoderModel& dec, const ParamStore& store,
                               Var x) {
  if (g.value(x).ndim() == 3) {
    auto shape = g.value(x).shape();
    shape.insert(shape.begin(), 1);
    x = reshape(g, x, std::move(shape));
  }
  const auto features = encode(g, enc, store, x);
  Var h;
  if (dec.kind == DecoderKind::classification) {
    if (!features.vector) {
      throw ShapeError("classification decoder " + std::to_string(dec.task_id) +
                       " needs vector features; the encoder ends in a spatial map " +
                       shape_string(*enc.spatial_shape) + " (add pooling)");
    }
    if (*enc.feature_dim != dec.input_shape[0]) {
      throw ShapeError("decoder " + std::to_string(dec.task_id) + " expects " + std::to_string(dec.input_shape[0]) +
                       " features, encoder yields " + std::to_string(*enc.feature_dim));
    }
    h = *features.vector;
  } else {
    if (*enc.spatial_shape != dec.input_shape) {
      throw ShapeError("decoder " + std::to_string(dec.task_id) + " expects feature map " +
                       shape_string(dec.input_shape) + ", encoder yields " + shape_string(*enc.spatial_shape));
    }
    h = *features.spatial;
  }
  const Var logits = detail::run_stack(g, store, dec.layers, 0, dec.layers.size(), h);
  Var prediction;
  if (dec.output_activation == Activation::sigmoid) {
    prediction = sigmoid(g, logits);
  } else {
    prediction = softmax(g, logits, 1);
  }
  return {logits, prediction};
}

// Shared encoder plus one decoder per task, over one parameter store.
struct MultiTaskModel {
  EncoderModel encoder;
  std::vector<DecoderModel> decoders;
  ParamStore params;
};

}  // namespace mtl
