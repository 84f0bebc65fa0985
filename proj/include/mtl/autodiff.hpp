#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mtl/error.hpp"
#include "mtl/tensor.hpp"

namespace mtl {

struct ParamId {
  std::uint32_t value = 0;
  friend auto operator<=>(const ParamId&, const ParamId&) = default;
};

// Gradient per parameter. Parameters with no path to the loss have no entry.
using GradMap = std::map<ParamId, Tensor>;

// Handle to a node of a Graph.
struct Var {
  std::size_t index = 0;
};

class Graph;

struct BackwardArgs {
  const Graph& graph;
  std::span<const Var> inputs;
  const Tensor& output;
  const Tensor& grad_output;
  // One slot per input; null when that input does not need a gradient.
  // Rules must accumulate (+=): the same input can appear twice.
  std::span<Tensor* const> grad_inputs;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

// Append-only tape. Inputs always precede the nodes that consume them, so the
// node order is a topological order. One Graph per forward pass.
class Graph {
 public:
  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, std::nullopt, false});
    return Var{nodes_.size() - 1};
  }

  Var parameter(ParamId id, Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, id, true});
    return Var{nodes_.size() - 1};
  }

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    bool needs_grad = false;
    for (auto in : inputs) {
      needs_grad = needs_grad || node(in).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), std::move(inputs),
                          needs_grad ? std::move(backward) : BackwardFn{}, std::nullopt, needs_grad});
    return Var{nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<Var> inputs;
    BackwardFn backward;
    std::optional<ParamId> param;
    bool requires_grad = false;
  };

  const Node& node(Var v) const {
    if (v.index >= nodes_.size()) throw ValueError("Var does not belong to this graph");
    return nodes_[v.index];
  }

  friend GradMap backward(const Graph& graph, Var loss);

  std::vector<Node> nodes_;
};

// Reverse-mode sweep from a scalar loss. Each node is visited once, in reverse
// recording order.
inline GradMap backward(const Graph& graph, Var loss) {
  const auto& loss_node = graph.node(loss);
  if (!loss_node.value.is_scalar()) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_string(loss_node.value.shape()));
  }
  GradMap grads_by_param;
  if (!loss_node.requires_grad) return grads_by_param;

  std::vector<std::optional<Tensor>> grads(loss.index + 1);
  grads[loss.index] = Tensor(loss_node.value.shape(), 1.0);
  std::vector<Tensor*> slots;

  for (std::size_t i = loss.index + 1; i-- > 0;) {
    if (!grads[i]) continue;
    const auto& node = graph.nodes_[i];
    if (node.param) {
      auto [it, inserted] = grads_by_param.try_emplace(*node.param, *grads[i]);
      if (!inserted) {
        auto dst = it->second.data();
        auto src = grads[i]->data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
      grads[i].reset();
      continue;
    }
    if (!node.backward) {
      grads[i].reset();
      continue;
    }
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const auto in = node.inputs[k].index;
      if (!graph.nodes_[in].requires_grad) continue;
      if (!grads[in]) grads[in] = Tensor(graph.nodes_[in].value.shape(), 0.0);
      slots[k] = &*grads[in];
    }
    node.backward(BackwardArgs{graph, node.inputs, node.value, *grads[i], slots});
    grads[i].reset();
  }
  return grads_by_param;
}

// ---------------------------------------------------------------------------
// Elementary ops

inline Var add(Graph& g, Var a, Var b) {
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  if (x.shape() != y.shape()) {
    throw ShapeError("add: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  }
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return g.record(std::move(out), {a, b}, [](const BackwardArgs& args) {
    for (auto* slot : args.grad_inputs) {
      if (!slot) continue;
      for (std::size_t i = 0; i < slot->size(); ++i) (*slot)[i] += args.grad_output[i];
    }
  });
}

// Elementwise product.
inline Var mul(Graph& g, Var a, Var b) {
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  if (x.shape() != y.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  }
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return g.record(std::move(out), {a, b}, [](const BackwardArgs& args) {
    const auto& x = args.graph.value(args.inputs[0]);
    const auto& y = args.graph.value(args.inputs[1]);
    const auto& gout = args.grad_output;
    if (auto* gx = args.grad_inputs[0]) {
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += gout[i] * y[i];
    }
    if (auto* gy = args.grad_inputs[1]) {
      for (std::size_t i = 0; i < gy->size(); ++i) (*gy)[i] += gout[i] * x[i];
    }
  });
}

inline Var scale(Graph& g, Var a, double factor) {
  Tensor out = g.value(a);
  for (auto& v : out.data()) v *= factor;
  return g.record(std::move(out), {a}, [factor](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += factor * args.grad_output[i];
  });
}

inline Var sum(Graph& g, Var a) {
  const auto& x = g.value(a);
  double total = 0.0;
  for (double v : x.data()) total += v;
  return g.record(Tensor::scalar(total), {a}, [](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    const double gout = args.grad_output[0];
    for (auto& v : gx->data()) v += gout;
  });
}

inline Var mean(Graph& g, Var a) {
  const auto n = static_cast<double>(g.value(a).size());
  return scale(g, sum(g, a), 1.0 / n);
}

inline Var reshape(Graph& g, Var a, Shape shape) {
  Tensor out = g.value(a).reshaped(std::move(shape));
  return g.record(std::move(out), {a}, [](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += args.grad_output[i];
  });
}

// C = A·B for A[m×n], B[n×p].
inline Var matmul(Graph& g, Var a, Var b) {
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  if (x.ndim() != 2 || y.ndim() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(x.shape()) + " and " +
                     shape_string(y.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1), p = y.dim(1);
  Tensor out({m, p});
  const double* xa = x.data().data();
  const double* yb = y.data().data();
  double* o = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const double xik = xa[i * n + k];
      const double* yrow = yb + k * p;
      double* orow = o + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += xik * yrow[j];
    }
  }
  return g.record(std::move(out), {a, b}, [m, n, p](const BackwardArgs& args) {
    const double* xa = args.graph.value(args.inputs[0]).data().data();
    const double* yb = args.graph.value(args.inputs[1]).data().data();
    const double* go = args.grad_output.data().data();
    if (auto* gx = args.grad_inputs[0]) {
      // dA = dC·Bᵀ
      double* d = gx->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < p; ++j) acc += go[i * p + j] * yb[k * p + j];
          d[i * n + k] += acc;
        }
      }
    }
    if (auto* gy = args.grad_inputs[1]) {
      // dB = Aᵀ·dC
      double* d = gy->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < n; ++k) {
          const double xik = xa[i * n + k];
          for (std::size_t j = 0; j < p; ++j) d[k * p + j] += xik * go[i * p + j];
        }
      }
    }
  });
}

// x + bias broadcast along `axis` (bias has x.dim(axis) entries).
inline Var add_bias(Graph& g, Var x, Var bias, std::size_t axis = 1) {
  const auto& in = g.value(x);
  const auto& b = g.value(bias);
  if (axis >= in.ndim() || b.ndim() != 1 || b.dim(0) != in.dim(axis)) {
    throw ShapeError("add_bias: bias " + shape_string(b.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_string(in.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in.dim(i);
  for (std::size_t i = axis + 1; i < in.ndim(); ++i) inner *= in.dim(i);
  const std::size_t channels = in.dim(axis);
  Tensor out = in;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* row = out.data().data() + (o * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += b[c];
    }
  }
  return g.record(std::move(out), {x, bias}, [outer, channels, inner](const BackwardArgs& args) {
    const auto& go = args.grad_output;
    if (auto* gx = args.grad_inputs[0]) {
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += go[i];
    }
    if (auto* gb = args.grad_inputs[1]) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < channels; ++c) {
          const double* row = go.data().data() + (o * channels + c) * inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += row[i];
          (*gb)[c] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops. Spatial tensors are [C,H,W] or [N,C,H,W].

namespace detail {

struct SpatialDims {
  std::size_t batch, channels, height, width;
  bool batched;
};

inline SpatialDims spatial_dims(const Tensor& t, const char* op) {
  if (t.ndim() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
  if (t.ndim() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_string(t.shape()));
}

inline Shape spatial_shape(const SpatialDims& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.batch, c, h, w};
  return {c, h, w};
}

// Output positions [lo, hi) whose input coordinate o*stride - pad + k lies in [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t extent,
                                                       std::size_t stride, std::size_t pad,
                                                       std::size_t k) {
  std::size_t lo = 0;
  while (lo < out_extent && lo * stride + k < pad) ++lo;
  std::size_t hi = lo;
  while (hi < out_extent && hi * stride + k < pad + extent) ++hi;
  return {lo, hi};
}

}  // namespace detail

inline std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride,
                                      std::size_t padding) {
  if (stride == 0) throw ValueError("conv2d: stride must be >= 1");
  if (kernel == 0 || kernel > extent + 2 * padding) {
    throw ShapeError("conv2d: kernel extent " + std::to_string(kernel) + " exceeds padded input extent " +
                     std::to_string(extent + 2 * padding));
  }
  return (extent + 2 * padding - kernel) / stride + 1;
}

// Cross-correlation with zero padding. kernels: [F,C,kh,kw].
inline Var conv2d(Graph& g, Var input, Var kernels, std::size_t stride, std::size_t padding) {
  const auto& x = g.value(input);
  const auto& w = g.value(kernels);
  const auto d = detail::spatial_dims(x, "conv2d");
  if (w.ndim() != 4 || w.dim(1) != d.channels) {
    throw ShapeError("conv2d: kernels " + shape_string(w.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  }
  const std::size_t filters = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = conv_output_extent(d.height, kh, stride, padding);
  const std::size_t ow = conv_output_extent(d.width, kw, stride, padding);
  const std::size_t channels = d.channels, height = d.height, width = d.width, batch = d.batch;

  // Visits every (output, input, weight) triple; `body` receives row pointers.
  auto sweep = [=](auto&& body) {
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t f = 0; f < filters; ++f) {
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const auto [y_lo, y_hi] = detail::valid_range(oh, height, stride, padding, ky);
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const auto [x_lo, x_hi] = detail::valid_range(ow, width, stride, padding, kx);
              if (x_lo >= x_hi) continue;
              const std::size_t w_index = ((f * channels + c) * kh + ky) * kw + kx;
              for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
                const std::size_t iy = oy * stride + ky - padding;
                const std::size_t out_row = ((n * filters + f) * oh + oy) * ow;
                const std::size_t in_row = ((n * channels + c) * height + iy) * width;
                body(w_index, out_row, in_row, x_lo, x_hi, kx);
              }
            }
          }
        }
      }
    }
  };

  Tensor out(detail::spatial_shape(d, filters, oh, ow));
  {
    double* o = out.data().data();
    const double* xi = x.data().data();
    const double* wk = w.data().data();
    sweep([&](std::size_t wi, std::size_t orow, std::size_t irow, std::size_t lo, std::size_t hi,
              std::size_t kx) {
      const double weight = wk[wi];
      for (std::size_t ox = lo; ox < hi; ++ox) o[orow + ox] += weight * xi[irow + ox * stride + kx - padding];
    });
  }

  return g.record(std::move(out), {input, kernels}, [sweep, stride, padding](const BackwardArgs& args) {
    const double* xi = args.graph.value(args.inputs[0]).data().data();
    const double* wk = args.graph.value(args.inputs[1]).data().data();
    const double* go = args.grad_output.data().data();
    Tensor* gx = args.grad_inputs[0];
    Tensor* gw = args.grad_inputs[1];
    double* dx = gx ? gx->data().data() : nullptr;
    double* dw = gw ? gw->data().data() : nullptr;
    sweep([&](std::size_t wi, std::size_t orow, std::size_t irow, std::size_t lo, std::size_t hi,
              std::size_t kx) {
      if (dx) {
        const double weight = wk[wi];
        for (std::size_t ox = lo; ox < hi; ++ox) dx[irow + ox * stride + kx - padding] += weight * go[orow + ox];
      }
      if (dw) {
        double acc = 0.0;
        for (std::size_t ox = lo; ox < hi; ++ox) acc += go[orow + ox] * xi[irow + ox * stride + kx - padding];
        dw[wi] += acc;
      }
    });
  });
}

// Mean over the spatial axes: [N,C,H,W] -> [N,C], [C,H,W] -> [C].
inline Var global_avg_pool(Graph& g, Var input) {
  const auto& x = g.value(input);
  const auto d = detail::spatial_dims(x, "global_avg_pool");
  const std::size_t plane = d.height * d.width;
  const std::size_t rows = d.batch * d.channels;
  Tensor out(d.batched ? Shape{d.batch, d.channels} : Shape{d.channels});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += x[r * plane + i];
    out[r] = acc / static_cast<double>(plane);
  }
  return g.record(std::move(out), {input}, [rows, plane](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t r = 0; r < rows; ++r) {
      const double v = args.grad_output[r] * inv;
      for (std::size_t i = 0; i < plane; ++i) (*gx)[r * plane + i] += v;
    }
  });
}

// Nearest-neighbour upsampling of the spatial axes by an integer factor.
inline Var upsample_nearest(Graph& g, Var input, std::size_t factor) {
  if (factor == 0) throw ValueError("upsample_nearest: factor must be >= 1");
  const auto& x = g.value(input);
  const auto d = detail::spatial_dims(x, "upsample_nearest");
  const std::size_t oh = d.height * factor, ow = d.width * factor;
  const std::size_t planes = d.batch * d.channels;
  const std::size_t h = d.height, w = d.width;
  Tensor out(detail::spatial_shape(d, d.channels, oh, ow));
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        out[(p * oh + y) * ow + xx] = x[(p * h + y / factor) * w + xx / factor];
      }
    }
  }
  return g.record(std::move(out), {input}, [=](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          (*gx)[(p * h + y / factor) * w + xx / factor] += args.grad_output[(p * oh + y) * ow + xx];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { relu, sigmoid, softmax };

inline const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

namespace detail {

inline void reject_nan(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (std::isnan(v)) throw ValueError(std::string(op) + ": NaN input");
  }
}

inline double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Splits a shape around `axis` into (outer, extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& shape, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

inline Var relu(Graph& g, Var a) {
  const auto& x = g.value(a);
  detail::reject_nan(x, "relu");
  Tensor out = x;
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return g.record(std::move(out), {a}, [](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    for (std::size_t i = 0; i < gx->size(); ++i) {
      if (args.output[i] > 0.0) (*gx)[i] += args.grad_output[i];
    }
  });
}

inline Var sigmoid(Graph& g, Var a) {
  const auto& x = g.value(a);
  detail::reject_nan(x, "sigmoid");
  Tensor out = x;
  for (auto& v : out.data()) v = detail::stable_sigmoid(v);
  return g.record(std::move(out), {a}, [](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    for (std::size_t i = 0; i < gx->size(); ++i) {
      const double s = args.output[i];
      (*gx)[i] += args.grad_output[i] * s * (1.0 - s);
    }
  });
}

// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
inline Var softmax(Graph& g, Var a, std::size_t axis) {
  const auto& x = g.value(a);
  detail::reject_nan(x, "softmax");
  if (axis >= x.ndim()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  }
  const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
  Tensor out = x;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < extent; ++k) peak = std::max(peak, x[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < extent; ++k) {
        const double e = std::exp(x[base + k * inner] - peak);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < extent; ++k) out[base + k * inner] /= total;
    }
  }
  return g.record(std::move(out), {a}, [outer = outer, extent = extent, inner = inner](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    const auto& s = args.output;
    const auto& go = args.grad_output;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < extent; ++k) dot += go[base + k * inner] * s[base + k * inner];
        for (std::size_t k = 0; k < extent; ++k) {
          const std::size_t j = base + k * inner;
          (*gx)[j] += s[j] * (go[j] - dot);
        }
      }
    }
  });
}

// relu / sigmoid elementwise; softmax over the last axis.
inline Var apply_activation(Graph& g, Var a, Activation kind) {
  switch (kind) {
    case Activation::relu: return relu(g, a);
    case Activation::sigmoid: return sigmoid(g, a);
    case Activation::softmax: {
      const auto& x = g.value(a);
      if (x.ndim() == 0) throw ShapeError("softmax: input needs at least one axis");
      return softmax(g, a, x.ndim() - 1);
    }
  }
  throw ValueError("unknown activation");
}

// ---------------------------------------------------------------------------
// Losses

// Mean negative log-likelihood of the target class, computed by log-sum-exp.
// logits: [B,K] with B labels, [K,H,W] with H·W labels, or [N,K,H,W] with
// N·H·W labels (row-major over N,H,W).
inline Var cross_entropy(Graph& g, Var logits, std::span<const std::int32_t> labels) {
  const auto& x = g.value(logits);
  std::size_t axis = 0;
  if (x.ndim() == 2 || x.ndim() == 4) {
    axis = 1;
  } else if (x.ndim() == 3) {
    axis = 0;
  } else {
    throw ShapeError("cross_entropy: unsupported logits shape " + shape_string(x.shape()));
  }
  const auto [outer, classes, inner] = detail::split_axis(x.shape(), axis);
  const std::size_t count = outer * inner;
  if (labels.size() != count) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_string(x.shape()));
  }
  for (auto label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ValueError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  detail::reject_nan(x, "cross_entropy");

  Tensor probs(x.shape());
  double total = 0.0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * classes * inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < classes; ++k) peak = std::max(peak, x[base + k * inner]);
      double sum_exp = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        const double e = std::exp(x[base + k * inner] - peak);
        probs[base + k * inner] = e;
        sum_exp += e;
      }
      for (std::size_t k = 0; k < classes; ++k) probs[base + k * inner] /= sum_exp;
      const auto label = static_cast<std::size_t>(labels[o * inner + i]);
      total += peak + std::log(sum_exp) - x[base + label * inner];
    }
  }
  std::vector<std::int32_t> targets(labels.begin(), labels.end());
  const double inv_count = 1.0 / static_cast<double>(count);
  return g.record(Tensor::scalar(total * inv_count), {logits},
                  [probs = std::move(probs), targets = std::move(targets), outer = outer,
                   classes = classes, inner = inner, inv_count](const BackwardArgs& args) {
                    auto* gx = args.grad_inputs[0];
                    const double scale_factor = args.grad_output[0] * inv_count;
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t base = o * classes * inner + i;
                        const auto label = static_cast<std::size_t>(targets[o * inner + i]);
                        for (std::size_t k = 0; k < classes; ++k) {
                          const std::size_t j = base + k * inner;
                          (*gx)[j] += scale_factor * (probs[j] - (k == label ? 1.0 : 0.0));
                        }
                      }
                    }
                  });
}

// Mean binary cross-entropy between sigmoid(logits) and targets in [0, 1].
inline Var binary_cross_entropy_with_logits(Graph& g, Var logits, const Tensor& targets) {
  const auto& x = g.value(logits);
  if (x.shape() != targets.shape()) {
    throw ShapeError("binary_cross_entropy: logits " + shape_string(x.shape()) + " vs targets " +
                     shape_string(targets.shape()));
  }
  for (double t : targets.data()) {
    if (!(t >= 0.0 && t <= 1.0)) throw ValueError("binary_cross_entropy: target outside [0, 1]");
  }
  detail::reject_nan(x, "binary_cross_entropy");
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    total += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double inv_count = 1.0 / static_cast<double>(x.size());
  return g.record(Tensor::scalar(total * inv_count), {logits}, [targets, inv_count](const BackwardArgs& args) {
    auto* gx = args.grad_inputs[0];
    const auto& x = args.graph.value(args.inputs[0]);
    const double scale_factor = args.grad_output[0] * inv_count;
    for (std::size_t i = 0; i < gx->size(); ++i) {
      (*gx)[i] += scale_factor * (detail::stable_sigmoid(x[i]) - targets[i]);
    }
  });
}

}  // namespace mtl
