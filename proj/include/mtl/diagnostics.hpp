#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtl/error.hpp"
#include "mtl/rng.hpp"

namespace mtl {

// ⟨u,v⟩ / (‖u‖·‖v‖), clamped to [−1, 1] against rounding.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine_similarity: length " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
  }
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw ValueError("cosine_similarity: zero vector");
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
  return 1.0 - cosine_similarity(u, v);
}

enum class TraceMode { exact, sketch };

inline constexpr std::size_t kSketchDim = 4096;

struct TraceEntry {
  std::uint64_t t = 0;
  std::uint32_t task = 0;
  std::vector<double> grad;  // full gradient, or its projection in sketch mode

  bool is_zero() const {
    return std::all_of(grad.begin(), grad.end(), [](double x) { return x == 0.0; });
  }
};

// Encoder gradients recorded per iteration.
//
// Sketch mode keeps P·g where P is a kSketchDim×D Gaussian matrix scaled by
// 1/√kSketchDim. Inner products and norms are preserved in expectation; for a
// pair at true cosine c the estimate has standard error about (1 − c²)/√4096,
// i.e. below 0.016, and the error concentrates at that scale (JL bound).
class GradTrace {
 public:
  explicit GradTrace(TraceMode mode = TraceMode::exact, std::uint64_t sketch_seed = 0)
      : mode_(mode), sketch_seed_(sketch_seed) {}

  TraceMode mode() const noexcept { return mode_; }
  std::uint64_t sketch_seed() const noexcept { return sketch_seed_; }
  // Dimension of the gradients fed to append (0 before the first entry).
  std::size_t source_dim() const noexcept { return source_dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<TraceEntry>& entries() const noexcept { return entries_; }
  const TraceEntry& operator[](std::size_t i) const { return entries_.at(i); }

  void append(std::uint64_t t, std::uint32_t task, std::span<const double> grad) {
    if (!entries_.empty() && t <= entries_.back().t) {
      throw ValueError("GradTrace: iteration " + std::to_string(t) + " does not follow " +
                       std::to_string(entries_.back().t));
    }
    if (source_dim_ == 0) {
      if (grad.empty()) throw ValueError("GradTrace: empty gradient");
      source_dim_ = grad.size();
    } else if (grad.size() != source_dim_) {
      throw ShapeError("GradTrace: gradient of length " + std::to_string(grad.size()) + ", expected " +
                       std::to_string(source_dim_));
    }
    TraceEntry e{t, task, {}};
    if (mode_ == TraceMode::exact) {
      e.grad.assign(grad.begin(), grad.end());
    } else {
      e.grad = project(grad);
    }
    entries_.push_back(std::move(e));
  }

  // Restores a recorded entry as-is (no projection), for loading from disk.
  void append_recorded(TraceEntry e, std::size_t source_dim) {
    if (!entries_.empty() && e.t <= entries_.back().t) throw ValueError("GradTrace: iterations not increasing");
    if (source_dim_ != 0 && source_dim != source_dim_) throw ShapeError("GradTrace: inconsistent source dimension");
    const std::size_t stored = mode_ == TraceMode::exact ? source_dim : kSketchDim;
    if (e.grad.size() != stored) throw ShapeError("GradTrace: stored vector has wrong length");
    source_dim_ = source_dim;
    entries_.push_back(std::move(e));
  }

 private:
  std::vector<double> project(std::span<const double> grad) {
    if (projection_.empty()) {
      Rng rng(sketch_seed_);
      const double scale = 1.0 / std::sqrt(static_cast<double>(kSketchDim));
      projection_.resize(kSketchDim * source_dim_);
      for (auto& p : projection_) p = rng.normal() * scale;
    }
    std::vector<double> out(kSketchDim, 0.0);
    for (std::size_t r = 0; r < kSketchDim; ++r) {
      const double* row = projection_.data() + r * source_dim_;
      double acc = 0.0;
      for (std::size_t c = 0; c < source_dim_; ++c) acc += row[c] * grad[c];
      out[r] = acc;
    }
    return out;
  }

  TraceMode mode_;
  std::uint64_t sketch_seed_;
  std::size_t source_dim_ = 0;
  std::vector<TraceEntry> entries_;
  std::vector<double> projection_;
};

struct ConsecutivePoint {
  std::uint64_t t = 0;  // the later iteration
  std::uint32_t task_prev = 0;
  std::uint32_t task_curr = 0;
  double similarity = 0.0;
  double distance = 0.0;
};

struct ConsecutiveSeries {
  std::vector<ConsecutivePoint> points;
  // Later-iteration index of every pair dropped because one side was zero.
  std::vector<std::uint64_t> skipped;
};

// Cosine between the gradient at each iteration and the one before it.
inline ConsecutiveSeries consecutive_trace(const GradTrace& trace) {
  if (trace.size() < 2) throw ValueError("consecutive_trace: need at least two entries");
  ConsecutiveSeries out;
  const auto& e = trace.entries();
  for (std::size_t i = 1; i < e.size(); ++i) {
    if (e[i - 1].is_zero() || e[i].is_zero()) {
      out.skipped.push_back(e[i].t);
      continue;
    }
    const double s = cosine_similarity(e[i - 1].grad, e[i].grad);
    out.points.push_back({e[i].t, e[i - 1].task, e[i].task, s, 1.0 - s});
  }
  return out;
}

// Cell (i, j) holds the mean cosine distance over the last `window` pairs in
// which task i was sampled right before task j. No window means all pairs.
struct PairwiseCosMatrix {
  std::size_t k = 0;
  std::vector<std::optional<double>> distance;  // row-major k×k, nullopt = no samples
  std::vector<std::size_t> count;               // qualifying pairs per cell

  const std::optional<double>& at(std::size_t i, std::size_t j) const { return distance.at(i * k + j); }
  std::size_t count_at(std::size_t i, std::size_t j) const { return count.at(i * k + j); }
};

inline PairwiseCosMatrix pairwise_matrix(const ConsecutiveSeries& series, std::size_t k,
                                         std::optional<std::size_t> window = 10) {
  if (k == 0) throw ValueError("pairwise_matrix: k must be >= 1");
  if (window && *window == 0) throw ValueError("pairwise_matrix: window must be >= 1");
  std::vector<std::vector<double>> cells(k * k);
  for (const auto& p : series.points) {
    if (p.task_prev >= k || p.task_curr >= k) {
      throw ValueError("pairwise_matrix: task index " + std::to_string(std::max(p.task_prev, p.task_curr)) +
                       " outside k=" + std::to_string(k));
    }
    cells[p.task_prev * k + p.task_curr].push_back(p.distance);
  }
  PairwiseCosMatrix out{k, std::vector<std::optional<double>>(k * k), std::vector<std::size_t>(k * k, 0)};
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto& v = cells[c];
    out.count[c] = v.size();
    if (v.empty()) continue;
    const std::size_t n = window ? std::min(*window, v.size()) : v.size();
    double acc = 0.0;
    for (std::size_t i = v.size() - n; i < v.size(); ++i) acc += v[i];
    out.distance[c] = acc / static_cast<double>(n);
  }
  return out;
}

inline PairwiseCosMatrix pairwise_matrix(const GradTrace& trace, std::size_t k,
                                         std::optional<std::size_t> window = 10) {
  return pairwise_matrix(consecutive_trace(trace), k, window);
}

struct ConcentrationStats {
  std::size_t dim = 0;
  std::size_t n_pairs = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
  double p05 = 0.0;
  double p95 = 0.0;
  std::vector<std::size_t> histogram;  // equal-width bins over [−1, 1]
};

namespace detail {

// Linear interpolation between closest ranks of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

// Cosine similarity of independent standard-normal vector pairs, per dimension.
// Each dimension draws from its own stream derived from (seed, dim).
inline std::vector<ConcentrationStats> concentration_experiment(std::span<const std::size_t> dims,
                                                                std::size_t n_pairs, std::uint64_t seed,
                                                                std::size_t bins = 40) {
  if (n_pairs < 2) throw ValueError("concentration_experiment: n_pairs must be >= 2");
  if (bins == 0) throw ValueError("concentration_experiment: bins must be >= 1");
  std::vector<ConcentrationStats> out;
  for (auto d : dims) {
    if (d < 2) throw ValueError("concentration_experiment: dimension " + std::to_string(d) + " < 2");
    Rng rng = Rng::derived({seed, d});
    std::vector<double> sims(n_pairs);
    for (auto& s : sims) {
      double uv = 0.0, uu = 0.0, vv = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double a = rng.normal(), b = rng.normal();
        uv += a * b;
        uu += a * a;
        vv += b * b;
      }
      s = std::clamp(uv / std::sqrt(uu * vv), -1.0, 1.0);
    }
    ConcentrationStats st;
    st.dim = d;
    st.n_pairs = n_pairs;
    for (double s : sims) st.mean += s;
    st.mean /= static_cast<double>(n_pairs);
    double ss = 0.0;
    for (double s : sims) ss += (s - st.mean) * (s - st.mean);
    st.std = std::sqrt(ss / static_cast<double>(n_pairs - 1));
    st.histogram.assign(bins, 0);
    for (double s : sims) {
      auto b = static_cast<std::size_t>((s + 1.0) / 2.0 * static_cast<double>(bins));
      ++st.histogram[std::min(b, bins - 1)];
    }
    std::sort(sims.begin(), sims.end());
    st.p05 = detail::quantile_sorted(sims, 0.05);
    st.p95 = detail::quantile_sorted(sims, 0.95);
    out.push_back(std::move(st));
  }
  return out;
}

// Least-squares slope of log(y) against log(x).
inline double log_log_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValueError("log_log_slope: need two or more matching points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0.0 || y[i] <= 0.0) throw ValueError("log_log_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw ValueError("log_log_slope: x values are all equal");
  return sxy / sxx;
}

inline double concentration_slope(const std::vector<ConcentrationStats>& stats) {
  std::vector<double> x, y;
  for (const auto& s : stats) {
    x.push_back(static_cast<double>(s.dim));
    y.push_back(s.std);
  }
  return log_log_slope(x, y);
}

}  // namespace mtl
