#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mtl/error.hpp"

namespace mtl {

// Per-pixel instance ids (0 = background) with a class label per instance.
struct InstanceMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> ids;
  std::map<std::int32_t, std::int32_t> classes;

  InstanceMask() = default;
  InstanceMask(std::size_t h, std::size_t w) : height(h), width(w), ids(h * w, 0) {}

  std::int32_t& at(std::size_t y, std::size_t x) { return ids[y * width + x]; }
  std::int32_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }

  // Sorted ids of the instances that own at least one pixel.
  std::vector<std::int32_t> instance_ids() const {
    std::vector<std::int32_t> out;
    std::vector<std::int32_t> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (auto id : sorted) {
      if (id != 0) out.push_back(id);
    }
    return out;
  }

  std::int32_t class_of(std::int32_t id) const {
    auto it = classes.find(id);
    if (it == classes.end()) throw ValueError("instance " + std::to_string(id) + " has no class label");
    return it->second;
  }

  void validate() const {
    if (ids.size() != height * width) throw ShapeError("instance mask: id map does not match its dimensions");
    for (auto id : ids) {
      if (id < 0) throw ValueError("instance mask: negative instance id " + std::to_string(id));
    }
    for (auto id : instance_ids()) class_of(id);
  }

  friend bool operator==(const InstanceMask&, const InstanceMask&) = default;
};

// Binary pixel membership over an image.
struct PixelSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> member;

  std::size_t count() const { return static_cast<std::size_t>(std::count(member.begin(), member.end(), 1)); }
};

inline PixelSet pixels_of(const InstanceMask& mask, std::int32_t id) {
  PixelSet s{mask.height, mask.width, std::vector<std::uint8_t>(mask.ids.size(), 0)};
  for (std::size_t i = 0; i < mask.ids.size(); ++i) s.member[i] = mask.ids[i] == id ? 1 : 0;
  return s;
}

// |a ∩ b| / |a ∪ b|; at least one set must be nonempty.
inline double iou(const PixelSet& a, const PixelSet& b) {
  if (a.height != b.height || a.width != b.width || a.member.size() != b.member.size()) {
    throw ShapeError("iou: pixel sets have different dimensions");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.member.size(); ++i) {
    inter += (a.member[i] && b.member[i]) ? 1 : 0;
    uni += (a.member[i] || b.member[i]) ? 1 : 0;
  }
  if (uni == 0) throw ValueError("iou: both pixel sets are empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MatchedPair {
  std::int32_t pred_id;
  std::int32_t gt_id;
  double iou;

  friend bool operator==(const MatchedPair&, const MatchedPair&) = default;
};

struct SegmentMatching {
  std::vector<MatchedPair> matches;             // sorted by gt id
  std::vector<std::int32_t> false_positives;    // unmatched pred ids, sorted
  std::vector<std::int32_t> false_negatives;    // unmatched gt ids, sorted
};

namespace detail {

inline void check_same_dims(const InstanceMask& a, const InstanceMask& b) {
  if (a.height != b.height || a.width != b.width || a.ids.size() != b.ids.size()) {
    throw ShapeError("masks differ in size: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

}  // namespace detail

// Pairs (pred, gt) with IoU > 0.5. Above that threshold every segment can
// overlap at most one partner by more than half, so the matching is unique.
// Background (id 0) never participates.
inline SegmentMatching match_segments(const InstanceMask& pred, const InstanceMask& gt, bool class_aware = false) {
  detail::check_same_dims(pred, gt);
  std::map<std::int32_t, std::size_t> pred_area, gt_area;
  std::map<std::pair<std::int32_t, std::int32_t>, std::size_t> overlap;
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const auto p = pred.ids[i], g = gt.ids[i];
    if (p != 0) ++pred_area[p];
    if (g != 0) ++gt_area[g];
    if (p != 0 && g != 0) ++overlap[{p, g}];
  }
  SegmentMatching out;
  std::map<std::int32_t, bool> pred_used, gt_used;
  for (const auto& [key, inter] : overlap) {
    const auto [p, g] = key;
    if (class_aware && pred.class_of(p) != gt.class_of(g)) continue;
    const std::size_t uni = pred_area[p] + gt_area[g] - inter;
    const double value = static_cast<double>(inter) / static_cast<double>(uni);
    if (value <= 0.5) continue;
    if (pred_used[p] || gt_used[g]) throw Error("match_segments: IoU > 0.5 matched a segment twice");
    pred_used[p] = gt_used[g] = true;
    out.matches.push_back({p, g, value});
  }
  std::sort(out.matches.begin(), out.matches.end(),
            [](const MatchedPair& a, const MatchedPair& b) { return a.gt_id < b.gt_id; });
  for (const auto& [p, area] : pred_area) {
    if (!pred_used[p]) out.false_positives.push_back(p);
  }
  for (const auto& [g, area] : gt_area) {
    if (!gt_used[g]) out.false_negatives.push_back(g);
  }
  return out;
}

// Match counts and summed IoU; the PQ terms follow from these.
struct PQCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double iou_sum = 0.0;

  // Mean IoU over matches; 0 without matches.
  double sq() const { return tp == 0 ? 0.0 : iou_sum / static_cast<double>(tp); }
  // |TP| / (|TP| + ½|FP| + ½|FN|); 0 when there is nothing to recognise.
  double rq() const {
    const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
    return denom == 0.0 ? 0.0 : static_cast<double>(tp) / denom;
  }
  double pq() const { return sq() * rq(); }

  PQCounts& operator+=(const PQCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    iou_sum += o.iou_sum;
    return *this;
  }
};

struct PQReport {
  std::vector<MatchedPair> matches;
  std::vector<std::int32_t> false_positives;
  std::vector<std::int32_t> false_negatives;
  double sq = 0.0;
  double rq = 0.0;
  double pq = 0.0;
  bool class_aware = false;
  // Class-aware only: counts per class label (classes seen in pred or gt).
  std::map<std::int32_t, PQCounts> per_class;

  PQCounts counts() const {
    PQCounts c{matches.size(), false_positives.size(), false_negatives.size(), 0.0};
    for (const auto& m : matches) c.iou_sum += m.iou;
    return c;
  }
};

namespace detail {

// Mean of SQ/RQ/PQ over classes with ground-truth instances.
inline void average_over_gt_classes(const std::map<std::int32_t, PQCounts>& per_class, double& sq, double& rq,
                                    double& pq) {
  sq = rq = pq = 0.0;
  std::size_t n = 0;
  for (const auto& [cls, c] : per_class) {
    if (c.tp + c.fn == 0) continue;
    sq += c.sq();
    rq += c.rq();
    pq += c.pq();
    ++n;
  }
  if (n > 0) {
    sq /= static_cast<double>(n);
    rq /= static_cast<double>(n);
    pq /= static_cast<double>(n);
  }
}

}  // namespace detail

// Panoptic quality PQ = SQ·RQ. With class_aware, matches must agree on class
// and the reported figures are means over classes present in the ground truth.
inline PQReport panoptic_quality(const InstanceMask& pred, const InstanceMask& gt, bool class_aware = false) {
  auto m = match_segments(pred, gt, class_aware);
  PQReport report;
  report.matches = std::move(m.matches);
  report.false_positives = std::move(m.false_positives);
  report.false_negatives = std::move(m.false_negatives);
  report.class_aware = class_aware;
  if (!class_aware) {
    const auto c = report.counts();
    report.sq = c.sq();
    report.rq = c.rq();
    report.pq = c.pq();
    return report;
  }
  for (const auto& pair : report.matches) {
    auto& c = report.per_class[gt.class_of(pair.gt_id)];
    c.tp += 1;
    c.iou_sum += pair.iou;
  }
  for (auto id : report.false_positives) report.per_class[pred.class_of(id)].fp += 1;
  for (auto id : report.false_negatives) report.per_class[gt.class_of(id)].fn += 1;
  detail::average_over_gt_classes(report.per_class, report.sq, report.rq, report.pq);
  return report;
}

// Dataset-level PQ: pools matches, FP and FN over many images before forming
// SQ and RQ.
class PQAccumulator {
 public:
  void add(const PQReport& report) {
    total_ += report.counts();
    for (const auto& [cls, c] : report.per_class) per_class_[cls] += c;
    class_aware_ = report.class_aware;
  }

  const PQCounts& totals() const noexcept { return total_; }

  double sq() const { return summary().first[0]; }
  double rq() const { return summary().first[1]; }
  double pq() const { return summary().first[2]; }

 private:
  std::pair<std::array<double, 3>, bool> summary() const {
    if (!class_aware_) return {{total_.sq(), total_.rq(), total_.pq()}, false};
    std::array<double, 3> v{};
    detail::average_over_gt_classes(per_class_, v[0], v[1], v[2]);
    return {v, true};
  }

  PQCounts total_;
  std::map<std::int32_t, PQCounts> per_class_;
  bool class_aware_ = false;
};

// Groups pixels of equal nonzero label into 4-connected components. Instance
// ids follow raster order of each component's first pixel; the class of an
// instance is its label. Components smaller than min_area become background.
inline InstanceMask connected_components(std::span<const std::int32_t> labels, std::size_t height,
                                         std::size_t width, std::size_t min_area = 1) {
  if (labels.size() != height * width) throw ShapeError("connected_components: label map size mismatch");
  InstanceMask out(height, width);
  std::vector<std::size_t> stack;
  std::vector<std::size_t> component;
  std::int32_t next_id = 1;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (labels[start] == 0 || out.ids[start] != 0) continue;
    const auto label = labels[start];
    component.clear();
    stack.assign(1, start);
    out.ids[start] = -1;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      component.push_back(p);
      const std::size_t y = p / width, x = p % width;
      auto visit = [&](std::size_t q) {
        if (labels[q] == label && out.ids[q] == 0) {
          out.ids[q] = -1;
          stack.push_back(q);
        }
      };
      if (y > 0) visit(p - width);
      if (y + 1 < height) visit(p + width);
      if (x > 0) visit(p - 1);
      if (x + 1 < width) visit(p + 1);
    }
    if (component.size() >= min_area) {
      for (auto p : component) out.ids[p] = next_id;
      out.classes[next_id] = label;
      ++next_id;
    } else {
      // Marked visited with a sentinel until the sweep finishes.
      for (auto p : component) out.ids[p] = -2;
    }
  }
  for (auto& id : out.ids) {
    if (id < 0) id = 0;
  }
  return out;
}

// Fraction of equal entries.
inline double accuracy(std::span<const std::int32_t> predicted, std::span<const std::int32_t> truth) {
  if (predicted.size() != truth.size()) {
    throw ShapeError("accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) throw ValueError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// out[i] = mean(series[max(0, i−window+1) ..= i]); the head uses partial windows.
inline std::vector<double> rolling_mean(std::span<const double> series, std::size_t window) {
  if (window == 0) throw ValueError("rolling_mean: window must be >= 1");
  std::vector<double> out(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
    // Offsets from the first element keep constant windows exact.
    const double anchor = series[first];
    double acc = 0.0;
    for (std::size_t j = first; j <= i; ++j) acc += series[j] - anchor;
    out[i] = anchor + acc / static_cast<double>(i - first + 1);
  }
  return out;
}

}  // namespace mtl
