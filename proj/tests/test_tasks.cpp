#include <gtest/gtest.h>

#include <map>
#include <set>

#include "mtl/autodiff.hpp"
#include "mtl/optim.hpp"
#include "mtl/tasks.hpp"
#include "test_support.hpp"

using namespace mtl;

namespace {

// Hands out 0, 1, 2, ... modulo n.
struct CountingRng {
  std::uint64_t next = 0;
  std::uint64_t below(std::uint64_t n) { return next++ % n; }
};

TaskDataset small_seg(TaskKind kind, std::size_t k, std::uint64_t seed, std::size_t max_instances = 3,
                      std::size_t n = 40) {
  return gen_segmentation_task(kind, 32, max_instances, k, n, 10, seed);
}

}  // namespace

TEST(TaskSpec, ConsistencyRules) {
  EXPECT_NO_THROW(make_task_spec(0, "a", TaskKind::classification, 3, {3, 8, 8}));
  EXPECT_THROW(make_task_spec(0, "a", TaskKind::classification, 1, {3, 8, 8}), ValueError);
  EXPECT_THROW(make_task_spec(0, "a", TaskKind::binary_segmentation, 2, {3, 8, 8}), ValueError);
  EXPECT_THROW(make_task_spec(0, "a", TaskKind::classification, 2, {8, 8}), ValueError);
  auto s = make_task_spec(0, "a", TaskKind::classification, 3, {3, 8, 8});
  s.metric = MetricKind::pq;
  EXPECT_THROW(s.validate(), ValueError);
}

TEST(GenClassification, DeterministicAndBalanced) {
  const auto a = gen_classification_task(9, {3, 16, 16}, 100, 30, 0.0, 5);
  const auto b = gen_classification_task(9, {3, 16, 16}, 100, 30, 0.0, 5);
  EXPECT_TRUE(a == b);
  EXPECT_EQ(encode_dataset(a), encode_dataset(b));
  EXPECT_FALSE(a == gen_classification_task(9, {3, 16, 16}, 100, 30, 0.0, 6));
  for (auto split : {Split::train, Split::eval}) {
    std::map<std::int32_t, int> hist;
    for (auto i : a.indices(split)) ++hist[a.labels[i]];
    ASSERT_EQ(hist.size(), 9u);
    int lo = 1 << 30, hi = 0;
    for (auto [label, count] : hist) lo = std::min(lo, count), hi = std::max(hi, count);
    EXPECT_LE(hi - lo, 1);
  }
  EXPECT_NO_THROW(a.validate());
  EXPECT_THROW(gen_classification_task(1, {3, 8, 8}, 10, 10, 0.0, 1), ValueError);
  EXPECT_THROW(gen_classification_task(5, {3, 8, 8}, 4, 10, 0.0, 1), ValueError);
}

TEST(GenClassification, LinearProbeLearnsBinaryTask) {
  const auto ds = gen_classification_task(2, {3, 32, 32}, 256, 128, 0.0, 11);
  const std::size_t d = ds.example_size();
  ParamStore store;
  const auto w = store.add(GroupId::encoder(), "w", Tensor({d, 2}, 0.0));
  const auto b = store.add(GroupId::encoder(), "b", Tensor({2}, 0.0));
  auto state = adam_init(store, {w, b}, AdamConfig{1e-2, 0.9, 0.999, 1e-8});
  const auto train = make_batch(ds, ds.indices(Split::train));
  const auto eval = make_batch(ds, ds.indices(Split::eval));
  auto logits_for = [&](Graph& g, const Batch& batch) {
    const Var x = g.constant(batch.x.reshaped({batch.indices.size(), d}));
    return add_bias(g, matmul(g, x, g.parameter(w, store.value(w))), g.parameter(b, store.value(b)));
  };
  for (int step = 0; step < 100; ++step) {
    Graph g;
    const Var loss = cross_entropy(g, logits_for(g, train), train.labels);
    adam_step(state, store, backward(g, loss));
  }
  Graph g;
  const auto& logits = g.value(logits_for(g, eval));
  std::vector<std::int32_t> predicted;
  for (std::size_t r = 0; r < eval.indices.size(); ++r) predicted.push_back(logits[r * 2 + 1] > logits[r * 2] ? 1 : 0);
  EXPECT_GE(accuracy(predicted, eval.labels), 0.95);
}

TEST(GenSegmentation, MaskIsSelfConsistent) {
  for (auto kind : {TaskKind::binary_segmentation, TaskKind::instance_segmentation}) {
    const auto ds = small_seg(kind, kind == TaskKind::binary_segmentation ? 1 : 3, 3);
    EXPECT_NO_THROW(ds.validate());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto m = ds.mask(i);
      EXPECT_NO_THROW(m.validate());
      EXPECT_EQ(panoptic_quality(m, m, kind == TaskKind::instance_segmentation).pq, 1.0);
    }
  }
}

TEST(GenSegmentation, SingleInstanceCap) {
  const auto ds = small_seg(TaskKind::binary_segmentation, 1, 4, 1, 100);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_LE(ds.mask(i).instance_ids().size(), 1u);
}

TEST(GenSegmentation, InstancesDisjointAndSeparated) {
  // Connected components of the class map must reproduce the instances, so
  // no two shapes touch.
  const auto ds = gen_segmentation_task(TaskKind::instance_segmentation, 32, 5, 4, 900, 100, 8);
  const std::size_t hw = 32 * 32;
  std::size_t shapes = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto truth = ds.mask(i);
    const std::span<const std::int32_t> cls(ds.class_map.data() + i * hw, hw);
    const auto cc = connected_components(cls, 32, 32);
    ASSERT_EQ(cc.instance_ids().size(), truth.instance_ids().size()) << "image " << i;
    const auto r = panoptic_quality(cc, truth, true);
    EXPECT_EQ(r.false_positives.size() + r.false_negatives.size(), 0u);
    for (const auto& m : r.matches) EXPECT_EQ(m.iou, 1.0);
    shapes += truth.instance_ids().size();
  }
  EXPECT_GT(shapes, ds.size() * 2);
}

TEST(GenSegmentation, RejectsBadArguments) {
  EXPECT_THROW(gen_segmentation_task(TaskKind::binary_segmentation, 4, 1, 1, 4, 4, 0), ValueError);
  EXPECT_THROW(gen_segmentation_task(TaskKind::binary_segmentation, 32, 0, 1, 4, 4, 0), ValueError);
  EXPECT_THROW(gen_segmentation_task(TaskKind::classification, 32, 1, 2, 4, 4, 0), ValueError);
}

TEST(SampleBatch, CountingStubCoversSplit) {
  const auto ds = gen_classification_task(3, {3, 8, 8}, 12, 6, 0.0, 1);
  CountingRng stub;
  const auto eval = ds.indices(Split::eval);
  const auto batch = sample_batch(ds, Split::eval, eval.size(), stub);
  EXPECT_EQ(batch.indices, eval);
  EXPECT_EQ(batch.x.shape(), (Shape{6, 3, 8, 8}));
  for (std::size_t r = 0; r < eval.size(); ++r) EXPECT_EQ(batch.labels[r], ds.labels[eval[r]]);
}

TEST(SampleBatch, DeterministicGivenState) {
  const auto ds = small_seg(TaskKind::binary_segmentation, 1, 2);
  Rng a(9), b(9);
  const auto x = sample_batch(ds, Split::train, 8, a);
  const auto y = sample_batch(ds, Split::train, 8, b);
  EXPECT_EQ(x.indices, y.indices);
  EXPECT_TRUE(bit_identical(x.x, y.x));
  EXPECT_TRUE(bit_identical(x.targets, y.targets));
  EXPECT_EQ(x.targets.shape(), (Shape{8, 1, 32, 32}));
}

TEST(SampleBatch, LabelsAlwaysValid) {
  const auto cls = gen_classification_task(5, {3, 8, 8}, 20, 10, 0.0, 1);
  const auto inst = small_seg(TaskKind::instance_segmentation, 3, 1);
  Rng rng(1);
  for (int draw = 0; draw < 10000; ++draw) {
    const auto b = sample_batch(cls, Split::train, 1, rng);
    ASSERT_TRUE(b.labels[0] >= 0 && b.labels[0] < 5);
    ASSERT_EQ(cls.split[b.indices[0]], 0);
  }
  for (int draw = 0; draw < 200; ++draw) {
    const auto b = sample_batch(inst, Split::eval, 2, rng);
    ASSERT_EQ(b.labels.size(), 2u * 32 * 32);
    for (auto y : b.labels) ASSERT_TRUE(y >= 0 && y < 3);
  }
  TaskDataset empty_eval = cls;
  std::fill(empty_eval.split.begin(), empty_eval.split.end(), 0);
  EXPECT_THROW(sample_batch(empty_eval, Split::eval, 1, rng), DataError);
}

TEST(DatasetFile, RoundTrip) {
  const auto dir = test_support::scratch_dir("tasks_roundtrip");
  for (const auto& ds : {gen_classification_task(4, {3, 8, 8}, 8, 4, 0.5, 77, 3, "four"),
                         small_seg(TaskKind::instance_segmentation, 3, 5),
                         small_seg(TaskKind::binary_segmentation, 1, 6)}) {
    save_dataset(dir / "d.mtld", ds);
    const auto back = load_dataset(dir / "d.mtld");
    EXPECT_TRUE(back == ds);
    EXPECT_EQ(back.seed, ds.seed);
    EXPECT_EQ(back.spec, ds.spec);
    EXPECT_EQ(back.split, ds.split);
  }
}

TEST(DatasetFile, DistinctErrors) {
  const auto ds = gen_classification_task(2, {3, 4, 4}, 4, 2, 0.0, 1);
  const auto good = encode_dataset(ds);

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x01;  // inside the f64 payload
  EXPECT_THROW(decode_dataset(flipped), ChecksumError);

  auto magic = good;
  std::copy_n("XXXX", 4, magic.begin());
  EXPECT_THROW(decode_dataset(magic), BadMagicError);

  auto version = good;
  version[4] = 9;
  EXPECT_THROW(decode_dataset(version), VersionError);

  const std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() - 10));
  try {
    decode_dataset(cut);
    FAIL() << "expected TruncatedError";
  } catch (const TruncatedError& e) {
    EXPECT_LE(e.offset(), cut.size());
  }
}

TEST(DefaultSuite, ShapeOfTheRoster) {
  const auto suite = default_suite();
  ASSERT_EQ(suite.size(), 11u);
  std::vector<std::size_t> arities;
  std::size_t binary = 0, instance = 0;
  std::set<std::string> names;
  for (const auto& r : suite) {
    names.insert(r.name);
    if (r.kind == TaskKind::classification) arities.push_back(r.num_classes);
    binary += r.kind == TaskKind::binary_segmentation;
    instance += r.kind == TaskKind::instance_segmentation;
  }
  EXPECT_EQ(arities, (std::vector<std::size_t>{2, 9, 6, 3, 4, 3, 5}));
  EXPECT_EQ(binary, 3u);
  EXPECT_EQ(instance, 1u);
  EXPECT_EQ(names.size(), 11u);
}

TEST(DefaultSuite, GenerationIsPerTaskDeterministic) {
  auto recipe = default_suite()[7];
  recipe.n_train = 6;
  recipe.n_eval = 2;
  const auto a = generate_task(recipe, 7, 1);
  EXPECT_TRUE(a == generate_task(recipe, 7, 1));
  EXPECT_FALSE(a == generate_task(recipe, 7, 2));
  EXPECT_EQ(a.spec.id, 7u);
  EXPECT_EQ(a.spec.name, recipe.name);
}
