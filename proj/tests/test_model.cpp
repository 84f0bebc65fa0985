#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mtl/model.hpp"
#include "test_support.hpp"

using namespace mtl;

namespace {

Tensor batch_of(const Shape& example, std::size_t n, std::uint64_t seed) {
  Shape s = example;
  s.insert(s.begin(), n);
  return test_support::uniform_tensor(s, seed);
}

std::vector<LayerSpec> small_encoder() {
  return {ConvLayer{3, 4, 3, 1, 1}, ActivationLayer{Activation::relu}, ConvLayer{4, 6, 3, 2, 1},
          ActivationLayer{Activation::relu}, GlobalAvgPoolLayer{}};
}

}  // namespace

TEST(BuildEncoder, ConvReluPoolYieldsChannelCount) {
  ParamStore store;
  Rng rng(1);
  const auto enc = build_encoder({ConvLayer{3, 8, 3, 1, 0}, ActivationLayer{Activation::relu}, GlobalAvgPoolLayer{}},
                                 {3, 16, 16}, store, rng);
  ASSERT_TRUE(enc.feature_dim.has_value());
  EXPECT_EQ(*enc.feature_dim, 8u);
  // Shape propagation by hand: (16 - 3) / 1 + 1 = 14.
  EXPECT_EQ(*enc.spatial_shape, (Shape{8, 14, 14}));

  Graph g;
  const auto features = encode(g, enc, store, g.constant(batch_of({3, 16, 16}, 2, 0)));
  EXPECT_EQ(g.value(*features.vector).shape(), (Shape{2, 8}));
  EXPECT_EQ(g.value(*features.spatial).shape(), (Shape{2, 8, 14, 14}));
}

TEST(BuildEncoder, EmptySpecIsIdentity) {
  ParamStore store;
  Rng rng(1);
  const auto enc = build_encoder({}, {3, 4, 4}, store, rng);
  EXPECT_EQ(store.size(), 0u);
  EXPECT_EQ(*enc.feature_dim, 48u);
  const Tensor x = batch_of({3, 4, 4}, 2, 3);
  Graph g;
  const auto features = encode(g, enc, store, g.constant(x));
  EXPECT_EQ(g.value(*features.vector), x.reshaped({2, 48}));
}

TEST(BuildEncoder, ChannelMismatchReportsLayerIndex) {
  ParamStore store;
  Rng rng(1);
  try {
    build_encoder({ConvLayer{3, 8, 3, 1, 1}, ConvLayer{3, 4, 3, 1, 1}}, {3, 16, 16}, store, rng);
    FAIL() << "expected LayerSpecError";
  } catch (const LayerSpecError& e) {
    EXPECT_EQ(e.index(), 1u);
  }
  EXPECT_THROW(build_encoder({GlobalAvgPoolLayer{}, GlobalAvgPoolLayer{}}, {3, 4, 4}, store, rng), LayerSpecError);
}

TEST(BuildEncoder, InitializationRule) {
  ParamStore store;
  Rng rng(7);
  build_encoder({ConvLayer{3, 8, 3, 1, 1}, GlobalAvgPoolLayer{}, DenseLayer{0, 5}}, {3, 8, 8}, store, rng);
  for (auto id : store.ids(GroupId::encoder())) {
    const auto& t = store.value(id);
    if (store.name(id).ends_with(".bias")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0);
      continue;
    }
    const double limit = t.ndim() == 4 ? std::sqrt(6.0 / (3 * 9 + 8 * 9)) : std::sqrt(6.0 / (8 + 5));
    double peak = 0.0;
    for (double v : t.data()) peak = std::max(peak, std::abs(v));
    EXPECT_LE(peak, limit);
    EXPECT_GT(peak, 0.5 * limit);
  }
  ParamStore again;
  Rng rng2(7);
  build_encoder({ConvLayer{3, 8, 3, 1, 1}, GlobalAvgPoolLayer{}, DenseLayer{0, 5}}, {3, 8, 8}, again, rng2);
  EXPECT_TRUE(bit_identical(store, again));
}

TEST(ClassificationDecoder, SoftmaxRowsSumToOne) {
  ParamStore store;
  Rng rng(2);
  const auto enc = build_encoder(small_encoder(), {3, 8, 8}, store, rng);
  const auto dec = build_classification_decoder(0, *enc.feature_dim, 3, Activation::softmax, store, rng);
  Graph g;
  const auto out = forward_task(g, enc, dec, store, g.constant(batch_of({3, 8, 8}, 4, 1)));
  const auto& y = g.value(out.prediction);
  ASSERT_EQ(y.shape(), (Shape{4, 3}));
  for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(y[r * 3] + y[r * 3 + 1] + y[r * 3 + 2], 1.0, 1e-12);
}

TEST(ClassificationDecoder, TableArities) {
  ParamStore store;
  Rng rng(2);
  std::size_t task = 0;
  for (std::size_t k : {2, 9, 6, 3, 4, 3, 5}) {
    const auto dec = build_classification_decoder(task++, 16, k, Activation::softmax, store, rng);
    EXPECT_EQ(dec.output_shape, (Shape{k}));
  }
  EXPECT_NO_THROW(build_classification_decoder(task++, 16, 1, Activation::sigmoid, store, rng));
}

TEST(ClassificationDecoder, RejectsBadDimensions) {
  ParamStore store;
  Rng rng(2);
  EXPECT_THROW(build_classification_decoder(0, 0, 3, Activation::softmax, store, rng), ValueError);
  EXPECT_THROW(build_classification_decoder(0, 8, 0, Activation::sigmoid, store, rng), ValueError);
  EXPECT_THROW(build_classification_decoder(0, 8, 1, Activation::softmax, store, rng), ValueError);
}

TEST(SegmentationDecoder, UpsamplesToInputResolution) {
  ParamStore store;
  Rng rng(3);
  const auto enc = build_encoder({ConvLayer{3, 4, 3, 2, 1}, ActivationLayer{Activation::relu}}, {3, 16, 16}, store,
                                 rng);
  ASSERT_EQ(*enc.spatial_shape, (Shape{4, 8, 8}));
  const auto dec = build_segmentation_decoder(0, *enc.spatial_shape, 2, UpsampleSpec{{{2, 1}}, 0}, {16, 16}, store, rng);
  EXPECT_EQ(dec.output_shape, (Shape{2, 16, 16}));
  Graph g;
  const auto out = forward_task(g, enc, dec, store, g.constant(batch_of({3, 16, 16}, 3, 4)));
  EXPECT_EQ(g.value(out.logits).shape(), (Shape{3, 2, 16, 16}));
  const auto& p = g.value(out.prediction);
  for (std::size_t i = 0; i < 3 * 256; ++i) {
    const std::size_t n = i / 256, px = i % 256;
    EXPECT_NEAR(p[(n * 2) * 256 + px] + p[(n * 2 + 1) * 256 + px], 1.0, 1e-12);
  }
}

TEST(SegmentationDecoder, SigmoidMaskHead) {
  ParamStore store;
  Rng rng(3);
  const auto enc = build_encoder({ConvLayer{3, 4, 3, 1, 1}}, {3, 8, 8}, store, rng);
  const auto dec = build_segmentation_decoder(0, *enc.spatial_shape, 1, UpsampleSpec{}, {8, 8}, store, rng);
  EXPECT_EQ(dec.output_activation, Activation::sigmoid);
  Graph g;
  const auto out = forward_task(g, enc, dec, store, g.constant(batch_of({3, 8, 8}, 2, 5)));
  const auto& p = g.value(out.prediction);
  EXPECT_EQ(p.shape(), (Shape{2, 1, 8, 8}));
  for (double v : p.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(SegmentationDecoder, ResolutionMismatchRejected) {
  ParamStore store;
  Rng rng(3);
  EXPECT_THROW(build_segmentation_decoder(0, {4, 6, 6}, 2, UpsampleSpec{{{2, 3}}, 0}, {16, 16}, store, rng),
               ShapeError);
}

TEST(ForwardTask, ZeroWeightsGiveUniformPrediction) {
  ParamStore store;
  Rng rng(4);
  const auto enc = build_encoder({}, {1, 2, 2}, store, rng);
  const auto dec = build_classification_decoder(0, 4, 2, Activation::softmax, store, rng);
  for (auto id : store.ids()) store.set_value(id, Tensor(store.value(id).shape(), 0.0));
  Graph g;
  const auto out = forward_task(g, enc, dec, store, g.constant(Tensor({1, 2, 2}, {1, 2, 3, 4})));
  EXPECT_EQ(g.value(out.prediction), Tensor({1, 2}, {0.5, 0.5}));
}

TEST(ForwardTask, Deterministic) {
  ParamStore store;
  Rng rng(5);
  const auto enc = build_encoder(small_encoder(), {3, 8, 8}, store, rng);
  const auto dec = build_classification_decoder(0, *enc.feature_dim, 4, Activation::softmax, store, rng);
  const Tensor x = batch_of({3, 8, 8}, 3, 9);
  Graph g1, g2;
  const auto a = forward_task(g1, enc, dec, store, g1.constant(x));
  const auto b = forward_task(g2, enc, dec, store, g2.constant(x));
  EXPECT_TRUE(bit_identical(g1.value(a.prediction), g2.value(b.prediction)));
}

TEST(ForwardTask, ClassificationOnSpatialFeaturesRejected) {
  ParamStore store;
  Rng rng(5);
  const auto enc = build_encoder({ConvLayer{3, 4, 3, 1, 1}, ActivationLayer{Activation::relu}}, {3, 8, 8}, store, rng);
  EXPECT_FALSE(enc.feature_dim.has_value());
  const auto dec = build_classification_decoder(0, 4, 2, Activation::softmax, store, rng);
  Graph g;
  EXPECT_THROW(forward_task(g, enc, dec, store, g.constant(batch_of({3, 8, 8}, 1, 0))), ShapeError);
}

TEST(ParamStore, GroupsPartitionAndEncoderIsShared) {
  ParamStore store;
  Rng rng(6);
  const auto enc = build_encoder(small_encoder(), {3, 8, 8}, store, rng);
  std::vector<DecoderModel> decoders;
  decoders.push_back(build_classification_decoder(0, *enc.feature_dim, 3, Activation::softmax, store, rng));
  decoders.push_back(build_classification_decoder(1, *enc.feature_dim, 2, Activation::sigmoid, store, rng));
  decoders.push_back(build_segmentation_decoder(2, *enc.spatial_shape, 2, UpsampleSpec{{{2, 3}}, 0}, {8, 8}, store,
                                                rng));
  EXPECT_NO_THROW(store.check_partition());
  EXPECT_EQ(store.groups().size(), 4u);

  const auto encoder_ids = store.ids(GroupId::encoder());
  const Tensor x = batch_of({3, 8, 8}, 2, 1);
  for (const auto& dec : decoders) {
    Graph g;
    const auto out = forward_task(g, enc, dec, store, g.constant(x));
    const auto grads = backward(g, sum(g, out.logits));
    std::vector<ParamId> seen_encoder;
    for (const auto& [id, grad] : grads) {
      if (store.group(id).is_encoder()) {
        seen_encoder.push_back(id);
      } else {
        EXPECT_EQ(store.group(id), GroupId::decoder(dec.task_id));
      }
    }
    EXPECT_EQ(seen_encoder, encoder_ids);
  }
}
