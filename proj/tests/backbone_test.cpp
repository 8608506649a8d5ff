#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hyperdys/backbone.hpp"
#include "hyperdys/weights.hpp"
#include "test_util.hpp"

using namespace hyperdys;
using backbone::AlexNet;
using backbone::BackboneConfig;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hyperdys_backbone_" + name);
}

AlexNet& shared_net() {
  static AlexNet net(BackboneConfig{.seed = 7});
  return net;
}

dsp::SpectrogramImage random_image(std::uint64_t seed) {
  dsp::SpectrogramImage img;
  img.pixels = hyperdys::testing::random_tensor<float>({3, 224, 224}, seed, 0.0, 1.0);
  return img;
}

ad::ParamStore<float> small_store(std::uint64_t seed) {
  ad::ParamStore<float> s;
  s.add("a.weight", hyperdys::testing::random_tensor<float>({3, 4}, seed));
  s.add("a.bias", hyperdys::testing::random_tensor<float>({4}, seed + 1));
  s.add("b", hyperdys::testing::random_tensor<float>({2, 1, 3}, seed + 2));
  return s;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(AlexNet, StageShapesMatchTable) {
  auto& net = shared_net();
  ad::Graph<float> g;
  std::vector<backbone::StageShape> trace;
  auto x = g.constant(hyperdys::testing::random_tensor<float>({2, 3, 224, 224}, 1, 0.0, 1.0));
  const auto y = net.forward(g, x, false, nullptr, &trace);
  const auto expected = backbone::expected_stage_shapes(2, 768);
  ASSERT_EQ(trace.size(), expected.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    EXPECT_EQ(trace[i].name, expected[i].name);
    EXPECT_EQ(trace[i].shape, expected[i].shape) << trace[i].name;
  }
  EXPECT_EQ(g.shape(y), (ad::Shape{2, 768}));
}

TEST(AlexNet, ParameterNamesAndShapes) {
  const auto& p = shared_net().params();
  EXPECT_EQ(p.at("features.0.weight").value.shape(), (ad::Shape{64, 3, 11, 11}));
  EXPECT_EQ(p.at("features.10.weight").value.shape(), (ad::Shape{256, 256, 3, 3}));
  EXPECT_EQ(p.at("classifier.1.weight").value.shape(), (ad::Shape{9216, 4096}));
  EXPECT_EQ(p.at("projection.weight").value.shape(), (ad::Shape{4096, 768}));
  EXPECT_EQ(p.size(), 16u);
  // Conv stack (2,469,696) + fc (37,752,832 + 16,781,312) + projection (3,146,496).
  EXPECT_EQ(p.parameter_count(), 2469696u + 37752832u + 16781312u + 3146496u);
}

TEST(AlexNet, KaimingBoundsAndZeroBias) {
  const auto& p = shared_net().params();
  const auto& k = p.at("features.3.weight").value;
  const float bound = std::sqrt(6.0f / (64 * 25));
  float lo = 0, hi = 0;
  for (float v : k.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  EXPECT_LE(hi, bound);
  EXPECT_GE(lo, -bound);
  EXPECT_GT(hi, 0.9f * bound);
  for (float v : p.at("classifier.4.bias").value.data()) EXPECT_EQ(v, 0.0f);
}

TEST(AlexNet, SeededInitIsReproducible) {
  AlexNet a(BackboneConfig{.seed = 7});
  const auto& ref = shared_net().params();
  for (const auto& prm : a.params()) EXPECT_EQ(prm->value, ref.at(prm->name).value) << prm->name;
  AlexNet b(BackboneConfig{.seed = 8});
  EXPECT_FALSE(b.params().at("features.0.weight").value == ref.at("features.0.weight").value);
}

TEST(AlexNet, ZeroImageGivesFiniteFeatures) {
  dsp::SpectrogramImage img;
  const auto f = backbone::extract_features(shared_net(), img, false);
  EXPECT_EQ(f.shape(), (ad::Shape{768}));
  EXPECT_TRUE(f.all_finite());
}

TEST(AlexNet, EvalIsDeterministicTrainUsesSeededDropout) {
  auto& net = shared_net();
  const auto img = random_image(3);
  EXPECT_EQ(backbone::extract_features(net, img, false), backbone::extract_features(net, img, false));
  std::mt19937_64 r1(11), r2(11), r3(12);
  const auto t1 = backbone::extract_features(net, img, true, &r1);
  const auto t2 = backbone::extract_features(net, img, true, &r2);
  const auto t3 = backbone::extract_features(net, img, true, &r3);
  EXPECT_EQ(t1, t2);
  EXPECT_FALSE(t1 == t3);
  EXPECT_THROW(backbone::extract_features(net, img, true, nullptr), ParameterError);
}

TEST(AlexNet, BatchedInferenceMatchesSingle) {
  auto& net = shared_net();
  const auto a = random_image(4), b = random_image(5);
  const auto batch = net.infer(backbone::stack_images({&a, &b}));
  const auto fb = backbone::extract_features(net, b, false);
  for (std::size_t j = 0; j < 768; ++j) EXPECT_NEAR(batch(1, j), fb[j], 1e-4f * (1 + std::abs(fb[j])));
}

TEST(AlexNet, RejectsWrongInputShape) {
  ad::Graph<float> g;
  auto x = g.constant(ad::Tensor<float>({1, 3, 100, 100}));
  EXPECT_THROW(shared_net().forward(g, x, false), ShapeError);
}

TEST(AlexNet, FineTuneReachesFirstConvFrozenDoesNot) {
  auto& net = shared_net();
  const auto img = random_image(6);
  auto run = [&] {
    net.params().zero_grad();
    ad::Graph<float> g;
    auto y = net.forward(g, g.constant(backbone::stack_images({&img})), false);
    g.backward(hyperdys::testing::weighted_sum(g, y, 3));
    double norm = 0;
    for (float v : net.params().at("features.0.weight").grad.data()) norm += double(v) * v;
    return std::sqrt(norm);
  };
  net.set_frozen(false);
  EXPECT_GT(run(), 0.0);
  net.set_frozen(true);
  EXPECT_EQ(run(), 0.0);
  net.set_frozen(false);
}

TEST(Weights, RoundTripIsBitExact) {
  const auto path = temp_path("round.hwts");
  auto src = small_store(1);
  weights::save(src, path);
  auto dst = small_store(100);
  const auto names = weights::load(path, dst);
  EXPECT_EQ(names.size(), 3u);
  for (const auto& p : src) EXPECT_EQ(p->value, dst.at(p->name).value);
  std::filesystem::remove(path);
}

TEST(Weights, FullBackboneRoundTrip) {
  const auto path = temp_path("alexnet.hwts");
  weights::save(shared_net().params(), path);
  AlexNet other(BackboneConfig{.pretrained = true, .weights_path = path, .seed = 99});
  for (const auto& p : other.params()) {
    EXPECT_EQ(p->value, shared_net().params().at(p->name).value) << p->name;
  }
  std::filesystem::remove(path);
}

TEST(Weights, HeaderLayout) {
  const auto bytes = weights::encode({{"w", ad::Tensor<float>({2}, 1.5f)}});
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 + 1 + 1 + 4 + 8 + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "HWTS");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 1);
  EXPECT_EQ(bytes[14], 'w');
  EXPECT_EQ(bytes[15], 1);
  EXPECT_EQ(bytes[16], 2);
}

TEST(Weights, ReshapedTensorRejectedAtomically) {
  auto src = small_store(1);
  auto bytes = weights::encode({{"a.weight", src.at("a.weight").value},
                                {"b", ad::Tensor<float>({3, 2}, 0.0f)}});
  auto dst = small_store(100);
  const auto before = dst.at("a.weight").value;
  EXPECT_THROW(weights::load(bytes, dst), IncompatibleWeightsError);
  EXPECT_EQ(dst.at("a.weight").value, before);
}

TEST(Weights, UnknownNameRejected) {
  auto bytes = weights::encode({{"nope", ad::Tensor<float>({1}, 0.0f)}});
  auto dst = small_store(1);
  EXPECT_THROW(weights::load(bytes, dst), IncompatibleWeightsError);
}

TEST(Weights, EmptyAndTruncatedAreFormatErrors) {
  auto dst = small_store(1);
  EXPECT_THROW(weights::load(std::vector<std::uint8_t>{}, dst), FormatError);
  auto bytes = weights::encode({{"b", ad::Tensor<float>({2, 1, 3}, 0.0f)}});
  bytes[0] = 'X';
  EXPECT_THROW(weights::load(bytes, dst), FormatError);
}

TEST(Weights, FlippedByteIsCorruption) {
  auto src = small_store(1);
  std::vector<weights::NamedTensor> ts;
  for (const auto& p : src) ts.push_back({p->name, p->value});
  auto bytes = weights::encode(ts);
  bytes[bytes.size() / 2] ^= 0x40;
  auto dst = small_store(100);
  const auto before = dst.at("b").value;
  EXPECT_THROW(weights::load(bytes, dst), CorruptionError);
  EXPECT_EQ(dst.at("b").value, before);
}

TEST(Weights, MissingFileIsDataError) {
  auto dst = small_store(1);
  EXPECT_THROW(weights::load(temp_path("absent.hwts"), dst), DataError);
}

TEST(Weights, PretrainedNeedsAllBackboneTensors) {
  const auto path = temp_path("partial.hwts");
  write_bytes(path, weights::encode({{"features.0.bias", ad::Tensor<float>({64}, 0.0f)}}));
  EXPECT_THROW(AlexNet(BackboneConfig{.pretrained = true, .weights_path = path}), IncompatibleWeightsError);
  std::filesystem::remove(path);
}
