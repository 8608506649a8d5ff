#include "hyperdys/backbone.hpp"

#include <algorithm>
#include <cstring>

#include "hyperdys/weights.hpp"

namespace hyperdys::backbone {

namespace {

struct ConvSpec {
  const char* name;
  std::size_t in, out, kernel, stride, pad;
  bool pool_after;
};

constexpr ConvSpec kConvs[] = {
    {"features.0", 3, 64, 11, 4, 2, true},
    {"features.3", 64, 192, 5, 1, 2, true},
    {"features.6", 192, 384, 3, 1, 1, false},
    {"features.8", 384, 256, 3, 1, 1, false},
    {"features.10", 256, 256, 3, 1, 1, true},
};

void add_linear(ad::ParamStore<float>& store, const std::string& name, std::size_t in,
                std::size_t out, std::mt19937_64& rng) {
  ad::Tensor<float> w({in, out});
  ad::kaiming_uniform(w, in, rng);
  store.add(name + ".weight", std::move(w));
  store.add(name + ".bias", ad::Tensor<float>({out}, 0.0f));
}

}  // namespace

AlexNet::AlexNet(const BackboneConfig& cfg) : cfg_(cfg) {
  if (cfg.feature_dim == 0) throw ParameterError("backbone feature_dim must be positive");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ParameterError("backbone dropout must be in [0,1)");
  std::mt19937_64 rng(cfg.seed);
  for (const auto& c : kConvs) {
    ad::Tensor<float> k({c.out, c.in, c.kernel, c.kernel});
    ad::kaiming_uniform(k, c.in * c.kernel * c.kernel, rng);
    params_.add(std::string(c.name) + ".weight", std::move(k));
    params_.add(std::string(c.name) + ".bias", ad::Tensor<float>({c.out}, 0.0f));
  }
  add_linear(params_, "classifier.1", kFlatten, kHidden, rng);
  add_linear(params_, "classifier.4", kHidden, kHidden, rng);
  add_linear(params_, "projection", kHidden, cfg.feature_dim, rng);

  if (cfg.pretrained) {
    if (!cfg.weights_path) throw ParameterError("pretrained backbone requires a weights path");
    const auto loaded = weights::load(*cfg.weights_path, params_);
    for (const auto& name : pretrained_names()) {
      if (std::find(loaded.begin(), loaded.end(), name) == loaded.end()) {
        throw IncompatibleWeightsError("pretrained weights lack tensor " + name);
      }
    }
  }
  set_frozen(cfg.freeze);
}

std::vector<std::string> AlexNet::pretrained_names() {
  std::vector<std::string> names;
  for (const auto& c : kConvs) {
    names.push_back(std::string(c.name) + ".weight");
    names.push_back(std::string(c.name) + ".bias");
  }
  for (const char* n : {"classifier.1", "classifier.4"}) {
    names.push_back(std::string(n) + ".weight");
    names.push_back(std::string(n) + ".bias");
  }
  return names;
}

void AlexNet::set_frozen(bool frozen) {
  params_.set_frozen("", frozen);
  frozen_ = frozen;
}

ad::NodeId AlexNet::forward(ad::Graph<float>& g, ad::NodeId images, bool train,
                            std::mt19937_64* rng, std::vector<StageShape>* trace) {
  const ad::Shape in = g.shape(images);
  if (in.size() != 4 || in[1] != 3 || in[2] != 224 || in[3] != 224) {
    throw ShapeError("backbone expects [n,3,224,224], got " + ad::to_string(in));
  }
  if (train && cfg_.dropout > 0.0 && rng == nullptr) {
    throw ParameterError("training-mode forward needs a dropout rng");
  }
  auto note = [&](const std::string& name, ad::NodeId id) {
    if (trace) trace->push_back({name, g.shape(id)});
  };

  ad::NodeId x = images;
  for (const auto& c : kConvs) {
    const std::string name(c.name);
    x = ad::conv2d(g, x, g.param(params_, name + ".weight"), g.param(params_, name + ".bias"),
                   ad::Conv2dOptions{c.stride, c.pad});
    x = ad::relu(g, x);
    note(name, x);
    if (c.pool_after) {
      x = ad::maxpool2d(g, x, 3, 2);
      note(name + ".pool", x);
    }
  }
  const std::size_t n = in[0];
  x = ad::reshape(g, x, {n, kFlatten});
  note("flatten", x);
  for (const char* fc : {"classifier.1", "classifier.4"}) {
    if (train && cfg_.dropout > 0.0) x = ad::dropout(g, x, cfg_.dropout, *rng);
    const std::string name(fc);
    x = ad::relu(g, ad::linear(g, x, g.param(params_, name + ".weight"), g.param(params_, name + ".bias")));
    note(name, x);
  }
  x = ad::linear(g, x, g.param(params_, "projection.weight"), g.param(params_, "projection.bias"));
  note("projection", x);
  return x;
}

ad::Tensor<float> AlexNet::infer(const ad::Tensor<float>& images) {
  ad::Graph<float> g;
  const auto out = forward(g, g.constant(images), false);
  return g.value(out);
}

std::vector<StageShape> expected_stage_shapes(std::size_t n, std::size_t feature_dim) {
  return {
      {"features.0", {n, 64, 55, 55}},      {"features.0.pool", {n, 64, 27, 27}},
      {"features.3", {n, 192, 27, 27}},     {"features.3.pool", {n, 192, 13, 13}},
      {"features.6", {n, 384, 13, 13}},     {"features.8", {n, 256, 13, 13}},
      {"features.10", {n, 256, 13, 13}},    {"features.10.pool", {n, 256, 6, 6}},
      {"flatten", {n, AlexNet::kFlatten}},  {"classifier.1", {n, AlexNet::kHidden}},
      {"classifier.4", {n, AlexNet::kHidden}}, {"projection", {n, feature_dim}},
  };
}

ad::Tensor<float> stack_images(const std::vector<const dsp::SpectrogramImage*>& images) {
  constexpr std::size_t per = dsp::SpectrogramImage::kChannels * dsp::SpectrogramImage::kSide *
                              dsp::SpectrogramImage::kSide;
  ad::Tensor<float> out({images.size(), dsp::SpectrogramImage::kChannels,
                         dsp::SpectrogramImage::kSide, dsp::SpectrogramImage::kSide});
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::memcpy(out.raw() + i * per, images[i]->pixels.raw(), per * sizeof(float));
  }
  return out;
}

ad::Tensor<float> extract_features(AlexNet& net, const dsp::SpectrogramImage& image, bool train,
                                   std::mt19937_64* rng) {
  ad::Graph<float> g;
  const auto out = net.forward(g, g.constant(stack_images({&image})), train, rng);
  auto v = g.value(out);
  v.reshape({v.size()});
  return v;
}

}  // namespace hyperdys::backbone
