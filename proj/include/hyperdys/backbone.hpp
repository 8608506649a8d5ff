#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hyperdys/autodiff.hpp"
#include "hyperdys/dsp.hpp"

namespace hyperdys::backbone {

struct BackboneConfig {
  std::size_t feature_dim = 768;
  double dropout = 0.5;
  bool pretrained = false;
  std::optional<std::filesystem::path> weights_path;
  bool freeze = false;
  std::uint64_t seed = 0;
};

struct StageShape {
  std::string name;
  ad::Shape shape;
};

// AlexNet feature extractor with its 1000-way classifier replaced by a
// projection to `feature_dim`. Parameter names follow torchvision
// (features.N / classifier.N) plus "projection"; fully connected weights are
// stored [in, out].
class AlexNet {
 public:
  static constexpr std::size_t kFlatten = 256 * 6 * 6;
  static constexpr std::size_t kHidden = 4096;

  explicit AlexNet(const BackboneConfig& cfg = {});

  // images [n,3,224,224] -> features [n,feature_dim]. In training mode
  // dropout draws from `rng`, which must then be non-null. When `trace` is
  // given, the output shape of every stage is appended to it.
  ad::NodeId forward(ad::Graph<float>& g, ad::NodeId images, bool train,
                     std::mt19937_64* rng = nullptr,
                     std::vector<StageShape>* trace = nullptr);

  // Batched inference without gradients (always eval mode).
  ad::Tensor<float> infer(const ad::Tensor<float>& images);

  void set_frozen(bool frozen);
  bool frozen() const noexcept { return frozen_; }

  ad::ParamStore<float>& params() noexcept { return params_; }
  const ad::ParamStore<float>& params() const noexcept { return params_; }
  const BackboneConfig& config() const noexcept { return cfg_; }

  // Names of the parameters loaded from pretrained weights.
  static std::vector<std::string> pretrained_names();

 private:
  BackboneConfig cfg_;
  ad::ParamStore<float> params_;
  bool frozen_ = false;
};

// Expected stage shapes for a batch of n 224x224 images.
std::vector<StageShape> expected_stage_shapes(std::size_t n, std::size_t feature_dim);

// Single-image convenience; train mode needs an rng for dropout.
ad::Tensor<float> extract_features(AlexNet& net, const dsp::SpectrogramImage& image, bool train,
                                   std::mt19937_64* rng = nullptr);

// Stacks images into a [n,3,224,224] tensor.
ad::Tensor<float> stack_images(const std::vector<const dsp::SpectrogramImage*>& images);

}  // namespace hyperdys::backbone
