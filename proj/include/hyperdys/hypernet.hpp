#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hyperdys/autodiff.hpp"

namespace hyperdys::hypernet {

enum class ConditionMode { noise, data };
enum class ConditionPolicy { fixed_per_run, per_step };

inline constexpr std::size_t kNoiseDim = 128;
inline constexpr std::size_t kDataDim = 88;

struct ConditionVector {
  std::vector<double> values;
  ConditionMode mode = ConditionMode::noise;
  std::string source;  // seed or sample id
};

// Standard-normal condition vectors. The run vector is drawn once at
// construction and is what evaluation always uses.
class ConditionSampler {
 public:
  ConditionSampler(std::uint64_t seed, ConditionPolicy policy, std::size_t dim = kNoiseDim);

  const ConditionVector& run_vector() const noexcept { return run_; }
  // Condition for the next training step: the run vector, or a fresh draw
  // under per_step.
  ConditionVector next_training();
  ConditionPolicy policy() const noexcept { return policy_; }

 private:
  ConditionVector draw();

  std::mt19937_64 rng_;
  ConditionPolicy policy_;
  std::size_t dim_;
  std::uint64_t seed_;
  ConditionVector run_;
};

template <typename T>
ad::Tensor<T> condition_tensor(const std::vector<const ConditionVector*>& rows);

struct HyperConfig {
  std::size_t condition_dim = kNoiseDim;
  std::size_t hidden = 512;
  std::size_t feature_dim = 768;
  std::size_t classes = 2;
  // Emit only the weight matrix and keep the bias as an ordinary parameter.
  bool separate_bias = false;
};

// H(C; Phi): fc(d -> hidden) + ReLU -> fc(hidden -> feature_dim*classes [+ classes]).
// The output row holds W (feature_dim x classes, row-major) followed by b.
template <typename T>
class HyperNetwork {
 public:
  HyperNetwork(ad::ParamStore<T>& store, const HyperConfig& cfg, std::mt19937_64& rng,
               std::string prefix = "hyper");

  // cond [m,d] -> theta [m, feature_dim*classes + classes].
  ad::NodeId generate(ad::Graph<T>& g, ad::NodeId cond) const;
  // features [n,feature_dim], cond [1,d] or [n,d] -> logits [n,classes].
  ad::NodeId forward(ad::Graph<T>& g, ad::NodeId features, ad::NodeId cond) const;

  std::size_t output_width() const noexcept;
  std::size_t parameter_count() const;
  const HyperConfig& config() const noexcept { return cfg_; }
  const std::string& prefix() const noexcept { return prefix_; }

 private:
  ad::ParamStore<T>* store_;
  HyperConfig cfg_;
  std::string prefix_;
};

// The same target map evaluated on a concrete Theta: logits = X W + b.
template <typename T>
ad::NodeId target_forward(ad::Graph<T>& g, ad::NodeId features, ad::NodeId theta,
                          std::size_t classes = 2);

// Ordinary trainable fc(feature_dim -> classes).
template <typename T>
class PlainHead {
 public:
  PlainHead(ad::ParamStore<T>& store, std::mt19937_64& rng, std::size_t feature_dim = 768,
            std::size_t classes = 2, std::string prefix = "plain");

  ad::NodeId forward(ad::Graph<T>& g, ad::NodeId features) const;
  std::size_t parameter_count() const;

 private:
  ad::ParamStore<T>* store_;
  std::string prefix_;
};

// Per-dimension standardization fitted on training rows only. Dimensions
// with zero spread map to 0.
class Standardizer {
 public:
  static Standardizer fit(const std::vector<const std::vector<double>*>& rows);

  std::vector<double> transform(const std::vector<double>& row) const;
  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& scale() const noexcept { return scale_; }

 private:
  std::vector<double> mean_, scale_;
};

// eGeMAPS-style CSV: header row, id column, then `dims` float columns.
std::map<std::string, std::vector<double>> read_feature_csv(const std::filesystem::path& path,
                                                            std::size_t dims = kDataDim);
std::map<std::string, std::vector<double>> parse_feature_csv(const std::string& text,
                                                             std::size_t dims = kDataDim);

}  // namespace hyperdys::hypernet
