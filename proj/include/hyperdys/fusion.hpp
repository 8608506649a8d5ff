#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "hyperdys/autodiff.hpp"

namespace hyperdys::fusion {

struct GmuOutput {
  ad::NodeId logits;
  ad::NodeId h;   // fused representation
  ad::NodeId z;   // gate
  ad::NodeId ht;  // tanh branch for f_t
  ad::NodeId hv;  // tanh branch for f_v
};

// Gated multimodal unit over two feature vectors followed by fc(h -> classes).
template <typename T>
class Gmu {
 public:
  Gmu(ad::ParamStore<T>& store, std::mt19937_64& rng, std::size_t hidden = 768,
      std::size_t feature_dim = 768, std::size_t classes = 2, std::string prefix = "gmu");

  // f_t, f_v: [n,feature_dim]. The gate sees [f_v; f_t].
  GmuOutput forward(ad::Graph<T>& g, ad::NodeId f_t, ad::NodeId f_v) const;

  std::size_t hidden() const noexcept { return hidden_; }

 private:
  ad::ParamStore<T>* store_;
  std::size_t hidden_, feature_dim_;
  std::string prefix_;
};

// Concatenation baseline: per-task fc(feature_dim -> 32) + ReLU adapters,
// 8 x 32 concatenated in task order, then fc(256 -> classes).
template <typename T>
class ConcatHead {
 public:
  static constexpr std::size_t kTasks = 8;
  static constexpr std::size_t kAdapterDim = 32;

  ConcatHead(ad::ParamStore<T>& store, std::mt19937_64& rng, std::size_t feature_dim = 768,
             std::size_t classes = 2, std::string prefix = "concat");

  ad::NodeId adapt(ad::Graph<T>& g, std::size_t task, ad::NodeId features) const;
  // Exactly kTasks inputs of width kAdapterDim.
  ad::NodeId head(ad::Graph<T>& g, const std::vector<ad::NodeId>& adapted) const;
  // Exactly kTasks backbone outputs of width feature_dim.
  ad::NodeId forward(ad::Graph<T>& g, const std::vector<ad::NodeId>& features) const;

 private:
  ad::ParamStore<T>* store_;
  std::size_t feature_dim_;
  std::string prefix_;
};

// Task order for the concatenation baseline.
inline const std::array<std::string, 8> kTaskOrder = {"a", "e", "i", "o", "u", "pa", "ta", "ka"};

}  // namespace hyperdys::fusion
