#pragma once

// Minimal reverse-mode differentiation: a tape of nodes recorded during the
// forward pass, replayed in reverse by Graph::backward. Instantiated for
// float (training) and double (gradient tests).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hyperdys/tensor.hpp"

namespace hyperdys::ad {

struct NodeId {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t index = npos;

  bool valid() const noexcept { return index != npos; }
  friend bool operator==(NodeId a, NodeId b) noexcept { return a.index == b.index; }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first backward that touches the parameter
  Tensor<T> m;     // Adam first moment, lazily allocated
  Tensor<T> v;     // Adam second moment, lazily allocated
  std::int64_t step = 0;
  bool frozen = false;
};

// Named parameters in insertion order. Addresses of stored parameters are
// stable for the lifetime of the store.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Parameter<T>& at(const std::string& name);
  const Parameter<T>& at(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return params_.size(); }
  std::size_t parameter_count() const;

  void zero_grad();
  // Freezes (or unfreezes) every parameter whose name starts with prefix.
  void set_frozen(const std::string& prefix, bool frozen);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId self)>;

  // Leaf that never receives a gradient.
  NodeId constant(Tensor<T> value);
  // Leaf that receives a gradient (readable through grad() after backward).
  NodeId variable(Tensor<T> value);
  // Leaf that references a stored parameter without copying it. Its gradient
  // is added into Parameter::grad at the end of backward(), unless frozen.
  NodeId param(Parameter<T>& p);
  NodeId param(ParamStore<T>& store, const std::string& name) { return param(store.at(name)); }

  // Records an operation result. `fn` is only invoked when at least one input
  // requires a gradient.
  NodeId record(Tensor<T> value, std::vector<NodeId> inputs, BackwardFn fn);

  const Tensor<T>& value(NodeId id) const;
  const Shape& shape(NodeId id) const { return value(id).shape(); }
  bool requires_grad(NodeId id) const;
  const std::vector<NodeId>& inputs(NodeId id) const;

  // Gradient of the last backward() target with respect to `id` (zeros when
  // the target does not depend on it). Throws StateError before backward().
  Tensor<T> grad(NodeId id) const;
  bool backward_done() const noexcept { return backward_done_; }
  // Accumulation buffer used by backward functions; zero-initialized on demand.
  Tensor<T>& grad_buffer(NodeId id);

  // Seeds d(loss)/d(loss) = 1 for a single-element node and propagates.
  void backward(NodeId loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  const Node& node(NodeId id) const;
  Node& node(NodeId id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- operations -----------------------------------------------------------

enum class Activation { relu, tanh, sigmoid };

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// y = x W + b with x [n,in], W [in,out], b [out].
template <typename T>
NodeId linear(Graph<T>& g, NodeId x, NodeId w, NodeId b);

// Plain matrix product a [n,k] * b [k,m].
template <typename T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b);

// Cross-correlation with zero padding. x [n,c,h,w], k [oc,c,kh,kw], b [oc].
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId k, NodeId b, Conv2dOptions opts);

// Window max over [n,c,h,w]; ties route the gradient to the lowest linear index.
template <typename T>
NodeId maxpool2d(Graph<T>& g, NodeId x, std::size_t kernel = 3, std::size_t stride = 2);

template <typename T>
NodeId activation(Graph<T>& g, NodeId x, Activation kind);

template <typename T>
NodeId relu(Graph<T>& g, NodeId x) { return activation(g, x, Activation::relu); }
template <typename T>
NodeId tanh(Graph<T>& g, NodeId x) { return activation(g, x, Activation::tanh); }
template <typename T>
NodeId sigmoid(Graph<T>& g, NodeId x) { return activation(g, x, Activation::sigmoid); }

// Inverted dropout: kept entries are scaled by 1/(1-rate).
template <typename T>
NodeId dropout(Graph<T>& g, NodeId x, double rate, std::mt19937_64& rng);

// Mean over the batch of -log softmax(logits)[label]. Returns a [1] node.
template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, std::span<const int> labels);

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId sub(Graph<T>& g, NodeId a, NodeId b);
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b);

template <typename T>
NodeId reshape(Graph<T>& g, NodeId x, Shape shape);

// Concatenates 2-D nodes with equal row counts along the column axis.
template <typename T>
NodeId concat_cols(Graph<T>& g, const std::vector<NodeId>& parts);

// Columns [begin, end) of a 2-D node.
template <typename T>
NodeId slice_cols(Graph<T>& g, NodeId x, std::size_t begin, std::size_t end);

// Rows [begin, end) along axis 0 of a node of any rank.
template <typename T>
NodeId slice_rows(Graph<T>& g, NodeId x, std::size_t begin, std::size_t end);

// Linear map whose parameters are themselves a node. x is [n,d]; theta is
// [m, d*k + k] with m = 1 (shared) or m = n (per-row), holding a row-major
// d x k weight followed by k biases. Returns [n,k].
template <typename T>
NodeId generated_linear(Graph<T>& g, NodeId x, NodeId theta, std::size_t outputs);

// Row-wise softmax of a 2-D tensor (no graph).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

// ---- optimizers -----------------------------------------------------------

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam on every non-frozen parameter that has a gradient.
template <typename T>
void adam_step(ParamStore<T>& store, const AdamOptions& opts);

// Same update with explicitly supplied gradients, keyed by parameter name.
template <typename T>
void adam_step(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& grads,
               const AdamOptions& opts);

template <typename T>
void sgd_step(ParamStore<T>& store, double lr);

// ---- initialization -------------------------------------------------------

// U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng);

// ---- gradient checking ----------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t max_coords_per_param = 64;
  std::uint64_t seed = 0;
  // Coordinates where both gradients are below this magnitude are compared
  // on an absolute scale.
  double floor = 1e-6;
};

// Compares analytic gradients of the scalar built by `loss_fn` against
// central differences on (a sample of) every non-frozen parameter of
// `store`. Returns the largest relative error seen.
template <typename T>
double gradient_check(const std::function<NodeId(Graph<T>&)>& loss_fn, ParamStore<T>& store,
                      const GradCheckOptions& opts = {});

}  // namespace hyperdys::ad
