#include "hyperdys/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hyperdys::ad {

// ---- ParamStore -----------------------------------------------------------

template <typename T>
Parameter<T>& ParamStore<T>::add(const std::string& name, Tensor<T> init) {
  if (contains(name)) throw ParameterError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->value = std::move(init);
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>& ParamStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename T>
const Parameter<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->name);
  return out;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) {
    if (!p->grad.empty()) p->grad.fill(T{0});
  }
}

template <typename T>
void ParamStore<T>::set_frozen(const std::string& prefix, bool frozen) {
  for (auto& p : params_) {
    if (p->name.rfind(prefix, 0) == 0) p->frozen = frozen;
  }
}

// ---- Graph ----------------------------------------------------------------

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(NodeId id) const {
  if (!id.valid() || id.index >= nodes_.size()) throw StateError("invalid graph node id");
  return nodes_[id.index];
}

template <typename T>
typename Graph<T>::Node& Graph<T>::node(NodeId id) {
  if (!id.valid() || id.index >= nodes_.size()) throw StateError("invalid graph node id");
  return nodes_[id.index];
}

template <typename T>
NodeId Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Graph<T>::variable(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Graph<T>::param(Parameter<T>& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = !p.frozen;
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

template <typename T>
NodeId Graph<T>::record(Tensor<T> value, std::vector<NodeId> inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (NodeId in : inputs) {
    if (node(in).requires_grad) n.requires_grad = true;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Graph<T>::value(NodeId id) const {
  const Node& n = node(id);
  return n.external ? *n.external : n.owned;
}

template <typename T>
bool Graph<T>::requires_grad(NodeId id) const {
  return node(id).requires_grad;
}

template <typename T>
const std::vector<NodeId>& Graph<T>::inputs(NodeId id) const {
  return node(id).inputs;
}

template <typename T>
Tensor<T> Graph<T>::grad(NodeId id) const {
  if (!backward_done_) throw StateError("gradient requested before backward()");
  const Node& n = node(id);
  if (n.has_grad) return n.grad;
  return Tensor<T>(value(id).shape());
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(NodeId id) {
  Node& n = node(id);
  if (!n.has_grad) {
    n.grad = Tensor<T>(value(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Graph<T>::backward(NodeId loss) {
  if (value(loss).size() != 1) {
    throw ShapeError("backward() target must hold exactly one element, got shape " +
                     to_string(value(loss).shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<T>();
  }
  grad_buffer(loss)[0] = T{1};
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.requires_grad || !n.backward) continue;
    n.backward(*this, NodeId{i});
  }
  for (auto& n : nodes_) {
    if (!n.param || !n.has_grad || n.param->frozen) continue;
    Parameter<T>& p = *n.param;
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
    auto dst = p.grad.data();
    auto src = n.grad.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  backward_done_ = true;
}

// ---- optimizers -----------------------------------------------------------

namespace {

template <typename T>
void adam_update(Parameter<T>& p, const Tensor<T>& grad, const AdamOptions& opts) {
  if (grad.shape() != p.value.shape()) {
    throw ShapeError("gradient shape " + to_string(grad.shape()) + " does not match parameter " +
                     p.name + " " + to_string(p.value.shape()));
  }
  if (p.m.shape() != p.value.shape()) {
    p.m = Tensor<T>(p.value.shape());
    p.v = Tensor<T>(p.value.shape());
  }
  ++p.step;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(p.step));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(p.step));
  auto w = p.value.data();
  auto m = p.m.data();
  auto v = p.v.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i];
    const double mi = opts.beta1 * m[i] + (1.0 - opts.beta1) * gi;
    const double vi = opts.beta2 * v[i] + (1.0 - opts.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double m_hat = mi / c1;
    const double v_hat = vi / c2;
    w[i] = static_cast<T>(w[i] - opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps));
  }
}

}  // namespace

template <typename T>
void adam_step(ParamStore<T>& store, const AdamOptions& opts) {
  for (auto& p : store) {
    if (p->frozen || p->grad.empty()) continue;
    adam_update(*p, p->grad, opts);
  }
}

template <typename T>
void adam_step(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& grads,
               const AdamOptions& opts) {
  for (const auto& [name, g] : grads) {
    Parameter<T>& p = store.at(name);
    if (g.shape() != p.value.shape()) {
      throw ShapeError("gradient shape " + to_string(g.shape()) + " does not match parameter " +
                       name + " " + to_string(p.value.shape()));
    }
  }
  for (const auto& [name, g] : grads) {
    Parameter<T>& p = store.at(name);
    if (!p.frozen) adam_update(p, g, opts);
  }
}

template <typename T>
void sgd_step(ParamStore<T>& store, double lr) {
  for (auto& p : store) {
    if (p->frozen || p->grad.empty()) continue;
    auto w = p->value.data();
    auto g = p->grad.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(w[i] - lr * g[i]);
  }
}

// ---- initialization -------------------------------------------------------

template <typename T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  if (fan_in == 0) throw ParameterError("kaiming_uniform: fan_in must be positive");
  const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  std::uniform_real_distribution<T> dist(-bound, bound);
  for (T& v : t.data()) v = dist(rng);
}

// ---- gradient check -------------------------------------------------------

template <typename T>
double gradient_check(const std::function<NodeId(Graph<T>&)>& loss_fn, ParamStore<T>& store,
                      const GradCheckOptions& opts) {
  auto eval = [&]() -> double {
    Graph<T> g;
    const NodeId loss = loss_fn(g);
    const double v = static_cast<double>(g.value(loss)[0]);
    if (!std::isfinite(v)) throw NumericError("gradient_check: non-finite loss");
    return v;
  };

  store.zero_grad();
  {
    Graph<T> g;
    const NodeId loss = loss_fn(g);
    if (!g.value(loss).all_finite()) throw NumericError("gradient_check: non-finite loss");
    g.backward(loss);
  }

  std::mt19937_64 rng(opts.seed);
  double worst = 0.0;
  for (auto& p : store) {
    if (p->frozen) continue;
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
    }
    const Tensor<T> analytic = p->grad.empty() ? Tensor<T>(p->value.shape()) : p->grad;
    if (!analytic.all_finite()) throw NumericError("gradient_check: non-finite gradient");
    for (std::size_t c : coords) {
      const T saved = p->value[c];
      p->value[c] = static_cast<T>(saved + opts.h);
      const double up = eval();
      p->value[c] = static_cast<T>(saved - opts.h);
      const double down = eval();
      p->value[c] = saved;
      const double numeric = (up - down) / (2.0 * opts.h);
      const double a = static_cast<double>(analytic[c]);
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// ---- instantiations -------------------------------------------------------

#define HYPERDYS_INSTANTIATE(T)                                                                 \
  template class ParamStore<T>;                                                                 \
  template class Graph<T>;                                                                      \
  template void adam_step<T>(ParamStore<T>&, const AdamOptions&);                               \
  template void adam_step<T>(ParamStore<T>&, const std::map<std::string, Tensor<T>>&,           \
                             const AdamOptions&);                                               \
  template void sgd_step<T>(ParamStore<T>&, double);                                            \
  template void kaiming_uniform<T>(Tensor<T>&, std::size_t, std::mt19937_64&);                  \
  template double gradient_check<T>(const std::function<NodeId(Graph<T>&)>&, ParamStore<T>&,    \
                                    const GradCheckOptions&);

HYPERDYS_INSTANTIATE(float)
HYPERDYS_INSTANTIATE(double)

#undef HYPERDYS_INSTANTIATE

}  // namespace hyperdys::ad
