#include "hyperdys/fusion.hpp"

namespace hyperdys::fusion {

namespace {

template <typename T>
void add_linear(ad::ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                std::mt19937_64& rng) {
  ad::Tensor<T> w({in, out});
  ad::kaiming_uniform(w, in, rng);
  store.add(name + ".weight", std::move(w));
  store.add(name + ".bias", ad::Tensor<T>({out}, T{0}));
}

template <typename T>
ad::NodeId fc(ad::Graph<T>& g, ad::ParamStore<T>& store, const std::string& name, ad::NodeId x) {
  return ad::linear(g, x, g.param(store, name + ".weight"), g.param(store, name + ".bias"));
}

void check_width(const ad::Shape& s, std::size_t width, const char* what) {
  if (s.size() != 2 || s[1] != width) {
    throw ShapeError(std::string(what) + " expects [n," + std::to_string(width) + "], got " +
                     ad::to_string(s));
  }
}

}  // namespace

template <typename T>
Gmu<T>::Gmu(ad::ParamStore<T>& store, std::mt19937_64& rng, std::size_t hidden,
            std::size_t feature_dim, std::size_t classes, std::string prefix)
    : store_(&store), hidden_(hidden), feature_dim_(feature_dim), prefix_(std::move(prefix)) {
  if (hidden == 0) throw ParameterError("GMU hidden size must be positive");
  add_linear(store, prefix_ + ".t", feature_dim, hidden, rng);
  add_linear(store, prefix_ + ".v", feature_dim, hidden, rng);
  add_linear(store, prefix_ + ".z", 2 * feature_dim, hidden, rng);
  add_linear(store, prefix_ + ".head", hidden, classes, rng);
}

template <typename T>
GmuOutput Gmu<T>::forward(ad::Graph<T>& g, ad::NodeId f_t, ad::NodeId f_v) const {
  check_width(g.shape(f_t), feature_dim_, "GMU f_t");
  check_width(g.shape(f_v), feature_dim_, "GMU f_v");
  if (g.shape(f_t)[0] != g.shape(f_v)[0]) throw ShapeError("GMU inputs differ in batch size");
  GmuOutput out;
  out.ht = ad::tanh(g, fc(g, *store_, prefix_ + ".t", f_t));
  out.hv = ad::tanh(g, fc(g, *store_, prefix_ + ".v", f_v));
  out.z = ad::sigmoid(g, fc(g, *store_, prefix_ + ".z", ad::concat_cols(g, {f_v, f_t})));
  auto ones = g.constant(ad::Tensor<T>(g.shape(out.z), T{1}));
  out.h = ad::add(g, ad::mul(g, out.z, out.hv), ad::mul(g, ad::sub(g, ones, out.z), out.ht));
  out.logits = fc(g, *store_, prefix_ + ".head", out.h);
  return out;
}

template <typename T>
ConcatHead<T>::ConcatHead(ad::ParamStore<T>& store, std::mt19937_64& rng, std::size_t feature_dim,
                          std::size_t classes, std::string prefix)
    : store_(&store), feature_dim_(feature_dim), prefix_(std::move(prefix)) {
  for (const auto& task : kTaskOrder) {
    add_linear(store, prefix_ + ".adapter." + task, feature_dim, kAdapterDim, rng);
  }
  add_linear(store, prefix_ + ".head", kTasks * kAdapterDim, classes, rng);
}

template <typename T>
ad::NodeId ConcatHead<T>::adapt(ad::Graph<T>& g, std::size_t task, ad::NodeId features) const {
  if (task >= kTasks) throw ParameterError("concat head task index out of range");
  check_width(g.shape(features), feature_dim_, "concat adapter");
  return ad::relu(g, fc(g, *store_, prefix_ + ".adapter." + kTaskOrder[task], features));
}

template <typename T>
ad::NodeId ConcatHead<T>::head(ad::Graph<T>& g, const std::vector<ad::NodeId>& adapted) const {
  if (adapted.size() != kTasks) {
    throw ShapeError("concat head expects " + std::to_string(kTasks) + " inputs, got " +
                     std::to_string(adapted.size()));
  }
  for (auto id : adapted) check_width(g.shape(id), kAdapterDim, "concat head input");
  return fc(g, *store_, prefix_ + ".head", ad::concat_cols(g, adapted));
}

template <typename T>
ad::NodeId ConcatHead<T>::forward(ad::Graph<T>& g, const std::vector<ad::NodeId>& features) const {
  if (features.size() != kTasks) {
    throw ShapeError("concat head expects " + std::to_string(kTasks) + " feature inputs, got " +
                     std::to_string(features.size()));
  }
  std::vector<ad::NodeId> adapted;
  for (std::size_t i = 0; i < kTasks; ++i) adapted.push_back(adapt(g, i, features[i]));
  return head(g, adapted);
}

template class Gmu<float>;
template class Gmu<double>;
template class ConcatHead<float>;
template class ConcatHead<double>;

}  // namespace hyperdys::fusion
