#include "hyperdys/hypernet.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace hyperdys::hypernet {

ConditionSampler::ConditionSampler(std::uint64_t seed, ConditionPolicy policy, std::size_t dim)
    : rng_(seed), policy_(policy), dim_(dim), seed_(seed) {
  if (dim == 0) throw ParameterError("condition dimension must be positive");
  run_ = draw();
}

ConditionVector ConditionSampler::draw() {
  std::normal_distribution<double> normal(0.0, 1.0);
  ConditionVector c;
  c.mode = ConditionMode::noise;
  c.source = "seed:" + std::to_string(seed_);
  c.values.resize(dim_);
  for (double& v : c.values) v = normal(rng_);
  return c;
}

ConditionVector ConditionSampler::next_training() {
  return policy_ == ConditionPolicy::fixed_per_run ? run_ : draw();
}

template <typename T>
ad::Tensor<T> condition_tensor(const std::vector<const ConditionVector*>& rows) {
  if (rows.empty()) throw ShapeError("condition_tensor: no rows");
  const std::size_t d = rows.front()->values.size();
  ad::Tensor<T> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i]->values.size() != d) throw ShapeError("condition rows differ in length");
    for (std::size_t j = 0; j < d; ++j) {
      const double v = rows[i]->values[j];
      if (!std::isfinite(v)) throw NumericError("non-finite condition value");
      out(i, j) = static_cast<T>(v);
    }
  }
  return out;
}

// ---- HyperNetwork ---------------------------------------------------------

template <typename T>
HyperNetwork<T>::HyperNetwork(ad::ParamStore<T>& store, const HyperConfig& cfg,
                              std::mt19937_64& rng, std::string prefix)
    : store_(&store), cfg_(cfg), prefix_(std::move(prefix)) {
  if (cfg.condition_dim == 0 || cfg.hidden == 0 || cfg.feature_dim == 0 || cfg.classes == 0) {
    throw ParameterError("hypernetwork dimensions must be positive");
  }
  ad::Tensor<T> w1({cfg.condition_dim, cfg.hidden});
  ad::kaiming_uniform(w1, cfg.condition_dim, rng);
  store.add(prefix_ + ".fc1.weight", std::move(w1));
  store.add(prefix_ + ".fc1.bias", ad::Tensor<T>({cfg.hidden}, T{0}));
  ad::Tensor<T> w2({cfg.hidden, output_width()});
  ad::kaiming_uniform(w2, cfg.hidden, rng);
  store.add(prefix_ + ".fc2.weight", std::move(w2));
  store.add(prefix_ + ".fc2.bias", ad::Tensor<T>({output_width()}, T{0}));
  if (cfg.separate_bias) store.add(prefix_ + ".bias", ad::Tensor<T>({cfg.classes}, T{0}));
}

template <typename T>
std::size_t HyperNetwork<T>::output_width() const noexcept {
  return cfg_.feature_dim * cfg_.classes + (cfg_.separate_bias ? 0 : cfg_.classes);
}

template <typename T>
std::size_t HyperNetwork<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : *store_) {
    if (p->name.rfind(prefix_ + ".", 0) == 0) n += p->value.size();
  }
  return n;
}

template <typename T>
ad::NodeId HyperNetwork<T>::generate(ad::Graph<T>& g, ad::NodeId cond) const {
  const ad::Shape cs = g.shape(cond);
  if (cs.size() != 2 || cs[1] != cfg_.condition_dim) {
    throw ShapeError("hypernetwork expects condition [m," + std::to_string(cfg_.condition_dim) +
                     "], got " + ad::to_string(cs));
  }
  auto h = ad::relu(g, ad::linear(g, cond, g.param(*store_, prefix_ + ".fc1.weight"),
                                  g.param(*store_, prefix_ + ".fc1.bias")));
  auto theta = ad::linear(g, h, g.param(*store_, prefix_ + ".fc2.weight"),
                          g.param(*store_, prefix_ + ".fc2.bias"));
  if (!cfg_.separate_bias) return theta;
  // Broadcast the stored bias to every row: zeros [m,1] x bias [1,classes] + bias.
  auto zeros = g.constant(ad::Tensor<T>({cs[0], 1}, T{0}));
  auto proj = g.constant(ad::Tensor<T>({1, cfg_.classes}, T{0}));
  auto bias = ad::linear(g, zeros, proj, g.param(*store_, prefix_ + ".bias"));
  return ad::concat_cols(g, {theta, bias});
}

template <typename T>
ad::NodeId HyperNetwork<T>::forward(ad::Graph<T>& g, ad::NodeId features, ad::NodeId cond) const {
  const ad::Shape fs = g.shape(features);
  if (fs.size() != 2 || fs[1] != cfg_.feature_dim) {
    throw ShapeError("hypernetwork head expects features [n," + std::to_string(cfg_.feature_dim) +
                     "], got " + ad::to_string(fs));
  }
  return target_forward(g, features, generate(g, cond), cfg_.classes);
}

template <typename T>
ad::NodeId target_forward(ad::Graph<T>& g, ad::NodeId features, ad::NodeId theta,
                          std::size_t classes) {
  return ad::generated_linear(g, features, theta, classes);
}

// ---- PlainHead ------------------------------------------------------------

template <typename T>
PlainHead<T>::PlainHead(ad::ParamStore<T>& store, std::mt19937_64& rng, std::size_t feature_dim,
                        std::size_t classes, std::string prefix)
    : store_(&store), prefix_(std::move(prefix)) {
  ad::Tensor<T> w({feature_dim, classes});
  ad::kaiming_uniform(w, feature_dim, rng);
  store.add(prefix_ + ".weight", std::move(w));
  store.add(prefix_ + ".bias", ad::Tensor<T>({classes}, T{0}));
}

template <typename T>
ad::NodeId PlainHead<T>::forward(ad::Graph<T>& g, ad::NodeId features) const {
  const auto& w = store_->at(prefix_ + ".weight").value;
  const ad::Shape fs = g.shape(features);
  if (fs.size() != 2 || fs[1] != w.dim(0)) {
    throw ShapeError("plain head expects features [n," + std::to_string(w.dim(0)) + "], got " +
                     ad::to_string(fs));
  }
  return ad::linear(g, features, g.param(*store_, prefix_ + ".weight"),
                    g.param(*store_, prefix_ + ".bias"));
}

template <typename T>
std::size_t PlainHead<T>::parameter_count() const {
  return store_->at(prefix_ + ".weight").value.size() + store_->at(prefix_ + ".bias").value.size();
}

// ---- Standardizer ---------------------------------------------------------

Standardizer Standardizer::fit(const std::vector<const std::vector<double>*>& rows) {
  if (rows.empty()) throw ParameterError("standardizer needs at least one row");
  const std::size_t d = rows.front()->size();
  Standardizer s;
  s.mean_.assign(d, 0.0);
  s.scale_.assign(d, 0.0);
  for (const auto* r : rows) {
    if (r->size() != d) throw ShapeError("standardizer rows differ in length");
    for (std::size_t j = 0; j < d; ++j) s.mean_[j] += (*r)[j];
  }
  for (double& m : s.mean_) m /= static_cast<double>(rows.size());
  for (const auto* r : rows) {
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = (*r)[j] - s.mean_[j];
      s.scale_[j] += dv * dv;
    }
  }
  for (double& v : s.scale_) v = std::sqrt(v / static_cast<double>(rows.size()));
  return s;
}

std::vector<double> Standardizer::transform(const std::vector<double>& row) const {
  if (row.size() != mean_.size()) throw ShapeError("standardizer dimension mismatch");
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    out[j] = scale_[j] > 0.0 ? (row[j] - mean_[j]) / scale_[j] : 0.0;
  }
  return out;
}

// ---- feature CSV ----------------------------------------------------------

std::map<std::string, std::vector<double>> parse_feature_csv(const std::string& text,
                                                             std::size_t dims) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw EmptyInputError("feature CSV is empty");
  std::map<std::string, std::vector<double>> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell, id;
    std::getline(row, id, ',');
    std::vector<double> values;
    while (std::getline(row, cell, ',')) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size() && cell.find_first_not_of(" \t", used) != std::string::npos) {
          throw std::invalid_argument(cell);
        }
        if (!std::isfinite(v)) throw std::invalid_argument(cell);
        values.push_back(v);
      } catch (const std::logic_error&) {
        throw FormatError("feature CSV line " + std::to_string(line_no) + ": bad value '" + cell + "'");
      }
    }
    if (values.size() != dims) {
      throw FormatError("feature CSV line " + std::to_string(line_no) + ": expected " +
                        std::to_string(dims) + " values, got " + std::to_string(values.size()));
    }
    if (!out.emplace(id, std::move(values)).second) {
      throw FormatError("feature CSV line " + std::to_string(line_no) + ": duplicate id " + id);
    }
  }
  if (out.empty()) throw EmptyInputError("feature CSV has no rows");
  return out;
}

std::map<std::string, std::vector<double>> read_feature_csv(const std::filesystem::path& path,
                                                            std::size_t dims) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open feature CSV " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_feature_csv(buf.str(), dims);
}

#define HYPERDYS_INSTANTIATE(T)                                                              \
  template ad::Tensor<T> condition_tensor<T>(const std::vector<const ConditionVector*>&);   \
  template class HyperNetwork<T>;                                                            \
  template class PlainHead<T>;                                                               \
  template ad::NodeId target_forward<T>(ad::Graph<T>&, ad::NodeId, ad::NodeId, std::size_t);
HYPERDYS_INSTANTIATE(float)
HYPERDYS_INSTANTIATE(double)
#undef HYPERDYS_INSTANTIATE

}  // namespace hyperdys::hypernet
