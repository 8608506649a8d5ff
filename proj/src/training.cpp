#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <map>

#include "hyperdys/experiment.hpp"
#include "hyperdys/weights.hpp"

namespace hyperdys::experiment {

namespace {

constexpr std::size_t kInferenceChunk = 8;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

struct Model::Impl {
  RunConfig cfg;
  std::unique_ptr<backbone::AlexNet> net;
  ad::ParamStore<float> head_store;
  std::unique_ptr<hypernet::HyperNetwork<float>> hyper;
  std::unique_ptr<hypernet::PlainHead<float>> plain;
  std::unique_ptr<fusion::Gmu<float>> gmu;
  std::unique_ptr<fusion::ConcatHead<float>> concat;
  std::optional<hypernet::ConditionSampler> sampler;
  std::optional<hypernet::Standardizer> standardizer;
  // unit index -> per-task backbone features, frozen backbones only
  std::map<std::size_t, std::vector<ad::Tensor<float>>> feature_cache;

  ad::Tensor<float> stack(const Dataset& data, std::span<const std::size_t> idx, std::size_t task) const {
    std::vector<const dsp::SpectrogramImage*> images;
    for (std::size_t i : idx) images.push_back(&data.units.at(i).images.at(task));
    auto t = backbone::stack_images(images);
    if (cfg.pretrained) {
      const dsp::DspConfig d;
      const std::size_t plane = dsp::SpectrogramImage::kSide * dsp::SpectrogramImage::kSide;
      float* p = t.raw();
      for (std::size_t n = 0; n < idx.size(); ++n) {
        for (std::size_t c = 0; c < 3; ++c) {
          const auto mean = static_cast<float>(d.image_mean[c]), sd = static_cast<float>(d.image_std[c]);
          for (std::size_t k = 0; k < plane; ++k, ++p) *p = (*p - mean) / sd;
        }
      }
    }
    return t;
  }

  void fill_cache(const Dataset& data, std::span<const std::size_t> idx) {
    std::vector<std::size_t> missing;
    for (std::size_t i : idx) {
      if (!feature_cache.count(i)) missing.push_back(i);
    }
    for (std::size_t start = 0; start < missing.size(); start += kInferenceChunk) {
      const std::span<const std::size_t> chunk(missing.data() + start,
                                               std::min(kInferenceChunk, missing.size() - start));
      for (std::size_t t = 0; t < data.tasks.size(); ++t) {
        const auto out = net->infer(stack(data, chunk, t));
        const std::size_t d = out.dim(1);
        for (std::size_t r = 0; r < chunk.size(); ++r) {
          ad::Tensor<float> row({d});
          std::memcpy(row.raw(), out.raw() + r * d, d * sizeof(float));
          feature_cache[chunk[r]].push_back(std::move(row));
        }
      }
    }
  }

  ad::NodeId features(ad::Graph<float>& g, const Dataset& data, std::span<const std::size_t> idx,
                      std::size_t task, bool train, std::mt19937_64* rng) {
    if (!net->frozen()) return net->forward(g, g.constant(stack(data, idx, task)), train, rng);
    fill_cache(data, idx);
    const std::size_t d = cfg.feature_dim;
    ad::Tensor<float> out({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::memcpy(out.raw() + r * d, feature_cache.at(idx[r]).at(task).raw(), d * sizeof(float));
    }
    return g.constant(std::move(out));
  }

  ad::NodeId condition(ad::Graph<float>& g, const Dataset& data, std::span<const std::size_t> idx, bool train) {
    if (cfg.condition == hypernet::ConditionMode::noise) {
      if (train) {
        const auto c = sampler->next_training();
        return g.constant(hypernet::condition_tensor<float>({&c}));
      }
      return g.constant(hypernet::condition_tensor<float>({&sampler->run_vector()}));
    }
    if (!standardizer) throw StateError("data-conditioned model used before fit_condition");
    std::vector<hypernet::ConditionVector> rows;
    for (std::size_t i : idx) {
      const auto& u = data.units.at(i);
      if (!u.features) throw DataError("unit " + u.id + " has no acoustic feature row");
      rows.push_back({standardizer->transform(*u.features), hypernet::ConditionMode::data, u.id});
    }
    std::vector<const hypernet::ConditionVector*> ptrs;
    for (const auto& r : rows) ptrs.push_back(&r);
    return g.constant(hypernet::condition_tensor<float>(ptrs));
  }

  ad::NodeId logits(ad::Graph<float>& g, const Dataset& data, std::span<const std::size_t> idx, bool train,
                    std::mt19937_64* rng) {
    if (data.tasks != cfg.tasks) throw ParameterError("dataset tasks do not match the run configuration");
    std::vector<ad::NodeId> feats;
    for (std::size_t t = 0; t < data.tasks.size(); ++t) feats.push_back(features(g, data, idx, t, train, rng));
    switch (cfg.head) {
      case HeadKind::hypernet: return hyper->forward(g, feats[0], condition(g, data, idx, train));
      case HeadKind::plain: return plain->forward(g, feats[0]);
      case HeadKind::gmu: return gmu->forward(g, feats[1], feats[0]).logits;
      case HeadKind::concat: return concat->forward(g, feats);
    }
    throw StateError("unknown head kind");
  }
};

Model::Model(const RunConfig& cfg, std::uint64_t seed, const backbone::AlexNet* init_from)
    : impl_(std::make_unique<Impl>()) {
  cfg.validate();
  auto& m = *impl_;
  m.cfg = cfg;
  backbone::BackboneConfig bc;
  bc.feature_dim = cfg.feature_dim;
  bc.dropout = cfg.dropout;
  bc.seed = mix_seed(seed, 1);
  if (cfg.pretrained && !init_from) {
    bc.pretrained = true;
    bc.weights_path = cfg.weights_path;
  }
  m.net = std::make_unique<backbone::AlexNet>(bc);
  if (cfg.pretrained && init_from) {
    for (const auto& name : backbone::AlexNet::pretrained_names()) {
      m.net->params().at(name).value = init_from->params().at(name).value;
    }
  }
  m.net->set_frozen(cfg.freeze);

  std::mt19937_64 rng(mix_seed(seed, 2));
  switch (cfg.head) {
    case HeadKind::hypernet: {
      hypernet::HyperConfig hc;
      hc.condition_dim = cfg.condition == hypernet::ConditionMode::noise ? hypernet::kNoiseDim : hypernet::kDataDim;
      hc.feature_dim = cfg.feature_dim;
      hc.separate_bias = cfg.separate_bias;
      m.hyper = std::make_unique<hypernet::HyperNetwork<float>>(m.head_store, hc, rng);
      if (cfg.condition == hypernet::ConditionMode::noise) m.sampler.emplace(mix_seed(seed, 3), cfg.policy);
      break;
    }
    case HeadKind::plain:
      m.plain = std::make_unique<hypernet::PlainHead<float>>(m.head_store, rng, cfg.feature_dim);
      break;
    case HeadKind::gmu:
      m.gmu = std::make_unique<fusion::Gmu<float>>(m.head_store, rng, cfg.gmu_hidden, cfg.feature_dim);
      break;
    case HeadKind::concat:
      m.concat = std::make_unique<fusion::ConcatHead<float>>(m.head_store, rng, cfg.feature_dim);
      break;
  }
}

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;

backbone::AlexNet& Model::backbone() noexcept { return *impl_->net; }
ad::ParamStore<float>& Model::head_params() noexcept { return impl_->head_store; }
const hypernet::ConditionSampler* Model::sampler() const noexcept {
  return impl_->sampler ? &*impl_->sampler : nullptr;
}

void Model::fit_condition(const Dataset& data, std::span<const std::size_t> train) {
  if (impl_->cfg.condition != hypernet::ConditionMode::data) return;
  std::vector<const std::vector<double>*> rows;
  for (std::size_t i : train) {
    const auto& u = data.units.at(i);
    if (!u.features) throw DataError("unit " + u.id + " has no acoustic feature row");
    if (u.features->size() != hypernet::kDataDim) {
      throw ShapeError("unit " + u.id + " feature row has " + std::to_string(u.features->size()) + " values");
    }
    rows.push_back(&*u.features);
  }
  impl_->standardizer = hypernet::Standardizer::fit(rows);
}

double Model::train_step(const Dataset& data, std::span<const std::size_t> batch, std::mt19937_64& rng) {
  auto& m = *impl_;
  m.head_store.zero_grad();
  if (!m.net->frozen()) m.net->params().zero_grad();
  ad::Graph<float> g;
  const auto out = m.logits(g, data, batch, true, &rng);
  std::vector<int> labels;
  for (std::size_t i : batch) labels.push_back(data.units.at(i).label);
  const auto loss = ad::softmax_cross_entropy(g, out, std::span<const int>(labels));
  g.backward(loss);
  const double value = g.value(loss)[0];
  if (!std::isfinite(value)) throw NumericError("training loss became non-finite");
  ad::AdamOptions opts;
  opts.lr = m.cfg.lr;
  ad::adam_step(m.head_store, opts);
  if (!m.net->frozen()) ad::adam_step(m.net->params(), opts);
  return value;
}

ad::Tensor<float> Model::predict(const Dataset& data, std::span<const std::size_t> indices) {
  ad::Tensor<float> out({indices.size(), 2});
  for (std::size_t start = 0; start < indices.size(); start += kInferenceChunk) {
    const auto chunk = indices.subspan(start, std::min(kInferenceChunk, indices.size() - start));
    ad::Graph<float> g;
    const auto& l = g.value(impl_->logits(g, data, chunk, false, nullptr));
    std::memcpy(out.raw() + start * 2, l.raw(), l.size() * sizeof(float));
  }
  return out;
}

TrainedFold train_fold(const RunConfig& cfg, const Dataset& data, std::span<const std::size_t> train,
                       std::uint64_t seed, const backbone::AlexNet* init_from) {
  if (train.empty()) throw ParameterError("empty training set");
  TrainedFold out;
  out.model = std::make_unique<Model>(cfg, seed, init_from);
  out.model->fit_condition(data, train);
  std::mt19937_64 rng(mix_seed(seed, 4));
  std::vector<std::size_t> order(train.begin(), train.end());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(cfg.batch, order.size() - start));
      total += out.model->train_step(data, batch, rng) * static_cast<double>(batch.size());
    }
    out.loss_history.push_back(total / static_cast<double>(order.size()));
  }
  return out;
}

Counts evaluate(Model& model, const Dataset& data, std::span<const std::size_t> test) {
  if (test.empty()) throw ParameterError("cannot evaluate an empty test set");
  std::vector<int> labels;
  for (std::size_t i : test) labels.push_back(data.units.at(i).label);
  return count_predictions(model.predict(data, test), labels);
}

Report run_protocol(const RunConfig& cfg, const Dataset& data, const ProgressFn& progress) {
  cfg.validate();
  if (data.tasks != cfg.tasks) throw ParameterError("dataset tasks do not match the run configuration");
  const std::string started = utc_now();
  const auto labels = data.labels();
  const std::uint64_t plan_seed = mix_seed(cfg.seed, 0xF01D);
  const auto plan = make_folds(labels, cfg.folds, cfg.reps, plan_seed);

  std::unique_ptr<backbone::AlexNet> pretrained;
  if (cfg.pretrained) {
    backbone::BackboneConfig bc;
    bc.feature_dim = cfg.feature_dim;
    bc.pretrained = true;
    bc.weights_path = cfg.weights_path;
    pretrained = std::make_unique<backbone::AlexNet>(bc);
  }
  std::optional<std::filesystem::path> ckpt_dir;
  if (cfg.output_dir) {
    ckpt_dir = *cfg.output_dir / "checkpoints";
    std::filesystem::create_directories(*ckpt_dir);
  }

  Report report;
  std::vector<Metrics> rows;
  for (std::size_t rep = 0; rep < plan.reps; ++rep) {
    for (std::size_t fold = 0; fold < plan.k; ++fold) {
      const auto train = plan.train_indices(rep, fold);
      const auto& test = plan.test[rep][fold];
      auto trained = train_fold(cfg, data, train, mix_seed(cfg.seed, rep + 1, fold + 1), pretrained.get());
      FoldResult fr;
      fr.rep = rep;
      fr.fold = fold;
      fr.counts = evaluate(*trained.model, data, test);
      fr.metrics = compute_metrics(fr.counts);
      fr.loss_history = std::move(trained.loss_history);
      if (ckpt_dir) {
        const std::string stem = "rep" + std::to_string(rep) + "_fold" + std::to_string(fold);
        weights::save(trained.model->head_params(), *ckpt_dir / (stem + "_head.hwts"));
        if (!cfg.freeze && cfg.checkpoint_backbone) {
          weights::save(trained.model->backbone().params(), *ckpt_dir / (stem + "_backbone.hwts"));
        }
      }
      rows.push_back(fr.metrics);
      if (progress) progress(rep, fold, fr);
      report.per_fold.push_back(std::move(fr));
    }
  }
  report.aggregate = aggregate(rows);
  report.config = to_json(cfg);
  report.config.erase("output_dir");

  std::size_t undefined = 0;
  for (const auto& r : rows) undefined += r.undefined.size();
  nlohmann::json notes = nlohmann::json::array();
  notes.push_back("aggregate covers " + std::to_string(rows.size()) + " fold-evaluations (" +
                  std::to_string(plan.k) + " folds x " + std::to_string(plan.reps) +
                  " repetitions), not 10 runs");
  if (undefined > 0) {
    notes.push_back(std::to_string(undefined) + " metric values had a zero denominator and were reported as 0");
  }
  report.meta = {
      {"head", to_string(cfg.head)},
      {"tasks", cfg.tasks},
      {"units", data.units.size()},
      {"positives", std::count(labels.begin(), labels.end(), 1)},
      {"fold_unit", cfg.tasks.size() > 1 ? "patient (all tasks kept together)" : "recording"},
      {"seeds", {{"run", cfg.seed}, {"fold_plan", plan_seed}}},
      {"discrepancy_notes", notes},
      {"timestamps", {{"started", started}, {"finished", utc_now()}}},
  };
  return report;
}

}  // namespace hyperdys::experiment
