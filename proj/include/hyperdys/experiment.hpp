#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperdys/backbone.hpp"
#include "hyperdys/dsp.hpp"
#include "hyperdys/fusion.hpp"
#include "hyperdys/hypernet.hpp"

namespace hyperdys::experiment {

// ---- samples ----------------------------------------------------------------

inline constexpr std::array<const char*, 8> kTasks = {"a", "e", "i", "o", "u", "pa", "ta", "ka"};
bool is_task(const std::string& task);

// dysarthric (1) for severity 1-3, normal (0) for 4.
int label_from_severity(int severity);

struct Sample {
  std::string id;
  std::string task;
  int severity = 4;
  int label = 0;
  std::filesystem::path image_path;
  std::optional<std::vector<double>> features;
};

// A training/evaluation unit: one patient with one image per selected task.
struct Unit {
  std::string id;
  int label = 0;
  std::vector<dsp::SpectrogramImage> images;  // in RunConfig::tasks order
  std::optional<std::vector<double>> features;
};

struct Dataset {
  std::vector<std::string> tasks;
  std::vector<Unit> units;

  std::vector<int> labels() const;
};

// Groups samples by patient id for the selected tasks and loads the cached
// images. A patient lacking any selected task is skipped; inconsistent
// severities across tasks are a label error.
Dataset build_dataset(const std::vector<Sample>& samples, const std::vector<std::string>& tasks);

// ---- folds ------------------------------------------------------------------

struct FoldPlan {
  std::size_t k = 5;
  std::size_t reps = 4;
  std::uint64_t seed = 0;
  // test[rep][fold] holds sorted unit indices.
  std::vector<std::vector<std::vector<std::size_t>>> test;

  std::vector<std::size_t> train_indices(std::size_t rep, std::size_t fold) const;
};

// Per repetition: shuffle each class, lay out positives then negatives and
// deal them round-robin across the k folds.
FoldPlan make_folds(std::span<const int> labels, std::size_t k = 5, std::size_t reps = 4,
                    std::uint64_t seed = 0);

// ---- metrics ----------------------------------------------------------------

struct Counts {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  long total() const { return tp + fp + tn + fn; }
  bool operator==(const Counts&) const = default;
};

struct Metrics {
  double precision = 0, recall = 0, f1 = 0, accuracy = 0, specificity = 0;
  // Names of metrics whose denominator was zero (reported as 0).
  std::vector<std::string> undefined;
};

inline constexpr std::array<const char*, 5> kMetricNames = {"precision", "recall", "f1", "accuracy",
                                                            "specificity"};

Metrics compute_metrics(const Counts& c);
double metric_value(const Metrics& m, const std::string& name);

// Argmax over two logits per row (ties predict class 0), positive = 1.
Counts count_predictions(const ad::Tensor<float>& logits, std::span<const int> labels);

struct Summary {
  double mean = 0, std = 0;
};

// Mean and sample (n-1) standard deviation of every metric.
std::map<std::string, Summary> aggregate(const std::vector<Metrics>& rows);

// ---- configuration ------------------------------------------------------------

enum class HeadKind { hypernet, plain, gmu, concat };

struct RunConfig {
  std::vector<std::string> tasks{"pa"};
  HeadKind head = HeadKind::hypernet;
  hypernet::ConditionMode condition = hypernet::ConditionMode::noise;
  hypernet::ConditionPolicy policy = hypernet::ConditionPolicy::fixed_per_run;
  bool separate_bias = false;
  dsp::InputKind input = dsp::InputKind::logmel;
  bool pretrained = false;
  std::optional<std::filesystem::path> weights_path;
  bool freeze = false;
  std::size_t epochs = 30;
  double lr = 1e-5;
  std::size_t batch = 8;
  std::size_t folds = 5;
  std::size_t reps = 4;
  std::uint64_t seed = 0;
  std::size_t feature_dim = 768;
  std::size_t gmu_hidden = 768;
  double dropout = 0.5;
  // Per-fold head checkpoints go to output_dir/checkpoints when set.
  std::optional<std::filesystem::path> output_dir;
  bool checkpoint_backbone = false;

  // Throws ParameterError on inconsistent settings.
  void validate() const;
};

std::string to_string(HeadKind h);
HeadKind head_from_string(const std::string& s);

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

// ---- model and training -------------------------------------------------------

// Backbone plus one of the four heads. Frozen backbones run in eval mode and
// their features are cached per unit.
class Model {
 public:
  Model(const RunConfig& cfg, std::uint64_t seed, const backbone::AlexNet* init_from = nullptr);
  ~Model();
  Model(Model&&) noexcept;

  // Training-fold statistics for data-conditioned mode.
  void fit_condition(const Dataset& data, std::span<const std::size_t> train);

  // Mean cross-entropy over one batch, followed by an Adam step.
  double train_step(const Dataset& data, std::span<const std::size_t> batch, std::mt19937_64& rng);
  // Eval-mode logits [n,2].
  ad::Tensor<float> predict(const Dataset& data, std::span<const std::size_t> indices);

  backbone::AlexNet& backbone() noexcept;
  ad::ParamStore<float>& head_params() noexcept;
  const hypernet::ConditionSampler* sampler() const noexcept;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct TrainedFold {
  std::unique_ptr<Model> model;
  std::vector<double> loss_history;  // mean loss per epoch
};

TrainedFold train_fold(const RunConfig& cfg, const Dataset& data, std::span<const std::size_t> train,
                       std::uint64_t seed, const backbone::AlexNet* init_from = nullptr);

Counts evaluate(Model& model, const Dataset& data, std::span<const std::size_t> test);

// ---- protocol and report ------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

struct FoldResult {
  std::size_t rep = 0, fold = 0;
  Counts counts;
  Metrics metrics;
  std::vector<double> loss_history;
};

struct Report {
  int schema_version = kReportSchemaVersion;
  nlohmann::json config;
  std::vector<FoldResult> per_fold;
  std::map<std::string, Summary> aggregate;
  nlohmann::json meta;
};

nlohmann::json to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);
// Report JSON with meta.timestamps removed, for reproducibility checks.
std::string canonical_dump(const Report& r);

using ProgressFn = std::function<void(std::size_t rep, std::size_t fold, const FoldResult&)>;

Report run_protocol(const RunConfig& cfg, const Dataset& data, const ProgressFn& progress = {});

// Deterministic 64-bit seed mixing (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace hyperdys::experiment
