#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "hyperdys/experiment.hpp"
#include "test_util.hpp"

using namespace hyperdys;
using namespace hyperdys::experiment;
namespace ht = hyperdys::testing;

namespace {

std::vector<int> table_labels() {
  std::vector<int> labels(49, 1);
  labels.insert(labels.end(), 53, 0);
  return labels;
}

// Class 1 is bright in the top half of every channel, class 0 in the bottom.
dsp::SpectrogramImage pattern_image(int label, std::uint64_t seed) {
  dsp::SpectrogramImage img;
  img.pixels = ht::random_tensor<float>({3, 224, 224}, seed, 0.0, 0.3);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 112; ++y) {
      const std::size_t row = label == 1 ? y : 112 + y;
      for (std::size_t x = 0; x < 224; ++x) img.pixels[(c * 224 + row) * 224 + x] += 0.6f;
    }
  }
  return img;
}

Dataset pattern_dataset(std::size_t n, std::vector<std::string> tasks = {"pa"}, std::uint64_t seed = 0) {
  Dataset d;
  d.tasks = tasks;
  for (std::size_t i = 0; i < n; ++i) {
    Unit u;
    u.id = "U" + std::to_string(i);
    u.label = static_cast<int>(i % 2);
    for (std::size_t t = 0; t < tasks.size(); ++t) u.images.push_back(pattern_image(u.label, seed + i * 31 + t));
    std::vector<double> f(88);
    std::mt19937_64 rng(seed + i);
    std::normal_distribution<double> normal;
    for (auto& v : f) v = normal(rng);
    f[0] += u.label ? 2.0 : -2.0;
    u.features = f;
    d.units.push_back(std::move(u));
  }
  return d;
}

RunConfig quick_config() {
  RunConfig c;
  c.freeze = true;
  c.epochs = 3;
  c.lr = 1e-3;
  return c;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

bool same_params(const ad::ParamStore<float>& a, const ad::ParamStore<float>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& p : a) {
    if (!(p->value == b.at(p->name).value)) return false;
  }
  return true;
}

}  // namespace

TEST(Labels, SeverityMapping) {
  EXPECT_EQ(label_from_severity(1), 1);
  EXPECT_EQ(label_from_severity(2), 1);
  EXPECT_EQ(label_from_severity(3), 1);
  EXPECT_EQ(label_from_severity(4), 0);
  EXPECT_THROW(label_from_severity(0), LabelError);
  EXPECT_THROW(label_from_severity(7), LabelError);
}

TEST(Folds, TableClassSizes) {
  const auto labels = table_labels();
  const auto plan = make_folds(labels, 5, 4, 17);
  ASSERT_EQ(plan.test.size(), 4u);
  for (const auto& rep : plan.test) {
    ASSERT_EQ(rep.size(), 5u);
    std::multiset<std::size_t> sizes, positives;
    for (const auto& fold : rep) {
      sizes.insert(fold.size());
      positives.insert(static_cast<std::size_t>(
          std::count_if(fold.begin(), fold.end(), [&](std::size_t i) { return labels[i] == 1; })));
    }
    // 102 = 2*21 + 3*20 and 49 = 4*10 + 9.
    EXPECT_EQ(sizes, (std::multiset<std::size_t>{20, 20, 20, 21, 21}));
    EXPECT_EQ(positives, (std::multiset<std::size_t>{9, 10, 10, 10, 10}));
  }
}

TEST(Folds, PartitionLaw) {
  const auto labels = table_labels();
  const auto plan = make_folds(labels, 5, 4, 3);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<int> seen(labels.size(), 0);
    for (const auto& fold : plan.test[r]) {
      for (std::size_t i : fold) ++seen[i];
    }
    for (int s : seen) EXPECT_EQ(s, 1);
    for (std::size_t f = 0; f < 5; ++f) {
      const auto train = plan.train_indices(r, f);
      EXPECT_EQ(train.size() + plan.test[r][f].size(), labels.size());
      for (std::size_t i : plan.test[r][f]) EXPECT_FALSE(std::binary_search(train.begin(), train.end(), i));
    }
  }
}

TEST(Folds, ClassProportionWithinOneSample) {
  std::vector<int> labels(37, 1);
  labels.insert(labels.end(), 61, 0);
  const auto plan = make_folds(labels, 5, 2, 8);
  for (const auto& rep : plan.test) {
    for (const auto& fold : rep) {
      const double pos = static_cast<double>(std::count_if(fold.begin(), fold.end(), [&](std::size_t i) { return labels[i]; }));
      EXPECT_LE(std::abs(pos - 37.0 / 5.0), 1.0);
      EXPECT_LE(std::abs(static_cast<double>(fold.size()) - pos - 61.0 / 5.0), 1.0);
    }
  }
}

TEST(Folds, SeededAndRepetitionsDiffer) {
  const auto labels = table_labels();
  const auto a = make_folds(labels, 5, 4, 11), b = make_folds(labels, 5, 4, 11), c = make_folds(labels, 5, 4, 12);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.test, c.test);
  EXPECT_NE(a.test[0], a.test[1]);
}

TEST(Folds, Errors) {
  std::vector<int> few{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  EXPECT_THROW(make_folds(few, 5), StratificationError);
  std::vector<int> bad{0, 1, 2};
  EXPECT_THROW(make_folds(bad, 2), LabelError);
  EXPECT_THROW(make_folds(table_labels(), 1), ParameterError);
}

TEST(Metrics, HandArithmetic) {
  const auto m = compute_metrics({.tp = 40, .fp = 8, .tn = 45, .fn = 9});
  EXPECT_NEAR(m.accuracy, 85.0 / 102.0, 1e-12);
  EXPECT_NEAR(m.precision, 40.0 / 48.0, 1e-12);
  EXPECT_NEAR(m.recall, 40.0 / 49.0, 1e-12);
  EXPECT_NEAR(m.specificity, 45.0 / 53.0, 1e-12);
  const double p = 40.0 / 48.0, r = 40.0 / 49.0;
  EXPECT_NEAR(m.f1, 2 * p * r / (p + r), 1e-12);
  EXPECT_NEAR(m.f1, 0.8247, 5e-4);
  EXPECT_TRUE(m.undefined.empty());
}

TEST(Metrics, PerfectAndDegenerate) {
  const auto perfect = compute_metrics({.tp = 5, .fp = 0, .tn = 7, .fn = 0});
  for (const char* n : kMetricNames) EXPECT_EQ(metric_value(perfect, n), 1.0);
  const auto none = compute_metrics({.tp = 0, .fp = 0, .tn = 7, .fn = 3});
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.specificity, 1.0);
  EXPECT_NE(std::find(none.undefined.begin(), none.undefined.end(), "precision"), none.undefined.end());
  EXPECT_THROW(compute_metrics({.tp = -1}), ParameterError);
  EXPECT_THROW(compute_metrics({}), ParameterError);
}

TEST(Evaluate, AllPositiveModel) {
  const auto labels = table_labels();
  ad::Tensor<float> logits({labels.size(), 2});
  for (std::size_t i = 0; i < labels.size(); ++i) logits(i, 1) = 1.0f;
  const auto c = count_predictions(logits, labels);
  EXPECT_EQ(c, (Counts{.tp = 49, .fp = 53, .tn = 0, .fn = 0}));
}

TEST(Evaluate, TiesGoToClassZeroAndHandTally) {
  std::vector<int> labels{1, 0, 1, 0};
  ad::Tensor<float> tie({4, 2}, 0.5f);
  EXPECT_EQ(count_predictions(tie, labels), (Counts{.tp = 0, .fp = 0, .tn = 2, .fn = 2}));

  const auto logits = ht::random_tensor<float>({50, 2}, 77);
  std::vector<int> truth(50);
  std::mt19937_64 rng(78);
  for (auto& t : truth) t = static_cast<int>(rng() % 2);
  long tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    const bool pos = logits(i, 1) > logits(i, 0);
    if (pos && truth[i]) ++tp;
    if (pos && !truth[i]) ++fp;
    if (!pos && !truth[i]) ++tn;
    if (!pos && truth[i]) ++fn;
  }
  EXPECT_EQ(count_predictions(logits, truth), (Counts{tp, fp, tn, fn}));
  EXPECT_THROW(count_predictions(ad::Tensor<float>({0, 2}), std::vector<int>{}), ParameterError);
}

TEST(Aggregate, IdenticalAndTwoPoint) {
  Metrics m;
  m.accuracy = 0.7;
  auto same = aggregate({m, m, m});
  EXPECT_EQ(same["accuracy"].std, 0.0);
  Metrics a, b;
  a.accuracy = 0.8;
  b.accuracy = 0.9;
  auto two = aggregate({a, b});
  EXPECT_NEAR(two["accuracy"].mean, 0.85, 1e-15);
  EXPECT_NEAR(two["accuracy"].std, std::sqrt(0.005), 1e-15);
  EXPECT_THROW(aggregate({a}), ParameterError);
}

TEST(Aggregate, MatchesTwoPassOracle) {
  std::vector<Metrics> rows(20);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  for (auto& r : rows) r.precision = u(rng), r.recall = u(rng), r.f1 = u(rng), r.accuracy = u(rng), r.specificity = u(rng);
  const auto agg = aggregate(rows);
  for (const char* name : kMetricNames) {
    double sum = 0;
    for (const auto& r : rows) sum += metric_value(r, name);
    const double mean = sum / 20;
    double ss = 0;
    for (const auto& r : rows) ss += (metric_value(r, name) - mean) * (metric_value(r, name) - mean);
    EXPECT_NEAR(agg.at(name).mean, mean, 1e-12);
    EXPECT_NEAR(agg.at(name).std, std::sqrt(ss / 19), 1e-12);
    double lo = 1, hi = 0;
    for (const auto& r : rows) lo = std::min(lo, metric_value(r, name)), hi = std::max(hi, metric_value(r, name));
    EXPECT_GE(agg.at(name).mean, lo);
    EXPECT_LE(agg.at(name).mean, hi);
  }
}

TEST(RunConfigTest, DefaultsAndValidation) {
  RunConfig c;
  EXPECT_EQ(c.epochs, 30u);
  EXPECT_DOUBLE_EQ(c.lr, 1e-5);
  EXPECT_EQ(c.batch, 8u);
  EXPECT_EQ(c.folds, 5u);
  EXPECT_EQ(c.reps, 4u);
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.tasks = {"pa", "ta"};
  EXPECT_THROW(bad.validate(), ParameterError);
  bad = c;
  bad.head = HeadKind::gmu;
  EXPECT_THROW(bad.validate(), ParameterError);
  bad.tasks = {"pa", "ta"};
  EXPECT_NO_THROW(bad.validate());
  bad.condition = hypernet::ConditionMode::data;
  EXPECT_THROW(bad.validate(), ParameterError);
  bad = c;
  bad.pretrained = true;
  EXPECT_THROW(bad.validate(), ParameterError);
  bad = c;
  bad.head = HeadKind::concat;
  bad.tasks = {"a", "e", "i", "o", "u", "pa", "ka", "ta"};
  EXPECT_THROW(bad.validate(), ParameterError);
}

TEST(RunConfigTest, JsonRoundTrip) {
  RunConfig c;
  c.tasks = {"ka"};
  c.head = HeadKind::plain;
  c.policy = hypernet::ConditionPolicy::per_step;
  c.input = dsp::InputKind::mfcc;
  c.seed = 0xFFFFFFFFFFFFFFFFull;
  c.lr = 3.3e-4;
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_THROW(run_config_from_json(nlohmann::json::object()), FormatError);
}

TEST(ReportJson, LosslessRoundTripAndVersionCheck) {
  Report r;
  r.config = to_json(RunConfig{});
  for (std::size_t i = 0; i < 3; ++i) {
    FoldResult f;
    f.rep = i / 2;
    f.fold = i % 2;
    f.counts = {3, 1, 4, static_cast<long>(i)};
    f.metrics = compute_metrics(f.counts);
    f.loss_history = {0.1 / 3.0, 2.0 / 7.0};
    r.per_fold.push_back(f);
  }
  r.aggregate = aggregate({r.per_fold[0].metrics, r.per_fold[1].metrics, r.per_fold[2].metrics});
  r.meta = {{"head", "hypernet"}, {"timestamps", {{"started", "x"}}}};
  const auto text = to_json(r).dump();
  const auto back = report_from_json(nlohmann::json::parse(text));
  EXPECT_EQ(to_json(back).dump(), text);
  EXPECT_EQ(back.per_fold[2].metrics.recall, r.per_fold[2].metrics.recall);
  EXPECT_EQ(canonical_dump(r).find("timestamps"), std::string::npos);

  auto j = to_json(r);
  j["schema_version"] = 2;
  EXPECT_THROW(report_from_json(j), VersionError);
}

TEST(Training, SeparableSetReachesPerfectTrainAccuracy) {
  const auto data = pattern_dataset(16, {"pa"}, 1);
  auto cfg = quick_config();
  cfg.epochs = 200;
  const auto train = iota(16);
  auto trained = train_fold(cfg, data, train, 9);
  const auto c = evaluate(*trained.model, data, train);
  EXPECT_EQ(c.tp + c.tn, 16);
  EXPECT_LT(trained.loss_history.back(), trained.loss_history.front());
}

TEST(Training, ZeroEpochsLeavesModelUnchanged) {
  const auto data = pattern_dataset(4, {"pa"}, 2);
  auto cfg = quick_config();
  cfg.epochs = 0;
  auto trained = train_fold(cfg, data, iota(4), 5);
  Model fresh(cfg, 5);
  EXPECT_TRUE(same_params(trained.model->head_params(), fresh.head_params()));
  EXPECT_TRUE(trained.loss_history.empty());
}

TEST(Training, IdenticalSeedsGiveIdenticalHistories) {
  const auto data = pattern_dataset(8, {"pa"}, 3);
  const auto cfg = quick_config();
  auto a = train_fold(cfg, data, iota(8), 21), b = train_fold(cfg, data, iota(8), 21);
  ASSERT_EQ(a.loss_history.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(a.loss_history[e], b.loss_history[e], 1e-6);
  EXPECT_TRUE(same_params(a.model->head_params(), b.model->head_params()));
}

TEST(Training, FineTuningUpdatesBackbone) {
  const auto data = pattern_dataset(2, {"pa"}, 4);
  auto cfg = quick_config();
  cfg.freeze = false;
  cfg.epochs = 1;
  cfg.lr = 1e-4;
  auto trained = train_fold(cfg, data, iota(2), 3);
  Model fresh(cfg, 3);
  EXPECT_FALSE(trained.model->backbone().params().at("features.0.weight").value ==
               fresh.backbone().params().at("features.0.weight").value);
}

TEST(Training, TestFoldMutationDoesNotLeak) {
  auto data = pattern_dataset(12, {"pa"}, 5);
  auto cfg = quick_config();
  cfg.condition = hypernet::ConditionMode::data;
  const std::vector<int> labels = data.labels();
  const auto plan = make_folds(labels, 3, 1, 4);
  const auto train = plan.train_indices(0, 1);
  auto before = train_fold(cfg, data, train, 13);
  for (std::size_t i : plan.test[0][1]) {
    data.units[i].label = 1 - data.units[i].label;
    for (auto& v : *data.units[i].features) v = v * 100.0 + 7.0;
  }
  auto after = train_fold(cfg, data, train, 13);
  EXPECT_TRUE(same_params(before.model->head_params(), after.model->head_params()));
}

TEST(Training, DataModeNeedsFeatures) {
  auto data = pattern_dataset(4, {"pa"}, 6);
  data.units[1].features.reset();
  auto cfg = quick_config();
  cfg.condition = hypernet::ConditionMode::data;
  EXPECT_THROW(train_fold(cfg, data, iota(4), 1), DataError);
}

TEST(Training, EmptyTestSetIsRejected) {
  const auto data = pattern_dataset(2, {"pa"}, 7);
  Model m(quick_config(), 1);
  EXPECT_THROW(evaluate(m, data, {}), ParameterError);
}

TEST(Training, FusionHeadsTrain) {
  auto cfg = quick_config();
  cfg.epochs = 2;
  cfg.head = HeadKind::gmu;
  cfg.tasks = {"pa", "ta"};
  const auto gmu_data = pattern_dataset(4, cfg.tasks, 8);
  auto g = train_fold(cfg, gmu_data, iota(4), 2);
  EXPECT_EQ(g.loss_history.size(), 2u);
  EXPECT_EQ(g.model->predict(gmu_data, iota(4)).shape(), (ad::Shape{4, 2}));

  cfg.head = HeadKind::concat;
  cfg.tasks.assign(fusion::kTaskOrder.begin(), fusion::kTaskOrder.end());
  const auto concat_data = pattern_dataset(2, cfg.tasks, 9);
  auto c = train_fold(cfg, concat_data, iota(2), 2);
  EXPECT_TRUE(std::isfinite(c.loss_history.back()));
  EXPECT_TRUE(c.model->head_params().contains("concat.adapter.ka.weight"));
}

TEST(Protocol, DeterministicReportsWithPlainHead) {
  const auto data = pattern_dataset(10, {"pa"}, 10);
  auto cfg = quick_config();
  cfg.head = HeadKind::plain;
  cfg.folds = 2;
  cfg.reps = 2;
  cfg.epochs = 2;
  const auto a = run_protocol(cfg, data), b = run_protocol(cfg, data);
  EXPECT_EQ(a.per_fold.size(), 4u);
  EXPECT_EQ(a.meta["head"], "plain");
  EXPECT_EQ(canonical_dump(a), canonical_dump(b));
  EXPECT_FALSE(a.meta["discrepancy_notes"].empty());
  for (const auto& f : a.per_fold) EXPECT_EQ(f.counts.total(), 5);
}

TEST(Protocol, MismatchedTasksRejected) {
  const auto data = pattern_dataset(10, {"ta"}, 11);
  EXPECT_THROW(run_protocol(quick_config(), data), ParameterError);
}

TEST(Dataset, GroupsByPatientAndChecksCache) {
  const auto dir = std::filesystem::temp_directory_path() / "hyperdys_dataset_test";
  std::filesystem::create_directories(dir);
  std::vector<Sample> samples;
  for (int p = 0; p < 3; ++p) {
    for (const char* task : {"pa", "ta"}) {
      if (p == 2 && std::string(task) == "ta") continue;
      const auto path = dir / ("P" + std::to_string(p) + task + ".hdim");
      dsp::write_image(path, pattern_image(p % 2, p));
      samples.push_back({"P" + std::to_string(p), task, p % 2 ? 2 : 4, p % 2, path, std::nullopt});
    }
  }
  const auto both = build_dataset(samples, {"pa", "ta"});
  EXPECT_EQ(both.units.size(), 2u);
  EXPECT_EQ(both.units[0].images.size(), 2u);
  EXPECT_EQ(build_dataset(samples, {"pa"}).units.size(), 3u);

  auto inconsistent = samples;
  inconsistent[1].severity = 3;
  inconsistent[1].label = 1;
  EXPECT_THROW(build_dataset(inconsistent, {"pa", "ta"}), LabelError);
  auto missing = samples;
  missing[0].image_path = dir / "absent.hdim";
  EXPECT_THROW(build_dataset(missing, {"pa"}), DataError);
  std::filesystem::remove_all(dir);
}
