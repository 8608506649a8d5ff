#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "hyperdys/experiment.hpp"

namespace hyperdys::experiment {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(base) ^ a) ^ (b * 0xD6E8FEB86659FD93ull));
}

bool is_task(const std::string& task) {
  return std::any_of(kTasks.begin(), kTasks.end(), [&](const char* t) { return task == t; });
}

int label_from_severity(int severity) {
  if (severity >= 1 && severity <= 3) return 1;
  if (severity == 4) return 0;
  throw LabelError("severity " + std::to_string(severity) + " outside 1-4");
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(units.size());
  for (const auto& u : units) out.push_back(u.label);
  return out;
}

Dataset build_dataset(const std::vector<Sample>& samples, const std::vector<std::string>& tasks) {
  if (tasks.empty()) throw ParameterError("no tasks selected");
  for (const auto& t : tasks) {
    if (!is_task(t)) throw ParameterError("unknown task '" + t + "'");
  }
  // id -> task -> sample
  std::map<std::string, std::map<std::string, const Sample*>> by_id;
  std::vector<std::string> order;
  for (const auto& s : samples) {
    if (label_from_severity(s.severity) != s.label) {
      throw LabelError("sample " + s.id + "/" + s.task + " label disagrees with severity");
    }
    auto [it, fresh] = by_id.try_emplace(s.id);
    if (fresh) order.push_back(s.id);
    if (!it->second.emplace(s.task, &s).second) {
      throw ValidationError("duplicate sample " + s.id + "/" + s.task);
    }
  }
  Dataset data;
  data.tasks = tasks;
  for (const auto& id : order) {
    const auto& per_task = by_id.at(id);
    if (!std::all_of(tasks.begin(), tasks.end(), [&](const auto& t) { return per_task.count(t); })) {
      continue;
    }
    Unit u;
    u.id = id;
    const Sample* first = per_task.at(tasks.front());
    u.label = first->label;
    for (const auto& t : tasks) {
      const Sample* s = per_task.at(t);
      if (s->severity != first->severity) {
        throw LabelError("patient " + id + " has inconsistent severities across tasks");
      }
      if (s->image_path.empty() || !std::filesystem::exists(s->image_path)) {
        throw DataError("missing cached image for " + id + "/" + t + " (" + s->image_path.string() +
                        "); run featurize first");
      }
      u.images.push_back(dsp::read_image(s->image_path));
      if (!u.features && s->features) u.features = s->features;
    }
    data.units.push_back(std::move(u));
  }
  if (data.units.empty()) throw EmptyInputError("no patient has every selected task");
  return data;
}

// ---- folds ------------------------------------------------------------------

std::vector<std::size_t> FoldPlan::train_indices(std::size_t rep, std::size_t fold) const {
  if (rep >= test.size() || fold >= test[rep].size()) throw ParameterError("fold index out of range");
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < test[rep].size(); ++f) {
    if (f != fold) out.insert(out.end(), test[rep][f].begin(), test[rep][f].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

FoldPlan make_folds(std::span<const int> labels, std::size_t k, std::size_t reps, std::uint64_t seed) {
  if (k < 2) throw ParameterError("need at least 2 folds");
  if (reps < 1) throw ParameterError("need at least 1 repetition");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos.push_back(i);
    } else if (labels[i] == 0) {
      neg.push_back(i);
    } else {
      throw LabelError("label " + std::to_string(labels[i]) + " is not binary");
    }
  }
  if (pos.size() < k || neg.size() < k) {
    throw StratificationError("each class needs at least " + std::to_string(k) + " samples (have " +
                              std::to_string(pos.size()) + " positive, " + std::to_string(neg.size()) +
                              " negative)");
  }
  FoldPlan plan{k, reps, seed, {}};
  for (std::size_t r = 0; r < reps; ++r) {
    std::mt19937_64 rng(mix_seed(seed, r));
    auto p = pos, n = neg;
    std::shuffle(p.begin(), p.end(), rng);
    std::shuffle(n.begin(), n.end(), rng);
    p.insert(p.end(), n.begin(), n.end());
    std::vector<std::vector<std::size_t>> folds(k);
    for (std::size_t j = 0; j < p.size(); ++j) folds[j % k].push_back(p[j]);
    for (auto& f : folds) std::sort(f.begin(), f.end());
    plan.test.push_back(std::move(folds));
  }
  return plan;
}

// ---- metrics ----------------------------------------------------------------

Metrics compute_metrics(const Counts& c) {
  if (c.tp < 0 || c.fp < 0 || c.tn < 0 || c.fn < 0) throw ParameterError("negative confusion count");
  if (c.total() == 0) throw ParameterError("empty confusion matrix");
  Metrics m;
  auto ratio = [&](long num, long den, const char* name) {
    if (den == 0) {
      m.undefined.emplace_back(name);
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(c.tp, c.tp + c.fp, "precision");
  m.recall = ratio(c.tp, c.tp + c.fn, "recall");
  m.specificity = ratio(c.tn, c.tn + c.fp, "specificity");
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.undefined.emplace_back("f1");
  }
  return m;
}

double metric_value(const Metrics& m, const std::string& name) {
  if (name == "precision") return m.precision;
  if (name == "recall") return m.recall;
  if (name == "f1") return m.f1;
  if (name == "accuracy") return m.accuracy;
  if (name == "specificity") return m.specificity;
  throw ParameterError("unknown metric " + name);
}

Counts count_predictions(const ad::Tensor<float>& logits, std::span<const int> labels) {
  if (labels.empty()) throw ParameterError("cannot evaluate an empty test set");
  if (logits.rank() != 2 || logits.dim(1) != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("logits " + ad::to_string(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  Counts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int pred = logits(i, 1) > logits(i, 0) ? 1 : 0;
    if (pred == 1) {
      (labels[i] == 1 ? c.tp : c.fp)++;
    } else {
      (labels[i] == 0 ? c.tn : c.fn)++;
    }
  }
  return c;
}

std::map<std::string, Summary> aggregate(const std::vector<Metrics>& rows) {
  if (rows.size() < 2) throw ParameterError("aggregate needs at least 2 rows");
  std::map<std::string, Summary> out;
  for (const char* name : kMetricNames) {
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      const double x = metric_value(r, name);
      ++n;
      const double d = x - mean;
      mean += d / static_cast<double>(n);
      m2 += d * (x - mean);
    }
    out[name] = {mean, std::sqrt(m2 / static_cast<double>(n - 1))};
  }
  return out;
}

// ---- configuration ------------------------------------------------------------

std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::hypernet: return "hypernet";
    case HeadKind::plain: return "plain";
    case HeadKind::gmu: return "gmu";
    case HeadKind::concat: return "concat";
  }
  return "?";
}

HeadKind head_from_string(const std::string& s) {
  for (auto h : {HeadKind::hypernet, HeadKind::plain, HeadKind::gmu, HeadKind::concat}) {
    if (to_string(h) == s) return h;
  }
  throw ParameterError("unknown head kind '" + s + "'");
}

void RunConfig::validate() const {
  if (tasks.empty()) throw ParameterError("no tasks selected");
  for (const auto& t : tasks) {
    if (!is_task(t)) throw ParameterError("unknown task '" + t + "'");
  }
  switch (head) {
    case HeadKind::hypernet:
    case HeadKind::plain:
      if (tasks.size() != 1) throw ParameterError(to_string(head) + " head takes exactly one task");
      break;
    case HeadKind::gmu:
      if (tasks.size() != 2 || tasks[0] == tasks[1]) throw ParameterError("gmu head takes two distinct tasks");
      break;
    case HeadKind::concat:
      if (!std::equal(tasks.begin(), tasks.end(), fusion::kTaskOrder.begin(), fusion::kTaskOrder.end())) {
        throw ParameterError("concat head takes all eight tasks in order a,e,i,o,u,pa,ta,ka");
      }
      break;
  }
  if (condition == hypernet::ConditionMode::data && head != HeadKind::hypernet) {
    throw ParameterError("data-conditioned mode requires the hypernet head");
  }
  if (pretrained && !weights_path) throw ParameterError("pretrained backbone requires weights_path");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("lr must be positive");
  if (batch == 0) throw ParameterError("batch must be positive");
  if (folds < 2) throw ParameterError("folds must be at least 2");
  if (reps < 1) throw ParameterError("reps must be at least 1");
  if (feature_dim == 0 || gmu_hidden == 0) throw ParameterError("layer widths must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ParameterError("dropout must be in [0,1)");
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["tasks"] = c.tasks;
  j["head"] = to_string(c.head);
  j["condition"] = c.condition == hypernet::ConditionMode::noise ? "noise" : "data";
  j["condition_policy"] = c.policy == hypernet::ConditionPolicy::fixed_per_run ? "fixed_per_run" : "per_step";
  j["separate_bias"] = c.separate_bias;
  j["input"] = c.input == dsp::InputKind::logmel ? "logmel" : "mfcc";
  j["pretrained"] = c.pretrained;
  j["weights_path"] = c.weights_path ? nlohmann::json(c.weights_path->string()) : nlohmann::json(nullptr);
  j["freeze"] = c.freeze;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  j["folds"] = c.folds;
  j["reps"] = c.reps;
  j["seed"] = c.seed;
  j["feature_dim"] = c.feature_dim;
  j["gmu_hidden"] = c.gmu_hidden;
  j["dropout"] = c.dropout;
  j["output_dir"] = c.output_dir ? nlohmann::json(c.output_dir->string()) : nlohmann::json(nullptr);
  j["checkpoint_backbone"] = c.checkpoint_backbone;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.tasks = j.at("tasks").get<std::vector<std::string>>();
    c.head = head_from_string(j.at("head").get<std::string>());
    const auto cond = j.at("condition").get<std::string>();
    if (cond != "noise" && cond != "data") throw ParameterError("unknown condition mode " + cond);
    c.condition = cond == "noise" ? hypernet::ConditionMode::noise : hypernet::ConditionMode::data;
    const auto pol = j.at("condition_policy").get<std::string>();
    if (pol != "fixed_per_run" && pol != "per_step") throw ParameterError("unknown condition policy " + pol);
    c.policy = pol == "per_step" ? hypernet::ConditionPolicy::per_step : hypernet::ConditionPolicy::fixed_per_run;
    c.separate_bias = j.at("separate_bias").get<bool>();
    const auto in = j.at("input").get<std::string>();
    if (in != "logmel" && in != "mfcc") throw ParameterError("unknown input kind " + in);
    c.input = in == "mfcc" ? dsp::InputKind::mfcc : dsp::InputKind::logmel;
    c.pretrained = j.at("pretrained").get<bool>();
    if (!j.at("weights_path").is_null()) c.weights_path = j.at("weights_path").get<std::string>();
    c.freeze = j.at("freeze").get<bool>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.batch = j.at("batch").get<std::size_t>();
    c.folds = j.at("folds").get<std::size_t>();
    c.reps = j.at("reps").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.gmu_hidden = j.at("gmu_hidden").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    if (j.contains("output_dir") && !j.at("output_dir").is_null()) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("checkpoint_backbone")) c.checkpoint_backbone = j.at("checkpoint_backbone").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run config: ") + e.what());
  }
  return c;
}

// ---- report -------------------------------------------------------------------

namespace {

nlohmann::json counts_json(const Counts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

nlohmann::json metrics_json(const Metrics& m) {
  nlohmann::json j;
  for (const char* name : kMetricNames) j[name] = metric_value(m, name);
  j["undefined"] = m.undefined;
  return j;
}

}  // namespace

nlohmann::json to_json(const Report& r) {
  nlohmann::json j;
  j["schema_version"] = r.schema_version;
  j["config"] = r.config;
  j["per_fold"] = nlohmann::json::array();
  for (const auto& f : r.per_fold) {
    j["per_fold"].push_back({{"rep", f.rep},
                             {"fold", f.fold},
                             {"counts", counts_json(f.counts)},
                             {"metrics", metrics_json(f.metrics)},
                             {"loss_history", f.loss_history}});
  }
  j["aggregate"] = nlohmann::json::object();
  for (const auto& [name, s] : r.aggregate) j["aggregate"][name] = {{"mean", s.mean}, {"std", s.std}};
  j["meta"] = r.meta.is_null() ? nlohmann::json::object() : r.meta;
  return j;
}

Report report_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema_version")) throw VersionError("report has no schema_version");
  const int version = j.at("schema_version").get<int>();
  if (version != kReportSchemaVersion) {
    throw VersionError("report schema version " + std::to_string(version) + " (expected " +
                       std::to_string(kReportSchemaVersion) + ")");
  }
  Report r;
  try {
    r.config = j.at("config");
    for (const auto& f : j.at("per_fold")) {
      FoldResult fr;
      fr.rep = f.at("rep").get<std::size_t>();
      fr.fold = f.at("fold").get<std::size_t>();
      const auto& c = f.at("counts");
      fr.counts = {c.at("tp").get<long>(), c.at("fp").get<long>(), c.at("tn").get<long>(), c.at("fn").get<long>()};
      const auto& m = f.at("metrics");
      fr.metrics.precision = m.at("precision").get<double>();
      fr.metrics.recall = m.at("recall").get<double>();
      fr.metrics.f1 = m.at("f1").get<double>();
      fr.metrics.accuracy = m.at("accuracy").get<double>();
      fr.metrics.specificity = m.at("specificity").get<double>();
      fr.metrics.undefined = m.at("undefined").get<std::vector<std::string>>();
      if (f.contains("loss_history")) fr.loss_history = f.at("loss_history").get<std::vector<double>>();
      r.per_fold.push_back(std::move(fr));
    }
    for (const auto& [name, s] : j.at("aggregate").items()) {
      r.aggregate[name] = {s.at("mean").get<double>(), s.at("std").get<double>()};
    }
    r.meta = j.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

std::string canonical_dump(const Report& r) {
  auto j = to_json(r);
  if (j["meta"].is_object()) j["meta"].erase("timestamps");
  return j.dump(2);
}

}  // namespace hyperdys::experiment
