#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "hyperdys/cli.hpp"

namespace hyperdys::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string read_text(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw DataError(std::string("cannot open ") + what + " " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

class Values {
 public:
  Values(std::string key, std::vector<std::string> inputs) : key_(std::move(key)), in_(std::move(inputs)) {}

  const std::string& str() const {
    if (in_.size() != 1) fail("expects a single value");
    return in_[0];
  }
  std::vector<std::string> list() const { return in_; }
  std::uint64_t uint() const {
    const auto& s = str();
    try {
      std::size_t used = 0;
      if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
      const auto v = std::stoull(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::logic_error&) {
      fail("expects a non-negative integer, got '" + s + "'");
    }
  }
  double real() const {
    const auto& s = str();
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::logic_error&) {
      fail("expects a number, got '" + s + "'");
    }
  }
  bool boolean() const {
    const auto& s = str();
    if (s == "true") return true;
    if (s == "false") return false;
    fail("expects true or false, got '" + s + "'");
  }
  template <typename E>
  E choice(std::initializer_list<std::pair<const char*, E>> options) const {
    const auto& s = str();
    for (const auto& [name, v] : options) {
      if (s == name) return v;
    }
    fail("has unknown value '" + s + "'");
  }
  [[noreturn]] void fail(const std::string& msg) const { throw ValidationError("config key '" + key_ + "' " + msg); }

 private:
  std::string key_;
  std::vector<std::string> in_;
};

}  // namespace

// ---- manifest ---------------------------------------------------------------

std::vector<ManifestRow> parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw EmptyInputError("manifest is empty");
  const std::vector<std::string> expected{"id", "wav_path", "task", "severity", "sex", "age"};
  if (split_csv_line(trim(line)) != expected) {
    throw FormatError("manifest header must be id,wav_path,task,severity,sex,age");
  }
  std::vector<ManifestRow> rows;
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(trim(line));
    const std::string where = "manifest line " + std::to_string(line_no);
    if (cells.size() != expected.size()) {
      throw ValidationError(where + ": expected 6 columns, got " + std::to_string(cells.size()));
    }
    ManifestRow r;
    r.line = line_no;
    r.id = cells[0];
    if (r.id.empty()) throw ValidationError(where + ": empty id");
    if (cells[1].empty()) throw ValidationError(where + " (" + r.id + "): empty wav_path");
    r.wav_path = resolve(base_dir, cells[1]);
    r.task = cells[2];
    if (!experiment::is_task(r.task)) {
      throw ValidationError(where + " (" + r.id + "): unknown task '" + r.task + "'");
    }
    try {
      std::size_t used = 0;
      r.severity = std::stoi(cells[3], &used);
      if (used != cells[3].size()) throw std::invalid_argument(cells[3]);
    } catch (const std::logic_error&) {
      throw ValidationError(where + " (" + r.id + "): severity '" + cells[3] + "' is not an integer");
    }
    if (r.severity < 1 || r.severity > 4) {
      throw ValidationError(where + " (" + r.id + "): severity " + std::to_string(r.severity) + " outside 1-4");
    }
    r.sex = cells[4];
    r.age = cells[5];
    if (!seen.emplace(r.id, r.task).second) {
      throw ValidationError(where + ": duplicate (id, task) = (" + r.id + ", " + r.task + ")");
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw EmptyInputError("manifest has no rows");
  return rows;
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text(path, "manifest"), path.parent_path());
}

// ---- configuration ------------------------------------------------------------

AppConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  std::istringstream in(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  AppConfig cfg;
  cfg.manifest = base_dir / cfg.manifest;
  cfg.cache_dir = base_dir / cfg.cache_dir;
  cfg.output_dir = base_dir / cfg.output_dir;
  auto& d = cfg.dsp;
  auto& r = cfg.run;
  std::optional<bool> pretrained_explicit;
  std::vector<std::string> unknown;

  using Setter = std::function<void(const Values&)>;
  const std::map<std::string, Setter> keys = {
      {"seed", [&](const Values& v) { r.seed = v.uint(); }},
      {"paths.manifest", [&](const Values& v) { cfg.manifest = resolve(base_dir, v.str()); }},
      {"paths.cache_dir", [&](const Values& v) { cfg.cache_dir = resolve(base_dir, v.str()); }},
      {"paths.output_dir", [&](const Values& v) { cfg.output_dir = resolve(base_dir, v.str()); }},
      {"paths.egemaps_csv",
       [&](const Values& v) {
         if (!v.str().empty()) cfg.egemaps_csv = resolve(base_dir, v.str());
       }},
      {"paths.weights",
       [&](const Values& v) {
         if (!v.str().empty()) r.weights_path = resolve(base_dir, v.str());
       }},
      {"dsp.sample_rate", [&](const Values& v) { d.sample_rate = static_cast<unsigned>(v.uint()); }},
      {"dsp.n_fft", [&](const Values& v) { d.n_fft = v.uint(); }},
      {"dsp.hop", [&](const Values& v) { d.hop = v.uint(); }},
      {"dsp.n_mels", [&](const Values& v) { d.n_mels = v.uint(); }},
      {"dsp.n_mfcc", [&](const Values& v) { d.n_mfcc = v.uint(); }},
      {"dsp.f_min", [&](const Values& v) { d.f_min = v.real(); }},
      {"dsp.f_max", [&](const Values& v) { d.f_max = v.real(); }},
      {"dsp.top_db", [&](const Values& v) { d.top_db = v.real(); }},
      {"dsp.amin", [&](const Values& v) { d.amin = v.real(); }},
      {"dsp.delta_width", [&](const Values& v) { d.delta_width = v.uint(); }},
      {"featurize.kinds",
       [&](const Values& v) {
         cfg.featurize_kinds.clear();
         for (const auto& k : v.list()) {
           cfg.featurize_kinds.push_back(Values("featurize.kinds", {k}).choice<dsp::InputKind>(
               {{"logmel", dsp::InputKind::logmel}, {"mfcc", dsp::InputKind::mfcc}}));
         }
       }},
      {"run.tasks", [&](const Values& v) { r.tasks = v.list(); }},
      {"run.head",
       [&](const Values& v) {
         r.head = v.choice<experiment::HeadKind>({{"hypernet", experiment::HeadKind::hypernet},
                                                  {"plain", experiment::HeadKind::plain},
                                                  {"gmu", experiment::HeadKind::gmu},
                                                  {"concat", experiment::HeadKind::concat}});
       }},
      {"run.condition",
       [&](const Values& v) {
         r.condition = v.choice<hypernet::ConditionMode>(
             {{"noise", hypernet::ConditionMode::noise}, {"data", hypernet::ConditionMode::data}});
       }},
      {"run.condition_policy",
       [&](const Values& v) {
         r.policy = v.choice<hypernet::ConditionPolicy>({{"fixed_per_run", hypernet::ConditionPolicy::fixed_per_run},
                                                         {"per_step", hypernet::ConditionPolicy::per_step}});
       }},
      {"run.separate_bias", [&](const Values& v) { r.separate_bias = v.boolean(); }},
      {"run.input",
       [&](const Values& v) {
         r.input = v.choice<dsp::InputKind>({{"logmel", dsp::InputKind::logmel}, {"mfcc", dsp::InputKind::mfcc}});
       }},
      {"run.pretrained", [&](const Values& v) { pretrained_explicit = v.boolean(); }},
      {"run.freeze", [&](const Values& v) { r.freeze = v.boolean(); }},
      {"run.epochs", [&](const Values& v) { r.epochs = v.uint(); }},
      {"run.lr", [&](const Values& v) { r.lr = v.real(); }},
      {"run.batch", [&](const Values& v) { r.batch = v.uint(); }},
      {"run.folds", [&](const Values& v) { r.folds = v.uint(); }},
      {"run.reps", [&](const Values& v) { r.reps = v.uint(); }},
      {"run.feature_dim", [&](const Values& v) { r.feature_dim = v.uint(); }},
      {"run.gmu_hidden", [&](const Values& v) { r.gmu_hidden = v.uint(); }},
      {"run.dropout", [&](const Values& v) { r.dropout = v.real(); }},
      {"run.checkpoint_backbone", [&](const Values& v) { r.checkpoint_backbone = v.boolean(); }},
  };

  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    const auto key = item.fullname();
    const auto it = keys.find(key);
    if (it == keys.end()) {
      unknown.push_back(key);
      continue;
    }
    it->second(Values(key, item.inputs));
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ValidationError("unknown config key(s): " + list);
  }
  r.pretrained = pretrained_explicit.value_or(r.weights_path.has_value());
  if (!r.pretrained) r.weights_path.reset();
  r.validate();
  return cfg;
}

AppConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_text(path, "config"), path.parent_path());
}

void apply_ablation(AppConfig& cfg, const std::string& ablation) {
  if (ablation.empty()) return;
  if (ablation == "no-hypernet") {
    if (cfg.run.head != experiment::HeadKind::hypernet) {
      throw ValidationError("--ablation=no-hypernet needs the hypernet head");
    }
    cfg.run.head = experiment::HeadKind::plain;
  } else if (ablation == "egemaps-cond") {
    if (!cfg.egemaps_csv) throw ValidationError("--ablation=egemaps-cond needs paths.egemaps_csv");
    cfg.run.condition = hypernet::ConditionMode::data;
  } else if (ablation == "mfcc") {
    cfg.run.input = dsp::InputKind::mfcc;
  } else if (ablation == "no-pretrain") {
    cfg.run.pretrained = false;
    cfg.run.weights_path.reset();
  } else {
    throw ValidationError("unknown ablation '" + ablation + "'");
  }
  cfg.run.validate();
}

void apply_task(AppConfig& cfg, const std::string& task) {
  if (!experiment::is_task(task)) throw ValidationError("unknown task '" + task + "'");
  if (cfg.run.head == experiment::HeadKind::gmu || cfg.run.head == experiment::HeadKind::concat) {
    throw ValidationError("--task cannot be combined with a fusion head");
  }
  cfg.run.tasks = {task};
}

void apply_fusion(AppConfig& cfg, const std::string& fusion) {
  if (fusion == "gmu") {
    cfg.run.head = experiment::HeadKind::gmu;
    cfg.run.tasks = {"pa", "ta"};
  } else if (fusion == "concat") {
    cfg.run.head = experiment::HeadKind::concat;
    cfg.run.tasks.assign(fusion::kTaskOrder.begin(), fusion::kTaskOrder.end());
  } else {
    throw ValidationError("unknown fusion '" + fusion + "'");
  }
  cfg.run.condition = hypernet::ConditionMode::noise;
  cfg.run.validate();
}

void apply_seed(AppConfig& cfg, std::uint64_t seed) { cfg.run.seed = seed; }

}  // namespace hyperdys::cli
