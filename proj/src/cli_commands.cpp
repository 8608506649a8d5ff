#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "hyperdys/cli.hpp"

namespace hyperdys::cli {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

std::string safe_name(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return out;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

// Cache key for one (wav, kind) pair under the current DSP settings.
std::string source_hash(std::span<const std::uint8_t> wav, dsp::InputKind kind, const dsp::DspConfig& d) {
  std::ostringstream sig;
  sig << std::setprecision(17) << "v" << dsp::kImageCacheVersion << ";" << kind_name(kind) << ";sr=" << d.sample_rate
      << ";nfft=" << d.n_fft << ";hop=" << d.hop << ";mels=" << d.n_mels << ";mfcc=" << d.n_mfcc
      << ";fmin=" << d.f_min << ";fmax=" << d.f_max << ";top=" << d.top_db << ";amin=" << d.amin
      << ";dw=" << d.delta_width;
  const std::string s = sig.str();
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  crc = crc32(crc, wav.data(), static_cast<uInt>(wav.size()));
  char buf[24];
  std::snprintf(buf, sizeof buf, "%08lx-%zx", static_cast<unsigned long>(crc), wav.size());
  return buf;
}

}  // namespace

// ---- synth --------------------------------------------------------------------

dsp::AudioClip synth_clip(bool dysarthric, std::uint64_t seed, unsigned sample_rate, double duration) {
  if (sample_rate == 0 || !(duration > 0.0)) throw ParameterError("synth: rate and duration must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  const double rate = dysarthric ? between(2.4, 3.4) : between(5.5, 6.8);
  const double f0 = dysarthric ? between(95, 135) : between(120, 170);
  const double amp_jitter = dysarthric ? 0.4 : 0.05;
  const double time_jitter = dysarthric ? 0.15 : 0.03;
  const double voiced = dysarthric ? between(0.16, 0.22) : between(0.07, 0.10);

  const auto sr = static_cast<double>(sample_rate);
  dsp::AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples.assign(static_cast<std::size_t>(duration * sr), 0.0);
  const std::size_t n = clip.samples.size();

  std::array<double, 8> weight{};
  for (std::size_t h = 0; h < weight.size(); ++h) {
    const double f = f0 * static_cast<double>(h + 1);
    weight[h] = 1.0 / (1.0 + std::pow((f - 700.0) / 400.0, 2)) / static_cast<double>(h + 1);
  }

  double t = between(0.02, 0.1);
  while (t < duration - 0.05) {
    const double amp = 0.5 * (1.0 + amp_jitter * (2.0 * u(rng) - 1.0));
    const auto start = static_cast<std::size_t>(t * sr);
    for (std::size_t k = 0; k < static_cast<std::size_t>(0.008 * sr) && start + k < n; ++k) {
      clip.samples[start + k] += 0.6 * amp * std::exp(-static_cast<double>(k) / (0.002 * sr)) * noise(rng);
    }
    const std::size_t vstart = start + static_cast<std::size_t>(0.01 * sr);
    for (std::size_t k = 0; k < static_cast<std::size_t>(voiced * sr) && vstart + k < n; ++k) {
      const double tau = static_cast<double>(k) / sr;
      const double env = (1.0 - std::exp(-tau / 0.005)) * std::exp(-tau / (voiced / 3.0));
      double s = 0.0;
      for (std::size_t h = 0; h < weight.size(); ++h) {
        s += weight[h] * std::sin(2.0 * std::numbers::pi * f0 * static_cast<double>(h + 1) * tau);
      }
      clip.samples[vstart + k] += amp * env * s;
    }
    t += (1.0 / rate) * (1.0 + time_jitter * (2.0 * u(rng) - 1.0));
  }
  const double floor = dysarthric ? 0.01 : 0.003;
  double peak = 0.0;
  for (double& s : clip.samples) {
    s += floor * noise(rng);
    peak = std::max(peak, std::abs(s));
  }
  if (peak > 0.0) {
    for (double& s : clip.samples) s *= 0.8 / peak;
  }
  return clip;
}

SynthResult cmd_synth(const SynthOptions& opts) {
  if (opts.samples < 2) throw ParameterError("synth needs at least 2 samples");
  for (const auto& t : opts.tasks) {
    if (!experiment::is_task(t)) throw ParameterError("unknown task '" + t + "'");
  }
  const auto wav_dir = opts.out_dir / "wavs";
  std::filesystem::create_directories(wav_dir);
  std::mt19937_64 rng(experiment::mix_seed(opts.seed, 0x5E));
  std::normal_distribution<double> normal(0.0, 1.0);

  std::ostringstream manifest, egemaps;
  manifest << "id,wav_path,task,severity,sex,age\n";
  egemaps << "id";
  for (std::size_t j = 1; j <= hypernet::kDataDim; ++j) egemaps << ",egemaps_" << j;
  egemaps << "\n";

  SynthResult result;
  for (std::size_t i = 0; i < opts.samples; ++i) {
    const bool dys = i % 2 == 1;
    char id[16];
    std::snprintf(id, sizeof id, "S%03zu", i + 1);
    const int severity = dys ? 1 + static_cast<int>(rng() % 3) : 4;
    const char* sex = rng() % 2 ? "M" : "F";
    const int age = 40 + static_cast<int>(rng() % 36);
    for (std::size_t t = 0; t < opts.tasks.size(); ++t) {
      const auto clip = synth_clip(dys, experiment::mix_seed(opts.seed, i + 1, t + 1), opts.sample_rate, opts.duration);
      const std::string file = std::string(id) + "_" + opts.tasks[t] + ".wav";
      dsp::write_wav(wav_dir / file, clip);
      ++result.wav_files;
      manifest << id << ",wavs/" << file << "," << opts.tasks[t] << "," << severity << "," << sex << "," << age << "\n";
    }
    egemaps << id << std::setprecision(9);
    egemaps << "," << (dys ? 3.0 : 6.0) + 0.3 * normal(rng);
    egemaps << "," << (dys ? 0.4 : 0.05) + 0.05 * normal(rng);
    for (std::size_t j = 2; j < hypernet::kDataDim; ++j) egemaps << "," << normal(rng);
    egemaps << "\n";
  }
  result.manifest = opts.out_dir / "manifest.csv";
  result.egemaps_csv = opts.out_dir / "egemaps.csv";
  write_text(result.manifest, manifest.str());
  write_text(result.egemaps_csv, egemaps.str());
  return result;
}

// ---- featurize ----------------------------------------------------------------

std::string kind_name(dsp::InputKind kind) { return kind == dsp::InputKind::logmel ? "logmel" : "mfcc"; }

dsp::InputKind kind_from_name(const std::string& name) {
  if (name == "logmel") return dsp::InputKind::logmel;
  if (name == "mfcc") return dsp::InputKind::mfcc;
  throw FormatError("unknown input kind '" + name + "'");
}

std::vector<CacheEntry> read_index(const std::filesystem::path& cache_dir) {
  const auto path = cache_dir / "index.json";
  if (!std::filesystem::exists(path)) return {};
  std::ifstream in(path);
  std::vector<CacheEntry> out;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("version").get<int>() != 1) throw VersionError("unsupported cache index version");
    for (const auto& e : j.at("entries")) {
      out.push_back({e.at("id").get<std::string>(), e.at("task").get<std::string>(),
                     kind_from_name(e.at("kind").get<std::string>()), e.at("file").get<std::string>(),
                     e.at("hash").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cache index " + path.string() + ": " + e.what());
  }
  return out;
}

FeaturizeResult cmd_featurize(const AppConfig& cfg) {
  const auto rows = read_manifest(cfg.manifest);
  if (cfg.featurize_kinds.empty()) throw ValidationError("featurize.kinds is empty");
  std::filesystem::create_directories(cfg.cache_dir);

  std::map<std::tuple<std::string, std::string, std::string>, CacheEntry> previous;
  for (auto& e : read_index(cfg.cache_dir)) previous[{e.id, e.task, kind_name(e.kind)}] = e;

  struct Outcome {
    std::vector<CacheEntry> entries;
    std::size_t written = 0, skipped = 0;
    std::string error;
  };
  std::vector<Outcome> outcomes(rows.size());
  auto work = [&](std::size_t i) {
    const auto& row = rows[i];
    auto& out = outcomes[i];
    try {
      if (!std::filesystem::exists(row.wav_path)) throw DataError("WAV file not found: " + row.wav_path.string());
      const auto bytes = dsp::read_file(row.wav_path);
      std::optional<dsp::AudioClip> clip;
      for (auto kind : cfg.featurize_kinds) {
        CacheEntry e{row.id, row.task, kind,
                     safe_name(row.id) + "_" + row.task + "_" + kind_name(kind) + ".hdim",
                     source_hash(bytes, kind, cfg.dsp)};
        const auto it = previous.find({row.id, row.task, kind_name(kind)});
        if (it != previous.end() && it->second.hash == e.hash && it->second.file == e.file &&
            std::filesystem::exists(cfg.cache_dir / e.file)) {
          ++out.skipped;
        } else {
          if (!clip) clip = dsp::decode_wav(bytes);
          dsp::write_image(cfg.cache_dir / e.file, dsp::featurize(*clip, kind, cfg.dsp));
          ++out.written;
        }
        out.entries.push_back(std::move(e));
      }
    } catch (const Error& e) {
      out.entries.clear();
      out.error = "manifest line " + std::to_string(row.line) + " (" + row.id + "/" + row.task + "): " + e.what();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), rows.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < rows.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < rows.size(); i = next++) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  FeaturizeResult result;
  nlohmann::json index = {{"version", 1}, {"entries", nlohmann::json::array()}};
  for (auto& o : outcomes) {
    result.written += o.written;
    result.skipped += o.skipped;
    if (!o.error.empty()) result.errors.push_back(o.error);
    for (auto& e : o.entries) {
      index["entries"].push_back(
          {{"id", e.id}, {"task", e.task}, {"kind", kind_name(e.kind)}, {"file", e.file.string()}, {"hash", e.hash}});
      result.entries.push_back(std::move(e));
    }
  }
  if (result.written > 0 || !std::filesystem::exists(cfg.cache_dir / "index.json")) {
    write_text(cfg.cache_dir / "index.json", index.dump(2) + "\n");
  }
  return result;
}

// ---- run ----------------------------------------------------------------------

std::vector<experiment::Sample> collect_samples(const AppConfig& cfg) {
  const auto rows = read_manifest(cfg.manifest);
  std::map<std::pair<std::string, std::string>, std::filesystem::path> images;
  for (const auto& e : read_index(cfg.cache_dir)) {
    if (e.kind == cfg.run.input) images[{e.id, e.task}] = cfg.cache_dir / e.file;
  }
  std::map<std::string, std::vector<double>> features;
  if (cfg.run.condition == hypernet::ConditionMode::data) {
    if (!cfg.egemaps_csv) throw ValidationError("data-conditioned mode needs paths.egemaps_csv");
    features = hypernet::read_feature_csv(*cfg.egemaps_csv);
  }
  std::vector<experiment::Sample> out;
  for (const auto& r : rows) {
    experiment::Sample s;
    s.id = r.id;
    s.task = r.task;
    s.severity = r.severity;
    s.label = experiment::label_from_severity(r.severity);
    const auto it = images.find({r.id, r.task});
    if (it != images.end()) s.image_path = it->second;
    const auto f = features.find(r.id);
    if (f != features.end()) s.features = f->second;
    out.push_back(std::move(s));
  }
  return out;
}

void print_aggregate(std::ostream& out, const experiment::Report& report) {
  out << std::left << std::setw(12) << "metric" << "mean +/- std\n";
  for (const char* name : {"precision", "recall", "f1", "accuracy", "specificity"}) {
    const auto& s = report.aggregate.at(name);
    out << std::left << std::setw(12) << name << fixed(s.mean) << " +/- " << fixed(s.std) << "\n";
  }
}

void write_report(const experiment::Report& report, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path) {
  write_text(json_path, experiment::to_json(report).dump(2) + "\n");
  std::ostringstream csv;
  csv << std::setprecision(17) << "rep,fold,tp,fp,tn,fn,precision,recall,f1,accuracy,specificity\n";
  for (const auto& f : report.per_fold) {
    csv << f.rep << "," << f.fold << "," << f.counts.tp << "," << f.counts.fp << "," << f.counts.tn << ","
        << f.counts.fn;
    for (const char* m : experiment::kMetricNames) csv << "," << experiment::metric_value(f.metrics, m);
    csv << "\n";
  }
  for (const char* which : {"mean", "std"}) {
    csv << which << ",,,,,";
    for (const char* m : experiment::kMetricNames) {
      const auto& s = report.aggregate.at(m);
      csv << "," << (std::string(which) == "mean" ? s.mean : s.std);
    }
    csv << "\n";
  }
  write_text(csv_path, csv.str());
}

experiment::Report read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report " + path.string() + ": " + e.what());
  }
  return experiment::report_from_json(j);
}

RunResult cmd_run(const AppConfig& cfg, const std::string& ablation, std::ostream& log) {
  auto run = cfg.run;
  run.output_dir = cfg.output_dir;
  run.validate();
  const auto data = experiment::build_dataset(collect_samples(cfg), run.tasks);
  log << "run: head=" << experiment::to_string(run.head) << " units=" << data.units.size()
      << " folds=" << run.folds << "x" << run.reps << "\n";
  auto report = experiment::run_protocol(run, data, [&](std::size_t rep, std::size_t fold, const auto& fr) {
    log << "  rep " << rep << " fold " << fold << ": accuracy " << fixed(fr.metrics.accuracy) << "\n";
    log.flush();
  });
  report.meta["ablation"] = ablation.empty() ? nlohmann::json(nullptr) : nlohmann::json(ablation);
  RunResult result{std::move(report), cfg.output_dir / "report.json", cfg.output_dir / "report.csv"};
  std::filesystem::create_directories(cfg.output_dir);
  write_report(result.report, result.json_path, result.csv_path);
  print_aggregate(log, result.report);
  return result;
}

// ---- report -------------------------------------------------------------------

ReportTable cmd_report(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw ValidationError("report needs at least one report file");
  std::vector<experiment::Report> reports;
  std::vector<std::string> names;
  for (const auto& p : paths) {
    reports.push_back(read_report(p));
    std::string name = p.filename() == "report.json" ? p.parent_path().filename().string() : p.stem().string();
    if (name.empty()) name = p.string();
    if (reports.back().meta.contains("head")) name += " (" + reports.back().meta["head"].get<std::string>() + ")";
    names.push_back(name);
  }
  const std::vector<std::pair<const char*, const char*>> columns = {
      {"precision", "Precision"}, {"recall", "Recall"}, {"f1", "F1"}, {"accuracy", "Accuracy"}, {"specificity", "Specificity"}};
  std::vector<std::size_t> best(columns.size(), 0);
  for (std::size_t c = 0; c < columns.size(); ++c) {
    for (std::size_t r = 1; r < reports.size(); ++r) {
      if (reports[r].aggregate.at(columns[c].first).mean > reports[best[c]].aggregate.at(columns[c].first).mean) {
        best[c] = r;
      }
    }
  }
  std::size_t width = 4;
  for (const auto& n : names) width = std::max(width, n.size());

  std::ostringstream text, csv;
  text << std::left << std::setw(static_cast<int>(width) + 2) << "Run";
  csv << "run";
  for (const auto& [key, title] : columns) {
    text << std::left << std::setw(20) << title;
    csv << "," << key << "_mean," << key << "_std";
  }
  text << "\n";
  csv << ",best\n";
  csv << std::setprecision(17);
  for (std::size_t r = 0; r < reports.size(); ++r) {
    text << std::left << std::setw(static_cast<int>(width) + 2) << names[r];
    std::string csv_name = names[r];
    std::replace(csv_name.begin(), csv_name.end(), ',', ';');
    csv << csv_name;
    std::string best_cols;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const auto& s = reports[r].aggregate.at(columns[c].first);
      const bool is_best = best[c] == r;
      text << std::left << std::setw(20) << (fixed(s.mean) + " +/- " + fixed(s.std) + (is_best ? " *" : ""));
      csv << "," << s.mean << "," << s.std;
      if (is_best) best_cols += (best_cols.empty() ? "" : ";") + std::string(columns[c].first);
    }
    text << "\n";
    csv << "," << best_cols << "\n";
  }
  return {text.str(), csv.str()};
}

}  // namespace hyperdys::cli
