#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hyperdys/dsp.hpp"
#include "hyperdys/experiment.hpp"

namespace hyperdys::cli {

// ---- manifest ---------------------------------------------------------------

struct ManifestRow {
  std::string id;
  std::filesystem::path wav_path;  // resolved against the manifest directory
  std::string task;
  int severity = 4;
  std::string sex;
  std::string age;
  std::size_t line = 0;
};

// CSV with header id,wav_path,task,severity,sex,age. Rows naming an invalid
// severity or task, or repeating an (id, task) pair, raise ValidationError.
std::vector<ManifestRow> parse_manifest(const std::string& text, const std::filesystem::path& base_dir);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

// ---- configuration ------------------------------------------------------------

struct AppConfig {
  std::filesystem::path manifest = "manifest.csv";
  std::filesystem::path cache_dir = "cache";
  std::filesystem::path output_dir = "run";
  std::optional<std::filesystem::path> egemaps_csv;
  std::vector<dsp::InputKind> featurize_kinds{dsp::InputKind::logmel, dsp::InputKind::mfcc};
  dsp::DspConfig dsp;
  experiment::RunConfig run;
};

// TOML document with an optional top-level `seed` and the sections [paths],
// [dsp], [featurize] and [run]. Unknown keys raise ValidationError listing
// every offending key. Relative paths resolve against `base_dir`.
AppConfig parse_config(const std::string& text, const std::filesystem::path& base_dir);
AppConfig load_config(const std::filesystem::path& path);

// Applies the command-line overrides on top of a parsed configuration.
void apply_ablation(AppConfig& cfg, const std::string& ablation);
void apply_task(AppConfig& cfg, const std::string& task);
void apply_fusion(AppConfig& cfg, const std::string& fusion);
void apply_seed(AppConfig& cfg, std::uint64_t seed);

// ---- synth --------------------------------------------------------------------

struct SynthOptions {
  std::filesystem::path out_dir;
  std::size_t samples = 80;  // split evenly between the two classes
  std::vector<std::string> tasks{"pa"};
  std::uint64_t seed = 0;
  unsigned sample_rate = 22050;
  double duration = 2.0;
};

struct SynthResult {
  std::filesystem::path manifest;
  std::filesystem::path egemaps_csv;
  std::size_t wav_files = 0;
};

// Pulse-train stand-ins for syllable repetitions: class 1 (dysarthric) is
// slower with amplitude jitter, class 0 is fast and regular.
dsp::AudioClip synth_clip(bool dysarthric, std::uint64_t seed, unsigned sample_rate = 22050,
                          double duration = 2.0);
SynthResult cmd_synth(const SynthOptions& opts);

// ---- featurize ----------------------------------------------------------------

struct CacheEntry {
  std::string id;
  std::string task;
  dsp::InputKind kind = dsp::InputKind::logmel;
  std::filesystem::path file;  // relative to the cache directory
  std::string hash;
};

struct FeaturizeResult {
  std::size_t written = 0;
  std::size_t skipped = 0;
  std::vector<std::string> errors;  // one per failed row
  std::vector<CacheEntry> entries;
};

std::string kind_name(dsp::InputKind kind);
dsp::InputKind kind_from_name(const std::string& name);

// Writes one image per (row, kind) plus index.json; entries whose source
// hash is unchanged are skipped.
FeaturizeResult cmd_featurize(const AppConfig& cfg);

std::vector<CacheEntry> read_index(const std::filesystem::path& cache_dir);

// ---- run / report -------------------------------------------------------------

// Joins the manifest, the cache index and (in data-conditioned mode) the
// acoustic feature CSV into experiment samples for the configured input kind.
std::vector<experiment::Sample> collect_samples(const AppConfig& cfg);

struct RunResult {
  experiment::Report report;
  std::filesystem::path json_path;
  std::filesystem::path csv_path;
};

RunResult cmd_run(const AppConfig& cfg, const std::string& ablation, std::ostream& log);

// Aggregate table in Precision/Recall/F1/Accuracy/Specificity order.
void print_aggregate(std::ostream& out, const experiment::Report& report);

struct ReportTable {
  std::string text;
  std::string csv;
};

// Compares reports side by side; the best mean per column is marked with '*'.
ReportTable cmd_report(const std::vector<std::filesystem::path>& reports);

experiment::Report read_report(const std::filesystem::path& path);
void write_report(const experiment::Report& report, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path);

}  // namespace hyperdys::cli
