#include <CLI11.hpp>

#include <iostream>

#include "hyperdys/cli.hpp"

using namespace hyperdys;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string ablation, task, fusion;
};

cli::AppConfig load(const Overrides& o) {
  auto cfg = o.config.empty() ? cli::AppConfig{} : cli::load_config(o.config);
  if (o.seed) cli::apply_seed(cfg, *o.seed);
  if (!o.fusion.empty()) cli::apply_fusion(cfg, o.fusion);
  if (!o.task.empty()) cli::apply_task(cfg, o.task);
  cli::apply_ablation(cfg, o.ablation);
  return cfg;
}

void add_common(CLI::App* cmd, Overrides& o, bool run_flags) {
  cmd->add_option("--config", o.config, "TOML configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Seed for every stochastic component");
  if (!run_flags) return;
  cmd->add_option("--ablation", o.ablation, "Ablation variant")
      ->check(CLI::IsMember({"no-hypernet", "egemaps-cond", "mfcc", "no-pretrain"}));
  cmd->add_option("--task", o.task, "Single task to model")->check(CLI::IsMember({"a", "e", "i", "o", "u", "pa", "ta", "ka"}));
  cmd->add_option("--fusion", o.fusion, "Multi-task fusion head")->check(CLI::IsMember({"gmu", "concat"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dysarthria detection with hypernetwork-generated classifier heads"};
  app.require_subcommand(1);

  Overrides o;
  auto* featurize = app.add_subcommand("featurize", "Turn manifest WAVs into cached spectrogram images");
  add_common(featurize, o, false);

  cli::SynthOptions synth_opts;
  std::size_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Generate a labelled synthetic corpus");
  synth->add_option("--out", synth_opts.out_dir, "Output directory")->required();
  synth->add_option("--samples", synth_opts.samples, "Number of speakers")->capture_default_str();
  synth->add_option("--tasks", synth_opts.tasks, "Tasks to record per speaker")->capture_default_str();
  synth->add_option("--duration", synth_opts.duration, "Clip length in seconds")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Generator seed");

  auto* run = app.add_subcommand("run", "Run the cross-validation protocol");
  add_common(run, o, true);

  std::vector<std::string> report_paths;
  std::string csv_out;
  auto* report = app.add_subcommand("report", "Compare run reports");
  report->add_option("reports", report_paths, "report.json files")->required()->check(CLI::ExistingFile);
  report->add_option("--csv", csv_out, "Also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*featurize) {
      const auto cfg = load(o);
      const auto r = cli::cmd_featurize(cfg);
      std::cout << "featurize: " << r.written << " written, " << r.skipped << " up to date, " << r.errors.size()
                << " failed\n";
      for (const auto& e : r.errors) std::cerr << "error: " << e << "\n";
      return r.errors.empty() ? 0 : 2;
    }
    if (*synth) {
      synth_opts.seed = synth_seed;
      const auto r = cli::cmd_synth(synth_opts);
      std::cout << "synth: " << r.wav_files << " WAV files, manifest " << r.manifest.string() << ", features "
                << r.egemaps_csv.string() << "\n";
      return 0;
    }
    if (*run) {
      const auto cfg = load(o);
      const auto r = cli::cmd_run(cfg, o.ablation, std::cout);
      std::cout << "report: " << r.json_path.string() << "\n";
      return 0;
    }
    if (*report) {
      const auto table = cli::cmd_report({report_paths.begin(), report_paths.end()});
      std::cout << table.text;
      if (!csv_out.empty()) {
        std::ofstream out(csv_out);
        if (!out) throw DataError("cannot write " + csv_out);
        out << table.csv;
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 3;
}
