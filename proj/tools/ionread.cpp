// Command-line front end: simulate, calibrate, classify, report, crosstalk
// and end-to-end run, all driven by a sectioned key-value config plus a few
// override flags.
#include <CLI11.hpp>
#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "ionread/experiments.hpp"

namespace {

using ionread::harness::Config;
using ionread::harness::ExperimentConfig;

ExperimentConfig resolve_config(const std::string& config_path, const std::string& kind,
                                std::int64_t seed, std::int64_t trials, int threads,
                                const std::string& out_dir) {
  ExperimentConfig cfg;
  if (!config_path.empty()) {
    Config file = Config::parse_file(config_path);
    if (!kind.empty()) file.set("experiment.kind", kind);
    if (seed >= 0) file.set_int("experiment.seed", seed);
    cfg = ExperimentConfig::from_config(file);
  } else {
    cfg = ExperimentConfig::defaults_for(kind.empty() ? "single_exposure" : kind);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  }
  if (trials > 0) cfg.trials = static_cast<std::uint64_t>(trials);
  if (threads > 0) cfg.threads = threads;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ionread: camera-based multi-qubit readout simulator"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, kind, out_dir;
  std::int64_t seed = -1, trials = 0;
  int threads = 0;
  app.add_option("--config", config_path, "config file (sectioned key = value)");
  app.add_option("--experiment", kind,
                 "single_exposure | time_resolved | qunybble | crosstalk_study");
  app.add_option("--seed", seed, "random seed (overrides config)");
  app.add_option("--trials", trials, "trial count (overrides config)");
  app.add_option("--threads", threads, "worker threads (0 = hardware)");
  app.add_option("--out-dir", out_dir, "output directory");

  auto* sim = app.add_subcommand("simulate", "generate trials, emit IRF1 + labels");
  auto* run = app.add_subcommand("run", "end-to-end experiment, emit report CSVs");
  auto* xtalk = app.add_subcommand("crosstalk", "integrated-signal-vs-rank study CSV");

  auto* cal = app.add_subcommand("calibrate", "fit count distributions from IRF1 + labels");
  std::string frames_path, labels_path, archive_path = "calibration.txt";
  std::string scheme = "none";
  int max_rank = 100;
  double background = 0.01;
  cal->add_option("--frames", frames_path, "IRF1 file")->required();
  cal->add_option("--labels", labels_path, "label sidecar")->required();
  cal->add_option("--archive", archive_path, "output calibration archive");
  cal->add_option("--scheme", scheme, "none | nearest | all_others");
  cal->add_option("--max-rank", max_rank, "pixel ranks to fit");
  cal->add_option("--background", background, "background mean for the pixel order");

  auto* cls = app.add_subcommand("classify", "classify IRF1 frames against an archive");
  std::string cls_frames, cls_labels, cls_archive, verdicts_path = "verdicts.csv";
  std::string method = "ml";
  int roi_size = 30;
  double r_stop = 13.815510557964274;
  cls->add_option("--frames", cls_frames, "IRF1 file")->required();
  cls->add_option("--labels", cls_labels, "label sidecar")->required();
  cls->add_option("--archive", cls_archive, "calibration archive")->required();
  cls->add_option("--verdicts", verdicts_path, "output verdict CSV");
  cls->add_option("--method", method, "ml | adaptive | mn | mn3");
  cls->add_option("--roi-size", roi_size, "pixels per ion ROI");
  cls->add_option("--r-stop", r_stop, "adaptive confidence level");

  auto* rep = app.add_subcommand("report", "aggregate a verdict CSV into an error report");
  std::string rep_verdicts, rep_out = "epsilon.csv", rep_method = "ml";
  int rep_roi = 0;
  rep->add_option("--verdicts", rep_verdicts, "verdict CSV")->required();
  rep->add_option("--report", rep_out, "output report CSV");
  rep->add_option("--method", rep_method, "method tag for the report row");
  rep->add_option("--roi-size", rep_roi, "ROI size tag for the report row");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed() || run->parsed() || xtalk->parsed()) {
      if (xtalk->parsed() && kind.empty()) kind = "crosstalk_study";
      ExperimentConfig cfg =
          resolve_config(config_path, kind, seed, trials, threads, out_dir);
      if (sim->parsed())
        ionread::harness::cmd_simulate(cfg);
      else
        ionread::harness::run_experiment(cfg);
    } else if (cal->parsed()) {
      ionread::harness::cmd_calibrate(frames_path, labels_path, archive_path, max_rank,
                                      scheme, background);
    } else if (cls->parsed()) {
      ionread::harness::cmd_classify(cls_frames, cls_labels, cls_archive, verdicts_path,
                                     method, roi_size, r_stop);
    } else if (rep->parsed()) {
      ionread::harness::cmd_report(rep_verdicts, rep_out, rep_method, rep_roi);
    }
  } catch (const std::exception& err) {
    std::cerr << "ionread: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
