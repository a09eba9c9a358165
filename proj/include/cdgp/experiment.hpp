#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "cdgp/effective.hpp"
#include "cdgp/training.hpp"

namespace cdgp {

struct Dataset {
  std::string name;
  Eigen::VectorXd t, y;  // sorted ascending in t
  int size() const { return static_cast<int>(t.size()); }
};

struct IngestResult {
  Dataset data;
  int warnings = 0;  // malformed rows skipped
};

// Reads a two-column "t,y" CSV (optional header).  Malformed rows are
// skipped and counted; rows are sorted ascending in t.  The dataset name
// defaults to the file stem.
IngestResult ingest_csv(const std::string& path, const std::string& name = "");

// Affine transform fitted on the training portion: standardized time is
// (t - t_mean)/t_sd * time_rescale, standardized target is (y - y_mean)/y_sd.
struct Standardizer {
  double t_mean = 0.0, t_sd = 1.0;
  double y_mean = 0.0, y_sd = 1.0;
  double time_rescale = 1.0;

  double std_t(double t) const { return (t - t_mean) / t_sd * time_rescale; }
  double std_y(double y) const { return (y - y_mean) / y_sd; }
  double raw_t(double ts) const { return ts / time_rescale * t_sd + t_mean; }
  double raw_y(double ys) const { return ys * y_sd + y_mean; }
  double raw_y_scale(double s) const { return s * y_sd; }
};

struct SplitData {
  Dataset train_raw, test_raw;
  Eigen::VectorXd t_train, y_train, t_test, y_test;  // standardized
  Standardizer xform;
  double cut = 0.0;  // raw-time split point (train: t <= cut)
};

// Splits at the given fraction of the raw time range (train: t <= cut) and
// standardizes both axes with statistics of the training portion only.
// Requires at least 10 training points and a non-degenerate training y.
SplitData standardize_split(const Dataset& ds, double split_fraction, double time_rescale = 1.0);

struct ExperimentConfig {
  std::string model = "cdgp2";  // se | mixture | sese | cdgp2 | cdgp3
  std::uint64_t seed = 0;
  double split_fraction = 0.7;
  double time_rescale = 1.0;
  std::vector<int> hyperdata_sizes;  // empty -> per-model/dataset defaults
  int net_width = 5;
  double net_weight_std = 0.5;
  double noise_init_var = 0.01;
  int grid_points = 400;      // prediction grid
  bool predict_noise = true;  // predictive bands include observation noise
  // `sample` subcommand synthetic grid
  double grid_min = -2.0, grid_max = 2.0;
  int sample_grid_points = 25;
  TrainConfig train;

  // Flat "key = value" text, '#' comments, unknown keys rejected.
  static ExperimentConfig from_string(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
};

// Hyperdata layer sizes for a model, honoring the config override:
// cdgp2 defaults to 13 on airline-named datasets and 50 otherwise;
// cdgp3 defaults to {37, 23}; other models have none.
std::vector<int> hyperdata_sizes_for(const ExperimentConfig& cfg, const std::string& dataset_name);

// Builds the untrained template stack for the configured model on the given
// standardized training times (hyperdata grids span the propagated ranges).
LayerStack make_model_stack(const ExperimentConfig& cfg, const std::string& dataset_name,
                            const Eigen::VectorXd& t_train_std);

struct ExperimentResult {
  double logml = 0.0;
  double test_rmse = 0.0;
  double runtime_sec = 0.0;
  long jitter_events = 0;
  FitResult fit;
  std::string results_json;               // serialized results document
  std::string results_path;               // files written under out_dir
  std::string predictions_path;
  std::vector<std::string> latent_paths;  // one per inner layer (depth >= 2)
};

// Fits the configured model on the dataset's training split, writes the
// results JSON, the prediction CSV (raw units) and per-layer latent CSVs
// (raw t, standardized latent mean/std), and returns the bundle.  All file
// writes are atomic (temp file + rename).  Identical config + data + seed
// produce identical outputs except for the runtime_sec field.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& data_csv,
                                const std::string& out_dir);

// Self-contained diagnostics on synthetic data: gradient check, a small
// Monte-Carlo comparison against the closed-form effective kernel, PSD
// factorization checks, and the heavy-tail grid.  Returns a pass/fail JSON
// document; corrupt_index >= 0 injects a gradient fault (testing hook).
std::string diagnose_report(const ExperimentConfig& cfg, int corrupt_index = -1);

// Serializes `sample` output: the analytic effective Gram and the
// Monte-Carlo second-moment estimate with standard errors on the synthetic
// grid from the config.
std::string sample_report(const ExperimentConfig& cfg, std::int64_t n_samples,
                          std::uint64_t seed);

// Atomic file write (temp + rename) used for every artifact.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace cdgp
