#pragma once

// Experiment configuration shared by all CLI subcommands, evaluation over a
// dataset split, and the diffusion-path ablation sweep.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/diagnostics.hpp"
#include "lfm/forecast.hpp"

namespace lfm::experiment {

struct RolloutSettings {
  std::size_t horizon = 30;
  std::size_t ensemble = 1;
  std::string mode = "flow-euler";
  std::uint64_t seed = 0;
  std::size_t start = 0;         // first context frame
  std::size_t sample_steps = 0;  // 0: checkpoint knots
};

struct EvalSettings {
  std::vector<std::size_t> horizons{1, 10, 30};
  std::string split = "test";
  std::size_t max_trajectories = 0;  // 0: all
  std::size_t spectrum_center = 10;  // frame of the prediction window
  std::size_t spectrum_half_width = 2;
  bool images = true;
};

struct AblationSettings {
  std::vector<double> sigma_mins{1e-1, 1e-2, 1e-3, 1e-6};
  std::vector<std::size_t> fm_knots{5, 10};
  bool dense = true;  // fine-grid training, coarse sampling
  std::size_t dense_train_knots = 1000;
  std::size_t dense_sample_steps = 50;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t horizon = 30;
  std::size_t steps = 0;  // 0: train_fm.steps
  std::string exp_prediction = "noise";  // training target of the exponential variants
};

struct ExperimentConfig {
  std::string name = "experiment";
  pde::GenConfig data;
  codec::CodecConfig codec;
  forecast::Observation observe;
  dit::DenoiserConfig denoiser;
  forecast::TrainConfig train_ae, train_fm, train_ar;
  RolloutSettings rollout;
  EvalSettings eval;
  AblationSettings ablation;

  ExperimentConfig();
  /// Digest of everything that determines data and trained weights
  /// (data, codec, observe, denoiser, training stages).
  std::string digest() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& c, const std::filesystem::path& path);

/// Channel names for a problem ("u" or "omega"), c0.. otherwise.
std::vector<std::string> variable_names(const std::string& problem, std::size_t channels);

/// Reference frames [start + h, start + h + horizon) of a trajectory.
pde::Trajectory reference_window(const pde::Trajectory& t, std::size_t start, std::size_t h, std::size_t horizon);

struct ModelEntry {
  std::string name;
  const forecast::DynamicsCheckpoint* model = nullptr;
  forecast::RolloutOptions options;
};

/// Rolls out every model from each trajectory of the split and records
/// trajectory-averaged NRMSE of the ensemble mean at each horizon (window
/// [0, horizon) of the prediction), windowed spectra of prediction and
/// reference, and optional images of the first trajectory.
diag::EvalReport evaluate(const forecast::CodecCheckpoint& codec, const std::vector<ModelEntry>& models,
                          const pde::Dataset& ds, const EvalSettings& settings, std::size_t start = 0);

struct AblationRow {
  std::string variant;  // e.g. "exp-1e-06", "fm-10", "fm-dense-50"
  std::uint64_t seed = 0;
  double nrmse = 0.0;   // at the ablation horizon, mean over trajectories
  double final_loss = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  /// Median over seeds per variant, in sweep order.
  std::vector<std::pair<std::string, double>> medians() const;
  double median(const std::string& variant) const;
};

/// Trains one flow model per (variant, seed) on the frozen codec with equal
/// step budgets and evaluates each at the ablation horizon.
AblationResult ablate_schedules(const ExperimentConfig& cfg, const forecast::CodecCheckpoint& codec,
                                const pde::Dataset& ds, const std::filesystem::path& log_dir = {});

void write_ablation(const AblationResult& r, const std::filesystem::path& dir);

/// Entry point of the `lfm` tool.
int cli_main(int argc, char** argv);

}  // namespace lfm::experiment
