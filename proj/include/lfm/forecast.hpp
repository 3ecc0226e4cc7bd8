#pragma once

// Training stages (autoencoder, flow matching, deterministic baseline),
// checkpoints, and autoregressive rollout in latent space.

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/denoiser.hpp"
#include "lfm/meshcodec.hpp"
#include "lfm/nn.hpp"
#include "lfm/pde.hpp"
#include "lfm/samplers.hpp"
#include "lfm/schedules.hpp"

namespace lfm::forecast {

struct TrainConfig {
  std::string stage = "ae";  // ae | fm | ar
  nn::AdamConfig adam;
  std::size_t batch = 8;
  std::size_t window = 4;  // ae: consecutive frames per window (jerk needs 4)
  std::size_t steps = 1000;
  std::size_t warmup = 0;
  bool cosine = true;
  std::uint64_t seed = 0;
  std::size_t log_every = 10;
  // fm stage
  DiffusionPath path = DiffusionPath::flow_linear();
  std::size_t knots = 10;
  GridSpacing spacing = GridSpacing::UniformT;
  double snr_gamma = 0.0;  // min-SNR loss weighting, 0: off

  TimeGrid grid() const { return make_grid(path, knots, spacing); }
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DigestMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rows of named columns, written as CSV.
struct LossLog {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  void add(std::vector<double> row);
  void write_csv(const std::filesystem::path& path) const;
  /// Column by name.
  std::vector<double> column(const std::string& name) const;
};

/// Where the codec observes a field: the dataset grid (points == 0) or a
/// fixed scattered cloud of `points` locations drawn from `seed`.
struct Observation {
  std::size_t points = 0;
  std::uint64_t seed = 0;
};

struct CodecCheckpoint {
  codec::CodecConfig config;
  std::shared_ptr<codec::Codec<float>> model;
  Observation observe;
  std::vector<std::size_t> grid;  // dataset grid extents
  std::vector<double> mean, stddev, xi_min, xi_max;
  /// Experiment config digest recorded by the CLI; not part of digest().
  std::string config_digest;

  /// Digest of configuration, normalization and parameter values.
  std::string digest() const;
  codec::PointSet observation_points() const;
  codec::PointSet grid_points() const;
  /// Normalized observations of one frame, (points x channels).
  std::vector<float> observe_frame(const pde::Trajectory& t, std::size_t m) const;
  std::vector<double> normalize_xi(const std::vector<double>& xi) const;
};

/// Flow-matching denoiser or deterministic baseline (config.time_conditioned).
struct DynamicsCheckpoint {
  dit::DenoiserConfig config;
  std::shared_ptr<dit::Denoiser<float>> model;
  DiffusionPath path = DiffusionPath::flow_linear();
  std::size_t knots = 10;
  GridSpacing spacing = GridSpacing::UniformT;
  std::vector<double> latent_mean, latent_std;  // per latent channel
  std::string codec_digest;
  std::string config_digest;  // as for CodecCheckpoint

  bool is_flow() const { return config.time_conditioned; }
  std::string digest() const;
};

void save_checkpoint(const CodecCheckpoint& ckpt, const std::filesystem::path& path);
void save_checkpoint(const DynamicsCheckpoint& ckpt, const std::filesystem::path& path);
CodecCheckpoint load_codec(const std::filesystem::path& path);
DynamicsCheckpoint load_dynamics(const std::filesystem::path& path);

/// Trains the codec on the train split. The domain and channel count are
/// taken from the dataset.
CodecCheckpoint train_autoencoder(const TrainConfig& cfg, codec::CodecConfig codec_cfg, const pde::Dataset& ds,
                                  Observation observe = {}, LossLog* log = nullptr);

/// Per-frame relative L2 reconstruction error in field units, averaged over
/// all frames of the trajectories in `split`.
double reconstruction_error(const CodecCheckpoint& ckpt, const pde::Dataset& ds, pde::Split split,
                            std::size_t max_trajectories = 0);

/// Posterior means of every frame, (frames, latent..., C) per trajectory.
struct LatentSet {
  std::vector<Tensor<float>> z;
  std::vector<std::vector<double>> xi;  // normalized
};

LatentSet encode_dataset(const CodecCheckpoint& ckpt, const pde::Dataset& ds);

/// Flow-matching stage on the frozen codec's latents.
DynamicsCheckpoint train_flow(const TrainConfig& cfg, dit::DenoiserConfig net_cfg, const CodecCheckpoint& codec,
                              const pde::Dataset& ds, LossLog* log = nullptr);
/// Next-step regression baseline with the same backbone.
DynamicsCheckpoint train_ar_baseline(const TrainConfig& cfg, dit::DenoiserConfig net_cfg,
                                     const CodecCheckpoint& codec, const pde::Dataset& ds, LossLog* log = nullptr);

enum class RolloutMode { FlowEuler, DDIM, Ancestral, AR };
std::string to_string(RolloutMode m);
RolloutMode rollout_mode_from_string(const std::string& s);

struct RolloutResult {
  std::size_t members = 0;
  std::size_t horizon = 0;
  std::vector<std::size_t> extents;
  std::size_t channels = 1;
  double dt = 0.0;
  std::vector<double> xi;
  codec::Domain domain;
  /// Decoded context frames (h, points, C), field units.
  std::vector<double> context;
  /// Predicted frames (members, horizon, points, C), field units; NaN after
  /// a member is truncated.
  std::vector<double> frames;
  /// Standardized latents per member, (h + horizon, latent..., C).
  std::vector<Tensor<float>> latents;
  std::vector<bool> flagged;
  std::vector<std::size_t> valid_steps;
  double wall_seconds = 0.0;
  std::size_t encode_calls = 0, decode_calls = 0;

  std::size_t frame_size() const;
  /// One member as a trajectory of `horizon` frames.
  pde::Trajectory member(std::size_t e) const;
};

struct RolloutOptions {
  std::size_t horizon = 10;
  std::size_t ensemble = 1;
  RolloutMode mode = RolloutMode::FlowEuler;
  std::uint64_t seed = 0;
  /// Member indices start here, so members of different calls can be distinct.
  std::size_t first_member = 0;
  /// Sampler steps per physical step; 0 uses the checkpoint's knots.
  std::size_t sample_steps = 0;
};

/// Encodes frames [start, start + h) of `init` once, autoregresses in latent
/// space, and decodes every frame at the end onto the trajectory grid.
/// Throws DigestMismatch when the dynamics checkpoint was trained on a
/// different codec.
RolloutResult rollout(const CodecCheckpoint& codec, const DynamicsCheckpoint& dyn, const pde::Trajectory& init,
                      std::size_t start, const RolloutOptions& opt);

/// Pointwise mean over members, skipping truncated members frame by frame.
pde::Trajectory ensemble_mean(const RolloutResult& result);

}  // namespace lfm::forecast
