#pragma once

// Reference solvers for the toy problems, scattered resampling and the
// on-disk dataset. Fields live on [0, 2 pi)^d with periodic boundaries.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/meshcodec.hpp"

namespace lfm::pde {

/// Field snapshots stored row-major as (frames, extents..., channels).
struct Trajectory {
  std::vector<std::size_t> extents;
  std::size_t channels = 1;
  std::size_t frames = 0;
  std::vector<double> data;
  double dt = 0.0;
  std::vector<double> xi;
  codec::Domain domain;

  std::size_t points() const;
  std::size_t frame_size() const { return points() * channels; }
  std::span<const double> frame(std::size_t m) const;
  std::span<double> frame(std::size_t m);
  /// Throws std::invalid_argument when a structural invariant is broken,
  /// including fewer than min_frames frames or non-finite values.
  void validate(std::size_t min_frames = 0) const;
};

class CflError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every Fourier mode decays by exp(-nu |k|^2 dt) per frame.
Trajectory gen_heat2d(double nu, std::size_t n, std::size_t frames, double dt, std::uint64_t seed);

/// Viscous Burgers, pseudo-spectral with 2/3 dealiasing and RK4 taking
/// `substeps` steps per recorded frame.
Trajectory gen_burgers1d(double nu, std::size_t n, std::size_t frames, double dt, std::uint64_t seed,
                         std::size_t substeps = 1);

/// Vorticity form of 2-D Navier-Stokes with nu = 1/re, linear drag and the
/// forcing amp (sin k(x+y) + cos k(x+y)) for k = forcing_mode (0: unforced).
/// Crank-Nicolson for diffusion and drag, Heun for advection.
struct VorticityOptions {
  double drag = 0.1;
  double forcing_amp = 0.5;
  std::size_t substeps = 1;
};
Trajectory gen_vorticity2d(double re, std::size_t n, std::size_t frames, double dt, std::size_t forcing_mode,
                           std::uint64_t seed, const VorticityOptions& opt = {});

/// Velocity (u, v) = (d psi/dy, -d psi/dx) with lap psi = -omega; each n x n.
void velocity_from_vorticity(std::span<const double> omega, std::size_t n, std::vector<double>& u,
                             std::vector<double>& v);
/// Spectral divergence of (u, v) on [0, 2 pi)^2.
std::vector<double> divergence(std::span<const double> u, std::span<const double> v, std::size_t n);

/// Periodic multilinear interpolation of one frame at arbitrary points;
/// returns points x channels values.
std::vector<double> interpolate(const Trajectory& traj, std::size_t frame, const codec::PointSet& points);

/// A fixed random point cloud with the trajectory resampled on it.
struct ScatterField {
  codec::PointSet points;
  std::vector<double> weights;  // |Omega| / n_points each
  std::vector<double> values;   // (frames, n_points, channels)
};

ScatterField sample_scatter(const Trajectory& traj, std::size_t n_points, std::uint64_t seed);

enum class Split { Train, Valid, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Dataset {
  std::string problem;
  std::vector<Trajectory> trajectories;
  std::vector<Split> splits;
  std::vector<double> mean, stddev;        // per channel, from the train split
  std::vector<double> xi_min, xi_max;      // per component, from the train split

  std::vector<std::size_t> indices(Split s) const;
  /// Recomputes normalization statistics from the train split.
  void compute_normalization();
  /// (x - mean) / std per channel.
  std::vector<double> normalize(std::span<const double> frame) const;
  std::vector<double> denormalize(std::span<const double> frame) const;
  /// xi min-max scaled to [0, 1]; constant components map to 0.
  std::vector<double> normalize_xi(const std::vector<double>& xi) const;
};

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Generation settings for a whole dataset.
struct GenConfig {
  std::string problem = "heat2d";  // heat2d | burgers1d | vorticity2d
  std::size_t n = 64;
  std::size_t frames = 120;
  double dt = 0.05;
  std::size_t substeps = 1;
  double param_min = 0.005;  // nu, or Re for vorticity2d
  double param_max = 0.02;
  std::size_t forcing_mode = 4;
  std::size_t n_train = 64, n_valid = 8, n_test = 8;
  std::uint64_t seed = 0;

  static GenConfig defaults(const std::string& problem);
  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

/// Trajectories are generated in parallel; trajectory i draws its parameter
/// and seed from (seed, i) only, so the result is independent of scheduling.
Dataset generate_dataset(const GenConfig& cfg);

}  // namespace lfm::pde
