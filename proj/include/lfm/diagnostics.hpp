#pragma once

// Error metrics, radially binned energy spectra and report files.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/pde.hpp"

namespace lfm::diag {

/// Frame range [begin, end).
struct Window {
  std::size_t begin = 0, end = 0;
};

/// RMSE of one channel over the window divided by the RMS of the reference
/// over the same window. Throws std::domain_error for an all-zero reference.
double nrmse(const pde::Trajectory& pred, const pde::Trajectory& ref, Window window, std::size_t variable = 0);

/// Energy |X_k|^2 / N^(2d) averaged within integer radial bins floor(|k|).
struct Spectrum {
  std::vector<double> energy;       // per bin, mean over the bin's modes
  std::vector<std::size_t> counts;  // modes per bin
  double total() const;             // sum over bins weighted by counts
};

/// field: one channel of a square (or 1-D) periodic frame with power-of-two extent.
Spectrum energy_spectrum(std::span<const double> field, const std::vector<std::size_t>& extents);
/// One channel of frame m of a trajectory.
Spectrum frame_spectrum(const pde::Trajectory& t, std::size_t m, std::size_t variable = 0);
/// Mean of frame spectra over [center - half_width, center + half_width].
Spectrum windowed_spectrum(const pde::Trajectory& t, std::size_t center, std::size_t half_width,
                           std::size_t variable = 0);

struct MetricRow {
  std::string model;
  std::string variable;
  std::size_t horizon = 0;
  double value = 0.0;
};

struct SpectrumRow {
  std::string model;
  std::string variable;
  std::size_t center = 0, half_width = 0;
  std::size_t wavenumber = 0;
  double energy = 0.0;
};

/// Grayscale image of a 2-D array (rows x cols), scaled per image.
struct Image {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;
};

struct EvalReport {
  std::vector<MetricRow> metrics;
  std::vector<SpectrumRow> spectra;
  std::vector<Image> images;
  nlohmann::json metadata = nlohmann::json::object();

  void add_spectrum(const std::string& model, const std::string& variable, std::size_t center, std::size_t half_width,
                    const Spectrum& s);
};

/// metrics.csv, spectra.csv, report.json and one PGM (+ .json sidecar with
/// the min-max scaling) per image. Output depends only on the report.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// 8-bit binary PGM with min-max scaling; returns {min, max}.
std::pair<double, double> write_pgm(const std::filesystem::path& path, const Image& image);

}  // namespace lfm::diag
