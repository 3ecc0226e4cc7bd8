#include "lfm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lfm/fft.hpp"

namespace lfm::diag {

double nrmse(const pde::Trajectory& pred, const pde::Trajectory& ref, Window w, std::size_t variable) {
  if (pred.extents != ref.extents || pred.channels != ref.channels)
    throw std::invalid_argument("nrmse: prediction and reference shapes differ");
  if (variable >= ref.channels) throw std::invalid_argument("nrmse: variable index out of range");
  if (w.begin >= w.end || w.end > pred.frames || w.end > ref.frames) {
    throw std::invalid_argument("nrmse: window [" + std::to_string(w.begin) + ", " + std::to_string(w.end) +
                                ") does not fit trajectories of " + std::to_string(pred.frames) + " and " +
                                std::to_string(ref.frames) + " frames");
  }
  const std::size_t C = ref.channels;
  double err = 0, norm = 0;
  for (std::size_t m = w.begin; m < w.end; ++m) {
    const auto p = pred.frame(m), r = ref.frame(m);
    for (std::size_t q = variable; q < r.size(); q += C) {
      err += (p[q] - r[q]) * (p[q] - r[q]);
      norm += r[q] * r[q];
    }
  }
  if (norm == 0) throw std::domain_error("nrmse: reference is identically zero over the window");
  return std::sqrt(err / norm);
}

double Spectrum::total() const {
  double s = 0;
  for (std::size_t b = 0; b < energy.size(); ++b) s += energy[b] * double(counts[b]);
  return s;
}

Spectrum energy_spectrum(std::span<const double> field, const std::vector<std::size_t>& extents) {
  if (extents.empty() || extents.size() > 2) throw std::invalid_argument("energy_spectrum: expected a 1-D or 2-D field");
  const std::size_t n = extents[0];
  for (auto e : extents)
    if (e != n) throw std::invalid_argument("energy_spectrum: field is not square (" + to_string(Shape(extents)) + ")");
  if (!fft::is_power_of_two(n)) throw std::invalid_argument("energy_spectrum: extent " + std::to_string(n) + " is not a power of two");
  const std::size_t d = extents.size();
  const std::size_t total = d == 1 ? n : n * n;
  if (field.size() != total) throw std::invalid_argument("energy_spectrum: field size does not match extents");

  std::vector<fft::Complex> spec(field.begin(), field.end());
  if (d == 1)
    fft::transform(spec, false);
  else
    fft::transform2d(spec, n, n, false);
  const double scale = 1.0 / std::pow(double(n), 2.0 * double(d));
  const std::size_t bins = std::size_t(std::floor(std::sqrt(double(d)) * double(n / 2))) + 1;
  Spectrum s;
  s.energy.assign(bins, 0.0);
  s.counts.assign(bins, 0);
  for (std::size_t q = 0; q < total; ++q) {
    double k2 = 0;
    if (d == 1) {
      const double k = double(fft::wavenumber(q, n));
      k2 = k * k;
    } else {
      const double kx = double(fft::wavenumber(q / n, n)), ky = double(fft::wavenumber(q % n, n));
      k2 = kx * kx + ky * ky;
    }
    const auto b = std::size_t(std::floor(std::sqrt(k2) + 1e-12));
    s.energy[b] += std::norm(spec[q]) * scale;
    s.counts[b] += 1;
  }
  for (std::size_t b = 0; b < bins; ++b)
    if (s.counts[b]) s.energy[b] /= double(s.counts[b]);
  return s;
}

Spectrum frame_spectrum(const pde::Trajectory& t, std::size_t m, std::size_t variable) {
  if (variable >= t.channels) throw std::invalid_argument("frame_spectrum: variable index out of range");
  const auto f = t.frame(m);
  std::vector<double> one(t.points());
  for (std::size_t q = 0; q < one.size(); ++q) one[q] = f[q * t.channels + variable];
  return energy_spectrum(one, t.extents);
}

Spectrum windowed_spectrum(const pde::Trajectory& t, std::size_t center, std::size_t half_width, std::size_t variable) {
  if (center < half_width || center + half_width >= t.frames) {
    throw std::out_of_range("windowed_spectrum: window " + std::to_string(center) + " +/- " + std::to_string(half_width) +
                            " does not fit " + std::to_string(t.frames) + " frames");
  }
  Spectrum acc = frame_spectrum(t, center - half_width, variable);
  for (std::size_t m = center - half_width + 1; m <= center + half_width; ++m) {
    const auto s = frame_spectrum(t, m, variable);
    for (std::size_t b = 0; b < acc.energy.size(); ++b) acc.energy[b] += s.energy[b];
  }
  for (auto& e : acc.energy) e /= double(2 * half_width + 1);
  return acc;
}

void EvalReport::add_spectrum(const std::string& model, const std::string& variable, std::size_t center,
                              std::size_t half_width, const Spectrum& s) {
  for (std::size_t b = 0; b < s.energy.size(); ++b) spectra.push_back({model, variable, center, half_width, b, s.energy[b]});
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  return os;
}

void check_name(const std::string& s) {
  if (s.find_first_of(",\n\"") != std::string::npos)
    throw std::invalid_argument("report field '" + s + "' contains a comma, quote or newline");
}

}  // namespace

std::pair<double, double> write_pgm(const std::filesystem::path& path, const Image& img) {
  if (img.values.size() != img.rows * img.cols || img.rows == 0)
    throw std::invalid_argument("write_pgm: image '" + img.name + "' has inconsistent size");
  const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
  const double mn = *lo, mx = *hi;
  const double range = mx > mn ? mx - mn : 1.0;
  auto os = open_out(path);
  os << "P5\n" << img.cols << ' ' << img.rows << "\n255\n";
  for (double v : img.values) {
    const double s = std::isfinite(v) ? (v - mn) / range : 0.0;
    os.put(char(static_cast<unsigned char>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0))));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
  return {mn, mx};
}

void emit_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto os = open_out(dir / "metrics.csv");
    os << "model,variable,horizon,value\n";
    for (const auto& r : report.metrics) {
      check_name(r.model);
      check_name(r.variable);
      os << r.model << ',' << r.variable << ',' << r.horizon << ',' << num(r.value) << '\n';
    }
  }
  {
    auto os = open_out(dir / "spectra.csv");
    os << "model,variable,center,half_width,wavenumber,energy\n";
    for (const auto& r : report.spectra) {
      check_name(r.model);
      check_name(r.variable);
      os << r.model << ',' << r.variable << ',' << r.center << ',' << r.half_width << ',' << r.wavenumber << ','
         << num(r.energy) << '\n';
    }
  }
  nlohmann::json meta = report.metadata;
  meta["spectrum_normalization"] = "energy = |X_k|^2 / N^(2d), averaged over modes with floor(|k|) = bin";
  meta["nrmse_definition"] = "RMSE over the window / RMS of the reference over the window";
  meta["images"] = nlohmann::json::array();
  for (const auto& img : report.images) {
    check_name(img.name);
    const auto [mn, mx] = write_pgm(dir / (img.name + ".pgm"), img);
    nlohmann::json side = {{"image", img.name + ".pgm"},
                           {"rows", img.rows},
                           {"cols", img.cols},
                           {"scaling", "per-image min-max"},
                           {"min", mn},
                           {"max", mx}};
    auto os = open_out(dir / (img.name + ".pgm.json"));
    os << side.dump(2) << '\n';
    meta["images"].push_back(img.name + ".pgm");
  }
  auto os = open_out(dir / "report.json");
  os << meta.dump(2) << '\n';
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "model,variable,horizon,value")
    throw std::runtime_error(path.string() + ": unexpected metrics header");
  std::vector<MetricRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    MetricRow r;
    std::string h, v;
    if (!std::getline(ss, r.model, ',') || !std::getline(ss, r.variable, ',') || !std::getline(ss, h, ',') ||
        !std::getline(ss, v))
      throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
    r.horizon = std::stoul(h);
    r.value = std::stod(v);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lfm::diag
