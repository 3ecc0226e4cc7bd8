#include "lfm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "lfm/fft.hpp"
#include "lfm/serialize.hpp"

namespace lfm::experiment {

using nlohmann::json;
using forecast::TrainConfig;

ExperimentConfig::ExperimentConfig() {
  train_ae.stage = "ae";
  train_ae.steps = 2000;
  train_ae.adam.lr = 1e-3;
  train_ae.warmup = 50;
  train_ae.batch = 8;
  train_ae.window = 4;
  train_fm.stage = "fm";
  train_fm.steps = 5000;
  train_fm.batch = 16;
  train_fm.warmup = 100;
  train_ar = train_fm;
  train_ar.stage = "ar";
}

namespace {

json sections_for_digest(const ExperimentConfig& c) {
  return {{"data", c.data},       {"codec", c.codec},       {"observe", {{"points", c.observe.points}, {"seed", c.observe.seed}}},
          {"denoiser", c.denoiser}, {"train_ae", c.train_ae}, {"train_fm", c.train_fm},
          {"train_ar", c.train_ar}};
}

// Overlays a partial section onto the serialized defaults.
template <typename T>
T merged(const json& j, const char* key, const T& def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_object()) throw std::invalid_argument(std::string("config section '") + key + "' must be an object");
  json base = def;
  base.merge_patch(j.at(key));
  try {
    return base.get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config section '") + key + "': " + e.what());
  }
}

}  // namespace

std::string ExperimentConfig::digest() const { return json_digest(sections_for_digest(*this)); }

void ExperimentConfig::validate() const {
  data.validate();
  codec.validate();
  denoiser.validate();
  train_ae.validate();
  train_fm.validate();
  train_ar.validate();
  if (train_ae.stage != "ae" || train_fm.stage != "fm" || train_ar.stage != "ar")
    throw std::invalid_argument("train_ae, train_fm and train_ar must carry stages ae, fm and ar");
  forecast::rollout_mode_from_string(rollout.mode);
  pde::split_from_string(eval.split);
  if (eval.horizons.empty()) throw std::invalid_argument("eval.horizons is empty");
  for (auto h : eval.horizons)
    if (h == 0) throw std::invalid_argument("eval horizons must be positive");
  if (ablation.seeds.empty()) throw std::invalid_argument("ablation.seeds is empty");
  for (double s : ablation.sigma_mins)
    if (!(s > 0 && s < 1)) throw std::invalid_argument("ablation sigma_min must lie in (0, 1)");
  for (auto k : ablation.fm_knots)
    if (k == 0) throw std::invalid_argument("ablation fm_knots must be positive");
  if (ablation.horizon == 0) throw std::invalid_argument("ablation.horizon must be positive");
  parameterization_from_string(ablation.exp_prediction);
}

void to_json(json& j, const RolloutSettings& r) {
  j = {{"horizon", r.horizon}, {"ensemble", r.ensemble}, {"mode", r.mode},
       {"seed", r.seed},       {"start", r.start},       {"sample_steps", r.sample_steps}};
}
void from_json(const json& j, RolloutSettings& r) {
  r.horizon = j.at("horizon").get<std::size_t>();
  r.ensemble = j.at("ensemble").get<std::size_t>();
  r.mode = j.at("mode").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.start = j.at("start").get<std::size_t>();
  r.sample_steps = j.at("sample_steps").get<std::size_t>();
}
void to_json(json& j, const EvalSettings& e) {
  j = {{"horizons", e.horizons},
       {"split", e.split},
       {"max_trajectories", e.max_trajectories},
       {"spectrum_center", e.spectrum_center},
       {"spectrum_half_width", e.spectrum_half_width},
       {"images", e.images}};
}
void from_json(const json& j, EvalSettings& e) {
  e.horizons = j.at("horizons").get<std::vector<std::size_t>>();
  e.split = j.at("split").get<std::string>();
  e.max_trajectories = j.at("max_trajectories").get<std::size_t>();
  e.spectrum_center = j.at("spectrum_center").get<std::size_t>();
  e.spectrum_half_width = j.at("spectrum_half_width").get<std::size_t>();
  e.images = j.at("images").get<bool>();
}
void to_json(json& j, const AblationSettings& a) {
  j = {{"sigma_mins", a.sigma_mins},
       {"fm_knots", a.fm_knots},
       {"dense", a.dense},
       {"dense_train_knots", a.dense_train_knots},
       {"dense_sample_steps", a.dense_sample_steps},
       {"seeds", a.seeds},
       {"horizon", a.horizon},
       {"steps", a.steps},
       {"exp_prediction", a.exp_prediction}};
}
void from_json(const json& j, AblationSettings& a) {
  a.sigma_mins = j.at("sigma_mins").get<std::vector<double>>();
  a.fm_knots = j.at("fm_knots").get<std::vector<std::size_t>>();
  a.dense = j.at("dense").get<bool>();
  a.dense_train_knots = j.at("dense_train_knots").get<std::size_t>();
  a.dense_sample_steps = j.at("dense_sample_steps").get<std::size_t>();
  a.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  a.horizon = j.at("horizon").get<std::size_t>();
  a.steps = j.at("steps").get<std::size_t>();
  a.exp_prediction = j.at("exp_prediction").get<std::string>();
}

void to_json(json& j, const ExperimentConfig& c) {
  j = sections_for_digest(c);
  j["name"] = c.name;
  j["rollout"] = c.rollout;
  j["eval"] = c.eval;
  j["ablation"] = c.ablation;
}

void from_json(const json& j, ExperimentConfig& c) {
  static const std::vector<std::string> known{"name",     "data",     "codec",    "observe", "denoiser", "train_ae",
                                              "train_fm", "train_ar", "rollout", "eval",    "ablation"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("unknown config section '" + key + "'");
  ExperimentConfig d;
  c.name = j.value("name", d.name);
  // Problem defaults first, then the given overrides.
  pde::GenConfig gen = d.data;
  if (j.contains("data") && j.at("data").contains("problem"))
    gen = pde::GenConfig::defaults(j.at("data").at("problem").get<std::string>());
  c.data = merged(j, "data", gen);
  c.codec = merged(j, "codec", d.codec);
  if (j.contains("observe")) {
    c.observe.points = j.at("observe").value("points", std::size_t{0});
    c.observe.seed = j.at("observe").value("seed", std::uint64_t{0});
  }
  c.denoiser = merged(j, "denoiser", d.denoiser);
  c.train_ae = merged(j, "train_ae", d.train_ae);
  c.train_fm = merged(j, "train_fm", d.train_fm);
  c.train_ar = merged(j, "train_ar", d.train_ar);
  c.rollout = merged(j, "rollout", d.rollout);
  c.eval = merged(j, "eval", d.eval);
  c.ablation = merged(j, "ablation", d.ablation);
  c.validate();
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return j.get<ExperimentConfig>();
}

void save_config(const ExperimentConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << json(c).dump(2) << '\n';
}

std::vector<std::string> variable_names(const std::string& problem, std::size_t channels) {
  if (channels == 1 && (problem == "heat2d" || problem == "burgers1d")) return {"u"};
  if (channels == 1 && problem == "vorticity2d") return {"omega"};
  std::vector<std::string> out;
  for (std::size_t c = 0; c < channels; ++c) out.push_back("c" + std::to_string(c));
  return out;
}

pde::Trajectory reference_window(const pde::Trajectory& t, std::size_t start, std::size_t h, std::size_t horizon) {
  if (start + h + horizon > t.frames) {
    throw std::invalid_argument("trajectory has " + std::to_string(t.frames) + " frames; need " +
                                std::to_string(start + h + horizon) + " for context and horizon");
  }
  pde::Trajectory r = t;
  r.frames = horizon;
  const auto fs = t.frame_size();
  r.data.assign(t.data.begin() + std::ptrdiff_t((start + h) * fs), t.data.begin() + std::ptrdiff_t((start + h + horizon) * fs));
  return r;
}

namespace {

bool spectrum_ok(const std::vector<std::size_t>& ext) {
  if (ext.empty() || ext.size() > 2) return false;
  for (auto e : ext)
    if (e != ext[0] || !fft::is_power_of_two(e)) return false;
  return true;
}

void accumulate(diag::Spectrum& acc, const diag::Spectrum& s) {
  if (acc.energy.empty()) {
    acc = s;
    return;
  }
  for (std::size_t b = 0; b < acc.energy.size(); ++b) acc.energy[b] += s.energy[b];
}

diag::Image frame_image(const std::string& name, const pde::Trajectory& t, std::size_t m, std::size_t var) {
  diag::Image img{name, t.extents[0], t.extents[1], {}};
  const auto f = t.frame(m);
  for (std::size_t q = var; q < f.size(); q += t.channels) img.values.push_back(f[q]);
  return img;
}

}  // namespace

diag::EvalReport evaluate(const forecast::CodecCheckpoint& codec, const std::vector<ModelEntry>& models,
                          const pde::Dataset& ds, const EvalSettings& settings, std::size_t start) {
  auto idx = ds.indices(pde::split_from_string(settings.split));
  if (idx.empty()) throw std::invalid_argument("dataset split '" + settings.split + "' is empty");
  if (settings.max_trajectories && idx.size() > settings.max_trajectories) idx.resize(settings.max_trajectories);
  const std::size_t H = *std::max_element(settings.horizons.begin(), settings.horizons.end());
  const auto& first = ds.trajectories[idx[0]];
  const auto names = variable_names(ds.problem, first.channels);
  const bool spectra = spectrum_ok(first.extents) && settings.spectrum_center + settings.spectrum_half_width < H &&
                       settings.spectrum_center >= settings.spectrum_half_width;
  const bool images = settings.images && first.extents.size() == 2;

  diag::EvalReport rep;
  rep.metadata["problem"] = ds.problem;
  rep.metadata["split"] = settings.split;
  rep.metadata["trajectories"] = idx;
  rep.metadata["start"] = start;
  rep.metadata["horizons"] = settings.horizons;
  rep.metadata["codec_digest"] = codec.digest();
  rep.metadata["models"] = json::array();

  bool ref_done = false;
  for (const auto& entry : models) {
    const auto& dyn = *entry.model;
    const std::size_t h = dyn.config.history;
    std::vector<std::vector<double>> sum(names.size(), std::vector<double>(settings.horizons.size(), 0.0));
    std::vector<diag::Spectrum> spec(names.size()), ref_spec(names.size());
    std::size_t flagged = 0;
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const auto& traj = ds.trajectories[idx[n]];
      auto ref = reference_window(traj, start, h, H);
      auto opt = entry.options;
      opt.horizon = H;
      auto res = forecast::rollout(codec, dyn, traj, start, opt);
      for (bool f : res.flagged) flagged += f;
      auto pred = forecast::ensemble_mean(res);
      for (std::size_t v = 0; v < names.size(); ++v) {
        for (std::size_t k = 0; k < settings.horizons.size(); ++k)
          sum[v][k] += diag::nrmse(pred, ref, {0, settings.horizons[k]}, v);
        if (spectra) {
          accumulate(spec[v], diag::windowed_spectrum(pred, settings.spectrum_center, settings.spectrum_half_width, v));
          if (!ref_done)
            accumulate(ref_spec[v], diag::windowed_spectrum(ref, settings.spectrum_center, settings.spectrum_half_width, v));
        }
      }
      if (images && n == 0) {
        rep.images.push_back(frame_image(entry.name + "_pred_t" + std::to_string(H), pred, H - 1, 0));
        if (!ref_done) rep.images.push_back(frame_image("reference_t" + std::to_string(H), ref, H - 1, 0));
      }
    }
    const double inv = 1.0 / double(idx.size());
    for (std::size_t v = 0; v < names.size(); ++v) {
      for (std::size_t k = 0; k < settings.horizons.size(); ++k)
        rep.metrics.push_back({entry.name, names[v], settings.horizons[k], sum[v][k] * inv});
      if (spectra) {
        for (auto& e : spec[v].energy) e *= inv;
        rep.add_spectrum(entry.name, names[v], settings.spectrum_center, settings.spectrum_half_width, spec[v]);
        if (!ref_done) {
          for (auto& e : ref_spec[v].energy) e *= inv;
          rep.add_spectrum("reference", names[v], settings.spectrum_center, settings.spectrum_half_width, ref_spec[v]);
        }
      }
    }
    ref_done = true;
    rep.metadata["models"].push_back({{"name", entry.name},
                                      {"digest", dyn.digest()},
                                      {"mode", forecast::to_string(entry.options.mode)},
                                      {"ensemble", dyn.is_flow() ? entry.options.ensemble : 1},
                                      {"seed", entry.options.seed},
                                      {"sample_steps", entry.options.sample_steps},
                                      {"flagged_members", flagged}});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

struct Variant {
  std::string name;
  DiffusionPath path;
  std::size_t train_knots;
  std::size_t sample_steps;
  forecast::RolloutMode mode;
  Parameterization target;
};

std::string sigma_label(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.0e", s);
  return buf;
}

std::vector<Variant> variants(const ExperimentConfig& cfg) {
  const auto& a = cfg.ablation;
  std::vector<Variant> out;
  for (double s : a.sigma_mins)
    out.push_back({"exp-" + sigma_label(s), DiffusionPath::exponential(s), cfg.train_fm.knots, 0, forecast::RolloutMode::DDIM,
                   parameterization_from_string(a.exp_prediction)});
  for (auto k : a.fm_knots)
    out.push_back({"fm-" + std::to_string(k), DiffusionPath::flow_linear(), k, 0, forecast::RolloutMode::FlowEuler,
                   Parameterization::Velocity});
  if (a.dense)
    out.push_back({"fm-dense-" + std::to_string(a.dense_sample_steps), DiffusionPath::flow_linear(), a.dense_train_knots,
                   a.dense_sample_steps, forecast::RolloutMode::FlowEuler, Parameterization::Velocity});
  return out;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end(), [](double x, double y) {
    if (std::isnan(x)) return false;
    if (std::isnan(y)) return true;
    return x < y;
  });
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<std::pair<std::string, double>> AblationResult::medians() const {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& r : rows) {
    if (std::any_of(out.begin(), out.end(), [&](const auto& p) { return p.first == r.variant; })) continue;
    out.emplace_back(r.variant, median(r.variant));
  }
  return out;
}

double AblationResult::median(const std::string& variant) const {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.variant == variant) v.push_back(r.nrmse);
  if (v.empty()) throw std::invalid_argument("no ablation rows for variant '" + variant + "'");
  return median_of(v);
}

AblationResult ablate_schedules(const ExperimentConfig& cfg, const forecast::CodecCheckpoint& codec,
                                const pde::Dataset& ds, const std::filesystem::path& log_dir) {
  cfg.validate();
  AblationResult out;
  EvalSettings ev = cfg.eval;
  ev.horizons = {cfg.ablation.horizon};
  ev.images = false;
  ev.spectrum_center = 0;
  ev.spectrum_half_width = cfg.ablation.horizon;  // disables spectra
  for (const auto& var : variants(cfg)) {
    for (auto seed : cfg.ablation.seeds) {
      TrainConfig tc = cfg.train_fm;
      tc.path = var.path;
      tc.knots = var.train_knots;
      tc.seed = seed;
      if (cfg.ablation.steps) tc.steps = cfg.ablation.steps;
      auto net = cfg.denoiser;
      net.prediction = var.target;
      forecast::LossLog log;
      auto dyn = forecast::train_flow(tc, net, codec, ds, &log);
      if (!log_dir.empty()) {
        std::filesystem::create_directories(log_dir);
        log.write_csv(log_dir / ("loss_" + var.name + "_seed" + std::to_string(seed) + ".csv"));
      }
      ModelEntry m{var.name, &dyn, {}};
      m.options.mode = var.mode;
      m.options.sample_steps = var.sample_steps;
      m.options.seed = seed;
      auto rep = evaluate(codec, {m}, ds, ev, cfg.rollout.start);
      double v = 0;
      for (const auto& row : rep.metrics) v += row.value;
      v /= double(rep.metrics.size());
      const auto losses = log.column("loss");
      out.rows.push_back({var.name, seed, v, losses.empty() ? std::nan("") : losses.back()});
    }
  }
  return out;
}

void write_ablation(const AblationResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  {
    std::ofstream os(dir / "ablation_runs.csv");
    if (!os) throw std::runtime_error("cannot write " + (dir / "ablation_runs.csv").string());
    os << "variant,seed,nrmse,final_loss\n";
    for (const auto& row : r.rows) os << row.variant << ',' << row.seed << ',' << num(row.nrmse) << ',' << num(row.final_loss) << '\n';
  }
  std::ofstream os(dir / "ablation_table.csv");
  if (!os) throw std::runtime_error("cannot write " + (dir / "ablation_table.csv").string());
  os << "variant,median_nrmse\n";
  for (const auto& [name, v] : r.medians()) os << name << ',' << num(v) << '\n';
}

}  // namespace lfm::experiment
