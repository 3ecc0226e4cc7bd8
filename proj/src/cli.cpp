#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "lfm/experiment.hpp"
#include "lfm/serialize.hpp"

namespace lfm::experiment {

namespace {

constexpr int kUsage = 2;
constexpr int kRefused = 3;

struct Refusal : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config, data, codec, out, log;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_config(path);
}

void write_log(const forecast::LossLog& log, const std::string& path) {
  if (!path.empty()) log.write_csv(path);
}

std::size_t default_trajectory(const pde::Dataset& ds) {
  auto t = ds.indices(pde::Split::Test);
  if (!t.empty()) return t[0];
  if (ds.trajectories.empty()) throw std::invalid_argument("dataset is empty");
  return 0;
}

// Integrity checks before evaluation.
void check_lineage(const ExperimentConfig& cfg, const forecast::CodecCheckpoint& codec,
                   const std::vector<std::pair<std::string, forecast::DynamicsCheckpoint>>& models) {
  const auto want = cfg.digest();
  if (codec.config_digest != want)
    throw Refusal("codec checkpoint was trained under config digest '" + codec.config_digest +
                  "' but the given config has digest '" + want + "'; retrain or pass the matching config");
  for (const auto& [name, m] : models) {
    if (m.config_digest != want)
      throw Refusal("model '" + name + "' was trained under config digest '" + m.config_digest +
                    "' but the given config has digest '" + want + "'");
    if (m.codec_digest != codec.digest())
      throw Refusal("model '" + name + "' was trained on codec " + m.codec_digest + ", not on the given codec " +
                    codec.digest());
  }
}

void write_rollout(const forecast::RolloutResult& r, const pde::Dataset& ds, const pde::Trajectory& init, std::size_t start,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  pde::Dataset out;
  out.problem = ds.problem;
  out.mean = ds.mean;
  out.stddev = ds.stddev;
  out.xi_min = ds.xi_min;
  out.xi_max = ds.xi_max;
  for (std::size_t e = 0; e < r.members; ++e) {
    out.trajectories.push_back(r.member(e));
    out.splits.push_back(pde::Split::Test);
  }
  auto mean = forecast::ensemble_mean(r);
  out.trajectories.push_back(mean);
  out.splits.push_back(pde::Split::Test);
  pde::write_dataset(out, dir / "rollout.lfm");

  std::ofstream s(dir / "rollout_members.csv");
  s << "member,flagged,valid_steps\n";
  for (std::size_t e = 0; e < r.members; ++e) s << e << ',' << (r.flagged[e] ? 1 : 0) << ',' << r.valid_steps[e] << '\n';

  // Error of the ensemble mean against the stored reference, when available.
  const std::size_t h = r.context.size() / r.frame_size();
  if (r.horizon == 0 || start + h + r.horizon > init.frames) return;
  auto ref = reference_window(init, start, h, r.horizon);
  const auto names = variable_names(ds.problem, init.channels);
  std::ofstream n(dir / "rollout_nrmse.csv");
  n << "step,variable,nrmse\n";
  for (std::size_t k = 1; k <= r.horizon; ++k)
    for (std::size_t v = 0; v < names.size(); ++v) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.9g", diag::nrmse(mean, ref, {k - 1, k}, v));
      n << k << ',' << names[v] << ',' << buf << '\n';
    }
}

}  // namespace

int cli_main(int argc, char** argv) {
  CLI::App app{"Latent flow-matching PDE forecasting toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::size_t> threads;
  app.add_option("--threads", threads, "Worker threads (sets LFM_THREADS); results do not depend on it");

  Common c;
  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", c.seed, "Override the seed from the config"); };

  auto* gen = app.add_subcommand("gen-data", "Generate a toy PDE dataset");
  std::string problem;
  gen->add_option("--problem", problem, "heat2d, burgers1d or vorticity2d")->check(CLI::IsMember({"heat2d", "burgers1d", "vorticity2d"}));
  gen->add_option("--config", c.config, "Experiment config (JSON)");
  gen->add_option("--out", c.out, "Dataset file")->required();
  add_seed(gen);

  auto training = [&](const char* name, const char* help, bool needs_codec) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", c.config, "Experiment config (JSON)")->required();
    s->add_option("--data", c.data, "Dataset file")->required();
    if (needs_codec) s->add_option("--codec", c.codec, "Codec checkpoint")->required();
    s->add_option("--out", c.out, "Checkpoint to write")->required();
    s->add_option("--log", c.log, "Loss curve CSV");
    s->add_option("--steps", c.steps, "Override the step count");
    add_seed(s);
    return s;
  };
  auto* tae = training("train-ae", "Train the autoencoder", false);
  auto* tfm = training("train-fm", "Train the flow-matching model on a frozen codec", true);
  auto* tar = training("train-ar", "Train the deterministic latent baseline", true);

  auto* roll = app.add_subcommand("rollout", "Autoregressive forecast from one trajectory");
  std::string model_path, mode;
  std::optional<std::size_t> horizon, ens, traj_index, start, sample_steps;
  roll->add_option("--config", c.config, "Experiment config (JSON)")->required();
  roll->add_option("--data", c.data, "Dataset holding the initial frames")->required();
  roll->add_option("--codec", c.codec, "Codec checkpoint")->required();
  roll->add_option("--model", model_path, "Flow or baseline checkpoint")->required();
  roll->add_option("--out", c.out, "Output directory")->required();
  roll->add_option("--horizon", horizon, "Steps to forecast");
  roll->add_option("--ens", ens, "Ensemble members");
  roll->add_option("--mode", mode, "flow-euler, ddim, ancestral or ar")->check(CLI::IsMember({"flow-euler", "ddim", "ancestral", "ar"}));
  roll->add_option("--traj", traj_index, "Trajectory index (default: first test trajectory)");
  roll->add_option("--start", start, "First context frame");
  roll->add_option("--sample-steps", sample_steps, "Sampler steps per forecast step");
  add_seed(roll);

  auto* ev = app.add_subcommand("eval", "NRMSE, spectra and images over a dataset split");
  std::vector<std::string> model_args;
  ev->add_option("--config", c.config, "Experiment config (JSON)")->required();
  ev->add_option("--data", c.data, "Dataset file")->required();
  ev->add_option("--codec", c.codec, "Codec checkpoint")->required();
  ev->add_option("--model", model_args, "name=checkpoint (repeatable)")->required();
  ev->add_option("--out", c.out, "Report directory")->required();
  ev->add_option("--ens", ens, "Ensemble members for stochastic models");
  add_seed(ev);

  auto* spec = app.add_subcommand("spectrum", "Windowed energy spectrum of one stored trajectory");
  std::size_t center = 0, half_width = 0, variable = 0, sp_traj = 0;
  spec->add_option("--input", c.data, "Dataset or rollout file")->required();
  spec->add_option("--traj", sp_traj, "Trajectory index");
  spec->add_option("--center", center, "Center frame")->required();
  spec->add_option("--half-width", half_width, "Half width of the window");
  spec->add_option("--variable", variable, "Channel index");
  spec->add_option("--out", c.out, "CSV file")->required();

  auto* abl = app.add_subcommand("ablate-schedules", "Diffusion-path ablation sweep");
  abl->add_option("--config", c.config, "Experiment config (JSON)")->required();
  abl->add_option("--data", c.data, "Dataset file")->required();
  abl->add_option("--codec", c.codec, "Codec checkpoint (trained from the config when omitted)");
  abl->add_option("--out", c.out, "Output directory")->required();
  abl->add_option("--steps", c.steps, "Override the per-model step budget");
  add_seed(abl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  if (threads) setenv("LFM_THREADS", std::to_string(*threads).c_str(), 1);

  try {
    if (gen->parsed()) {
      auto cfg = config_or_default(c.config);
      auto g = cfg.data;
      if (!problem.empty() && problem != g.problem) {
        if (!c.config.empty()) throw std::invalid_argument("--problem " + problem + " contradicts the config's " + g.problem);
        g = pde::GenConfig::defaults(problem);
      }
      if (c.seed) g.seed = *c.seed;
      auto ds = pde::generate_dataset(g);
      pde::write_dataset(ds, c.out);
      std::cout << "wrote " << ds.trajectories.size() << " " << ds.problem << " trajectories to " << c.out << '\n';
      return 0;
    }
    if (tae->parsed()) {
      auto cfg = load_config(c.config);
      auto tc = cfg.train_ae;
      if (c.seed) tc.seed = *c.seed;
      if (c.steps) tc.steps = *c.steps;
      auto ds = pde::read_dataset(c.data);
      forecast::LossLog log;
      auto ck = forecast::train_autoencoder(tc, cfg.codec, ds, cfg.observe, &log);
      ck.config_digest = cfg.digest();
      forecast::save_checkpoint(ck, c.out);
      write_log(log, c.log);
      std::cout << "valid relative L2 " << forecast::reconstruction_error(ck, ds, pde::Split::Valid) << '\n';
      return 0;
    }
    if (tfm->parsed() || tar->parsed()) {
      auto cfg = load_config(c.config);
      const bool flow = tfm->parsed();
      auto tc = flow ? cfg.train_fm : cfg.train_ar;
      if (c.seed) tc.seed = *c.seed;
      if (c.steps) tc.steps = *c.steps;
      auto ds = pde::read_dataset(c.data);
      auto codec = forecast::load_codec(c.codec);
      forecast::LossLog log;
      auto ck = flow ? forecast::train_flow(tc, cfg.denoiser, codec, ds, &log)
                     : forecast::train_ar_baseline(tc, cfg.denoiser, codec, ds, &log);
      ck.config_digest = cfg.digest();
      forecast::save_checkpoint(ck, c.out);
      write_log(log, c.log);
      std::cout << "final loss " << log.rows.back()[2] << '\n';
      return 0;
    }
    if (roll->parsed()) {
      auto cfg = load_config(c.config);
      auto ds = pde::read_dataset(c.data);
      auto codec = forecast::load_codec(c.codec);
      auto dyn = forecast::load_dynamics(model_path);
      forecast::RolloutOptions opt;
      opt.horizon = horizon.value_or(cfg.rollout.horizon);
      opt.ensemble = ens.value_or(cfg.rollout.ensemble);
      opt.mode = forecast::rollout_mode_from_string(mode.empty() ? (dyn.is_flow() ? cfg.rollout.mode : "ar") : mode);
      opt.seed = c.seed.value_or(cfg.rollout.seed);
      opt.sample_steps = sample_steps.value_or(cfg.rollout.sample_steps);
      const std::size_t ti = traj_index.value_or(default_trajectory(ds));
      if (ti >= ds.trajectories.size()) throw std::invalid_argument("--traj " + std::to_string(ti) + " is out of range");
      const std::size_t s0 = start.value_or(cfg.rollout.start);
      auto res = forecast::rollout(codec, dyn, ds.trajectories[ti], s0, opt);
      write_rollout(res, ds, ds.trajectories[ti], s0, c.out);
      std::cout << "rolled out " << res.members << " member(s) for " << res.horizon << " steps\n";
      return 0;
    }
    if (ev->parsed()) {
      auto cfg = load_config(c.config);
      auto ds = pde::read_dataset(c.data);
      auto codec = forecast::load_codec(c.codec);
      std::vector<std::pair<std::string, forecast::DynamicsCheckpoint>> loaded;
      for (const auto& arg : model_args) {
        const auto eq = arg.find('=');
        if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--model expects name=checkpoint, got '" + arg + "'");
        loaded.emplace_back(arg.substr(0, eq), forecast::load_dynamics(arg.substr(eq + 1)));
      }
      check_lineage(cfg, codec, loaded);
      std::vector<ModelEntry> entries;
      for (const auto& [name, m] : loaded) {
        ModelEntry e{name, &m, {}};
        e.options.ensemble = ens.value_or(cfg.rollout.ensemble);
        e.options.mode = forecast::rollout_mode_from_string(m.is_flow() ? cfg.rollout.mode : "ar");
        if (m.is_flow() && e.options.mode == forecast::RolloutMode::AR) e.options.mode = forecast::RolloutMode::FlowEuler;
        e.options.seed = c.seed.value_or(cfg.rollout.seed);
        e.options.sample_steps = cfg.rollout.sample_steps;
        entries.push_back(e);
      }
      auto rep = evaluate(codec, entries, ds, cfg.eval, cfg.rollout.start);
      rep.metadata["config_digest"] = cfg.digest();
      diag::emit_report(rep, c.out);
      for (const auto& r : rep.metrics) std::cout << r.model << ' ' << r.variable << " h=" << r.horizon << " nrmse=" << r.value << '\n';
      return 0;
    }
    if (spec->parsed()) {
      auto ds = pde::read_dataset(c.data);
      if (sp_traj >= ds.trajectories.size()) throw std::invalid_argument("--traj is out of range");
      auto s = diag::windowed_spectrum(ds.trajectories[sp_traj], center, half_width, variable);
      std::ofstream os(c.out);
      if (!os) throw std::runtime_error("cannot write " + c.out);
      os << "wavenumber,energy,modes\n";
      for (std::size_t b = 0; b < s.energy.size(); ++b) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.9g", s.energy[b]);
        os << b << ',' << buf << ',' << s.counts[b] << '\n';
      }
      return 0;
    }
    if (abl->parsed()) {
      auto cfg = load_config(c.config);
      if (c.seed)
        for (auto& s : cfg.ablation.seeds) s += *c.seed;
      if (c.steps) cfg.ablation.steps = *c.steps;
      auto ds = pde::read_dataset(c.data);
      std::filesystem::create_directories(c.out);
      forecast::CodecCheckpoint codec;
      if (c.codec.empty()) {
        forecast::LossLog log;
        codec = forecast::train_autoencoder(cfg.train_ae, cfg.codec, ds, cfg.observe, &log);
        log.write_csv(std::filesystem::path(c.out) / "loss_codec.csv");
      } else {
        codec = forecast::load_codec(c.codec);
      }
      auto res = ablate_schedules(cfg, codec, ds, c.out);
      write_ablation(res, c.out);
      for (const auto& [name, v] : res.medians()) std::cout << name << " median nrmse " << v << '\n';
      return 0;
    }
  } catch (const Refusal& e) {
    std::cerr << "refused: " << e.what() << '\n';
    return kRefused;
  } catch (const forecast::DigestMismatch& e) {
    std::cerr << "refused: " << e.what() << '\n';
    return kRefused;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsage;
}

}  // namespace lfm::experiment
