#include "lfm/forecast.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "lfm/serialize.hpp"
#include "lfm/util.hpp"

namespace lfm::forecast {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration and logs

void TrainConfig::validate() const {
  if (stage != "ae" && stage != "fm" && stage != "ar")
    throw std::invalid_argument("train stage must be ae, fm or ar, got '" + stage + "'");
  if (!(adam.lr > 0)) throw std::invalid_argument("learning rate must be positive");
  if (steps == 0) throw std::invalid_argument("steps must be positive");
  if (batch == 0) throw std::invalid_argument("batch must be positive");
  if (window == 0) throw std::invalid_argument("window must be positive");
  if (stage == "ae" && batch % window != 0)
    throw std::invalid_argument("ae batch " + std::to_string(batch) + " is not a multiple of window " + std::to_string(window));
  if (knots == 0) throw std::invalid_argument("knots must be positive");
  if (!(snr_gamma >= 0.0)) throw std::invalid_argument("snr_gamma must be non-negative");
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"stage", c.stage},
       {"lr", c.adam.lr},
       {"beta1", c.adam.beta1},
       {"beta2", c.adam.beta2},
       {"eps", c.adam.eps},
       {"weight_decay", c.adam.weight_decay},
       {"clip_norm", c.adam.clip_norm},
       {"batch", c.batch},
       {"window", c.window},
       {"steps", c.steps},
       {"warmup", c.warmup},
       {"cosine", c.cosine},
       {"seed", c.seed},
       {"log_every", c.log_every},
       {"path", c.path},
       {"knots", c.knots},
       {"spacing", to_string(c.spacing)},
       {"snr_gamma", c.snr_gamma}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.stage = j.value("stage", c.stage);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
  c.adam.clip_norm = j.value("clip_norm", c.adam.clip_norm);
  c.batch = j.value("batch", c.batch);
  c.window = j.value("window", c.window);
  c.steps = j.value("steps", c.steps);
  c.warmup = j.value("warmup", c.warmup);
  c.cosine = j.value("cosine", c.cosine);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  if (j.contains("path")) c.path = j.at("path").get<DiffusionPath>();
  c.knots = j.value("knots", c.knots);
  if (j.contains("spacing")) c.spacing = grid_spacing_from_string(j.at("spacing").get<std::string>());
  c.snr_gamma = j.value("snr_gamma", c.snr_gamma);
  c.validate();
}

void LossLog::add(std::vector<double> row) {
  if (row.size() != columns.size()) throw std::invalid_argument("loss log row has the wrong width");
  rows.push_back(std::move(row));
}

void LossLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << '\n' << std::setprecision(9);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<double> LossLog::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) {
      std::vector<double> out;
      for (const auto& r : rows) out.push_back(r[i]);
      return out;
    }
  throw std::invalid_argument("loss log has no column '" + name + "'");
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string tensors_digest(const NamedTensors& ts) {
  std::ostringstream os;
  for (const auto& [name, t] : ts) {
    os << name << '\0';
    write_tensor(os, t);
  }
  return fnv1a_hex(os.str());
}

json codec_meta(const CodecCheckpoint& c) {
  return {{"config", c.config},
          {"observe", {{"points", c.observe.points}, {"seed", c.observe.seed}}},
          {"grid", c.grid},
          {"normalization", {{"mean", c.mean}, {"std", c.stddev}, {"xi_min", c.xi_min}, {"xi_max", c.xi_max}}}};
}

json dynamics_meta(const DynamicsCheckpoint& c) {
  return {{"config", c.config},
          {"path", c.path},
          {"knots", c.knots},
          {"spacing", to_string(c.spacing)},
          {"latent_mean", c.latent_mean},
          {"latent_std", c.latent_std},
          {"codec_digest", c.codec_digest}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::string CodecCheckpoint::digest() const {
  return fnv1a_hex(json_digest(codec_meta(*this)) + tensors_digest(nn::export_params(*model)));
}

std::string DynamicsCheckpoint::digest() const {
  return fnv1a_hex(json_digest(dynamics_meta(*this)) + tensors_digest(nn::export_params(*model)));
}

codec::PointSet CodecCheckpoint::grid_points() const { return codec::grid_points(grid, config.domain); }

codec::PointSet CodecCheckpoint::observation_points() const {
  if (observe.points == 0) return grid_points();
  Rng rng = derive_rng(observe.seed, 77);
  std::uniform_real_distribution<double> pos(0.0, config.domain.length);
  codec::PointSet ps;
  ps.dim = config.domain.dim;
  ps.coords.resize(observe.points * ps.dim);
  for (auto& c : ps.coords) c = pos(rng);
  return ps;
}

std::vector<float> CodecCheckpoint::observe_frame(const pde::Trajectory& t, std::size_t m) const {
  if (t.extents != grid) throw std::invalid_argument("trajectory grid does not match the codec's dataset grid");
  std::vector<double> raw;
  if (observe.points == 0) {
    const auto f = t.frame(m);
    raw.assign(f.begin(), f.end());
  } else {
    raw = pde::interpolate(t, m, observation_points());
  }
  std::vector<float> out(raw.size());
  const std::size_t C = t.channels;
  for (std::size_t q = 0; q < raw.size(); ++q) out[q] = float((raw[q] - mean[q % C]) / stddev[q % C]);
  return out;
}

std::vector<double> CodecCheckpoint::normalize_xi(const std::vector<double>& xi) const {
  std::vector<double> out(xi);
  for (std::size_t k = 0; k < out.size() && k < xi_min.size(); ++k) {
    const double span = xi_max[k] - xi_min[k];
    out[k] = span > 0 ? (xi[k] - xi_min[k]) / span : 0.0;
  }
  return out;
}

void save_checkpoint(const CodecCheckpoint& ckpt, const std::filesystem::path& path) {
  json h = codec_meta(ckpt);
  h["format"] = "lfm-checkpoint";
  h["kind"] = "codec";
  h["config_digest"] = ckpt.config_digest;
  h["digest"] = ckpt.digest();
  write_container(path, h, nn::export_params(*ckpt.model));
}

void save_checkpoint(const DynamicsCheckpoint& ckpt, const std::filesystem::path& path) {
  json h = dynamics_meta(ckpt);
  h["format"] = "lfm-checkpoint";
  h["kind"] = ckpt.is_flow() ? "flow" : "ar";
  h["config_digest"] = ckpt.config_digest;
  h["digest"] = ckpt.digest();
  write_container(path, h, nn::export_params(*ckpt.model));
}

CodecCheckpoint load_codec(const std::filesystem::path& path) {
  auto c = read_container(path, "lfm-checkpoint");
  if (c.header.value("kind", std::string{}) != "codec")
    throw FormatError(path.string() + ": not a codec checkpoint (kind '" + c.header.value("kind", std::string{}) + "')");
  CodecCheckpoint ck;
  try {
    ck.config = c.header.at("config").get<codec::CodecConfig>();
    ck.observe.points = c.header.at("observe").at("points").get<std::size_t>();
    ck.observe.seed = c.header.at("observe").at("seed").get<std::uint64_t>();
    ck.grid = c.header.at("grid").get<std::vector<std::size_t>>();
    const auto& n = c.header.at("normalization");
    ck.mean = n.at("mean").get<std::vector<double>>();
    ck.stddev = n.at("std").get<std::vector<double>>();
    ck.xi_min = n.at("xi_min").get<std::vector<double>>();
    ck.xi_max = n.at("xi_max").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  Rng rng(0);
  ck.model = std::make_shared<codec::Codec<float>>(ck.config, rng);
  nn::import_params(*ck.model, c.tensors);
  if (ck.digest() != c.header.value("digest", std::string{}))
    throw DigestError(path.string() + ": checkpoint digest does not match its contents");
  ck.config_digest = c.header.value("config_digest", std::string{});
  return ck;
}

DynamicsCheckpoint load_dynamics(const std::filesystem::path& path) {
  auto c = read_container(path, "lfm-checkpoint");
  const auto kind = c.header.value("kind", std::string{});
  if (kind != "flow" && kind != "ar") throw FormatError(path.string() + ": not a flow or baseline checkpoint (kind '" + kind + "')");
  DynamicsCheckpoint ck;
  try {
    ck.config = c.header.at("config").get<dit::DenoiserConfig>();
    ck.path = c.header.at("path").get<DiffusionPath>();
    ck.knots = c.header.at("knots").get<std::size_t>();
    ck.spacing = grid_spacing_from_string(c.header.at("spacing").get<std::string>());
    ck.latent_mean = c.header.at("latent_mean").get<std::vector<double>>();
    ck.latent_std = c.header.at("latent_std").get<std::vector<double>>();
    ck.codec_digest = c.header.at("codec_digest").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  Rng rng(0);
  ck.model = std::make_shared<dit::Denoiser<float>>(ck.config, rng);
  nn::import_params(*ck.model, c.tensors);
  if (ck.digest() != c.header.value("digest", std::string{}))
    throw DigestError(path.string() + ": checkpoint digest does not match its contents");
  ck.config_digest = c.header.value("config_digest", std::string{});
  return ck;
}

// ---------------------------------------------------------------------------
// Autoencoder stage

namespace {

void require_train(const pde::Dataset& ds, std::size_t min_frames) {
  const auto train = ds.indices(pde::Split::Train);
  if (train.empty()) throw std::invalid_argument("dataset has no train split");
  for (auto i : train) ds.trajectories[i].validate(min_frames);
  const auto& t0 = ds.trajectories[train[0]];
  for (const auto& t : ds.trajectories)
    if (t.extents != t0.extents || t.channels != t0.channels)
      throw std::invalid_argument("dataset trajectories differ in grid or channel count");
  if (ds.mean.size() != t0.channels) throw std::invalid_argument("dataset normalization is missing");
}

void check_loss(double value, std::size_t step, double last_finite, std::size_t last_step) {
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "loss became non-finite at step " << step;
    if (step > 0) os << "; last finite loss " << last_finite << " at step " << last_step;
    os << ". Lower the learning rate or check the data normalization";
    throw TrainingError(os.str());
  }
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  return cfg.cosine ? nn::cosine_lr(cfg.adam.lr, step, cfg.steps, cfg.warmup) : cfg.adam.lr;
}

}  // namespace

CodecCheckpoint train_autoencoder(const TrainConfig& cfg, codec::CodecConfig codec_cfg, const pde::Dataset& ds,
                                  Observation observe, LossLog* log) {
  cfg.validate();
  require_train(ds, cfg.window);
  const auto train = ds.indices(pde::Split::Train);
  const auto& t0 = ds.trajectories[train[0]];
  codec_cfg.domain = t0.domain;
  codec_cfg.in_channels = t0.channels;
  codec_cfg.validate();

  CodecCheckpoint ck;
  ck.config = codec_cfg;
  ck.observe = observe;
  ck.grid = t0.extents;
  ck.mean = ds.mean;
  ck.stddev = ds.stddev;
  ck.xi_min = ds.xi_min;
  ck.xi_max = ds.xi_max;
  Rng init = derive_rng(cfg.seed, 1);
  ck.model = std::make_shared<codec::Codec<float>>(codec_cfg, init);
  auto& model = *ck.model;

  const auto pts = ck.observation_points();
  const auto binding = model.bind(pts, pts);
  const std::size_t P = pts.size(), C = t0.channels, M = cfg.window, W = cfg.batch / cfg.window;

  std::vector<std::vector<float>> obs(train.size());
  for (std::size_t a = 0; a < train.size(); ++a) {
    const auto& t = ds.trajectories[train[a]];
    for (std::size_t m = 0; m < t.frames; ++m) {
      auto f = ck.observe_frame(t, m);
      obs[a].insert(obs[a].end(), f.begin(), f.end());
    }
  }

  if (log) *log = LossLog{{"step", "lr", "loss", "recon", "kl", "jerk", "grad_norm"}, {}};
  nn::Adam<float> opt(model.parameters(), cfg.adam);
  Rng rng = derive_rng(cfg.seed, 2);
  std::uniform_int_distribution<std::size_t> pick_traj(0, train.size() - 1);
  double last = 0;
  std::size_t last_step = 0;
  const std::size_t fs = P * C;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<float> batch(W * M * fs);
    for (std::size_t w = 0; w < W; ++w) {
      const std::size_t a = pick_traj(rng);
      const std::size_t frames = ds.trajectories[train[a]].frames;
      const std::size_t m0 = std::uniform_int_distribution<std::size_t>(0, frames - M)(rng);
      std::copy_n(obs[a].begin() + std::ptrdiff_t(m0 * fs), M * fs, batch.begin() + std::ptrdiff_t(w * M * fs));
    }
    Tensor<float> x({W * M, P, C}, std::move(batch));
    auto enc = model.encode(binding, x, &rng);
    auto recon = model.decode(binding, enc.z);
    Tensor<float> zseq;
    if (M >= 4) {
      Shape zs = enc.z.shape();
      zs[0] = M;
      zs.insert(zs.begin(), W);
      zseq = reshape(enc.z, zs);
    }
    auto loss = codec::ae_loss(recon, x, enc.mu, enc.logvar, zseq, codec_cfg.kl_weight, codec_cfg.jerk_weight);
    const double value = loss.total.item();
    check_loss(value, step, last, last_step);
    loss.total.backward();
    const double lr = lr_at(cfg, step);
    const double gnorm = opt.step(lr);
    if (!std::isfinite(gnorm)) check_loss(gnorm, step, last, last_step);
    last = value;
    last_step = step;
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      log->add({double(step), lr, value, loss.recon.item(), loss.kl.item(),
                loss.jerk.defined() ? loss.jerk.item() : 0.0, gnorm});
    }
  }
  return ck;
}

double reconstruction_error(const CodecCheckpoint& ck, const pde::Dataset& ds, pde::Split split,
                            std::size_t max_trajectories) {
  auto idx = ds.indices(split);
  if (idx.empty()) throw std::invalid_argument("dataset has no '" + pde::to_string(split) + "' split");
  if (max_trajectories > 0 && idx.size() > max_trajectories) idx.resize(max_trajectories);
  NoGradGuard ng;
  const auto obs_pts = ck.observation_points();
  const auto binding = ck.model->bind(obs_pts, ck.grid_points());
  const std::size_t chunk = 16;
  double total = 0;
  std::size_t count = 0;
  for (auto i : idx) {
    const auto& t = ds.trajectories[i];
    const std::size_t P = obs_pts.size(), C = t.channels;
    for (std::size_t m0 = 0; m0 < t.frames; m0 += chunk) {
      const std::size_t n = std::min(chunk, t.frames - m0);
      std::vector<float> v;
      v.reserve(n * P * C);
      for (std::size_t m = m0; m < m0 + n; ++m) {
        auto f = ck.observe_frame(t, m);
        v.insert(v.end(), f.begin(), f.end());
      }
      auto enc = ck.model->encode(binding, Tensor<float>({n, P, C}, std::move(v)));
      auto rec = ck.model->decode(binding, enc.mu);
      const std::size_t fs = t.frame_size();
      for (std::size_t m = 0; m < n; ++m) {
        const auto ref = t.frame(m0 + m);
        double num = 0, den = 0;
        for (std::size_t q = 0; q < fs; ++q) {
          const double pred = double(rec.at(m * fs + q)) * ck.stddev[q % C] + ck.mean[q % C];
          num += (pred - ref[q]) * (pred - ref[q]);
          den += ref[q] * ref[q];
        }
        total += den > 0 ? std::sqrt(num / den) : std::sqrt(num);
        ++count;
      }
    }
  }
  return total / double(count);
}

LatentSet encode_dataset(const CodecCheckpoint& ck, const pde::Dataset& ds) {
  NoGradGuard ng;
  const auto pts = ck.observation_points();
  const auto binding = ck.model->bind(pts, pts);
  LatentSet out;
  const std::size_t chunk = 16;
  for (const auto& t : ds.trajectories) {
    const std::size_t P = pts.size(), C = t.channels;
    std::vector<Tensor<float>> parts;
    for (std::size_t m0 = 0; m0 < t.frames; m0 += chunk) {
      const std::size_t n = std::min(chunk, t.frames - m0);
      std::vector<float> v;
      v.reserve(n * P * C);
      for (std::size_t m = m0; m < m0 + n; ++m) {
        auto f = ck.observe_frame(t, m);
        v.insert(v.end(), f.begin(), f.end());
      }
      parts.push_back(ck.model->encode(binding, Tensor<float>({n, P, C}, std::move(v))).mu);
    }
    out.z.push_back(parts.size() == 1 ? parts[0] : concat(parts, 0));
    out.xi.push_back(ck.normalize_xi(t.xi));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dynamics stages

namespace {

struct LatentStats {
  std::vector<double> mean, std;
};

LatentStats latent_stats(const LatentSet& ls, const std::vector<std::size_t>& train, std::size_t C) {
  std::vector<double> s(C, 0.0), ss(C, 0.0);
  double n = 0;
  for (auto i : train)
    for (std::size_t q = 0; q < ls.z[i].numel(); ++q) s[q % C] += ls.z[i].at(q);
  for (auto i : train) n += double(ls.z[i].numel() / C);
  LatentStats st;
  st.mean.resize(C);
  st.std.resize(C);
  for (std::size_t c = 0; c < C; ++c) st.mean[c] = s[c] / n;
  for (auto i : train)
    for (std::size_t q = 0; q < ls.z[i].numel(); ++q) {
      const double d = ls.z[i].at(q) - st.mean[q % C];
      ss[q % C] += d * d;
    }
  for (std::size_t c = 0; c < C; ++c) {
    const double sd = std::sqrt(ss[c] / n);
    st.std[c] = sd > 1e-8 ? sd : 1.0;
  }
  return st;
}

void standardize(Tensor<float>& z, const std::vector<double>& mean, const std::vector<double>& std) {
  const std::size_t C = mean.size();
  auto d = z.mutable_data();
  for (std::size_t q = 0; q < d.size(); ++q) d[q] = float((d[q] - mean[q % C]) / std[q % C]);
}

// Random (history, next) windows from the train split.
struct WindowSampler {
  const LatentSet& ls;
  std::vector<std::size_t> train;
  std::size_t h, frame_numel;
  Shape frame_shape;  // latent..., C

  void draw(std::size_t B, Rng& rng, Tensor<float>& x0, dit::Conditioning<float>& cond) const {
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    std::vector<float> hist(B * h * frame_numel), next(B * frame_numel), xi;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t i = train[pick(rng)];
      const auto& z = ls.z[i];
      const std::size_t frames = z.shape()[0];
      const std::size_t m = std::uniform_int_distribution<std::size_t>(0, frames - h - 1)(rng);
      std::copy_n(z.data().begin() + std::ptrdiff_t(m * frame_numel), h * frame_numel,
                  hist.begin() + std::ptrdiff_t(b * h * frame_numel));
      std::copy_n(z.data().begin() + std::ptrdiff_t((m + h) * frame_numel), frame_numel,
                  next.begin() + std::ptrdiff_t(b * frame_numel));
      for (double v : ls.xi[i]) xi.push_back(float(v));
    }
    Shape hs = frame_shape, xs = frame_shape;
    hs.insert(hs.begin(), {B, h});
    xs.insert(xs.begin(), B);
    x0 = Tensor<float>(xs, std::move(next));
    cond.history = Tensor<float>(hs, std::move(hist));
    const std::size_t X = ls.xi.empty() ? 0 : ls.xi[0].size();
    cond.xi = X > 0 ? Tensor<float>({B, X}, std::move(xi)) : Tensor<float>();
  }
};

DynamicsCheckpoint train_dynamics(const TrainConfig& cfg, dit::DenoiserConfig net_cfg, const CodecCheckpoint& codec,
                                  const pde::Dataset& ds, LossLog* log, bool flow) {
  cfg.validate();
  require_train(ds, net_cfg.history + 2);
  const auto train = ds.indices(pde::Split::Train);
  net_cfg.extents = codec.config.latent_extents();
  net_cfg.channels = codec.config.latent_channels;
  net_cfg.xi_dim = ds.trajectories[train[0]].xi.size();
  net_cfg.time_conditioned = flow;
  net_cfg.validate();

  DynamicsCheckpoint ck;
  ck.config = net_cfg;
  ck.path = cfg.path;
  ck.knots = cfg.knots;
  ck.spacing = cfg.spacing;
  ck.codec_digest = codec.digest();
  Rng init = derive_rng(cfg.seed, 1);
  ck.model = std::make_shared<dit::Denoiser<float>>(net_cfg, init);
  auto& model = *ck.model;

  LatentSet ls = encode_dataset(codec, ds);
  const auto st = latent_stats(ls, train, net_cfg.channels);
  ck.latent_mean = st.mean;
  ck.latent_std = st.std;
  for (auto& z : ls.z) standardize(z, st.mean, st.std);

  Shape fshape(net_cfg.extents.begin(), net_cfg.extents.end());
  fshape.push_back(net_cfg.channels);
  WindowSampler sampler{ls, train, net_cfg.history, numel(fshape), fshape};
  const TimeGrid grid = cfg.grid();

  if (log) *log = LossLog{{"step", "lr", "loss", "baseline", "grad_norm"}, {}};
  nn::Adam<float> opt(model.parameters(), cfg.adam);
  Rng rng = derive_rng(cfg.seed, 2);
  double baseline = 0, last = 0;
  std::size_t last_step = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tensor<float> x0;
    dit::Conditioning<float> cond;
    sampler.draw(cfg.batch, rng, x0, cond);
    Tensor<float> loss;
    if (flow) {
      if (step == 0) {
        // Loss of the zero predictor for this parameterization on the first batch.
        Rng probe = derive_rng(cfg.seed, 3);
        dit::Network<float> zero = [](const Tensor<float>& xk, const std::vector<double>&) {
          return Tensor<float>::zeros(xk.shape());
        };
        baseline = dit::fm_loss(zero, net_cfg.prediction, x0, cfg.path, grid, probe, cfg.snr_gamma).item();
      }
      loss = dit::fm_loss(model, x0, cond, cfg.path, grid, rng, cfg.snr_gamma);
    } else {
      if (step == 0) {
        // Persistence: next frame = last history frame.
        NoGradGuard ng;
        baseline = mse(slice(cond.history, 1, net_cfg.history - 1, net_cfg.history), reshape(x0, [&] {
                         Shape s = x0.shape();
                         s.insert(s.begin() + 1, 1);
                         return s;
                       }())).item();
      }
      loss = mse(model.next_frame(cond), x0);
    }
    const double value = loss.item();
    check_loss(value, step, last, last_step);
    loss.backward();
    const double lr = lr_at(cfg, step);
    const double gnorm = opt.step(lr);
    if (!std::isfinite(gnorm)) check_loss(gnorm, step, last, last_step);
    last = value;
    last_step = step;
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) log->add({double(step), lr, value, baseline, gnorm});
  }
  return ck;
}

}  // namespace

DynamicsCheckpoint train_flow(const TrainConfig& cfg, dit::DenoiserConfig net_cfg, const CodecCheckpoint& codec,
                              const pde::Dataset& ds, LossLog* log) {
  return train_dynamics(cfg, std::move(net_cfg), codec, ds, log, true);
}

DynamicsCheckpoint train_ar_baseline(const TrainConfig& cfg, dit::DenoiserConfig net_cfg,
                                     const CodecCheckpoint& codec, const pde::Dataset& ds, LossLog* log) {
  return train_dynamics(cfg, std::move(net_cfg), codec, ds, log, false);
}

// ---------------------------------------------------------------------------
// Rollout

std::string to_string(RolloutMode m) {
  switch (m) {
    case RolloutMode::FlowEuler: return "flow-euler";
    case RolloutMode::DDIM: return "ddim";
    case RolloutMode::Ancestral: return "ancestral";
    case RolloutMode::AR: return "ar";
  }
  return "?";
}

RolloutMode rollout_mode_from_string(const std::string& s) {
  if (s == "flow-euler") return RolloutMode::FlowEuler;
  if (s == "ddim") return RolloutMode::DDIM;
  if (s == "ancestral") return RolloutMode::Ancestral;
  if (s == "ar") return RolloutMode::AR;
  throw std::invalid_argument("unknown rollout mode '" + s + "' (expected flow-euler, ddim, ancestral or ar)");
}

std::size_t RolloutResult::frame_size() const { return numel(extents) * channels; }

pde::Trajectory RolloutResult::member(std::size_t e) const {
  if (e >= members) throw std::out_of_range("member " + std::to_string(e) + " of " + std::to_string(members));
  pde::Trajectory t;
  t.extents = extents;
  t.channels = channels;
  t.frames = horizon;
  t.dt = dt;
  t.xi = xi;
  t.domain = domain;
  const std::size_t n = horizon * frame_size();
  t.data.assign(frames.begin() + std::ptrdiff_t(e * n), frames.begin() + std::ptrdiff_t((e + 1) * n));
  return t;
}

RolloutResult rollout(const CodecCheckpoint& codec, const DynamicsCheckpoint& dyn, const pde::Trajectory& init,
                      std::size_t start, const RolloutOptions& opt) {
  const auto t_start = std::chrono::steady_clock::now();
  if (dyn.codec_digest != codec.digest()) {
    throw DigestMismatch("dynamics checkpoint was trained on codec " + dyn.codec_digest + " but the loaded codec is " +
                         codec.digest() + "; retrain or load the matching codec");
  }
  const bool ar = opt.mode == RolloutMode::AR;
  if (ar == dyn.is_flow()) {
    throw std::invalid_argument("rollout mode " + to_string(opt.mode) + " does not match a " +
                                (dyn.is_flow() ? "flow" : "baseline") + " checkpoint");
  }
  if (opt.ensemble == 0) throw std::invalid_argument("ensemble size must be at least 1");
  const std::size_t h = dyn.config.history;
  if (start + h > init.frames)
    throw std::invalid_argument("rollout needs frames [" + std::to_string(start) + ", " + std::to_string(start + h) +
                                ") but the trajectory has " + std::to_string(init.frames));
  const std::size_t E = ar ? 1 : opt.ensemble;
  NoGradGuard ng;

  RolloutResult res;
  res.members = E;
  res.horizon = opt.horizon;
  res.extents = init.extents;
  res.channels = init.channels;
  res.dt = init.dt;
  res.xi = init.xi;
  res.domain = init.domain;

  const auto obs_pts = codec.observation_points();
  const auto binding = codec.model->bind(obs_pts, codec.grid_points());
  const std::size_t P = obs_pts.size(), C = init.channels;

  // Encode the context once.
  std::vector<float> ctx;
  for (std::size_t m = start; m < start + h; ++m) {
    auto f = codec.observe_frame(init, m);
    ctx.insert(ctx.end(), f.begin(), f.end());
  }
  Tensor<float> zc = codec.model->encode(binding, Tensor<float>({h, P, C}, std::move(ctx))).mu;
  ++res.encode_calls;
  standardize(zc, dyn.latent_mean, dyn.latent_std);

  Shape fshape(zc.shape().begin() + 1, zc.shape().end());
  const std::size_t fn = numel(fshape);
  // Per-member latent sequences.
  std::vector<std::vector<float>> seq(E, std::vector<float>(zc.data().begin(), zc.data().end()));
  res.flagged.assign(E, false);
  res.valid_steps.assign(E, 0);

  const auto xi_n = codec.normalize_xi(init.xi);
  std::vector<Rng> rngs;
  for (std::size_t e = 0; e < E; ++e) rngs.push_back(derive_rng(opt.seed, opt.first_member + e));
  Shape batch_shape = fshape;
  batch_shape.insert(batch_shape.begin(), E);
  Shape hist_shape = fshape;
  hist_shape.insert(hist_shape.begin(), {E, h});
  const TimeGrid grid = make_grid(dyn.path, opt.sample_steps ? opt.sample_steps : dyn.knots, dyn.spacing);
  SamplerMode smode = SamplerMode::DDIM;
  if (opt.mode == RolloutMode::FlowEuler) smode = SamplerMode::FlowEuler;
  if (opt.mode == RolloutMode::Ancestral) smode = SamplerMode::Ancestral;

  // Member e's slice of every noise draw comes from its own stream.
  NoiseFn<float> noise = [&](const Shape& shape) {
    if (shape.empty() || shape[0] != E) throw ShapeError("rollout noise: unexpected shape " + lfm::to_string(shape));
    Shape one(shape.begin() + 1, shape.end());
    std::vector<float> out;
    out.reserve(numel(shape));
    for (std::size_t e = 0; e < E; ++e) {
      auto n = Tensor<float>::randn(one, rngs[e]);
      out.insert(out.end(), n.data().begin(), n.data().end());
    }
    return Tensor<float>(shape, std::move(out));
  };

  for (std::size_t step = 0; step < opt.horizon; ++step) {
    std::vector<float> hist(E * h * fn);
    for (std::size_t e = 0; e < E; ++e)
      std::copy_n(seq[e].end() - std::ptrdiff_t(h * fn), h * fn, hist.begin() + std::ptrdiff_t(e * h * fn));
    dit::Conditioning<float> cond;
    cond.history = Tensor<float>(hist_shape, std::move(hist));
    if (!xi_n.empty()) {
      std::vector<float> xv;
      for (std::size_t e = 0; e < E; ++e)
        for (double v : xi_n) xv.push_back(float(v));
      cond.xi = Tensor<float>({E, xi_n.size()}, std::move(xv));
    }
    Tensor<float> next;
    if (ar) {
      next = dyn.model->next_frame(cond);
    } else {
      next = sample(dyn.model->predictor(cond), noise(batch_shape), dyn.path, grid, smode, noise).x0;
    }
    for (std::size_t e = 0; e < E; ++e) {
      auto first = next.data().begin() + std::ptrdiff_t(e * fn);
      bool finite = !res.flagged[e];
      for (std::size_t q = 0; q < fn && finite; ++q) finite = std::isfinite(first[std::ptrdiff_t(q)]);
      if (finite) {
        seq[e].insert(seq[e].end(), first, first + std::ptrdiff_t(fn));
        ++res.valid_steps[e];
      } else {
        // Keep the member's history finite so the batch stays usable.
        res.flagged[e] = true;
        seq[e].insert(seq[e].end(), seq[e].end() - std::ptrdiff_t(fn), seq[e].end());
      }
    }
  }

  // Decode everything at the end.
  auto decode = [&](const std::vector<float>& z, std::size_t n) {
    Shape s = fshape;
    s.insert(s.begin(), n);
    std::vector<float> raw(z.begin(), z.begin() + std::ptrdiff_t(n * fn));
    const std::size_t Cz = dyn.latent_mean.size();
    for (std::size_t q = 0; q < raw.size(); ++q) raw[q] = float(raw[q] * dyn.latent_std[q % Cz] + dyn.latent_mean[q % Cz]);
    std::vector<double> out;
    const std::size_t chunk = 16;
    for (std::size_t m0 = 0; m0 < n; m0 += chunk) {
      const std::size_t k = std::min(chunk, n - m0);
      Shape cs = fshape;
      cs.insert(cs.begin(), k);
      Tensor<float> zt(cs, std::vector<float>(raw.begin() + std::ptrdiff_t(m0 * fn), raw.begin() + std::ptrdiff_t((m0 + k) * fn)));
      auto dec = codec.model->decode(binding, zt);
      ++res.decode_calls;
      for (std::size_t q = 0; q < dec.numel(); ++q) out.push_back(double(dec.at(q)) * codec.stddev[q % C] + codec.mean[q % C]);
    }
    return out;
  };
  res.context = decode(seq[0], h);
  const std::size_t fs = res.frame_size();
  res.frames.assign(E * opt.horizon * fs, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t e = 0; e < E; ++e) {
    Shape ls = fshape;
    ls.insert(ls.begin(), h + opt.horizon);
    res.latents.emplace_back(ls, seq[e]);
    if (opt.horizon == 0) continue;
    std::vector<float> pred(seq[e].begin() + std::ptrdiff_t(h * fn), seq[e].end());
    const auto dec = decode(pred, opt.horizon);
    std::copy_n(dec.begin(), res.valid_steps[e] * fs, res.frames.begin() + std::ptrdiff_t(e * opt.horizon * fs));
  }
  res.wall_seconds = seconds_since(t_start);
  return res;
}

pde::Trajectory ensemble_mean(const RolloutResult& r) {
  if (r.members == 0) throw std::invalid_argument("ensemble_mean: empty ensemble");
  pde::Trajectory t = r.member(0);
  const std::size_t n = r.horizon * r.frame_size();
  for (std::size_t q = 0; q < n; ++q) {
    double s = 0;
    std::size_t k = 0;
    for (std::size_t e = 0; e < r.members; ++e) {
      const double v = r.frames[e * n + q];
      if (std::isfinite(v)) {
        s += v;
        ++k;
      }
    }
    t.data[q] = k ? s / double(k) : std::numeric_limits<double>::quiet_NaN();
  }
  return t;
}

}  // namespace lfm::forecast
