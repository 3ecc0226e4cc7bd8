#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lfm/forecast.hpp"
#include "lfm/serialize.hpp"

using namespace lfm;
using namespace lfm::forecast;

namespace {

const pde::Dataset& tiny_data() {
  static const pde::Dataset ds = [] {
    auto g = pde::GenConfig::defaults("heat2d");
    g.n = 16;
    g.frames = 12;
    g.dt = 0.2;
    g.param_min = 0.02;
    g.param_max = 0.05;
    g.n_train = 4;
    g.n_valid = 1;
    g.n_test = 1;
    g.seed = 3;
    return pde::generate_dataset(g);
  }();
  return ds;
}

codec::CodecConfig tiny_codec() {
  codec::CodecConfig c;
  c.fine_grid = {8, 8};
  c.latent_channels = 2;
  c.width = 8;
  c.heads = 2;
  c.kernel_hidden = 8;
  return c;
}

dit::DenoiserConfig tiny_net() {
  dit::DenoiserConfig c;
  c.width = 8;
  c.heads = 2;
  c.depth = 2;
  c.mlp_ratio = 1;
  return c;
}

TrainConfig ae_cfg(std::size_t steps = 30) {
  TrainConfig t;
  t.stage = "ae";
  t.steps = steps;
  t.batch = 4;
  t.window = 4;
  t.adam.lr = 3e-3;
  t.log_every = 1;
  t.seed = 7;
  return t;
}

TrainConfig dyn_cfg(const std::string& stage, std::size_t steps = 40) {
  TrainConfig t;
  t.stage = stage;
  t.steps = steps;
  t.batch = 8;
  t.adam.lr = 3e-3;
  t.log_every = 1;
  t.seed = 11;
  return t;
}

const CodecCheckpoint& tiny_codec_ckpt() {
  static const CodecCheckpoint ck = train_autoencoder(ae_cfg(), tiny_codec(), tiny_data());
  return ck;
}

const DynamicsCheckpoint& tiny_flow() {
  static const DynamicsCheckpoint ck = train_flow(dyn_cfg("fm"), tiny_net(), tiny_codec_ckpt(), tiny_data());
  return ck;
}

const DynamicsCheckpoint& tiny_ar() {
  static const DynamicsCheckpoint ck = train_ar_baseline(dyn_cfg("ar"), tiny_net(), tiny_codec_ckpt(), tiny_data());
  return ck;
}

std::vector<float> vec(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

double head_mean(const std::vector<double>& v, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s / double(n);
}

double tail_mean(const std::vector<double>& v, std::size_t n) {
  double s = 0;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / double(n);
}

std::filesystem::path tmp(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lfm_test_forecast";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("autoencoder stage") {
  LossLog log;
  auto ck = train_autoencoder(ae_cfg(), tiny_codec(), tiny_data(), {}, &log);
  const auto loss = log.column("loss");
  REQUIRE(loss.size() == 30);
  CHECK(tail_mean(loss, 5) < head_mean(loss, 5));
  CHECK(ck.digest() == tiny_codec_ckpt().digest());
  CHECK(ck.config.latent_extents() == std::vector<std::size_t>{4, 4});
  const double err = reconstruction_error(ck, tiny_data(), pde::Split::Valid);
  CHECK(std::isfinite(err));
  CHECK(err > 0.0);

  auto other = ae_cfg();
  other.seed = 8;
  CHECK(train_autoencoder(other, tiny_codec(), tiny_data()).digest() != ck.digest());

  log.write_csv(tmp("ae_loss.csv"));
  std::ifstream is(tmp("ae_loss.csv"));
  std::string header;
  std::getline(is, header);
  CHECK(header == "step,lr,loss,recon,kl,jerk,grad_norm");
}

TEST_CASE("training errors") {
  auto bad = ae_cfg(3);
  bad.adam.lr = 1e30;
  bad.adam.clip_norm = 0;
  try {
    train_autoencoder(bad, tiny_codec(), tiny_data());
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("last finite loss") != std::string::npos);
  }
  auto odd = ae_cfg();
  odd.batch = 6;
  CHECK_THROWS_AS(train_autoencoder(odd, tiny_codec(), tiny_data()), std::invalid_argument);

  pde::Dataset no_train = tiny_data();
  for (auto& s : no_train.splits) s = pde::Split::Test;
  CHECK_THROWS_AS(train_autoencoder(ae_cfg(), tiny_codec(), no_train), std::invalid_argument);

  nlohmann::json j = ae_cfg();
  CHECK(nlohmann::json(j.get<TrainConfig>()) == j);
  j["lr"] = -1.0;
  CHECK_THROWS_AS(j.get<TrainConfig>(), std::invalid_argument);
}

TEST_CASE("checkpoint round trips") {
  const auto& ck = tiny_codec_ckpt();
  save_checkpoint(ck, tmp("codec.ckpt"));
  auto back = load_codec(tmp("codec.ckpt"));
  CHECK(back.digest() == ck.digest());
  Rng rng(1);
  auto z = Tensor<float>::randn({2, 4, 4, 2}, rng);
  auto pts = ck.grid_points();
  auto b1 = ck.model->bind(pts, pts);
  auto b2 = back.model->bind(pts, pts);
  CHECK(vec(ck.model->decode(b1, z)) == vec(back.model->decode(b2, z)));

  const auto& fl = tiny_flow();
  save_checkpoint(fl, tmp("flow.ckpt"));
  auto fb = load_dynamics(tmp("flow.ckpt"));
  CHECK(fb.digest() == fl.digest());
  CHECK(fb.is_flow());
  dit::Conditioning<float> cond{Tensor<float>::randn({2, 2, 4, 4, 2}, rng), Tensor<float>::uniform({2, 1}, rng, 0.f, 1.f)};
  auto x = Tensor<float>::randn({2, 4, 4, 2}, rng);
  CHECK(vec((*fl.model)(x, {0.3, 0.8}, cond)) == vec((*fb.model)(x, {0.3, 0.8}, cond)));

  CHECK_THROWS_AS(load_dynamics(tmp("codec.ckpt")), FormatError);
  CHECK_THROWS_AS(load_codec(tmp("flow.ckpt")), FormatError);
  {
    std::ifstream is(tmp("flow.ckpt"), std::ios::binary);
    std::string bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
    bytes[bytes.size() - 3] ^= 0x10;
    std::ofstream(tmp("bad.ckpt"), std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_dynamics(tmp("bad.ckpt")), DigestError);
  }
}

TEST_CASE("flow and baseline stages") {
  LossLog log;
  auto fl = train_flow(dyn_cfg("fm"), tiny_net(), tiny_codec_ckpt(), tiny_data(), &log);
  CHECK(fl.digest() == tiny_flow().digest());
  CHECK(fl.codec_digest == tiny_codec_ckpt().digest());
  CHECK(fl.config.extents == std::vector<std::size_t>{4, 4});
  CHECK(fl.knots == 10);
  const auto loss = log.column("loss");
  const double baseline = log.column("baseline")[0];
  CHECK(baseline > 1.0);
  CHECK(tail_mean(loss, 10) < baseline);
  // Standardized latents: per-channel mean 0 and std 1 on the train split.
  CHECK(fl.latent_std.size() == 2);

  LossLog alog;
  auto ar = train_ar_baseline(dyn_cfg("ar"), tiny_net(), tiny_codec_ckpt(), tiny_data(), &alog);
  CHECK_FALSE(ar.is_flow());
  const auto aloss = alog.column("loss");
  CHECK(tail_mean(aloss, 5) < head_mean(aloss, 5));
  const std::size_t W = 8, C = 2;
  CHECK(fl.model->parameter_count() - ar.model->parameter_count() == 2 * (W * W + W) + C * W);
}

TEST_CASE("rollout contract") {
  const auto& codec = tiny_codec_ckpt();
  const auto& fl = tiny_flow();
  const auto& traj = tiny_data().trajectories[5];

  RolloutOptions opt;
  opt.horizon = 4;
  opt.ensemble = 1;
  opt.seed = 5;
  auto a = rollout(codec, fl, traj, 0, opt);
  auto b = rollout(codec, fl, traj, 0, opt);
  CHECK(a.frames == b.frames);
  CHECK(a.members == 1);
  CHECK(a.frames.size() == 4 * traj.frame_size());
  CHECK(a.context.size() == 2 * traj.frame_size());
  CHECK(a.encode_calls == 1);
  CHECK_FALSE(a.flagged[0]);
  CHECK(a.valid_steps[0] == 4);

  // Longer horizons still encode only the context.
  opt.horizon = 9;
  auto longer = rollout(codec, fl, traj, 1, opt);
  CHECK(longer.encode_calls == 1);
  CHECK(longer.latents[0].shape()[0] == 2 + 9);

  opt.horizon = 0;
  auto none = rollout(codec, fl, traj, 0, opt);
  CHECK(none.frames.empty());
  CHECK(none.context == a.context);

  // Members: distinct samples, each reproducible from (seed, member index).
  opt.horizon = 3;
  opt.ensemble = 3;
  opt.mode = RolloutMode::DDIM;
  auto ens = rollout(codec, fl, traj, 0, opt);
  CHECK(ens.members == 3);
  CHECK(vec(ens.latents[0]) != vec(ens.latents[1]));
  CHECK(vec(ens.latents[1]) != vec(ens.latents[2]));
  RolloutOptions one = opt;
  one.ensemble = 1;
  one.first_member = 1;
  auto solo = rollout(codec, fl, traj, 0, one);
  double diff = 0;
  for (std::size_t q = 0; q < solo.latents[0].numel(); ++q)
    diff = std::max(diff, double(std::abs(solo.latents[0].at(q) - ens.latents[1].at(q))));
  CHECK(diff <= 1e-4);

  opt.mode = RolloutMode::Ancestral;
  auto anc = rollout(codec, fl, traj, 0, opt);
  CHECK(anc.frames == rollout(codec, fl, traj, 0, opt).frames);

  // Deterministic baseline ignores the ensemble size.
  RolloutOptions ar_opt;
  ar_opt.mode = RolloutMode::AR;
  ar_opt.ensemble = 5;
  ar_opt.horizon = 3;
  auto det = rollout(codec, tiny_ar(), traj, 0, ar_opt);
  CHECK(det.members == 1);

  CHECK_THROWS_AS(rollout(codec, tiny_ar(), traj, 0, opt), std::invalid_argument);
  CHECK_THROWS_AS(rollout(codec, fl, traj, 11, opt), std::invalid_argument);
  DynamicsCheckpoint stale = fl;
  stale.codec_digest = "0000";
  CHECK_THROWS_AS(rollout(codec, stale, traj, 0, opt), DigestMismatch);
}

TEST_CASE("diverging baseline is flagged") {
  const auto& codec = tiny_codec_ckpt();
  DynamicsCheckpoint wild = tiny_ar();
  Rng init(0);
  wild.model = std::make_shared<dit::Denoiser<float>>(wild.config, init);
  for (auto& [name, p] : wild.model->parameters())
    for (auto& v : p.mutable_data()) v = 1e30f;
  RolloutOptions opt;
  opt.mode = RolloutMode::AR;
  opt.horizon = 3;
  auto r = rollout(codec, wild, tiny_data().trajectories[4], 0, opt);
  CHECK(r.flagged[0]);
  CHECK(r.valid_steps[0] < 3);
  CHECK(std::isnan(r.frames.back()));
  CHECK(std::isnan(ensemble_mean(r).data.back()));
}

TEST_CASE("ensemble mean") {
  RolloutResult r;
  r.members = 2;
  r.horizon = 2;
  r.extents = {2, 2};
  r.channels = 1;
  r.dt = 0.1;
  r.domain = codec::Domain{};
  Rng rng(3);
  std::normal_distribution<double> g;
  std::vector<double> x(8);
  for (auto& v : x) v = g(rng);
  r.frames = x;
  for (double v : x) r.frames.push_back(-v);
  for (double v : ensemble_mean(r).data) CHECK(v == 0.0);

  r.members = 1;
  r.frames = x;
  CHECK(ensemble_mean(r).data == x);

  r.members = 8;
  r.frames.clear();
  for (int e = 0; e < 8; ++e)
    for (int q = 0; q < 8; ++q) r.frames.push_back(g(rng));
  auto m = ensemble_mean(r);
  for (std::size_t q = 0; q < 8; ++q) {
    double s = 0;
    for (std::size_t e = 0; e < 8; ++e) s += r.frames[e * 8 + q];
    CHECK(std::abs(m.data[q] - s / 8) <= 1e-12);
  }

  // A truncated member is skipped where it has no frames.
  r.frames[0] = std::nan("");
  double s = 0;
  for (std::size_t e = 1; e < 8; ++e) s += r.frames[e * 8];
  CHECK(ensemble_mean(r).data[0] == doctest::Approx(s / 7));
}

TEST_CASE("scattered observations") {
  auto ck = train_autoencoder(ae_cfg(5), tiny_codec(), tiny_data(), Observation{200, 4});
  CHECK(ck.observation_points().size() == 200);
  CHECK(ck.observation_points().coords == ck.observation_points().coords);
  const double err = reconstruction_error(ck, tiny_data(), pde::Split::Test);
  CHECK(std::isfinite(err));
  auto fl = train_flow(dyn_cfg("fm", 3), tiny_net(), ck, tiny_data());
  RolloutOptions opt;
  opt.horizon = 2;
  auto r = rollout(ck, fl, tiny_data().trajectories[5], 0, opt);
  CHECK(r.frames.size() == 2 * 16 * 16);
}
