#pragma once

// Conditional transformer on the latent grid. Blocks alternate axial
// factorized attention and full attention, modulated by adaLN from the
// diffusion time and the system parameters.

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/nn.hpp"
#include "lfm/samplers.hpp"
#include "lfm/schedules.hpp"

namespace lfm::dit {

/// Sinusoidal features of k in [0, 1]; k is scaled by 1000 before the
/// geometric frequency ladder. Returns `width` values (sin half, cos half).
std::vector<double> timestep_embed(double k, std::size_t width);

/// (B) times -> (B, width) tensor of timestep_embed rows.
template <typename T>
Tensor<T> timestep_embed(const std::vector<double>& ks, std::size_t width);

enum class AttentionKind { Factorized, Full };

/// Multiply-add counted as two FLOPs; covers projections, kernels and
/// contractions of one attention layer on a grid with the given extents.
double attention_flops(AttentionKind kind, const std::vector<std::size_t>& extents, std::size_t width);

/// Axial attention: for each grid axis an S_m x S_m kernel from axis-mean
/// pooled queries and keys, applied to the values one axis after another.
template <typename T>
class FactorizedAttention : public nn::Module<T> {
 public:
  FactorizedAttention() = default;
  FactorizedAttention(std::size_t dim, std::size_t width, std::size_t heads, Rng& rng);
  /// x (B, S..., W) -> (B, S..., W).
  Tensor<T> operator()(const Tensor<T>& x) const;
  /// Row-stochastic kernels, one (B, H, S_m, S_m) tensor per axis.
  std::vector<Tensor<T>> kernels(const Tensor<T>& x) const;
  void collect(nn::ParamList<T>& out, const std::string& prefix) const override;

  std::size_t dim = 0, width = 0, heads = 0;
  std::vector<nn::Linear<T>> qk;  // per axis, W -> 2W
  nn::Linear<T> value, proj;
};

/// Standard multi-head self-attention over the flattened grid.
template <typename T>
class FullAttention : public nn::Module<T> {
 public:
  FullAttention() = default;
  FullAttention(std::size_t width, std::size_t heads, Rng& rng);
  /// x (B, N, W) -> (B, N, W).
  Tensor<T> operator()(const Tensor<T>& x) const;
  Tensor<T> kernel(const Tensor<T>& x) const;  // (B, H, N, N)
  void collect(nn::ParamList<T>& out, const std::string& prefix) const override;

  std::size_t width = 0, heads = 0;
  nn::Linear<T> qkv, proj;
};

struct DenoiserConfig {
  std::vector<std::size_t> extents{16, 16};  // latent grid
  std::size_t channels = 8;                  // latent channels
  std::size_t history = 2;
  std::size_t xi_dim = 1;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;
  std::size_t mlp_ratio = 2;
  /// "alternate" (factorized first, last block full), "factorized" or "full".
  std::string pattern = "alternate";
  /// False for the deterministic next-frame baseline: no x_k input, no time.
  bool time_conditioned = true;
  Parameterization prediction = Parameterization::Velocity;

  std::vector<AttentionKind> layer_kinds() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

/// Previous frames and system parameters for one batch.
template <typename T>
struct Conditioning {
  Tensor<T> history;  // (B, h, S..., C), oldest first
  Tensor<T> xi;       // (B, xi_dim); undefined when xi_dim == 0
};

template <typename T>
class Block : public nn::Module<T> {
 public:
  Block() = default;
  Block(const DenoiserConfig& cfg, AttentionKind kind, Rng& rng);
  /// x (B, N, W), c (B, W) already activated.
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& c) const;
  void collect(nn::ParamList<T>& out, const std::string& prefix) const override;

  AttentionKind kind = AttentionKind::Full;
  std::vector<std::size_t> extents;
  FactorizedAttention<T> fact;
  FullAttention<T> full;
  nn::Linear<T> mlp1, mlp2, modulation;  // modulation: W -> 6W, zero-initialized
};

template <typename T>
class Denoiser : public nn::Module<T> {
 public:
  Denoiser(DenoiserConfig cfg, Rng& rng);

  /// x_k (B, S..., C) at per-sample diffusion times k -> prediction of the
  /// configured parameterization. For the baseline x_k and k are ignored and
  /// the output is the next frame.
  Tensor<T> operator()(const Tensor<T>& x_k, const std::vector<double>& k, const Conditioning<T>& cond) const;
  /// Next-frame prediction of the baseline: last history frame + network output.
  Tensor<T> next_frame(const Conditioning<T>& cond) const;

  void collect(nn::ParamList<T>& out, const std::string& prefix) const override;
  const DenoiserConfig& config() const { return cfg_; }
  /// Binds conditioning into a sampler predictor (same k for the whole batch).
  Predictor<T> predictor(Conditioning<T> cond) const;

  nn::Linear<T> input, time1, time2, xi_proj, final_mod, output;
  Tensor<T> pos;  // (N, W)
  std::vector<Block<T>> blocks;

 private:
  Tensor<T> backbone(const Tensor<T>& tokens, const Tensor<T>& c) const;
  Tensor<T> condition(const std::vector<double>& k, const Conditioning<T>& cond, std::size_t batch) const;
  DenoiserConfig cfg_;
};

/// Network evaluated at per-sample diffusion times.
template <typename T>
using Network = std::function<Tensor<T>(const Tensor<T>& x_k, const std::vector<double>& k)>;

/// Draws k uniformly from the non-zero knots, eps ~ N(0, I), forms
/// x_k = alpha x0 + sigma eps and returns the mean squared error between
/// the network output and the target of its parameterization
/// (eps - x0, eps or x0).
/// snr_gamma > 0 weights each sample's noise-target error by
/// min(SNR, gamma) / SNR and its data-target error by min(SNR, gamma),
/// SNR = alpha^2 / sigma^2; the velocity target is never reweighted.
template <typename T>
Tensor<T> fm_loss(const Network<T>& net, Parameterization target, const Tensor<T>& x0,
                  const DiffusionPath& path, const TimeGrid& grid, Rng& rng, double snr_gamma = 0.0);

template <typename T>
Tensor<T> fm_loss(const Denoiser<T>& model, const Tensor<T>& x0, const Conditioning<T>& cond,
                  const DiffusionPath& path, const TimeGrid& grid, Rng& rng, double snr_gamma = 0.0);

}  // namespace lfm::dit
