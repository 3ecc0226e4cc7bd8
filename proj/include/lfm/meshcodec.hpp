#pragma once

// Mesh-agnostic variational autoencoder: scattered points -> kernel integral
// onto a uniform grid -> strided convolutions -> latent grid, and back.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lfm/nn.hpp"
#include "lfm/ops.hpp"

namespace lfm::codec {

/// Axis-aligned box [0, length)^dim, optionally periodic.
struct Domain {
  std::size_t dim = 2;
  double length = 1.0;
  bool periodic = true;
  double measure() const;
};

/// N points stored row-major as N x dim coordinates.
struct PointSet {
  std::size_t dim = 0;
  std::vector<double> coords;
  std::size_t size() const { return dim == 0 ? 0 : coords.size() / dim; }
  const double* point(std::size_t i) const { return coords.data() + i * dim; }
};

/// Nodes i * length / extent of a uniform lattice, row-major.
PointSet grid_points(const std::vector<std::size_t>& extents, const Domain& domain);

/// Displacement a - b, wrapped to the minimum image when the domain is periodic.
void displacement(const double* a, const double* b, const Domain& domain, double* out);

class NeighborhoodError : public std::runtime_error {
 public:
  NeighborhoodError(const std::string& what, std::vector<std::size_t> empty_rows)
      : std::runtime_error(what), empty_rows(std::move(empty_rows)) {}
  std::vector<std::size_t> empty_rows;
};

/// For every center, the sorted indices of points within distance r, found
/// through a uniform spatial hash with cells of side >= r.
/// Throws NeighborhoodError if any center has no neighbour.
Csr build_neighborhoods(const PointSet& points, const PointSet& centers, double r,
                        const Domain& domain);

/// Geometry of one kernel-integral application: neighbourhoods plus the
/// per-edge features [|d|/r, d/r] and log quadrature weights.
struct IntegralPlan {
  Csr csr;
  std::size_t dim = 0;
  std::vector<double> features;    // nnz x (dim + 1)
  std::vector<double> log_weight;  // nnz
  std::size_t sources = 0;
};

IntegralPlan make_plan(const PointSet& sources, const std::vector<double>& weights,
                       const PointSet& targets, double r, const Domain& domain);

/// f(y_i) = sum_j k(y_i, y_j) u(y_j), with k a small MLP of the edge features
/// softmax-normalized over each neighbourhood together with log mu_j, so the
/// weights of every target sum to one. One output block per head.
template <typename T>
class KernelIntegral : public nn::Module<T> {
 public:
  KernelIntegral() = default;
  KernelIntegral(std::size_t dim, std::size_t heads, std::size_t hidden, Rng& rng);

  /// Normalized edge weights, (nnz, heads).
  Tensor<T> weights(const IntegralPlan& plan) const;
  /// values (B, P, C) -> (B, targets, heads * C).
  Tensor<T> operator()(const IntegralPlan& plan, const Tensor<T>& values) const;
  void collect(nn::ParamList<T>& out, const std::string& prefix) const override;

  std::size_t heads = 0;
  nn::Linear<T> l1, l2;
};

struct CodecConfig {
  Domain domain;
  std::size_t in_channels = 1;
  std::vector<std::size_t> fine_grid{32, 32};
  std::size_t downsample = 1;  // number of stride-2 stages
  std::size_t latent_channels = 8;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t kernel_hidden = 32;
  double encode_radius = 2.0;  // in fine-grid spacings
  double decode_radius = 2.0;
  double kl_weight = 1e-6;
  double jerk_weight = 1e-3;
  double logvar_init = -6.0;
  /// Data already lives on the fine grid: skip both kernel integrals.
  bool bypass = false;

  std::vector<std::size_t> latent_extents() const;
  double spacing() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const CodecConfig& c);
void from_json(const nlohmann::json& j, CodecConfig& c);

/// Kernel-integral plans for one input point set and one query point set.
struct Binding {
  std::optional<IntegralPlan> encode;
  std::optional<IntegralPlan> decode;
  std::size_t input_points = 0;
  std::size_t query_points = 0;
};

template <typename T>
struct Encoded {
  Tensor<T> mu, logvar, z;  // (B, latent..., C)
};

template <typename T>
class Codec : public nn::Module<T> {
 public:
  Codec(CodecConfig cfg, Rng& rng);

  /// Uniform Monte-Carlo weights |Omega| / N on the inputs.
  Binding bind(const PointSet& inputs, const PointSet& queries) const;

  /// values (B, P, C_in). With `rng` the latent is reparameterized
  /// (training); without it z = mu.
  Encoded<T> encode(const Binding& b, const Tensor<T>& values, Rng* rng = nullptr) const;
  /// z (B, latent..., C) -> (B, Q, C_in).
  Tensor<T> decode(const Binding& b, const Tensor<T>& z) const;

  /// Fine-grid features before the decoder's kernel integral, (B, grid..., width).
  Tensor<T> upsample(const Tensor<T>& z) const;
  /// Fine-grid features after the encoder's kernel integral and lift.
  Tensor<T> lift(const Binding& b, const Tensor<T>& values) const;

  void collect(nn::ParamList<T>& out, const std::string& prefix) const override;
  const CodecConfig& config() const { return cfg_; }

  KernelIntegral<T> enc_kernel, dec_kernel;
  nn::Linear<T> enc_lift, dec_read1, dec_read2;
  nn::Conv<T> enc_in, enc_out, dec_in, dec_mid;
  std::vector<nn::Conv<T>> enc_down;
  std::vector<nn::ConvTranspose<T>> dec_up;

 private:
  CodecConfig cfg_;
  std::vector<std::vector<std::size_t>> level_extents_;  // fine grid, then each downsampled grid
};

/// mean over elements of (mu^2 + exp(logvar) - 1 - logvar) / 2.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mu, const Tensor<T>& logvar);

/// mean ||z[m+1] - 3 z[m] + 3 z[m-1] - z[m-2]||^2 along axis 1 of (W, M, ...).
/// Undefined (empty) tensor when M < 4.
template <typename T>
Tensor<T> jerk_penalty(const Tensor<T>& zseq);

template <typename T>
struct AeLoss {
  Tensor<T> total, recon, kl, jerk;
};

/// recon/target (B, ...); mu/logvar (B, ...); zseq (W, M, ...) with W*M = B.
/// Throws std::invalid_argument for negative weights.
template <typename T>
AeLoss<T> ae_loss(const Tensor<T>& recon, const Tensor<T>& target, const Tensor<T>& mu,
                  const Tensor<T>& logvar, const Tensor<T>& zseq, double beta, double gamma);

}  // namespace lfm::codec
