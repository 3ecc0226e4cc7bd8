#include "lfm/meshcodec.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lfm::codec {

double Domain::measure() const { return std::pow(length, double(dim)); }

PointSet grid_points(const std::vector<std::size_t>& extents, const Domain& domain) {
  if (extents.size() != domain.dim) {
    throw std::invalid_argument("grid rank " + std::to_string(extents.size()) +
                                " does not match domain dimension " + std::to_string(domain.dim));
  }
  PointSet ps;
  ps.dim = domain.dim;
  const std::size_t n = numel(extents);
  ps.coords.resize(n * ps.dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i;
    for (std::size_t a = ps.dim; a-- > 0;) {
      const std::size_t idx = rem % extents[a];
      rem /= extents[a];
      ps.coords[i * ps.dim + a] = domain.length * double(idx) / double(extents[a]);
    }
  }
  return ps;
}

void displacement(const double* a, const double* b, const Domain& domain, double* out) {
  for (std::size_t k = 0; k < domain.dim; ++k) {
    double d = a[k] - b[k];
    if (domain.periodic) d -= domain.length * std::round(d / domain.length);
    out[k] = d;
  }
}

namespace {

void check_inside(const PointSet& ps, const Domain& domain, const char* what) {
  if (ps.dim != domain.dim) {
    throw std::invalid_argument(std::string(what) + " have dimension " + std::to_string(ps.dim) +
                                ", domain has " + std::to_string(domain.dim));
  }
  for (std::size_t i = 0; i < ps.coords.size(); ++i) {
    const double x = ps.coords[i];
    if (!(x >= 0.0 && x <= domain.length)) {
      throw std::invalid_argument(std::string(what) + " point " + std::to_string(i / ps.dim) +
                                  " lies outside the domain [0, " + std::to_string(domain.length) + "]");
    }
  }
}

struct SpatialHash {
  std::size_t dim, cells;
  double cell;
  bool periodic;
  std::vector<std::size_t> start;    // bucket offsets, size cells^dim + 1
  std::vector<std::uint32_t> items;  // point indices grouped by bucket

  std::size_t axis_cell(double x) const {
    auto c = static_cast<std::size_t>(std::floor(x / cell));
    if (c >= cells) c = periodic ? c % cells : cells - 1;
    return c;
  }
};

SpatialHash build_hash(const PointSet& pts, double r, const Domain& domain) {
  SpatialHash h;
  h.dim = domain.dim;
  // Cells of side >= r; capped so the table stays proportional to the point count.
  const double cap = std::floor(std::pow(4.0 * double(pts.size()) + 64.0, 1.0 / double(domain.dim)));
  h.cells = static_cast<std::size_t>(std::max(1.0, std::min(std::floor(domain.length / r), cap)));
  h.cell = domain.length / double(h.cells);
  h.periodic = domain.periodic;
  std::size_t total = 1;
  for (std::size_t a = 0; a < h.dim; ++a) total *= h.cells;
  std::vector<std::size_t> bucket(pts.size());
  std::vector<std::size_t> count(total + 1, 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::size_t id = 0;
    for (std::size_t a = 0; a < h.dim; ++a) id = id * h.cells + h.axis_cell(pts.point(i)[a]);
    bucket[i] = id;
    ++count[id + 1];
  }
  for (std::size_t c = 0; c < total; ++c) count[c + 1] += count[c];
  h.start = count;
  h.items.resize(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) h.items[count[bucket[i]]++] = static_cast<std::uint32_t>(i);
  return h;
}

}  // namespace

Csr build_neighborhoods(const PointSet& points, const PointSet& centers, double r,
                        const Domain& domain) {
  if (!(r > 0.0)) throw std::invalid_argument("neighbourhood radius must be positive");
  check_inside(points, domain, "cloud");
  check_inside(centers, domain, "center");
  const auto hash = build_hash(points, r, domain);
  const std::size_t d = domain.dim;
  const double r2 = r * r;

  std::size_t n_offsets = 1;
  for (std::size_t a = 0; a < d; ++a) n_offsets *= 3;

  Csr csr;
  csr.offsets.reserve(centers.size() + 1);
  csr.offsets.push_back(0);
  std::vector<std::size_t> empty;
  std::vector<std::size_t> cells;
  std::vector<double> disp(d);
  std::vector<std::uint32_t> row;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    const double* y = centers.point(c);
    cells.clear();
    for (std::size_t o = 0; o < n_offsets; ++o) {
      std::size_t rem = o, id = 0;
      bool valid = true;
      for (std::size_t a = 0; a < d; ++a) {
        const long off = long(rem % 3) - 1;
        rem /= 3;
        long cell = long(hash.axis_cell(y[a])) + off;
        if (domain.periodic) {
          cell = (cell + long(hash.cells)) % long(hash.cells);
        } else if (cell < 0 || cell >= long(hash.cells)) {
          valid = false;
          break;
        }
        id = id * hash.cells + std::size_t(cell);
      }
      if (valid) cells.push_back(id);
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());

    row.clear();
    for (std::size_t id : cells) {
      for (std::size_t q = hash.start[id]; q < hash.start[id + 1]; ++q) {
        const std::uint32_t j = hash.items[q];
        displacement(y, points.point(j), domain, disp.data());
        double dist2 = 0;
        for (double v : disp) dist2 += v * v;
        if (dist2 <= r2) row.push_back(j);
      }
    }
    if (row.empty()) empty.push_back(c);
    std::sort(row.begin(), row.end());
    csr.index.insert(csr.index.end(), row.begin(), row.end());
    csr.offsets.push_back(csr.index.size());
  }
  if (!empty.empty()) {
    std::ostringstream msg;
    msg << empty.size() << " of " << centers.size() << " centers have no point within r = " << r
        << "; enlarge the radius. First offenders:";
    for (std::size_t k = 0; k < std::min<std::size_t>(empty.size(), 5); ++k) {
      msg << " #" << empty[k] << " (";
      for (std::size_t a = 0; a < d; ++a) msg << (a ? ", " : "") << centers.point(empty[k])[a];
      msg << ")";
    }
    throw NeighborhoodError(msg.str(), std::move(empty));
  }
  return csr;
}

IntegralPlan make_plan(const PointSet& sources, const std::vector<double>& weights,
                       const PointSet& targets, double r, const Domain& domain) {
  if (weights.size() != sources.size()) {
    throw std::invalid_argument("expected one quadrature weight per source point");
  }
  IntegralPlan plan;
  plan.csr = build_neighborhoods(sources, targets, r, domain);
  plan.dim = domain.dim;
  plan.sources = sources.size();
  const std::size_t f = domain.dim + 1;
  plan.features.resize(plan.csr.nnz() * f);
  plan.log_weight.resize(plan.csr.nnz());
  std::vector<double> disp(domain.dim);
  for (std::size_t i = 0; i < plan.csr.rows(); ++i) {
    for (std::size_t e = plan.csr.offsets[i]; e < plan.csr.offsets[i + 1]; ++e) {
      const std::size_t j = plan.csr.index[e];
      displacement(targets.point(i), sources.point(j), domain, disp.data());
      double norm = 0;
      for (std::size_t a = 0; a < domain.dim; ++a) {
        plan.features[e * f + 1 + a] = disp[a] / r;
        norm += disp[a] * disp[a];
      }
      plan.features[e * f] = std::sqrt(norm) / r;
      if (!(weights[j] > 0.0)) throw std::invalid_argument("quadrature weights must be positive");
      plan.log_weight[e] = std::log(weights[j]);
    }
  }
  return plan;
}

template <typename T>
KernelIntegral<T>::KernelIntegral(std::size_t dim, std::size_t heads_, std::size_t hidden, Rng& rng)
    : heads(heads_), l1(dim + 1, hidden, rng), l2(hidden, heads_, rng) {}

template <typename T>
Tensor<T> KernelIntegral<T>::weights(const IntegralPlan& plan) const {
  const std::size_t nnz = plan.csr.nnz();
  const std::size_t f = plan.dim + 1;
  std::vector<T> feat(plan.features.begin(), plan.features.end());
  std::vector<T> logw(plan.log_weight.begin(), plan.log_weight.end());
  Tensor<T> features({nnz, f}, std::move(feat));
  Tensor<T> log_mu({nnz, 1}, std::move(logw));
  Tensor<T> logits = l2(gelu(l1(features))) + log_mu;
  return segment_softmax(logits, plan.csr);
}

template <typename T>
Tensor<T> KernelIntegral<T>::operator()(const IntegralPlan& plan, const Tensor<T>& values) const {
  if (values.rank() != 3 || values.dim(1) != plan.sources) {
    throw ShapeError("kernel integral expects values (B, " + std::to_string(plan.sources) +
                     ", C), got " + to_string(values.shape()));
  }
  return segment_aggregate(weights(plan), plan.csr, values);
}

template <typename T>
void KernelIntegral<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
  l1.collect(out, prefix + "l1.");
  l2.collect(out, prefix + "l2.");
}

std::vector<std::size_t> CodecConfig::latent_extents() const {
  std::vector<std::size_t> e = fine_grid;
  for (std::size_t l = 0; l < downsample; ++l)
    for (auto& v : e) v = (v + 1) / 2;
  return e;
}

double CodecConfig::spacing() const { return domain.length / double(fine_grid.at(0)); }

void CodecConfig::validate() const {
  if (domain.dim < 1 || domain.dim > 2) throw std::invalid_argument("codec supports 1-D and 2-D domains");
  if (fine_grid.size() != domain.dim) throw std::invalid_argument("fine_grid rank must equal domain dimension");
  for (std::size_t v : fine_grid) {
    if (v != fine_grid[0]) throw std::invalid_argument("fine_grid must be square");
    if (v % (std::size_t(1) << downsample) != 0) {
      throw std::invalid_argument("fine_grid extent " + std::to_string(v) + " not divisible by 2^downsample");
    }
  }
  if (in_channels == 0 || latent_channels == 0 || width == 0 || heads == 0) {
    throw std::invalid_argument("codec channel counts must be positive");
  }
  if (kl_weight < 0 || jerk_weight < 0) throw std::invalid_argument("loss weights must be non-negative");
  if (!(encode_radius > 0 && decode_radius > 0)) throw std::invalid_argument("radii must be positive");
}

void to_json(nlohmann::json& j, const CodecConfig& c) {
  j = nlohmann::json{{"dim", c.domain.dim},
                     {"domain_length", c.domain.length},
                     {"periodic", c.domain.periodic},
                     {"in_channels", c.in_channels},
                     {"fine_grid", c.fine_grid},
                     {"downsample", c.downsample},
                     {"latent_channels", c.latent_channels},
                     {"width", c.width},
                     {"heads", c.heads},
                     {"kernel_hidden", c.kernel_hidden},
                     {"encode_radius", c.encode_radius},
                     {"decode_radius", c.decode_radius},
                     {"kl_weight", c.kl_weight},
                     {"jerk_weight", c.jerk_weight},
                     {"logvar_init", c.logvar_init},
                     {"bypass", c.bypass}};
}

void from_json(const nlohmann::json& j, CodecConfig& c) {
  c = CodecConfig{};
  c.domain.dim = j.value("dim", c.domain.dim);
  c.domain.length = j.value("domain_length", c.domain.length);
  c.domain.periodic = j.value("periodic", c.domain.periodic);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.fine_grid = j.value("fine_grid", std::vector<std::size_t>(c.domain.dim, 32));
  c.downsample = j.value("downsample", c.downsample);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.kernel_hidden = j.value("kernel_hidden", c.kernel_hidden);
  c.encode_radius = j.value("encode_radius", c.encode_radius);
  c.decode_radius = j.value("decode_radius", c.decode_radius);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.jerk_weight = j.value("jerk_weight", c.jerk_weight);
  c.logvar_init = j.value("logvar_init", c.logvar_init);
  c.bypass = j.value("bypass", c.bypass);
  c.validate();
}

template <typename T>
Codec<T>::Codec(CodecConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t d = cfg_.domain.dim;
  const std::size_t W = cfg_.width, C = cfg_.latent_channels;
  const Padding pad = cfg_.domain.periodic ? Padding::Periodic : Padding::Zero;
  const std::vector<std::size_t> k3(d, 3);
  const ConvGeometry same{std::vector<std::size_t>(d, 1), std::vector<std::size_t>(d, 1), pad};
  const ConvGeometry down{std::vector<std::size_t>(d, 2), std::vector<std::size_t>(d, 1), pad};

  level_extents_.push_back(cfg_.fine_grid);
  for (std::size_t l = 0; l < cfg_.downsample; ++l) {
    level_extents_.push_back(conv_output_extents(level_extents_.back(), k3, down));
  }

  if (!cfg_.bypass) {
    enc_kernel = KernelIntegral<T>(d, cfg_.heads, cfg_.kernel_hidden, rng);
    dec_kernel = KernelIntegral<T>(d, cfg_.heads, cfg_.kernel_hidden, rng);
  }
  const std::size_t lift_in = cfg_.bypass ? cfg_.in_channels : cfg_.heads * cfg_.in_channels;
  enc_lift = nn::Linear<T>(lift_in, W, rng);
  enc_in = nn::Conv<T>(k3, W, W, same, rng);
  for (std::size_t l = 0; l < cfg_.downsample; ++l) enc_down.emplace_back(k3, W, W, down, rng);
  enc_out = nn::Conv<T>(k3, W, 2 * C, same, rng);
  auto b = enc_out.bias.mutable_data();
  for (std::size_t c = C; c < 2 * C; ++c) b[c] = static_cast<T>(cfg_.logvar_init);

  dec_in = nn::Conv<T>(k3, C, W, same, rng);
  for (std::size_t l = 0; l < cfg_.downsample; ++l) dec_up.emplace_back(k3, W, W, down, rng);
  dec_mid = nn::Conv<T>(k3, W, W, same, rng);
  const std::size_t read_in = cfg_.bypass ? W : cfg_.heads * W;
  dec_read1 = nn::Linear<T>(read_in, W, rng);
  dec_read2 = nn::Linear<T>(W, cfg_.in_channels, rng);
}

template <typename T>
Binding Codec<T>::bind(const PointSet& inputs, const PointSet& queries) const {
  Binding b;
  b.input_points = inputs.size();
  b.query_points = queries.size();
  const std::size_t m = numel(cfg_.fine_grid);
  if (cfg_.bypass) {
    if (inputs.size() != m || queries.size() != m) {
      throw std::invalid_argument("bypass codec needs inputs and queries on the " +
                                  to_string(cfg_.fine_grid) + " grid");
    }
    return b;
  }
  const PointSet grid = grid_points(cfg_.fine_grid, cfg_.domain);
  const double h = cfg_.spacing();
  const std::vector<double> w_in(inputs.size(), cfg_.domain.measure() / double(inputs.size()));
  b.encode = make_plan(inputs, w_in, grid, cfg_.encode_radius * h, cfg_.domain);
  const std::vector<double> w_grid(m, cfg_.domain.measure() / double(m));
  b.decode = make_plan(grid, w_grid, queries, cfg_.decode_radius * h, cfg_.domain);
  return b;
}

template <typename T>
Tensor<T> Codec<T>::lift(const Binding& b, const Tensor<T>& values) const {
  if (values.rank() != 3 || values.dim(2) != cfg_.in_channels || values.dim(1) != b.input_points) {
    throw ShapeError("codec input must be (B, " + std::to_string(b.input_points) + ", " +
                     std::to_string(cfg_.in_channels) + "), got " + to_string(values.shape()));
  }
  Tensor<T> h = cfg_.bypass ? values : enc_kernel(*b.encode, values);
  h = gelu(enc_lift(h));
  Shape s{values.dim(0)};
  s.insert(s.end(), cfg_.fine_grid.begin(), cfg_.fine_grid.end());
  s.push_back(cfg_.width);
  return reshape(h, s);
}

template <typename T>
Encoded<T> Codec<T>::encode(const Binding& b, const Tensor<T>& values, Rng* rng) const {
  Tensor<T> h = gelu(enc_in(lift(b, values)));
  for (const auto& d : enc_down) h = gelu(d(h));
  Tensor<T> out = enc_out(h);
  const std::size_t last = out.rank() - 1, C = cfg_.latent_channels;
  Encoded<T> e;
  e.mu = slice(out, last, 0, C);
  e.logvar = slice(out, last, C, 2 * C);
  if (rng) {
    e.z = e.mu + exp(e.logvar * T(0.5)) * Tensor<T>::randn(e.mu.shape(), *rng);
  } else {
    e.z = e.mu;
  }
  return e;
}

template <typename T>
Tensor<T> Codec<T>::upsample(const Tensor<T>& z) const {
  const auto lat = cfg_.latent_extents();
  Shape expect{z.rank() ? z.dim(0) : 0};
  expect.insert(expect.end(), lat.begin(), lat.end());
  expect.push_back(cfg_.latent_channels);
  if (z.shape() != expect) {
    throw ShapeError("latent must be " + to_string(expect) + ", got " + to_string(z.shape()));
  }
  Tensor<T> h = gelu(dec_in(z));
  for (std::size_t l = cfg_.downsample; l-- > 0;) h = gelu(dec_up[l](h, level_extents_[l]));
  return gelu(dec_mid(h));
}

template <typename T>
Tensor<T> Codec<T>::decode(const Binding& b, const Tensor<T>& z) const {
  Tensor<T> g = upsample(z);
  g = reshape(g, {g.dim(0), numel(cfg_.fine_grid), cfg_.width});
  Tensor<T> h = cfg_.bypass ? g : dec_kernel(*b.decode, g);
  return dec_read2(gelu(dec_read1(h)));
}

template <typename T>
void Codec<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
  if (!cfg_.bypass) {
    enc_kernel.collect(out, prefix + "enc_kernel.");
    dec_kernel.collect(out, prefix + "dec_kernel.");
  }
  enc_lift.collect(out, prefix + "enc_lift.");
  enc_in.collect(out, prefix + "enc_in.");
  for (std::size_t l = 0; l < enc_down.size(); ++l) enc_down[l].collect(out, prefix + "enc_down" + std::to_string(l) + ".");
  enc_out.collect(out, prefix + "enc_out.");
  dec_in.collect(out, prefix + "dec_in.");
  for (std::size_t l = 0; l < dec_up.size(); ++l) dec_up[l].collect(out, prefix + "dec_up" + std::to_string(l) + ".");
  dec_mid.collect(out, prefix + "dec_mid.");
  dec_read1.collect(out, prefix + "dec_read1.");
  dec_read2.collect(out, prefix + "dec_read2.");
}

template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mu, const Tensor<T>& logvar) {
  if (mu.shape() != logvar.shape()) {
    throw ShapeError("KL: mean " + to_string(mu.shape()) + " vs log-variance " + to_string(logvar.shape()));
  }
  return mean((square(mu) + exp(logvar) - T(1) - logvar) * T(0.5));
}

template <typename T>
Tensor<T> jerk_penalty(const Tensor<T>& zseq) {
  if (zseq.rank() < 2) throw ShapeError("jerk penalty needs (W, M, ...), got " + to_string(zseq.shape()));
  const std::size_t m = zseq.dim(1);
  if (m < 4) return {};
  auto s = [&](std::size_t b) { return slice(zseq, 1, b, b + m - 3); };
  return mean(square((s(3) - s(0)) - (s(2) - s(1)) * T(3)));
}

template <typename T>
AeLoss<T> ae_loss(const Tensor<T>& recon, const Tensor<T>& target, const Tensor<T>& mu,
                  const Tensor<T>& logvar, const Tensor<T>& zseq, double beta, double gamma) {
  if (beta < 0 || gamma < 0) {
    throw std::invalid_argument("ae_loss: weights must be non-negative (beta = " + std::to_string(beta) +
                                ", gamma = " + std::to_string(gamma) + ")");
  }
  if (recon.shape() != target.shape()) {
    throw ShapeError("reconstruction " + to_string(recon.shape()) + " vs target " + to_string(target.shape()));
  }
  AeLoss<T> l;
  l.recon = mse(recon, target);
  l.kl = kl_divergence(mu, logvar);
  l.total = l.recon + l.kl * static_cast<T>(beta);
  if (zseq.defined()) {
    l.jerk = jerk_penalty(zseq);
    if (l.jerk.defined()) l.total = l.total + l.jerk * static_cast<T>(gamma);
  }
  return l;
}

#define LFM_INSTANTIATE(T)                                                                       \
  template class KernelIntegral<T>;                                                              \
  template class Codec<T>;                                                                       \
  template Tensor<T> kl_divergence<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> jerk_penalty<T>(const Tensor<T>&);                                          \
  template AeLoss<T> ae_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                const Tensor<T>&, const Tensor<T>&, double, double);

LFM_INSTANTIATE(float)
LFM_INSTANTIATE(double)
#undef LFM_INSTANTIATE

}  // namespace lfm::codec
