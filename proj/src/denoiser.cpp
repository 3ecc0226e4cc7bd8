#include "lfm/denoiser.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lfm::dit {

std::vector<double> timestep_embed(double k, std::size_t width) {
  std::vector<double> e(width, 0.0);
  const std::size_t half = width / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    const double arg = 1000.0 * k * freq;
    e[i] = std::sin(arg);
    e[half + i] = std::cos(arg);
  }
  return e;
}

template <typename T>
Tensor<T> timestep_embed(const std::vector<double>& ks, std::size_t width) {
  std::vector<T> data;
  data.reserve(ks.size() * width);
  for (double k : ks)
    for (double v : timestep_embed(k, width)) data.push_back(static_cast<T>(v));
  return Tensor<T>({ks.size(), width}, std::move(data));
}

double attention_flops(AttentionKind kind, const std::vector<std::size_t>& extents, std::size_t width) {
  const double n = double(numel(extents));
  const double w = double(width);
  if (kind == AttentionKind::Full) {
    return 2 * n * w * 3 * w + 4 * n * n * w + 2 * n * w * w;
  }
  double f = 4 * n * w * w;  // value and output projections
  for (std::size_t s : extents) {
    const double sm = double(s);
    f += n * w;                 // axis-mean pooling
    f += 2 * sm * w * 2 * w;    // pooled query/key projection
    f += 2 * sm * sm * w;       // kernel
    f += 2 * sm * n * w;        // contraction along the axis
  }
  return f;
}

namespace {

// Splits the last axis of (B, L, P*H*Dh) into P tensors of shape (B, H, L, Dh).
template <typename T>
std::vector<Tensor<T>> split_heads(const Tensor<T>& x, std::size_t parts, std::size_t heads) {
  const std::size_t b = x.dim(0), l = x.dim(1), dh = x.dim(2) / (parts * heads);
  Tensor<T> r = permute(reshape(x, {b, l, parts, heads, dh}), {2, 0, 3, 1, 4});
  std::vector<Tensor<T>> out;
  for (std::size_t p = 0; p < parts; ++p) out.push_back(reshape(slice(r, 0, p, p + 1), {b, heads, l, dh}));
  return out;
}

template <typename T>
Tensor<T> attention_kernel(const Tensor<T>& q, const Tensor<T>& k) {
  const T scale = T(1) / std::sqrt(static_cast<T>(q.dim(3)));
  return softmax(matmul(q, transpose_last(k)) * scale, 3);
}

}  // namespace

template <typename T>
FactorizedAttention<T>::FactorizedAttention(std::size_t dim_, std::size_t width_, std::size_t heads_, Rng& rng)
    : dim(dim_), width(width_), heads(heads_) {
  if (width % heads != 0) {
    throw std::invalid_argument("width " + std::to_string(width) + " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (dim < 1 || dim > 2) throw std::invalid_argument("factorized attention supports 1-D and 2-D grids");
  for (std::size_t a = 0; a < dim; ++a) qk.emplace_back(width, 2 * width, rng);
  value = nn::Linear<T>(width, width, rng);
  proj = nn::Linear<T>(width, width, rng);
}

template <typename T>
std::vector<Tensor<T>> FactorizedAttention<T>::kernels(const Tensor<T>& x) const {
  if (x.rank() != dim + 2 || x.dim(dim + 1) != width) {
    throw ShapeError("factorized attention expects (B, S..., " + std::to_string(width) + ") with " +
                     std::to_string(dim) + " spatial axes, got " + to_string(x.shape()));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t a = 0; a < dim; ++a) {
    Tensor<T> pooled = x;
    // Average over every spatial axis except `a`, highest first so indices stay valid.
    for (std::size_t s = dim; s-- > 0;) {
      if (s != a) pooled = mean(pooled, 1 + s);
    }
    auto qk_a = split_heads(qk[a](pooled), 2, heads);
    out.push_back(attention_kernel(qk_a[0], qk_a[1]));
  }
  return out;
}

template <typename T>
Tensor<T> FactorizedAttention<T>::operator()(const Tensor<T>& x) const {
  const auto ks = kernels(x);
  const std::size_t b = x.dim(0), dh = width / heads;
  Shape grid(x.shape().begin() + 1, x.shape().end() - 1);
  // (B, S..., H, Dh) -> (B, H, S..., Dh)
  Shape split{b};
  split.insert(split.end(), grid.begin(), grid.end());
  split.push_back(heads);
  split.push_back(dh);
  std::vector<std::size_t> to_heads{0, dim + 1};
  for (std::size_t a = 0; a < dim; ++a) to_heads.push_back(1 + a);
  to_heads.push_back(dim + 2);
  Tensor<T> v = permute(reshape(value(x), split), to_heads);

  for (std::size_t a = 0; a < dim; ++a) {
    // Bring spatial axis a to position 2, contract, and restore.
    std::vector<std::size_t> order{0, 1, 2 + a};
    for (std::size_t s = 0; s < dim; ++s)
      if (s != a) order.push_back(2 + s);
    order.push_back(dim + 2);
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
    Tensor<T> moved = permute(v, order);
    const Shape moved_shape = moved.shape();
    const std::size_t rest = moved.numel() / (b * heads * grid[a]);
    Tensor<T> mixed = matmul(ks[a], reshape(moved, {b, heads, grid[a], rest}));
    v = permute(reshape(mixed, moved_shape), inverse);
  }
  std::vector<std::size_t> back{0};
  for (std::size_t a = 0; a < dim; ++a) back.push_back(2 + a);
  back.push_back(1);
  back.push_back(dim + 2);
  return proj(reshape(permute(v, back), x.shape()));
}

template <typename T>
void FactorizedAttention<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t a = 0; a < qk.size(); ++a) qk[a].collect(out, prefix + "qk" + std::to_string(a) + ".");
  value.collect(out, prefix + "value.");
  proj.collect(out, prefix + "proj.");
}

template <typename T>
FullAttention<T>::FullAttention(std::size_t width_, std::size_t heads_, Rng& rng)
    : width(width_), heads(heads_), qkv(width_, 3 * width_, rng), proj(width_, width_, rng) {
  if (width % heads != 0) {
    throw std::invalid_argument("width " + std::to_string(width) + " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

template <typename T>
Tensor<T> FullAttention<T>::kernel(const Tensor<T>& x) const {
  auto parts = split_heads(qkv(x), 3, heads);
  return attention_kernel(parts[0], parts[1]);
}

template <typename T>
Tensor<T> FullAttention<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.dim(2) != width) {
    throw ShapeError("full attention expects (B, N, " + std::to_string(width) + "), got " + to_string(x.shape()));
  }
  auto parts = split_heads(qkv(x), 3, heads);
  Tensor<T> o = matmul(attention_kernel(parts[0], parts[1]), parts[2]);  // (B, H, N, Dh)
  return proj(reshape(permute(o, {0, 2, 1, 3}), x.shape()));
}

template <typename T>
void FullAttention<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
  qkv.collect(out, prefix + "qkv.");
  proj.collect(out, prefix + "proj.");
}

std::vector<AttentionKind> DenoiserConfig::layer_kinds() const {
  std::vector<AttentionKind> k(depth, AttentionKind::Full);
  if (pattern == "full") return k;
  if (pattern == "factorized") return std::vector<AttentionKind>(depth, AttentionKind::Factorized);
  if (pattern != "alternate") throw std::invalid_argument("unknown layer pattern '" + pattern + "'");
  for (std::size_t i = 0; i < depth; ++i) {
    k[i] = (i % 2 == 0 && i + 1 < depth) ? AttentionKind::Factorized : AttentionKind::Full;
  }
  return k;
}

void DenoiserConfig::validate() const {
  if (extents.empty() || extents.size() > 2) throw std::invalid_argument("denoiser grid must be 1-D or 2-D");
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw std::invalid_argument("denoiser width " + std::to_string(width) + " must be a positive multiple of heads " +
                                std::to_string(heads));
  }
  if (depth == 0 || channels == 0) throw std::invalid_argument("denoiser depth and channels must be positive");
  if (!time_conditioned && history == 0) throw std::invalid_argument("the baseline needs at least one history frame");
  (void)layer_kinds();
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"extents", c.extents},   {"channels", c.channels},
                     {"history", c.history},   {"xi_dim", c.xi_dim},
                     {"width", c.width},       {"heads", c.heads},
                     {"depth", c.depth},       {"mlp_ratio", c.mlp_ratio},
                     {"pattern", c.pattern},   {"time_conditioned", c.time_conditioned},
                     {"prediction", to_string(c.prediction)}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c = DenoiserConfig{};
  c.extents = j.value("extents", c.extents);
  c.channels = j.value("channels", c.channels);
  c.history = j.value("history", c.history);
  c.xi_dim = j.value("xi_dim", c.xi_dim);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.depth = j.value("depth", c.depth);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.pattern = j.value("pattern", c.pattern);
  c.time_conditioned = j.value("time_conditioned", c.time_conditioned);
  c.prediction = parameterization_from_string(j.value("prediction", std::string("velocity")));
  c.validate();
}

template <typename T>
Block<T>::Block(const DenoiserConfig& cfg, AttentionKind kind_, Rng& rng) : kind(kind_), extents(cfg.extents) {
  if (kind == AttentionKind::Factorized) {
    fact = FactorizedAttention<T>(cfg.extents.size(), cfg.width, cfg.heads, rng);
  } else {
    full = FullAttention<T>(cfg.width, cfg.heads, rng);
  }
  mlp1 = nn::Linear<T>(cfg.width, cfg.mlp_ratio * cfg.width, rng);
  mlp2 = nn::Linear<T>(cfg.mlp_ratio * cfg.width, cfg.width, rng);
  modulation = nn::Linear<T>(cfg.width, 6 * cfg.width, rng);
  modulation.zero_init();
}

template <typename T>
Tensor<T> Block<T>::operator()(const Tensor<T>& x, const Tensor<T>& c) const {
  const std::size_t b = x.dim(0), n = x.dim(1), w = x.dim(2);
  Tensor<T> mod = reshape(modulation(c), {b, 1, 6 * w});
  auto part = [&](std::size_t i) { return slice(mod, 2, i * w, (i + 1) * w); };
  Tensor<T> h = layer_norm(x) * (part(1) + T(1)) + part(0);
  Tensor<T> a;
  if (kind == AttentionKind::Factorized) {
    Shape grid{b};
    grid.insert(grid.end(), extents.begin(), extents.end());
    grid.push_back(w);
    a = reshape(fact(reshape(h, grid)), {b, n, w});
  } else {
    a = full(h);
  }
  Tensor<T> y = x + a * (part(2) + T(1));
  Tensor<T> h2 = layer_norm(y) * (part(4) + T(1)) + part(3);
  return y + mlp2(gelu(mlp1(h2))) * (part(5) + T(1));
}

template <typename T>
void Block<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
  if (kind == AttentionKind::Factorized) fact.collect(out, prefix + "fact.");
  else full.collect(out, prefix + "full.");
  mlp1.collect(out, prefix + "mlp1.");
  mlp2.collect(out, prefix + "mlp2.");
  modulation.collect(out, prefix + "modulation.");
}

template <typename T>
Denoiser<T>::Denoiser(DenoiserConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t w = cfg_.width;
  const std::size_t frames = cfg_.history + (cfg_.time_conditioned ? 1 : 0);
  input = nn::Linear<T>(frames * cfg_.channels, w, rng);
  if (cfg_.time_conditioned) {
    time1 = nn::Linear<T>(w, w, rng);
    time2 = nn::Linear<T>(w, w, rng);
  }
  if (cfg_.xi_dim > 0) xi_proj = nn::Linear<T>(cfg_.xi_dim, w, rng);
  pos = Tensor<T>::randn({numel(cfg_.extents), w}, rng, T(0.02)).set_requires_grad(true);
  for (auto kind : cfg_.layer_kinds()) blocks.emplace_back(cfg_, kind, rng);
  final_mod = nn::Linear<T>(w, 2 * w, rng);
  final_mod.zero_init();
  output = nn::Linear<T>(w, cfg_.channels, rng);
  output.zero_init();
}

template <typename T>
Tensor<T> Denoiser<T>::condition(const std::vector<double>& k, const Conditioning<T>& cond, std::size_t batch) const {
  Tensor<T> c = Tensor<T>::zeros({batch, cfg_.width});
  if (cfg_.time_conditioned) {
    if (k.size() != batch) {
      throw ShapeError("expected " + std::to_string(batch) + " diffusion times, got " + std::to_string(k.size()));
    }
    c = time2(silu(time1(timestep_embed<T>(k, cfg_.width))));
  }
  if (cfg_.xi_dim > 0) {
    if (!cond.xi.defined() || cond.xi.shape() != Shape{batch, cfg_.xi_dim}) {
      throw ShapeError("system parameters must be (" + std::to_string(batch) + ", " + std::to_string(cfg_.xi_dim) +
                       "), got " + (cond.xi.defined() ? to_string(cond.xi.shape()) : std::string("nothing")));
    }
    c = c + xi_proj(cond.xi);
  }
  return silu(c);
}

template <typename T>
Tensor<T> Denoiser<T>::backbone(const Tensor<T>& tokens, const Tensor<T>& c) const {
  Tensor<T> x = input(tokens) + pos;
  for (const auto& blk : blocks) x = blk(x, c);
  const std::size_t b = x.dim(0), w = cfg_.width;
  Tensor<T> mod = reshape(final_mod(c), {b, 1, 2 * w});
  x = layer_norm(x) * (slice(mod, 2, w, 2 * w) + T(1)) + slice(mod, 2, 0, w);
  return output(x);
}

template <typename T>
Tensor<T> Denoiser<T>::operator()(const Tensor<T>& x_k, const std::vector<double>& k,
                                  const Conditioning<T>& cond) const {
  const std::size_t n = numel(cfg_.extents), d = cfg_.extents.size();
  Shape frame{0};
  frame.insert(frame.end(), cfg_.extents.begin(), cfg_.extents.end());
  frame.push_back(cfg_.channels);

  std::size_t b = 0;
  std::vector<Tensor<T>> parts;
  if (cfg_.history > 0) {
    const Tensor<T>& h = cond.history;
    Shape expect = frame;
    expect.insert(expect.begin() + 1, cfg_.history);
    expect[0] = h.defined() ? h.dim(0) : 0;
    if (!h.defined() || h.shape() != expect) {
      throw ShapeError("history must be " + to_string(expect) + ", got " +
                       (h.defined() ? to_string(h.shape()) : std::string("nothing")));
    }
    b = h.dim(0);
    // (B, h, S..., C) -> (B, S..., h, C) -> (B, N, h*C)
    std::vector<std::size_t> order{0};
    for (std::size_t a = 0; a < d; ++a) order.push_back(2 + a);
    order.push_back(1);
    order.push_back(d + 2);
    parts.push_back(reshape(permute(h, order), {b, n, cfg_.history * cfg_.channels}));
  }
  if (cfg_.time_conditioned) {
    frame[0] = x_k.defined() ? x_k.dim(0) : 0;
    if (!x_k.defined() || x_k.shape() != frame || (b && frame[0] != b)) {
      throw ShapeError("state must be " + to_string(frame) + ", got " +
                       (x_k.defined() ? to_string(x_k.shape()) : std::string("nothing")));
    }
    b = x_k.dim(0);
    parts.push_back(reshape(x_k, {b, n, cfg_.channels}));
  }
  Tensor<T> tokens = parts.size() == 1 ? parts[0] : concat(parts, 2);
  Tensor<T> out = backbone(tokens, condition(k, cond, b));
  frame[0] = b;
  return reshape(out, frame);
}

template <typename T>
Tensor<T> Denoiser<T>::next_frame(const Conditioning<T>& cond) const {
  if (cfg_.time_conditioned) throw std::logic_error("next_frame is only defined for the deterministic baseline");
  Tensor<T> delta = (*this)(Tensor<T>{}, {}, cond);
  const std::size_t h = cfg_.history;
  Shape frame = delta.shape();
  return reshape(slice(cond.history, 1, h - 1, h), frame) + delta;
}

template <typename T>
Predictor<T> Denoiser<T>::predictor(Conditioning<T> cond) const {
  return {cfg_.prediction, [this, cond = std::move(cond)](const Tensor<T>& x, double t) {
            return (*this)(x, std::vector<double>(x.dim(0), t), cond);
          }};
}

template <typename T>
void Denoiser<T>::collect(nn::ParamList<T>& out, const std::string& prefix) const {
  input.collect(out, prefix + "input.");
  if (cfg_.time_conditioned) {
    time1.collect(out, prefix + "time1.");
    time2.collect(out, prefix + "time2.");
  }
  if (cfg_.xi_dim > 0) xi_proj.collect(out, prefix + "xi_proj.");
  out.emplace_back(prefix + "pos", pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + "block" + std::to_string(i) + ".");
  final_mod.collect(out, prefix + "final_mod.");
  output.collect(out, prefix + "output.");
}

template <typename T>
Tensor<T> fm_loss(const Network<T>& net, Parameterization target_kind, const Tensor<T>& x0,
                  const DiffusionPath& path, const TimeGrid& grid, Rng& rng, double snr_gamma) {
  if (grid.steps() == 0) throw std::invalid_argument("fm_loss: empty time grid");
  const std::size_t b = x0.dim(0), per = x0.numel() / b;
  std::uniform_int_distribution<std::size_t> pick(1, grid.steps());
  std::vector<double> ks(b);
  std::vector<T> a_scale(b), s_scale(b);
  for (std::size_t i = 0; i < b; ++i) {
    ks[i] = grid.knots[pick(rng)];
    const auto [a, s] = alpha_sigma(path, ks[i]);
    a_scale[i] = static_cast<T>(a);
    s_scale[i] = static_cast<T>(s);
  }
  Tensor<T> eps = Tensor<T>::randn(x0.shape(), rng);
  Tensor<T> xk(x0.shape());
  {
    auto dst = xk.mutable_data();
    const auto xd = x0.data();
    const auto ed = eps.data();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < per; ++j) dst[i * per + j] = a_scale[i] * xd[i * per + j] + s_scale[i] * ed[i * per + j];
  }
  Tensor<T> target;
  switch (target_kind) {
    case Parameterization::Velocity: target = eps - x0.detach(); break;
    case Parameterization::Noise: target = eps; break;
    case Parameterization::Data: target = x0.detach(); break;
  }
  if (snr_gamma <= 0.0 || target_kind == Parameterization::Velocity) return mse(net(xk, ks), target);
  Tensor<T> w(x0.shape());
  {
    auto wd = w.mutable_data();
    for (std::size_t i = 0; i < b; ++i) {
      const double a = a_scale[i], s = s_scale[i];
      double wi = 1.0;
      if (target_kind == Parameterization::Noise) {
        if (s > 0.0 && a * a > snr_gamma * s * s) wi = snr_gamma * s * s / (a * a);
      } else {
        wi = s > 0.0 ? std::min(a * a / (s * s), snr_gamma) : snr_gamma;
      }
      std::fill(wd.begin() + i * per, wd.begin() + (i + 1) * per, static_cast<T>(std::sqrt(wi)));
    }
  }
  return mse(net(xk, ks) * w, target * w);
}

template <typename T>
Tensor<T> fm_loss(const Denoiser<T>& model, const Tensor<T>& x0, const Conditioning<T>& cond,
                  const DiffusionPath& path, const TimeGrid& grid, Rng& rng, double snr_gamma) {
  if (!model.config().time_conditioned) throw std::logic_error("fm_loss needs a time-conditioned model");
  return fm_loss<T>([&](const Tensor<T>& x, const std::vector<double>& k) { return model(x, k, cond); },
                    model.config().prediction, x0, path, grid, rng, snr_gamma);
}

#define LFM_INSTANTIATE(T)                                                                           \
  template Tensor<T> timestep_embed<T>(const std::vector<double>&, std::size_t);                     \
  template class FactorizedAttention<T>;                                                             \
  template class FullAttention<T>;                                                                   \
  template class Block<T>;                                                                           \
  template class Denoiser<T>;                                                                        \
  template Tensor<T> fm_loss<T>(const Denoiser<T>&, const Tensor<T>&, const Conditioning<T>&,        \
                                const DiffusionPath&, const TimeGrid&, Rng&, double);                \
  template Tensor<T> fm_loss<T>(const Network<T>&, Parameterization, const Tensor<T>&,               \
                                const DiffusionPath&, const TimeGrid&, Rng&, double);

LFM_INSTANTIATE(float)
LFM_INSTANTIATE(double)
#undef LFM_INSTANTIATE

}  // namespace lfm::dit
