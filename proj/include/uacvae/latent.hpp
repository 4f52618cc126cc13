#pragma once

#include <random>
#include <string>
#include <vector>

#include "uacvae/autograd.hpp"
#include "uacvae/errors.hpp"
#include "uacvae/params.hpp"

namespace uacvae {

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

enum class CombineVariant { M, C };
enum class Activation { Tanh, Identity };

struct CombineConfig {
  CombineVariant variant = CombineVariant::M;
  std::size_t embed_dim = 96;
  std::size_t inter_dim = 48;
  std::size_t latent_dim = 32;
  std::size_t kernel_size = 3;
  Activation activation = Activation::Tanh;

  /// Dimensions in the 768:384:256 proportion, scaled to embed_dim.
  static CombineConfig scaled(std::size_t embed_dim, CombineVariant v = CombineVariant::M) {
    CombineConfig c;
    c.variant = v;
    c.embed_dim = embed_dim;
    c.inter_dim = embed_dim / 2;
    c.latent_dim = embed_dim / 3;
    return c;
  }

  void validate() const {
    if (embed_dim == 0 || inter_dim == 0 || latent_dim == 0) throw ConfigError("combine: zero dimension");
    if (variant == CombineVariant::C && kernel_size % 2 == 0) {
      throw ConfigError("combine_c: kernel_size must be odd, got " + std::to_string(kernel_size));
    }
  }
};

/// Diagonal Gaussian as graph values: mean and clamped log-variance, each 1 x latent_dim.
template <class T>
struct Gaussian {
  Var<T> mean;
  Var<T> log_var;
};

/// Reparametrized draw. sigma2 is the variance of the distribution sampled
/// from, which is what gets routed to the combination network.
template <class T>
struct LatentSample {
  Tensor<T> epsilon;
  Var<T> z;
  Var<T> sigma2;
  Var<T> z_u;
};

template <class T>
void register_latent_params(ParamStore<T>& store, const CombineConfig& cfg, std::mt19937_64& rng,
                            bool with_combination) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, l = cfg.latent_dim;
  store.add("prior.w", normal_init<T>({2 * d, 2 * l}, rng));
  store.add("prior.b", Tensor<T>({1, 2 * l}));
  store.add("recog.w", normal_init<T>({3 * d, 2 * l}, rng));
  store.add("recog.b", Tensor<T>({1, 2 * l}));
  if (!with_combination) return;
  if (cfg.variant == CombineVariant::M) {
    store.add("comb.z.w", normal_init<T>({l, cfg.inter_dim}, rng));
    store.add("comb.z.b", Tensor<T>({1, cfg.inter_dim}));
    store.add("comb.s.w", normal_init<T>({l, cfg.inter_dim}, rng));
    store.add("comb.s.b", Tensor<T>({1, cfg.inter_dim}));
    store.add("comb.out.w", normal_init<T>({cfg.inter_dim, l}, rng));
    store.add("comb.out.b", Tensor<T>({1, l}));
  } else {
    store.add("comb.conv.w", normal_init<T>({1, 2 * cfg.kernel_size}, rng));
    store.add("comb.conv.b", Tensor<T>({1, 1}));
    store.add("comb.out.w", normal_init<T>({l, l}, rng));
    store.add("comb.out.b", Tensor<T>({1, l}));
  }
}

namespace detail {

template <class T>
void expect_row(const char* op, Var<T> v, std::size_t cols) {
  if (v.rows() != 1 || v.cols() != cols) {
    throw DimensionError(std::string(op) + ": expected 1x" + std::to_string(cols) + " input, got " +
                         shape_string(v.value().shape()));
  }
}

template <class T>
Gaussian<T> gaussian_head(Graph<T>& g, const ParamStore<T>& store, const std::string& prefix, Var<T> input,
                          std::size_t latent_dim) {
  Var<T> out = add(matmul(input, g.parameter(store, prefix + ".w")), g.parameter(store, prefix + ".b"));
  if (out.cols() != 2 * latent_dim) {
    throw DimensionError(prefix + ": head produces " + std::to_string(out.cols()) + " values, expected " +
                         std::to_string(2 * latent_dim));
  }
  Var<T> mean = slice_cols(out, 0, latent_dim);
  Var<T> log_var = clamp(slice_cols(out, latent_dim, 2 * latent_dim), T(kLogVarMin), T(kLogVarMax));
  return {mean, log_var};
}

template <class T>
Var<T> activate(Var<T> x, Activation a) {
  return a == Activation::Tanh ? tanh(x) : x;
}

}  // namespace detail

/// Prior network: one affine map of [c_emb; x_emb] to (mean, log-variance).
template <class T>
Gaussian<T> prior_forward(Graph<T>& g, const ParamStore<T>& store, const CombineConfig& cfg, Var<T> x_emb,
                          Var<T> c_emb) {
  detail::expect_row("prior_forward", x_emb, cfg.embed_dim);
  detail::expect_row("prior_forward", c_emb, cfg.embed_dim);
  return detail::gaussian_head(g, store, "prior", concat_cols<T>({c_emb, x_emb}), cfg.latent_dim);
}

/// Recognition network: one affine map of [c_emb; x_emb; y_emb].
template <class T>
Gaussian<T> recognition_forward(Graph<T>& g, const ParamStore<T>& store, const CombineConfig& cfg, Var<T> x_emb,
                                Var<T> c_emb, Var<T> y_emb) {
  detail::expect_row("recognition_forward", x_emb, cfg.embed_dim);
  detail::expect_row("recognition_forward", c_emb, cfg.embed_dim);
  detail::expect_row("recognition_forward", y_emb, cfg.embed_dim);
  return detail::gaussian_head(g, store, "recog", concat_cols<T>({c_emb, x_emb, y_emb}), cfg.latent_dim);
}

/// z = mean + exp(log_var / 2) * epsilon. Fills z and sigma2 of the result.
template <class T>
LatentSample<T> sample_z(const Gaussian<T>& dist, const Tensor<T>& epsilon) {
  Graph<T>& g = *dist.mean.graph;
  if (epsilon.size() != dist.mean.cols()) {
    throw DimensionError("sample_z: epsilon has " + std::to_string(epsilon.size()) + " entries, latent is " +
                         std::to_string(dist.mean.cols()));
  }
  Tensor<T> eps_row({1, epsilon.size()}, epsilon.storage());
  Var<T> std_dev = exp(scale(dist.log_var, T(0.5)));
  Var<T> z = add(dist.mean, mul(std_dev, g.constant(eps_row)));
  return LatentSample<T>{std::move(eps_row), z, exp(dist.log_var), z};
}

template <class T>
Tensor<T> standard_normal(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> t({1, n});
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

/// KL(q || p) between diagonal Gaussians, in nats, as a 1x1 value.
template <class T>
Var<T> gaussian_kl(const Gaussian<T>& q, const Gaussian<T>& p) {
  Var<T> diff = sub(q.mean, p.mean);
  Var<T> numer = add(exp(q.log_var), mul(diff, diff));
  Var<T> ratio = mul(numer, exp(scale(p.log_var, T(-1))));
  Var<T> terms = add_scalar(add(sub(p.log_var, q.log_var), ratio), T(-1));
  return scale(sum(terms), T(0.5));
}

/// M variant: tanh(Wz z) (+) tanh(Ws sigma2), then tanh(Wo h).
template <class T>
Var<T> combine_m(Graph<T>& g, const ParamStore<T>& store, const CombineConfig& cfg, Var<T> z, Var<T> sigma2) {
  detail::expect_row("combine_m", z, cfg.latent_dim);
  detail::expect_row("combine_m", sigma2, cfg.latent_dim);
  const Activation act = cfg.activation;
  Var<T> hz = detail::activate(add(matmul(z, g.parameter(store, "comb.z.w")), g.parameter(store, "comb.z.b")), act);
  Var<T> hs =
      detail::activate(add(matmul(sigma2, g.parameter(store, "comb.s.w")), g.parameter(store, "comb.s.b")), act);
  Var<T> h = add(hz, hs);
  return detail::activate(add(matmul(h, g.parameter(store, "comb.out.w")), g.parameter(store, "comb.out.b")), act);
}

/// C variant: [z; sigma2] as a 2-channel signal, length-preserving 1D conv to
/// one channel, then a latent_dim -> latent_dim linear layer.
template <class T>
Var<T> combine_c(Graph<T>& g, const ParamStore<T>& store, const CombineConfig& cfg, Var<T> z, Var<T> sigma2) {
  cfg.validate();
  detail::expect_row("combine_c", z, cfg.latent_dim);
  detail::expect_row("combine_c", sigma2, cfg.latent_dim);
  const Activation act = cfg.activation;
  Var<T> signal = concat_rows<T>({z, sigma2});
  Var<T> conv = detail::activate(conv1d(signal, g.parameter(store, "comb.conv.w"), g.parameter(store, "comb.conv.b"),
                                        cfg.kernel_size, (cfg.kernel_size - 1) / 2),
                                 act);
  return detail::activate(add(matmul(conv, g.parameter(store, "comb.out.w")), g.parameter(store, "comb.out.b")), act);
}

template <class T>
Var<T> combine(Graph<T>& g, const ParamStore<T>& store, const CombineConfig& cfg, Var<T> z, Var<T> sigma2) {
  return cfg.variant == CombineVariant::M ? combine_m(g, store, cfg, z, sigma2) : combine_c(g, store, cfg, z, sigma2);
}

}  // namespace uacvae
