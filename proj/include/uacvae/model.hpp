#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "uacvae/autograd.hpp"
#include "uacvae/corpus.hpp"
#include "uacvae/errors.hpp"
#include "uacvae/latent.hpp"
#include "uacvae/params.hpp"

namespace uacvae {

enum class ModelMode { UaCvaeM, UaCvaeC, Cvae, DecoderOnly };

inline std::string mode_name(ModelMode m) {
  switch (m) {
    case ModelMode::UaCvaeM: return "ua-m";
    case ModelMode::UaCvaeC: return "ua-c";
    case ModelMode::Cvae: return "cvae";
    case ModelMode::DecoderOnly: return "decoder";
  }
  return "ua-m";
}

inline ModelMode parse_mode(const std::string& s) {
  if (s == "ua-m") return ModelMode::UaCvaeM;
  if (s == "ua-c") return ModelMode::UaCvaeC;
  if (s == "cvae") return ModelMode::Cvae;
  if (s == "decoder") return ModelMode::DecoderOnly;
  throw ConfigError("unknown mode '" + s + "' (expected ua-m, ua-c, cvae or decoder)");
}

inline bool has_latent(ModelMode m) { return m != ModelMode::DecoderOnly; }
inline bool has_combination(ModelMode m) { return m == ModelMode::UaCvaeM || m == ModelMode::UaCvaeC; }

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 96;
  std::size_t inter_dim = 48;
  std::size_t latent_dim = 32;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_dim = 192;
  std::size_t max_utterance_len = 40;
  std::size_t max_turns = 4;
  ModelMode mode = ModelMode::UaCvaeM;
  std::size_t kernel_size = 3;
  /// Linear KL anneal 0 -> 1 over this share of training steps; 0 disables it.
  double kl_anneal_fraction = 0.2;
  std::uint64_t seed = 0;

  CombineConfig combine_config() const {
    CombineConfig c;
    c.variant = mode == ModelMode::UaCvaeC ? CombineVariant::C : CombineVariant::M;
    c.embed_dim = embed_dim;
    c.inter_dim = inter_dim;
    c.latent_dim = latent_dim;
    c.kernel_size = kernel_size;
    return c;
  }

  /// Longest encoder input: max_turns utterances plus separators.
  std::size_t max_sequence_len() const { return max_turns * (max_utterance_len + 1); }

  void validate() const {
    if (vocab_size <= Vocab::kNumSpecial) throw ConfigError("model: vocab_size too small");
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
      throw ConfigError("model: embed_dim must be divisible by heads");
    }
    if (latent_dim == 0 || inter_dim == 0 || ffn_dim == 0) throw ConfigError("model: zero dimension");
    if (max_utterance_len < 1 || max_turns < 1) throw ConfigError("model: max_utterance_len and max_turns must be >= 1");
    if (!(kl_anneal_fraction >= 0.0 && kl_anneal_fraction <= 1.0)) {
      throw ConfigError("model: kl_anneal_fraction outside [0,1]");
    }
    combine_config().validate();
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size},         {"embed_dim", c.embed_dim},
       {"inter_dim", c.inter_dim},           {"latent_dim", c.latent_dim},
       {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
       {"heads", c.heads},                   {"ffn_dim", c.ffn_dim},
       {"max_utterance_len", c.max_utterance_len}, {"max_turns", c.max_turns},
       {"mode", mode_name(c.mode)},          {"kernel_size", c.kernel_size},
       {"kl_anneal_fraction", c.kl_anneal_fraction}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.inter_dim = j.value("inter_dim", c.inter_dim);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_utterance_len = j.value("max_utterance_len", c.max_utterance_len);
  c.max_turns = j.value("max_turns", c.max_turns);
  if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
  c.kernel_size = j.value("kernel_size", c.kernel_size);
  c.kl_anneal_fraction = j.value("kl_anneal_fraction", c.kl_anneal_fraction);
  c.seed = j.value("seed", c.seed);
}

/// Token ids for one example, ready for the encoder and decoder.
struct ModelInput {
  std::vector<int> context_ids;    // turns joined by SEP
  std::vector<int> condition_ids;  // persona statements joined by SEP, or the emotion label
  std::vector<int> response_ids;   // reference, specials excluded
  bool corrupted = false;
};

inline std::vector<int> join_with_sep(const std::vector<std::vector<int>>& parts, std::size_t cap) {
  std::vector<int> out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.push_back(Vocab::kSep);
    out.insert(out.end(), parts[i].begin(), parts[i].end());
  }
  if (out.size() > cap) out.resize(cap);
  return out;
}

inline ModelInput make_input(const DialogueExample& ex, const Vocab& vocab, const ModelConfig& cfg) {
  if (ex.context.empty()) throw DataError("encode: empty context");
  const auto ctx = window(ex.context, cfg.max_turns, cfg.max_utterance_len);
  std::vector<std::vector<int>> turns;
  for (const auto& u : ctx) {
    auto ids = vocab.encode(u.text);
    if (ids.size() > cfg.max_utterance_len) ids.resize(cfg.max_utterance_len);
    turns.push_back(std::move(ids));
  }
  std::vector<std::vector<int>> cond;
  if (const auto* p = std::get_if<PersonaSet>(&ex.condition)) {
    for (const auto& s : p->statements) {
      auto ids = vocab.encode(s);
      if (ids.size() > cfg.max_utterance_len) ids.resize(cfg.max_utterance_len);
      cond.push_back(std::move(ids));
    }
  } else {
    cond.push_back(vocab.encode(std::get<EmotionLabel>(ex.condition).label));
  }
  ModelInput in;
  in.context_ids = join_with_sep(turns, cfg.max_sequence_len());
  in.condition_ids = join_with_sep(cond, cfg.max_sequence_len());
  if (in.condition_ids.empty()) in.condition_ids.push_back(Vocab::kUnk);
  if (in.context_ids.empty()) in.context_ids.push_back(Vocab::kUnk);
  for (int id : vocab.encode(ex.reference.text)) {
    if (!Vocab::is_special(id) || id == Vocab::kUnk) in.response_ids.push_back(id);
  }
  if (in.response_ids.size() > cfg.max_utterance_len) in.response_ids.resize(cfg.max_utterance_len);
  in.corrupted = ex.corrupted;
  return in;
}

/// BoW target: response tokens, specials excluded.
inline std::vector<int> bow_target(const std::vector<int>& response_ids) {
  std::vector<int> out;
  for (int id : response_ids)
    if (!Vocab::is_special(id)) out.push_back(id);
  return out;
}

/// Decoder input [BOS, y...] and targets [y..., EOS], both cut to max_len.
inline std::pair<std::vector<int>, std::vector<int>> teacher_forcing(const std::vector<int>& response_ids,
                                                                     std::size_t max_len) {
  std::vector<int> in{Vocab::kBos};
  in.insert(in.end(), response_ids.begin(), response_ids.end());
  std::vector<int> tgt(response_ids.begin(), response_ids.end());
  tgt.push_back(Vocab::kEos);
  if (in.size() > max_len) in.resize(max_len);
  if (tgt.size() > max_len) tgt.resize(max_len);
  return {std::move(in), std::move(tgt)};
}

template <class T>
struct SequenceEmbedding {
  Var<T> x_emb;
  Var<T> c_emb;
  std::optional<Var<T>> y_emb;
};

struct LossBreakdown {
  double kl = 0.0;
  double reconstruction_nll = 0.0;
  double bow_nll = 0.0;
  double kl_weight = 1.0;
  double total = 0.0;
  std::size_t tokens = 0;

  /// total = kl_weight * kl + reconstruction_nll + bow_nll; all terms must be finite.
  static LossBreakdown combine(double kl, double rec, double bow, double kl_weight, std::size_t tokens = 0) {
    if (!std::isfinite(kl)) throw NumericError("loss: non-finite kl term");
    if (!std::isfinite(rec)) throw NumericError("loss: non-finite reconstruction term");
    if (!std::isfinite(bow)) throw NumericError("loss: non-finite bow term");
    return LossBreakdown{kl, rec, bow, kl_weight, kl_weight * kl + rec + bow, tokens};
  }
};

inline void to_json(nlohmann::json& j, const LossBreakdown& l) {
  j = {{"kl", l.kl}, {"reconstruction_nll", l.reconstruction_nll}, {"bow_nll", l.bow_nll},
       {"kl_weight", l.kl_weight}, {"total", l.total}, {"tokens", l.tokens}};
}

enum class LatentPath { Prior, Recognition };

/// Records which networks a forward pass touched.
struct RoutingTrace {
  int prior_calls = 0;
  int recognition_calls = 0;
  std::optional<LatentPath> sample_source;
  std::optional<LatentPath> sigma2_source;
  int combine_calls = 0;
};

struct ForwardOptions {
  /// z_u := z even in UA modes.
  bool bypass_combination = false;
  RoutingTrace* trace = nullptr;
};

template <class T>
struct ExampleLoss {
  Var<T> kl;
  Var<T> reconstruction;
  Var<T> bow;
  std::size_t tokens = 0;
};

struct DecodeStrategy {
  enum class Kind { Greedy, TopK, Temperature };
  Kind kind = Kind::Greedy;
  std::size_t k = 1;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodeStrategy greedy(std::uint64_t seed = 0) { return {Kind::Greedy, 1, 1.0, seed}; }
  static DecodeStrategy top_k(std::size_t k, std::uint64_t seed) { return {Kind::TopK, k, 1.0, seed}; }
  static DecodeStrategy with_temperature(double t, std::uint64_t seed) { return {Kind::Temperature, 1, t, seed}; }

  /// "greedy", "topk:K" or "temp:T".
  static DecodeStrategy parse(const std::string& s, std::uint64_t seed) {
    if (s == "greedy") return greedy(seed);
    try {
      if (s.rfind("topk:", 0) == 0) {
        const long k = std::stol(s.substr(5));
        if (k < 1) throw ConfigError("top-k needs k >= 1");
        return top_k(static_cast<std::size_t>(k), seed);
      }
      if (s.rfind("temp:", 0) == 0) {
        const double t = std::stod(s.substr(5));
        if (!(t > 0.0)) throw ConfigError("temperature must be > 0");
        return with_temperature(t, seed);
      }
    } catch (const std::logic_error&) {
    }
    throw ConfigError("bad strategy '" + s + "' (expected greedy, topk:K or temp:T)");
  }
};

/// Token-by-token decoding. next_logits(prefix) returns the logits for the
/// token following prefix. Stops at EOS or after max_len tokens; the
/// returned ids exclude BOS and EOS.
template <class LogitsFn>
std::vector<int> decode_loop(LogitsFn&& next_logits, const DecodeStrategy& strategy, std::size_t max_len,
                             std::mt19937_64& rng) {
  std::vector<int> prefix{Vocab::kBos};
  std::vector<int> out;
  while (out.size() < max_len) {
    const std::vector<double> logits = next_logits(prefix);
    int next = 0;
    if (strategy.kind == DecodeStrategy::Kind::Greedy) {
      next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      std::vector<std::size_t> idx(logits.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      const double temp = strategy.kind == DecodeStrategy::Kind::Temperature ? strategy.temperature : 1.0;
      std::size_t keep = logits.size();
      if (strategy.kind == DecodeStrategy::Kind::TopK) {
        keep = std::min(strategy.k, logits.size());
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < keep; ++i) mx = std::max(mx, logits[idx[i]] / temp);
      std::vector<double> w(keep);
      for (std::size_t i = 0; i < keep; ++i) w[i] = std::exp(logits[idx[i]] / temp - mx);
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      next = static_cast<int>(idx[pick(rng)]);
    }
    if (next == Vocab::kEos) break;
    out.push_back(next);
    prefix.push_back(next);
  }
  return out;
}

/// Sinusoidal positional encoding table, rows = positions.
template <class T>
Tensor<T> sinusoidal_positions(std::size_t len, std::size_t dim) {
  Tensor<T> pe = Tensor<T>::matrix(len, dim);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double a = static_cast<double>(pos) * freq;
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return pe;
}

/// The uncertainty-aware CVAE: shared transformer encoder for context,
/// condition and response; prior / recognition Gaussians; combination
/// network; causal decoder conditioned on z_u; bag-of-words head.
template <class T>
class UaCvae {
 public:
  explicit UaCvae(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    init_params(rng);
    build_tables();
  }

  UaCvae(ModelConfig cfg, ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    ParamStore<T> reference;
    std::mt19937_64 rng(0);
    std::swap(reference, params_);
    init_params(rng);
    std::swap(reference, params_);
    for (const auto& e : reference.entries()) {
      if (!params_.contains(e.name)) throw CheckpointError("model: missing parameter " + e.name);
      if (params_.get(e.name).shape() != e.value.shape()) {
        throw CheckpointError("model: parameter " + e.name + " has shape " +
                              shape_string(params_.get(e.name).shape()) + ", expected " +
                              shape_string(e.value.shape()));
      }
    }
    build_tables();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // -------------------------------------------------------------------------
  // Encoder

  /// Shared self-attention encoder, mean-pooled over non-PAD positions.
  Var<T> encode_sequence(Graph<T>& g, const std::vector<int>& ids) const {
    if (ids.empty()) throw DataError("encode: empty sequence");
    if (ids.size() > positions_.rows()) throw DimensionError("encode: sequence longer than positional table");
    Var<T> h = embed(g, ids);
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) h = block(g, "enc." + std::to_string(l), h, false);
    h = layer_norm(h, g.parameter(params_, "enc.lnf.g"), g.parameter(params_, "enc.lnf.b"));
    std::vector<bool> mask(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] != Vocab::kPad;
    return mean_pool(h, mask);
  }

  /// X', c' and (when with_response) Y'.
  SequenceEmbedding<T> encode(Graph<T>& g, const ModelInput& in, bool with_response) const {
    if (in.context_ids.empty()) throw DataError("encode: empty context");
    SequenceEmbedding<T> e{encode_sequence(g, in.context_ids), encode_sequence(g, in.condition_ids), std::nullopt};
    if (with_response) {
      std::vector<int> y = in.response_ids.empty() ? std::vector<int>{Vocab::kEos} : in.response_ids;
      e.y_emb = encode_sequence(g, y);
    }
    return e;
  }

  // -------------------------------------------------------------------------
  // Decoder

  /// Logits (prefix_len x vocab). Input at each position is token embedding
  /// + positional encoding + W z_u; z_u absent means no latent contribution.
  Var<T> decode_logits(Graph<T>& g, const std::vector<int>& prefix, std::optional<Var<T>> z_u) const {
    if (prefix.empty() || prefix.front() != Vocab::kBos) throw DataError("decode: prefix must start with BOS");
    if (prefix.size() > cfg_.max_utterance_len) {
      throw DataError("decode: prefix length " + std::to_string(prefix.size()) + " exceeds max_utterance_len " +
                      std::to_string(cfg_.max_utterance_len));
    }
    Var<T> h = embed(g, prefix);
    if (z_u && cfg_.mode != ModelMode::DecoderOnly) {
      Var<T> proj = add(matmul(*z_u, g.parameter(params_, "dec.zproj.w")), g.parameter(params_, "dec.zproj.b"));
      h = add(h, proj);
    }
    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) h = block(g, "dec." + std::to_string(l), h, true);
    h = layer_norm(h, g.parameter(params_, "dec.lnf.g"), g.parameter(params_, "dec.lnf.b"));
    return add(matmul(h, g.parameter(params_, "dec.out.w")), g.parameter(params_, "dec.out.b"));
  }

  /// Two-layer map of [z_u; X'; c'] to vocabulary logits.
  Var<T> bow_logits(Graph<T>& g, Var<T> z_u, Var<T> x_emb, Var<T> c_emb) const {
    Var<T> in = concat_cols<T>({z_u, x_emb, c_emb});
    Var<T> h = tanh(add(matmul(in, g.parameter(params_, "bow.h.w")), g.parameter(params_, "bow.h.b")));
    return add(matmul(h, g.parameter(params_, "bow.out.w")), g.parameter(params_, "bow.out.b"));
  }

  // -------------------------------------------------------------------------
  // Latent path

  struct LatentResult {
    std::optional<Var<T>> z_u;
    std::optional<Gaussian<T>> prior;
    std::optional<Gaussian<T>> posterior;
  };

  /// Training reads the recognition network for both z and sigma2;
  /// inference reads only the prior.
  LatentResult latent(Graph<T>& g, const SequenceEmbedding<T>& e, LatentPath path, const Tensor<T>& epsilon,
                      const ForwardOptions& opt) const {
    LatentResult r;
    if (!has_latent(cfg_.mode)) return r;
    const CombineConfig cc = cfg_.combine_config();
    if (path == LatentPath::Recognition && !e.y_emb) {
      throw DataError("training path requires the response embedding");
    }
    Gaussian<T> source = [&] {
      if (path == LatentPath::Recognition) {
        // The prior is still needed for the KL term, but never sampled.
        r.prior = prior_forward(g, params_, cc, e.x_emb, e.c_emb);
        r.posterior = recognition_forward(g, params_, cc, e.x_emb, e.c_emb, *e.y_emb);
        if (opt.trace) ++opt.trace->prior_calls, ++opt.trace->recognition_calls;
        return *r.posterior;
      }
      r.prior = prior_forward(g, params_, cc, e.x_emb, e.c_emb);
      if (opt.trace) ++opt.trace->prior_calls;
      return *r.prior;
    }();
    LatentSample<T> s = sample_z(source, epsilon);
    if (opt.trace) opt.trace->sample_source = path, opt.trace->sigma2_source = path;
    if (has_combination(cfg_.mode) && !opt.bypass_combination) {
      s.z_u = combine(g, params_, cc, s.z, s.sigma2);
      if (opt.trace) ++opt.trace->combine_calls;
    }
    r.z_u = s.z_u;
    return r;
  }

  // -------------------------------------------------------------------------
  // Losses

  /// Per-example terms of the negated objective, on the recognition path.
  ExampleLoss<T> example_loss(Graph<T>& g, const ModelInput& in, const Tensor<T>& epsilon,
                              const ForwardOptions& opt = {}) const {
    SequenceEmbedding<T> e = encode(g, in, true);
    LatentResult lr = latent(g, e, LatentPath::Recognition, epsilon, opt);
    ExampleLoss<T> out;
    out.kl = lr.posterior ? gaussian_kl(*lr.posterior, *lr.prior) : g.constant(Tensor<T>::scalar(0));
    auto [dec_in, targets] = teacher_forcing(in.response_ids, cfg_.max_utterance_len);
    out.reconstruction = cross_entropy(decode_logits(g, dec_in, lr.z_u), targets, Vocab::kPad);
    out.tokens = targets.size();
    Var<T> z_u = lr.z_u ? *lr.z_u : g.constant(Tensor<T>({1, cfg_.latent_dim}));
    out.bow = bag_nll(bow_logits(g, z_u, e.x_emb, e.c_emb), bow_target(in.response_ids));
    return out;
  }

  /// Builds the mean batch loss on g and returns the scalar to differentiate
  /// plus the value breakdown.
  std::pair<Var<T>, LossBreakdown> batch_loss(Graph<T>& g, const std::vector<const ModelInput*>& batch,
                                              const std::vector<Tensor<T>>& epsilons, double kl_weight,
                                              const ForwardOptions& opt = {}) const {
    if (batch.empty()) throw DataError("loss: empty batch");
    if (epsilons.size() != batch.size()) throw DimensionError("loss: one epsilon per example required");
    std::vector<Var<T>> totals;
    double kl = 0, rec = 0, bow = 0;
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ExampleLoss<T> el = example_loss(g, *batch[i], epsilons[i], opt);
      kl += el.kl.value()[0];
      rec += el.reconstruction.value()[0];
      bow += el.bow.value()[0];
      tokens += el.tokens;
      totals.push_back(add(add(scale(el.kl, static_cast<T>(kl_weight)), el.reconstruction), el.bow));
    }
    const double n = static_cast<double>(batch.size());
    Var<T> total = scale(sum(concat_cols(totals)), static_cast<T>(1.0 / n));
    return {total, LossBreakdown::combine(kl / n, rec / n, bow / n, kl_weight, tokens)};
  }

  /// Teacher-forced response NLL (summed) and token count, on either path.
  std::pair<double, std::size_t> response_nll(const ModelInput& in, LatentPath path, const Tensor<T>& epsilon,
                                              const ForwardOptions& opt = {}) const {
    Graph<T> g(false);
    SequenceEmbedding<T> e = encode(g, in, path == LatentPath::Recognition);
    LatentResult lr = latent(g, e, path, epsilon, opt);
    auto [dec_in, targets] = teacher_forcing(in.response_ids, cfg_.max_utterance_len);
    Var<T> nll = cross_entropy(decode_logits(g, dec_in, lr.z_u), targets, Vocab::kPad);
    return {static_cast<double>(nll.value()[0]), targets.size()};
  }

  /// Mean over latent dimensions of the prior log-variance.
  double prior_log_variance(const ModelInput& in) const {
    if (!has_latent(cfg_.mode)) return 0.0;
    Graph<T> g(false);
    SequenceEmbedding<T> e = encode(g, in, false);
    Gaussian<T> p = prior_forward(g, params_, cfg_.combine_config(), e.x_emb, e.c_emb);
    double s = 0;
    for (T v : p.log_var.value().values()) s += v;
    return s / static_cast<double>(cfg_.latent_dim);
  }

  // -------------------------------------------------------------------------
  // Generation

  /// Inference path: z from the prior, sigma2 = prior variance. Output ids
  /// exclude BOS/EOS and never exceed max_utterance_len.
  std::vector<int> generate(const ModelInput& in, const DecodeStrategy& strategy,
                            const ForwardOptions& opt = {}) const {
    std::mt19937_64 rng(strategy.seed);
    std::optional<Tensor<T>> z_u_value;
    {
      Graph<T> g(false);
      SequenceEmbedding<T> e = encode(g, in, false);
      Tensor<T> eps = standard_normal<T>(cfg_.latent_dim, rng);
      LatentResult lr = latent(g, e, LatentPath::Prior, eps, opt);
      if (lr.z_u) z_u_value = lr.z_u->value();
    }
    auto step = [&](const std::vector<int>& prefix) {
      Graph<T> g(false);
      std::optional<Var<T>> z_u;
      if (z_u_value) z_u = g.constant(*z_u_value);
      Var<T> logits = decode_logits(g, prefix, z_u);
      const auto& lv = logits.value();
      const std::size_t v = lv.cols(), last = lv.rows() - 1;
      std::vector<double> out(v);
      for (std::size_t j = 0; j < v; ++j) out[j] = lv(last, j);
      return out;
    };
    return decode_loop(step, strategy, cfg_.max_utterance_len, rng);
  }

 private:
  Var<T> embed(Graph<T>& g, const std::vector<int>& ids) const {
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw DimensionError("embed: token id " + std::to_string(id) + " outside vocab of " +
                             std::to_string(cfg_.vocab_size));
      }
    }
    Var<T> tok = scale(embedding(g.parameter(params_, "tok_emb"), ids), embed_scale_);
    Tensor<T> pos = Tensor<T>::matrix(ids.size(), cfg_.embed_dim);
    std::copy_n(positions_.data(), pos.size(), pos.data());
    return add(tok, g.constant(std::move(pos)));
  }

  Var<T> block(Graph<T>& g, const std::string& p, Var<T> x, bool causal) const {
    auto P = [&](const char* name) { return g.parameter(params_, p + "." + name); };
    Var<T> h = layer_norm(x, P("ln1.g"), P("ln1.b"));
    Var<T> q = add(matmul(h, P("wq")), P("bq"));
    Var<T> k = add(matmul(h, P("wk")), P("bk"));
    Var<T> v = add(matmul(h, P("wv")), P("bv"));
    const std::size_t dh = cfg_.embed_dim / cfg_.heads;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Var<T>> heads;
    for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
      const std::size_t b = hd * dh, e = b + dh;
      Var<T> scores = scale(matmul_nt(slice_cols(q, b, e), slice_cols(k, b, e)), inv_sqrt);
      heads.push_back(matmul(softmax(scores, causal), slice_cols(v, b, e)));
    }
    Var<T> att = cfg_.heads == 1 ? heads.front() : concat_cols(heads);
    x = add(x, add(matmul(att, P("wo")), P("bo")));
    Var<T> f = layer_norm(x, P("ln2.g"), P("ln2.b"));
    f = relu(add(matmul(f, P("ff1.w")), P("ff1.b")));
    f = add(matmul(f, P("ff2.w")), P("ff2.b"));
    return add(x, f);
  }

  void add_block_params(const std::string& p, std::mt19937_64& rng) {
    const std::size_t d = cfg_.embed_dim, f = cfg_.ffn_dim;
    params_.add(p + ".ln1.g", Tensor<T>({1, d}, T(1)));
    params_.add(p + ".ln1.b", Tensor<T>({1, d}));
    for (const char* w : {"q", "k", "v", "o"}) {
      params_.add(p + ".w" + w, normal_init<T>({d, d}, rng));
      params_.add(p + ".b" + w, Tensor<T>({1, d}));
    }
    params_.add(p + ".ln2.g", Tensor<T>({1, d}, T(1)));
    params_.add(p + ".ln2.b", Tensor<T>({1, d}));
    params_.add(p + ".ff1.w", normal_init<T>({d, f}, rng));
    params_.add(p + ".ff1.b", Tensor<T>({1, f}));
    params_.add(p + ".ff2.w", normal_init<T>({f, d}, rng));
    params_.add(p + ".ff2.b", Tensor<T>({1, d}));
  }

  void init_params(std::mt19937_64& rng) {
    const std::size_t d = cfg_.embed_dim, v = cfg_.vocab_size, l = cfg_.latent_dim;
    params_.add("tok_emb", normal_init<T>({v, d}, rng));
    for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) add_block_params("enc." + std::to_string(i), rng);
    params_.add("enc.lnf.g", Tensor<T>({1, d}, T(1)));
    params_.add("enc.lnf.b", Tensor<T>({1, d}));
    for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) add_block_params("dec." + std::to_string(i), rng);
    params_.add("dec.lnf.g", Tensor<T>({1, d}, T(1)));
    params_.add("dec.lnf.b", Tensor<T>({1, d}));
    if (has_latent(cfg_.mode)) {
      params_.add("dec.zproj.w", normal_init<T>({l, d}, rng));
      params_.add("dec.zproj.b", Tensor<T>({1, d}));
    }
    params_.add("dec.out.w", normal_init<T>({d, v}, rng));
    params_.add("dec.out.b", Tensor<T>({1, v}));
    if (has_latent(cfg_.mode)) register_latent_params(params_, cfg_.combine_config(), rng, has_combination(cfg_.mode));
    params_.add("bow.h.w", normal_init<T>({l + 2 * d, d}, rng));
    params_.add("bow.h.b", Tensor<T>({1, d}));
    params_.add("bow.out.w", normal_init<T>({d, v}, rng));
    params_.add("bow.out.b", Tensor<T>({1, v}));
  }

  void build_tables() {
    positions_ = sinusoidal_positions<T>(std::max(cfg_.max_sequence_len(), cfg_.max_utterance_len) + 1,
                                         cfg_.embed_dim);
    embed_scale_ = static_cast<T>(std::sqrt(static_cast<double>(cfg_.embed_dim)));
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  Tensor<T> positions_;
  T embed_scale_ = T(1);
};

}  // namespace uacvae
