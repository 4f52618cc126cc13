#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uacvae/corpus.hpp"
#include "uacvae/errors.hpp"
#include "uacvae/metrics.hpp"
#include "uacvae/model.hpp"
#include "uacvae/ue.hpp"

#ifndef UACVAE_BUILD_ID
#define UACVAE_BUILD_ID "unknown"
#endif

namespace uacvae {

inline std::string build_id() { return UACVAE_BUILD_ID; }

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  /// Steps between validation + checkpoint; 0 means once per epoch.
  std::size_t eval_every = 0;
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  double clip_norm = 1.0;
  double train_fraction = 0.9;
  std::size_t min_freq = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train: train_fraction outside (0,1]");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},           {"lr", c.lr},         {"batch_size", c.batch_size},
       {"epochs", c.epochs},         {"eval_every", c.eval_every}, {"seed", c.seed},
       {"output_dir", c.output_dir}, {"clip_norm", c.clip_norm},   {"train_fraction", c.train_fraction},
       {"min_freq", c.min_freq}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.min_freq = j.value("min_freq", c.min_freq);
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return nlohmann::json::parse(in).get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: directory {manifest.json, params.bin, vocab.json}

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  Vocab vocab;
  ParamStore<float> params;
  std::uint64_t step = 0;
  nlohmann::json extra;  // train config, metric snapshot
};

namespace detail {

inline void write_le_floats(std::ostream& out, std::span<const float> values) {
  for (float f : values) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                       static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
    out.write(b, 4);
  }
}

inline float read_le_float(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

}  // namespace detail

/// Writes into dir atomically (staging directory, then rename).
inline void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const Vocab& vocab,
                            const ParamStore<float>& params, std::uint64_t step, const nlohmann::json& extra = {}) {
  namespace fs = std::filesystem;
  const fs::path staging = dir.string() + ".tmp";
  fs::remove_all(staging);
  fs::create_directories(staging);

  nlohmann::ordered_json manifest;
  manifest["format"] = "uacvae-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["build_id"] = build_id();
  manifest["model"] = nlohmann::ordered_json::parse(nlohmann::json(cfg).dump());
  manifest["vocab"] = "vocab.json";
  manifest["step"] = step;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& e : params.entries()) {
    table.push_back({{"name", e.name}, {"shape", e.value.shape()}, {"offset", offset}, {"count", e.value.size()}});
    offset += e.value.size();
  }
  manifest["params"] = table;
  manifest["total_floats"] = offset;
  manifest["extra"] = nlohmann::ordered_json::parse(extra.is_null() ? "{}" : extra.dump());

  {
    std::ofstream out(staging / "params.bin", std::ios::binary);
    for (const auto& e : params.entries()) detail::write_le_floats(out, e.value.values());
    if (!out) throw CheckpointError("cannot write " + (staging / "params.bin").string());
  }
  {
    std::ofstream out(staging / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
  }
  {
    std::ofstream out(staging / "vocab.json", std::ios::binary);
    out << vocab.to_json().dump() << '\n';
  }
  fs::remove_all(dir);
  fs::rename(staging, dir);
}

/// Validates manifest against blob; throws CheckpointError on any
/// inconsistency and never returns a partial model.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir, std::optional<ModelMode> expected_mode = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw CheckpointError("checkpoint directory not found: " + dir.string());
  nlohmann::json manifest;
  try {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw CheckpointError("missing manifest.json in " + dir.string());
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("unreadable manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "uacvae-checkpoint") throw CheckpointError("not a uacvae checkpoint");
  if (manifest.value("version", 0) != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + manifest.value("version", nlohmann::json(0)).dump());
  }
  Checkpoint ck;
  try {
    ck.model = manifest.at("model").get<ModelConfig>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad model config in manifest: ") + e.what());
  }
  if (expected_mode && *expected_mode != ck.model.mode) {
    throw CheckpointError("checkpoint was trained in mode " + mode_name(ck.model.mode) + ", incompatible with " +
                          mode_name(*expected_mode));
  }
  {
    std::ifstream in(dir / manifest.value("vocab", std::string("vocab.json")));
    if (!in) throw CheckpointError("missing vocab file");
    try {
      ck.vocab = Vocab::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("unreadable vocab: ") + e.what());
    }
  }
  if (ck.vocab.size() != ck.model.vocab_size) throw CheckpointError("vocab size disagrees with model config");

  std::ifstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) throw CheckpointError("missing params.bin");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  const std::size_t total = manifest.value("total_floats", std::size_t{0});
  if (bytes.size() != total * 4) {
    throw CheckpointError("params.bin holds " + std::to_string(bytes.size()) + " bytes, manifest expects " +
                          std::to_string(total * 4));
  }
  std::size_t expect_offset = 0;
  for (const auto& p : manifest.at("params")) {
    const auto name = p.at("name").get<std::string>();
    const auto shape = p.at("shape").get<Shape>();
    const auto offset = p.at("offset").get<std::size_t>();
    const auto count = p.at("count").get<std::size_t>();
    if (offset != expect_offset || count != shape_size(shape) || offset + count > total) {
      throw CheckpointError("offset table corrupt at parameter " + name);
    }
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = detail::read_le_float(&bytes[(offset + i) * 4]);
    ck.params.add(name, Tensor<float>(shape, std::move(values)));
    expect_offset += count;
  }
  if (expect_offset != total) throw CheckpointError("offset table does not cover params.bin");
  ck.step = manifest.value("step", std::uint64_t{0});
  ck.params.set_step(ck.step);
  ck.extra = manifest.value("extra", nlohmann::json::object());
  // Shape/presence check against the architecture the config describes.
  UaCvae<float> probe(ck.model, ck.params);
  (void)probe;
  return ck;
}

inline UaCvae<float> model_from_checkpoint(const Checkpoint& ck) { return UaCvae<float>(ck.model, ck.params); }

// ---------------------------------------------------------------------------
// Training

/// Linear 0 -> 1 over the first `fraction` of total steps (step is 1-based).
inline double kl_weight_at(std::size_t step, std::size_t total_steps, double fraction) {
  if (fraction <= 0.0) return 1.0;
  const double ramp = fraction * static_cast<double>(total_steps);
  if (ramp <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / ramp);
}

struct TrainResult {
  ModelConfig model_config;
  Vocab vocab;
  ParamStore<float> params;
  std::vector<nlohmann::json> log;
  double best_validation = std::numeric_limits<double>::infinity();
  std::vector<DialogueExample> validation;
  std::size_t steps = 0;
};

/// Mean validation loss (recognition path) with a fixed noise seed.
template <class T>
LossBreakdown validation_loss(const UaCvae<T>& model, const std::vector<ModelInput>& inputs, std::uint64_t seed,
                              double kl_weight = 1.0) {
  if (inputs.empty()) throw DataError("validation: empty set");
  std::mt19937_64 rng(seed);
  double kl = 0, rec = 0, bow = 0;
  std::size_t tokens = 0;
  for (const auto& in : inputs) {
    Graph<T> g(false);
    ExampleLoss<T> el = model.example_loss(g, in, standard_normal<T>(model.config().latent_dim, rng));
    kl += el.kl.value()[0];
    rec += el.reconstruction.value()[0];
    bow += el.bow.value()[0];
    tokens += el.tokens;
  }
  const double n = static_cast<double>(inputs.size());
  return LossBreakdown::combine(kl / n, rec / n, bow / n, kl_weight, tokens);
}

struct TrainHooks {
  /// Called after every step with the step record.
  std::function<void(const nlohmann::json&)> on_step;
  /// Write checkpoints/logs under config.output_dir.
  bool write_files = true;
};

/// SGVB on the recognition path. Deterministic for equal config, seed and corpus.
inline TrainResult train(TrainConfig config, const std::vector<DialogueExample>& corpus, const TrainHooks& hooks = {}) {
  namespace fs = std::filesystem;
  config.validate();
  if (corpus.size() < 2) throw DataError("train: need at least 2 examples");
  auto [train_set, val_set] = split_corpus(corpus, config.train_fraction, config.seed);
  if (val_set.empty()) val_set = train_set;

  TrainResult result;
  result.vocab = Vocab::build(train_set, config.min_freq);
  config.model.vocab_size = result.vocab.size();
  config.model.seed = config.seed;
  result.model_config = config.model;
  UaCvae<float> model(config.model);

  std::vector<ModelInput> train_inputs, val_inputs;
  for (const auto& ex : train_set) train_inputs.push_back(make_input(ex, result.vocab, config.model));
  for (const auto& ex : val_set) val_inputs.push_back(make_input(ex, result.vocab, config.model));

  const std::size_t n = train_inputs.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const std::size_t eval_every = config.eval_every ? config.eval_every : steps_per_epoch;

  const fs::path out_dir = config.output_dir;
  std::ofstream log_file;
  if (hooks.write_files) {
    fs::create_directories(out_dir);
    log_file.open(out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  }
  nlohmann::json config_json = config;
  config_json.erase("output_dir");

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamConfig adam;
  adam.lr = config.lr;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < n; b += config.batch_size) {
      ++step;
      const double klw = kl_weight_at(step, total_steps, config.model.kl_anneal_fraction);
      std::vector<const ModelInput*> batch;
      std::vector<Tensor<float>> eps;
      for (std::size_t i = b; i < std::min(n, b + config.batch_size); ++i) {
        batch.push_back(&train_inputs[order[i]]);
        eps.push_back(standard_normal<float>(config.model.latent_dim, rng));
      }
      Graph<float> g;
      auto [loss, breakdown] = model.batch_loss(g, batch, eps, klw);
      g.backward(loss);
      GradList<float> grads = g.parameter_grads(model.params());
      const double grad_norm = clip_global_norm(grads, config.clip_norm);
      if (!std::isfinite(grad_norm)) throw NumericError("train: non-finite gradient norm at step " + std::to_string(step));
      adam_step(model.params(), grads, adam);

      nlohmann::json rec = {{"step", step},         {"epoch", epoch + 1},
                            {"kl", breakdown.kl},   {"reconstruction_nll", breakdown.reconstruction_nll},
                            {"bow_nll", breakdown.bow_nll}, {"kl_weight", breakdown.kl_weight},
                            {"total", breakdown.total}, {"grad_norm", grad_norm}};
      if (step % eval_every == 0 || step == total_steps) {
        const LossBreakdown val = validation_loss(model, val_inputs, config.seed + 1);
        rec["val_total"] = val.total;
        rec["val_reconstruction_nll"] = val.reconstruction_nll;
        if (hooks.write_files) {
          const nlohmann::json extra = {{"train_config", config_json}, {"seed", config.seed},
                                        {"metrics", {{"val_total", val.total}, {"train_total", breakdown.total}}}};
          save_checkpoint(out_dir / "checkpoint", config.model, result.vocab, model.params(), step, extra);
          if (val.total < result.best_validation) {
            save_checkpoint(out_dir / "best", config.model, result.vocab, model.params(), step, extra);
          }
        }
        result.best_validation = std::min(result.best_validation, val.total);
      }
      if (hooks.write_files) log_file << rec.dump() << '\n' << std::flush;
      if (hooks.on_step) hooks.on_step(rec);
      result.log.push_back(std::move(rec));
    }
  }
  result.params = model.params();
  result.validation = std::move(val_set);
  result.steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  DecodeStrategy strategy = DecodeStrategy::greedy();
  const JudgeBackend* judge = nullptr;
};

inline std::uint64_t example_seed(std::uint64_t base, std::size_t index) {
  return base + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(index) + 1);
}

/// One generated response per example on the prior path, then every
/// generation metric; UE when a judge is supplied.
template <class T>
MetricReport evaluate(const UaCvae<T>& model, const Vocab& vocab, const std::vector<DialogueExample>& testset,
                      const EvalOptions& opt = {}, std::vector<std::string>* responses_out = nullptr) {
  if (testset.empty()) throw DataError("evaluate: empty test set");
  MetricReport rep;
  double nll_total = 0;
  std::size_t tokens = 0;
  double lv_clean = 0, lv_corrupt = 0;
  std::vector<Tokens> hyps;
  std::vector<std::string> responses;
  for (std::size_t i = 0; i < testset.size(); ++i) {
    const auto& ex = testset[i];
    const ModelInput in = make_input(ex, vocab, model.config());
    DecodeStrategy s = opt.strategy;
    s.seed = example_seed(opt.strategy.seed, i);
    const std::vector<int> ids = model.generate(in, s);

    std::mt19937_64 rng(s.seed);
    auto [nll, n_tok] = model.response_nll(in, LatentPath::Prior, standard_normal<T>(model.config().latent_dim, rng));
    nll_total += nll;
    tokens += n_tok;

    MetricRow row;
    Tokens hyp;
    for (int id : ids) hyp.push_back(vocab.token(id));
    const Tokens ref = tokenize(ex.reference.text);
    row.hypothesis = join(hyp);
    row.reference = ex.reference.text;
    row.rouge = rouge_l(hyp, ref);
    row.meteor = meteor_lite(hyp, ref);
    row.distinct_1 = distinct_n(hyp, 1);
    row.distinct_2 = distinct_n(hyp, 2);
    row.distinct_3 = distinct_n(hyp, 3);
    row.length = hyp.size();
    row.prior_log_var = model.prior_log_variance(in);
    row.corrupted = ex.corrupted;
    (ex.corrupted ? lv_corrupt : lv_clean) += row.prior_log_var;
    (ex.corrupted ? rep.corrupted_count : rep.clean_count) += 1;

    rep.rouge_l_p += row.rouge.precision;
    rep.rouge_l_r += row.rouge.recall;
    rep.rouge_l_f1 += row.rouge.f1;
    rep.meteor += row.meteor;
    rep.avg_length += static_cast<double>(row.length);
    responses.push_back(row.hypothesis);
    hyps.push_back(std::move(hyp));
    rep.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(testset.size());
  rep.ppl = perplexity(nll_total, tokens);
  rep.rouge_l_p /= n;
  rep.rouge_l_r /= n;
  rep.rouge_l_f1 /= n;
  rep.meteor /= n;
  rep.avg_length /= n;
  rep.distinct_1 = corpus_distinct_n(hyps, 1);
  rep.distinct_2 = corpus_distinct_n(hyps, 2);
  rep.distinct_3 = corpus_distinct_n(hyps, 3);
  if (rep.clean_count) rep.mean_prior_log_var_clean = lv_clean / static_cast<double>(rep.clean_count);
  if (rep.corrupted_count) rep.mean_prior_log_var_corrupted = lv_corrupt / static_cast<double>(rep.corrupted_count);
  if (opt.judge) {
    const UEResult ue = ue_corpus(testset, responses, *opt.judge);
    rep.ue_score = ue.mean;
    for (std::size_t i = 0; i < rep.rows.size(); ++i) rep.rows[i].ue = ue.scores[i];
  }
  if (responses_out) *responses_out = std::move(responses);
  return rep;
}

/// Add-one smoothed unigram model fitted on the training references,
/// scored on the test references (targets include EOS).
inline double unigram_perplexity(const std::vector<DialogueExample>& train_set,
                                 const std::vector<DialogueExample>& test_set, const Vocab& vocab,
                                 const ModelConfig& cfg) {
  std::vector<double> counts(vocab.size(), 1.0);
  double total = static_cast<double>(vocab.size());
  for (const auto& ex : train_set) {
    const auto in = make_input(ex, vocab, cfg);
    for (int t : teacher_forcing(in.response_ids, cfg.max_utterance_len).second) counts[t] += 1, total += 1;
  }
  double nll = 0;
  std::size_t n = 0;
  for (const auto& ex : test_set) {
    const auto in = make_input(ex, vocab, cfg);
    for (int t : teacher_forcing(in.response_ids, cfg.max_utterance_len).second) {
      nll -= std::log(counts[t] / total);
      ++n;
    }
  }
  return perplexity(nll, n);
}

}  // namespace uacvae
