#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "uacvae/errors.hpp"

namespace uacvae {

using Tokens = std::vector<std::string>;

/// exp(total NLL / token count).
inline double perplexity(double total_nll, std::size_t tokens) {
  if (tokens == 0) throw DataError("perplexity: zero tokens");
  return std::exp(total_nll / static_cast<double>(tokens));
}

/// Unique n-grams over total n-grams within one response. Responses shorter
/// than n count as fully distinct (1.0).
inline double distinct_n(const Tokens& response, std::size_t n) {
  if (n == 0) throw ConfigError("distinct_n: n must be >= 1");
  if (response.size() < n) return 1.0;
  std::unordered_set<std::string> seen;
  const std::size_t total = response.size() - n + 1;
  for (std::size_t i = 0; i < total; ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) {
      key += response[i + k];
      key.push_back('\x1f');
    }
    seen.insert(std::move(key));
  }
  return static_cast<double>(seen.size()) / static_cast<double>(total);
}

/// Mean of per-response distinct-n.
inline double corpus_distinct_n(const std::vector<Tokens>& responses, std::size_t n) {
  if (responses.empty()) return 0.0;
  double s = 0;
  for (const auto& r : responses) s += distinct_n(r, n);
  return s / static_cast<double>(responses.size());
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct RougeL {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

inline RougeL rouge_l(const Tokens& hypothesis, const Tokens& reference) {
  if (hypothesis.empty() || reference.empty()) return {};
  const double lcs = static_cast<double>(lcs_length(hypothesis, reference));
  RougeL r;
  r.precision = lcs / static_cast<double>(hypothesis.size());
  r.recall = lcs / static_cast<double>(reference.size());
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

/// METEOR without stemming or synonyms: exact unigram matches aligned
/// leftmost-first, harmonic mean weighted 9:1 toward recall, fragmentation
/// penalty 0.5 * (chunks / matches)^3.
inline double meteor_lite(const Tokens& hypothesis, const Tokens& reference) {
  std::vector<bool> used(reference.size(), false);
  std::vector<std::ptrdiff_t> align(hypothesis.size(), -1);
  std::size_t matches = 0;
  for (std::size_t i = 0; i < hypothesis.size(); ++i) {
    for (std::size_t j = 0; j < reference.size(); ++j) {
      if (!used[j] && reference[j] == hypothesis[i]) {
        used[j] = true;
        align[i] = static_cast<std::ptrdiff_t>(j);
        ++matches;
        break;
      }
    }
  }
  if (matches == 0) return 0.0;
  std::size_t chunks = 0;
  std::ptrdiff_t last = -2;
  bool in_chunk = false;
  for (std::size_t i = 0; i < hypothesis.size(); ++i) {
    if (align[i] < 0) {
      in_chunk = false;
      continue;
    }
    if (!in_chunk || align[i] != last + 1) ++chunks;
    in_chunk = true;
    last = align[i];
  }
  const double p = static_cast<double>(matches) / static_cast<double>(hypothesis.size());
  const double r = static_cast<double>(matches) / static_cast<double>(reference.size());
  const double fmean = 10 * p * r / (r + 9 * p);
  const double frag = static_cast<double>(chunks) / static_cast<double>(matches);
  const double penalty = 0.5 * frag * frag * frag;
  return fmean * (1 - penalty);
}

struct MetricRow {
  std::string hypothesis;
  std::string reference;
  RougeL rouge;
  double meteor = 0;
  double distinct_1 = 0;
  double distinct_2 = 0;
  double distinct_3 = 0;
  std::size_t length = 0;
  double prior_log_var = 0;
  bool corrupted = false;
  std::optional<int> ue;
};

struct MetricReport {
  double ppl = 0;
  double distinct_1 = 0;
  double distinct_2 = 0;
  double distinct_3 = 0;
  double rouge_l_p = 0;
  double rouge_l_r = 0;
  double rouge_l_f1 = 0;
  double meteor = 0;
  double avg_length = 0;
  std::optional<double> ue_score;
  double mean_prior_log_var_clean = 0;
  double mean_prior_log_var_corrupted = 0;
  std::size_t clean_count = 0;
  std::size_t corrupted_count = 0;
  std::vector<MetricRow> rows;
};

inline void to_json(nlohmann::json& j, const MetricRow& r) {
  j = {{"hypothesis", r.hypothesis}, {"reference", r.reference},   {"rouge_l_p", r.rouge.precision},
       {"rouge_l_r", r.rouge.recall}, {"rouge_l_f1", r.rouge.f1}, {"meteor", r.meteor},
       {"distinct_1", r.distinct_1}, {"distinct_2", r.distinct_2}, {"distinct_3", r.distinct_3},
       {"length", r.length},         {"prior_log_var", r.prior_log_var}, {"corrupted", r.corrupted}};
  if (r.ue) j["ue"] = *r.ue;
}

inline void to_json(nlohmann::json& j, const MetricReport& m) {
  j = {{"ppl", m.ppl},
       {"avg_length", m.avg_length},
       {"rouge_l_f1", m.rouge_l_f1},
       {"rouge_l_r", m.rouge_l_r},
       {"rouge_l_p", m.rouge_l_p},
       {"meteor", m.meteor},
       {"distinct_1", m.distinct_1},
       {"distinct_2", m.distinct_2},
       {"distinct_3", m.distinct_3},
       {"ue_score", m.ue_score ? nlohmann::json(*m.ue_score) : nlohmann::json(nullptr)},
       {"mean_prior_log_var_clean", m.mean_prior_log_var_clean},
       {"mean_prior_log_var_corrupted", m.mean_prior_log_var_corrupted},
       {"clean_count", m.clean_count},
       {"corrupted_count", m.corrupted_count},
       {"rows", m.rows}};
}

}  // namespace uacvae
