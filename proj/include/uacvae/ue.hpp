#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "uacvae/corpus.hpp"
#include "uacvae/errors.hpp"

namespace uacvae {

/// Lexical NLI: Entail when content-word overlap (shared / smaller set)
/// reaches the threshold and both sides agree on being negated, Contradict
/// when the overlap is there but only one side is negated, Neutral otherwise.
struct RuleJudge {
  double overlap_threshold = 0.6;
  std::set<std::string> negations{"not", "no", "never", "n't", "nothing", "nobody", "none", "neither",
                                  "nor", "cannot", "don't", "doesn't", "didn't", "isn't", "wasn't",
                                  "aren't", "won't", "can't"};
  std::set<std::string> stopwords{"i",    "you",  "he",   "she", "it",  "we",   "they", "me",   "my",  "your",
                                  "a",    "an",   "the",  "is",  "am",  "are",  "was",  "were", "be",  "do",
                                  "does", "did",  "to",   "of",  "and", "or",   "in",   "on",   "at",  "for",
                                  "with", "so",   "that", "this", "yes", "too", "?",    ".",    "!",   ","};

  NLILabel judge(const std::string& premise, const std::string& hypothesis) const {
    auto analyse = [this](const std::string& s) {
      std::set<std::string> content;
      int neg = 0;
      for (const auto& t : tokenize(s)) {
        if (negations.count(t)) {
          ++neg;
        } else if (!stopwords.count(t)) {
          content.insert(t);
        }
      }
      return std::pair{content, neg > 0};
    };
    const auto [pc, pn] = analyse(premise);
    const auto [hc, hn] = analyse(hypothesis);
    if (pc.empty() || hc.empty()) return NLILabel::Neutral;
    std::size_t shared = 0;
    for (const auto& w : hc) shared += pc.count(w);
    const double overlap = static_cast<double>(shared) / static_cast<double>(std::min(pc.size(), hc.size()));
    if (overlap < overlap_threshold) return NLILabel::Neutral;
    return pn == hn ? NLILabel::Entail : NLILabel::Contradict;
  }
};

/// Stored gold labels keyed by (premise, hypothesis). Pairs outside the
/// table fall back to the synthetic-template oracle.
class GoldJudge {
 public:
  explicit GoldJudge(const SyntheticSpec& grammar = {}) : oracle_(grammar) {}

  /// Records (x_i, reference) -> gold_nli[i] for every example carrying gold labels.
  static GoldJudge from_corpus(const std::vector<DialogueExample>& examples, const SyntheticSpec& grammar = {}) {
    GoldJudge j(grammar);
    for (const auto& ex : examples) {
      if (!ex.gold_nli) continue;
      for (std::size_t i = 0; i < ex.context.size(); ++i) j.add(ex.context[i].text, ex.reference.text, (*ex.gold_nli)[i]);
    }
    return j;
  }

  void add(const std::string& premise, const std::string& hypothesis, NLILabel label) {
    auto key = std::pair{normalize_text(premise, std::string::npos), normalize_text(hypothesis, std::string::npos)};
    auto [it, inserted] = table_.emplace(key, label);
    if (!inserted && it->second != label) {
      throw DataError("gold labels disagree for premise '" + premise + "' / hypothesis '" + hypothesis + "'");
    }
  }

  NLILabel judge(const std::string& premise, const std::string& hypothesis) const {
    auto it = table_.find({normalize_text(premise, std::string::npos), normalize_text(hypothesis, std::string::npos)});
    if (it != table_.end()) return it->second;
    return oracle_.label(premise, hypothesis);
  }

  std::size_t size() const { return table_.size(); }

 private:
  std::map<std::pair<std::string, std::string>, NLILabel> table_;
  TemplateEntailment oracle_;
};

/// Client of the NLI classification service (POST /classify).
struct RemoteJudge {
  std::string endpoint;  // e.g. http://127.0.0.1:8000
  double timeout_seconds = 10.0;
  std::size_t max_concurrent = 4;
  int attempts = 2;

  NLILabel judge(const std::string& premise, const std::string& hypothesis) const {
    httplib::Client cli(endpoint);
    const auto secs = static_cast<time_t>(timeout_seconds);
    const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    const std::string body = nlohmann::json{{"premise", premise}, {"hypothesis", hypothesis}}.dump();
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt < std::max(1, attempts); ++attempt) {
      auto res = cli.Post("/classify", body, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      return parse_response(res->body);
    }
    throw JudgeError("remote judge " + endpoint + " failed after " + std::to_string(std::max(1, attempts)) +
                     " attempts: " + last_error);
  }

  static NLILabel parse_response(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw JudgeError(std::string("remote judge: unparseable response: ") + e.what());
    }
    if (!j.is_object() || !j.contains("label") || !j["label"].is_string()) {
      throw JudgeError("remote judge: response lacks a label");
    }
    const auto label = j["label"].get<std::string>();
    if (label == "entailment") return NLILabel::Entail;
    if (label == "neutral") return NLILabel::Neutral;
    if (label == "contradiction") return NLILabel::Contradict;
    throw JudgeError("remote judge: unknown label '" + label + "'");
  }
};

using JudgeBackend = std::variant<RuleJudge, GoldJudge, RemoteJudge>;

inline NLILabel judge(const JudgeBackend& backend, const std::string& premise, const std::string& hypothesis) {
  if (premise.empty() || hypothesis.empty()) return NLILabel::Neutral;
  return std::visit([&](const auto& b) { return b.judge(premise, hypothesis); }, backend);
}

/// Judges every (premise, hypothesis) pair, at most max_concurrent in flight
/// for the remote backend. Output order matches input order.
inline std::vector<NLILabel> judge_all(const JudgeBackend& backend,
                                       const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<NLILabel> out(pairs.size(), NLILabel::Neutral);
  const auto* remote = std::get_if<RemoteJudge>(&backend);
  const std::size_t workers = remote ? std::min(std::max<std::size_t>(1, remote->max_concurrent), pairs.size()) : 1;
  if (workers <= 1) {
    for (std::size_t i = 0; i < pairs.size(); ++i) out[i] = judge(backend, pairs[i].first, pairs[i].second);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < pairs.size(); i = next++) {
        try {
          out[i] = judge(backend, pairs[i].first, pairs[i].second);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = pairs.size();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

struct UEExample {
  int score = 0;
  std::vector<NLILabel> labels;
};

struct UEResult {
  std::vector<int> scores;
  double mean = 0;
  std::vector<std::vector<NLILabel>> trace;
};

/// Sum of ratings of judge(x_i, response) over the context utterances.
inline UEExample ue_example(const std::vector<std::string>& context, const std::string& response,
                            const JudgeBackend& backend) {
  if (context.empty()) throw DataError("ue_example: empty context");
  UEExample r;
  for (const auto& x : context) {
    r.labels.push_back(judge(backend, x, response));
    r.score += rating(r.labels.back());
  }
  return r;
}

inline UEResult ue_corpus(const std::vector<DialogueExample>& testset, const std::vector<std::string>& responses,
                          const JudgeBackend& backend) {
  if (testset.size() != responses.size()) {
    throw DataError("ue_corpus: " + std::to_string(responses.size()) + " responses for " +
                    std::to_string(testset.size()) + " examples");
  }
  if (testset.empty()) throw DataError("ue_corpus: empty test set");
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i < testset.size(); ++i) {
    if (testset[i].context.empty()) throw DataError("ue_corpus: example with empty context");
    for (const auto& u : testset[i].context) pairs.emplace_back(u.text, responses[i]);
  }
  const auto labels = judge_all(backend, pairs);
  UEResult r;
  std::size_t k = 0;
  long total = 0;
  for (const auto& ex : testset) {
    std::vector<NLILabel> trace(labels.begin() + static_cast<std::ptrdiff_t>(k),
                                labels.begin() + static_cast<std::ptrdiff_t>(k + ex.context.size()));
    k += ex.context.size();
    int s = 0;
    for (auto l : trace) s += rating(l);
    r.scores.push_back(s);
    r.trace.push_back(std::move(trace));
    total += s;
  }
  r.mean = static_cast<double>(total) / static_cast<double>(testset.size());
  return r;
}

inline void to_json(nlohmann::json& j, const UEResult& r) {
  std::vector<std::vector<int>> trace;
  for (const auto& t : r.trace) {
    std::vector<int> row;
    for (auto l : t) row.push_back(rating(l));
    trace.push_back(std::move(row));
  }
  j = {{"ue_score", r.mean}, {"scores", r.scores}, {"trace", trace}};
}

/// "rule", "gold" or an http(s) URL of the classification service.
inline JudgeBackend parse_judge(const std::string& spec, const std::vector<DialogueExample>& corpus) {
  if (spec == "rule") return RuleJudge{};
  if (spec == "gold") return GoldJudge::from_corpus(corpus);
  if (spec.rfind("http://", 0) == 0 || spec.rfind("https://", 0) == 0) {
    RemoteJudge r;
    r.endpoint = spec;
    return r;
  }
  throw ConfigError("unknown judge '" + spec + "' (expected rule, gold or a service URL)");
}

}  // namespace uacvae
