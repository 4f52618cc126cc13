#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "uacvae/errors.hpp"

namespace uacvae {

// ---------------------------------------------------------------------------
// Data model

enum class NLILabel { Contradict = -1, Neutral = 0, Entail = 1 };

inline int rating(NLILabel l) {
  switch (l) {
    case NLILabel::Entail: return 1;
    case NLILabel::Contradict: return -1;
    case NLILabel::Neutral: return 0;
  }
  return 0;
}

inline NLILabel label_from_int(int v) {
  switch (v) {
    case 1: return NLILabel::Entail;
    case 0: return NLILabel::Neutral;
    case -1: return NLILabel::Contradict;
    default: throw DataError("nli label must be -1, 0 or 1, got " + std::to_string(v));
  }
}

inline const char* label_name(NLILabel l) {
  switch (l) {
    case NLILabel::Entail: return "entailment";
    case NLILabel::Contradict: return "contradiction";
    case NLILabel::Neutral: return "neutral";
  }
  return "neutral";
}

struct Utterance {
  std::string text;
  std::vector<int> token_ids;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

struct PersonaSet {
  std::vector<std::string> statements;
  friend bool operator==(const PersonaSet&, const PersonaSet&) = default;
};

struct EmotionLabel {
  std::string label;
  friend bool operator==(const EmotionLabel&, const EmotionLabel&) = default;
};

using Condition = std::variant<PersonaSet, EmotionLabel>;

struct DialogueExample {
  std::vector<Utterance> context;
  Condition condition;
  Utterance reference;
  std::optional<std::vector<NLILabel>> gold_nli;
  bool corrupted = false;

  friend bool operator==(const DialogueExample&, const DialogueExample&) = default;
};

struct WindowConfig {
  std::size_t max_turns = 4;
  std::size_t max_len = 40;
};

// ---------------------------------------------------------------------------
// Tokenization

/// Lowercased whitespace tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join(const std::vector<std::string>& toks, std::string_view sep = " ") {
  std::string s;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) s += sep;
    s += toks[i];
  }
  return s;
}

inline std::string normalize_text(std::string_view text, std::size_t max_len) {
  auto toks = tokenize(text);
  if (toks.size() > max_len) toks.resize(max_len);
  return join(toks);
}

/// Keeps the most recent max_turns utterances, each cut to its first max_len tokens.
inline std::vector<Utterance> window(const std::vector<Utterance>& context, std::size_t max_turns,
                                     std::size_t max_len) {
  const std::size_t start = context.size() > max_turns ? context.size() - max_turns : 0;
  std::vector<Utterance> out(context.begin() + static_cast<std::ptrdiff_t>(start), context.end());
  for (auto& u : out) {
    auto toks = tokenize(u.text);
    if (toks.size() > max_len) {
      toks.resize(max_len);
      u.text = join(toks);
    }
    if (u.token_ids.size() > max_len) u.token_ids.resize(max_len);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;
  static constexpr std::size_t kNumSpecial = 5;

  static const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s{"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"};
    return s;
  }

  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// Tokens after the specials, in id order.
  explicit Vocab(const std::vector<std::string>& words) {
    for (const auto& s : special_tokens()) insert(s);
    for (const auto& w : words) insert(w);
  }

  /// Frequency-desc then lexicographic; tokens below min_freq are left out (UNK).
  static Vocab build(const std::vector<DialogueExample>& examples, std::size_t min_freq = 1);

  static Vocab from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw DataError("vocab: expected a JSON array");
    std::vector<std::string> toks = j.get<std::vector<std::string>>();
    if (toks.size() < kNumSpecial || !std::equal(special_tokens().begin(), special_tokens().end(), toks.begin())) {
      throw DataError("vocab: special tokens must occupy ids 0-4");
    }
    return Vocab(std::vector<std::string>(toks.begin() + kNumSpecial, toks.end()));
  }

  nlohmann::json to_json() const { return id_to_token_; }

  std::size_t size() const { return id_to_token_.size(); }
  bool contains(std::string_view tok) const { return token_to_id_.count(std::string(tok)) != 0; }

  int id(std::string_view tok) const {
    auto it = token_to_id_.find(std::string(tok));
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) throw DataError("vocab: id out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::vector<std::string> toks;
    for (int i : ids) toks.push_back(token(i));
    return join(toks);
  }

  static bool is_special(int id) { return id >= 0 && id < static_cast<int>(kNumSpecial); }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.id_to_token_ == b.id_to_token_; }

 private:
  void insert(const std::string& tok) {
    if (token_to_id_.count(tok)) throw DataError("vocab: duplicate token '" + tok + "'");
    token_to_id_.emplace(tok, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(tok);
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

/// Every string the model reads or predicts for an example.
inline std::vector<std::string> example_texts(const DialogueExample& ex) {
  std::vector<std::string> texts;
  for (const auto& u : ex.context) texts.push_back(u.text);
  if (const auto* p = std::get_if<PersonaSet>(&ex.condition)) {
    texts.insert(texts.end(), p->statements.begin(), p->statements.end());
  } else {
    texts.push_back(std::get<EmotionLabel>(ex.condition).label);
  }
  texts.push_back(ex.reference.text);
  return texts;
}

inline Vocab Vocab::build(const std::vector<DialogueExample>& examples, std::size_t min_freq) {
  if (examples.empty()) throw DataError("build_vocab: empty corpus");
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be >= 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& ex : examples)
    for (const auto& text : example_texts(ex))
      for (const auto& t : tokenize(text)) ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : freq) {
    const bool special =
        std::find(special_tokens().begin(), special_tokens().end(), tok) != special_tokens().end();
    if (n >= min_freq && !special) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> words;
  for (auto& [tok, n] : kept) words.push_back(tok);
  return Vocab(words);
}

/// Fills token_ids of context and reference utterances.
inline void tokenize_examples(std::vector<DialogueExample>& examples, const Vocab& vocab) {
  for (auto& ex : examples) {
    for (auto& u : ex.context) u.token_ids = vocab.encode(u.text);
    ex.reference.token_ids = vocab.encode(ex.reference.text);
  }
}

// ---------------------------------------------------------------------------
// JSONL

inline DialogueExample parse_example(const nlohmann::json& j, const WindowConfig& win) {
  if (!j.is_object()) throw DataError("record is not a JSON object");
  if (!j.contains("context") || !j["context"].is_array() || j["context"].empty()) {
    throw DataError("missing or empty 'context' array");
  }
  if (!j.contains("response") || !j["response"].is_string()) throw DataError("missing 'response' string");
  const bool has_persona = j.contains("persona");
  const bool has_emotion = j.contains("emotion");
  if (has_persona == has_emotion) throw DataError("schema: exactly one of 'persona' or 'emotion' is required");

  DialogueExample ex;
  for (const auto& u : j["context"]) {
    if (!u.is_string()) throw DataError("context entries must be strings");
    ex.context.push_back(Utterance{normalize_text(u.get<std::string>(), win.max_len), {}});
  }
  if (has_persona) {
    const auto& p = j["persona"];
    if (!p.is_array() || p.empty()) throw DataError("schema: 'persona' must be a non-empty array");
    PersonaSet ps;
    for (const auto& s : p) {
      if (!s.is_string()) throw DataError("schema: persona statements must be strings");
      ps.statements.push_back(normalize_text(s.get<std::string>(), win.max_len));
    }
    ex.condition = std::move(ps);
  } else {
    if (!j["emotion"].is_string() || j["emotion"].get<std::string>().empty()) {
      throw DataError("schema: 'emotion' must be a non-empty string");
    }
    ex.condition = EmotionLabel{normalize_text(j["emotion"].get<std::string>(), win.max_len)};
  }
  ex.reference = Utterance{normalize_text(j["response"].get<std::string>(), win.max_len), {}};
  if (j.contains("gold_nli")) {
    const auto& g = j["gold_nli"];
    if (!g.is_array() || g.size() != ex.context.size()) {
      throw DataError("gold_nli must have one label per context utterance");
    }
    std::vector<NLILabel> labels;
    for (const auto& v : g) {
      if (!v.is_number_integer()) throw DataError("gold_nli values must be integers");
      labels.push_back(label_from_int(v.get<int>()));
    }
    ex.gold_nli = std::move(labels);
  }
  if (j.contains("corrupted")) {
    if (!j["corrupted"].is_boolean()) throw DataError("'corrupted' must be a boolean");
    ex.corrupted = j["corrupted"].get<bool>();
  }
  if (ex.context.size() > win.max_turns) {
    const std::size_t drop = ex.context.size() - win.max_turns;
    ex.context = window(ex.context, win.max_turns, win.max_len);
    if (ex.gold_nli) ex.gold_nli->erase(ex.gold_nli->begin(), ex.gold_nli->begin() + static_cast<std::ptrdiff_t>(drop));
  }
  return ex;
}

/// Fail-fast: any bad line aborts the whole load with its 1-based line number.
inline std::vector<DialogueExample> parse_jsonl(std::istream& in, const WindowConfig& win = {}) {
  std::vector<DialogueExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_example(nlohmann::json::parse(line), win));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<DialogueExample> load_jsonl(const std::string& path, const WindowConfig& win = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  return parse_jsonl(in, win);
}

inline nlohmann::ordered_json example_to_json(const DialogueExample& ex) {
  nlohmann::ordered_json j;
  std::vector<std::string> ctx;
  for (const auto& u : ex.context) ctx.push_back(u.text);
  j["context"] = ctx;
  if (const auto* p = std::get_if<PersonaSet>(&ex.condition)) {
    j["persona"] = p->statements;
  } else {
    j["emotion"] = std::get<EmotionLabel>(ex.condition).label;
  }
  j["response"] = ex.reference.text;
  if (ex.gold_nli) {
    std::vector<int> g;
    for (auto l : *ex.gold_nli) g.push_back(rating(l));
    j["gold_nli"] = g;
  }
  j["corrupted"] = ex.corrupted;
  return j;
}

inline void write_jsonl(std::ostream& out, const std::vector<DialogueExample>& examples) {
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

inline void save_jsonl(const std::string& path, const std::vector<DialogueExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file: " + path);
  write_jsonl(out, examples);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Slot-filled sentence patterns. {x} is an item, {e} an emotion.
struct SyntheticTemplates {
  std::string question = "do you like {x} ?";
  std::string statement_pos = "i like {x}";
  std::string statement_neg = "i do not like {x}";
  std::string response_pos = "yes i like {x} a lot";
  std::string response_neg = "no i do not like {x} at all";
  std::string response_unknown = "i have never tried {x}";
  std::string emotion_prompt = "guess what happened with my {x}";
  std::string emotion_response = "i feel {e} about your {x}";
};

struct SyntheticSpec {
  SyntheticTemplates templates;
  std::vector<std::string> fillers{"hello there",        "hi how are you",        "i am doing well thanks",
                                   "what do you do for fun", "nice to meet you", "how was your day",
                                   "it was a long day",  "tell me about yourself"};
  std::vector<std::string> items{"tea",    "coffee",   "pizza",    "dogs",     "cats",    "hiking", "music",
                                 "movies", "books",    "soccer",   "chess",    "cooking", "painting",
                                 "swimming", "jazz",   "sushi",    "gardening", "running", "coding", "dancing"};
  std::vector<std::string> emotions{"happy", "sad", "angry", "excited", "afraid", "proud"};
  /// "persona", "emotion" or "mixed".
  std::string condition = "mixed";
  std::size_t persona_size = 3;
  std::size_t count = 1000;
  std::size_t min_turns = 2;
  std::size_t max_turns = 4;
  double corruption_rate = 0.0;
  /// Share of tokens in a corrupted utterance replaced by random words.
  double corrupt_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    const auto& t = templates;
    for (const auto* s : {&t.question, &t.statement_pos, &t.statement_neg, &t.response_pos, &t.response_neg,
                          &t.response_unknown, &t.emotion_prompt, &t.emotion_response}) {
      if (s->empty()) throw ConfigError("synthetic: empty template");
    }
    if (fillers.empty() || items.empty()) throw ConfigError("synthetic: empty template inventory");
    if (condition != "persona" && condition != "emotion" && condition != "mixed") {
      throw ConfigError("synthetic: condition must be persona, emotion or mixed");
    }
    if (condition != "persona" && emotions.empty()) throw ConfigError("synthetic: empty emotion inventory");
    if (condition != "emotion" && (persona_size == 0 || persona_size > items.size())) {
      throw ConfigError("synthetic: persona_size must be in [1, items]");
    }
    if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0)) throw ConfigError("synthetic: corruption_rate outside [0,1]");
    if (!(corrupt_fraction >= 0.0 && corrupt_fraction <= 1.0)) {
      throw ConfigError("synthetic: corrupt_fraction outside [0,1]");
    }
    if (min_turns < 1 || min_turns > max_turns) throw ConfigError("synthetic: need 1 <= min_turns <= max_turns");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticTemplates& t) {
  j = {{"question", t.question},         {"statement_pos", t.statement_pos},
       {"statement_neg", t.statement_neg}, {"response_pos", t.response_pos},
       {"response_neg", t.response_neg},   {"response_unknown", t.response_unknown},
       {"emotion_prompt", t.emotion_prompt}, {"emotion_response", t.emotion_response}};
}

inline void from_json(const nlohmann::json& j, SyntheticTemplates& t) {
  t.question = j.value("question", t.question);
  t.statement_pos = j.value("statement_pos", t.statement_pos);
  t.statement_neg = j.value("statement_neg", t.statement_neg);
  t.response_pos = j.value("response_pos", t.response_pos);
  t.response_neg = j.value("response_neg", t.response_neg);
  t.response_unknown = j.value("response_unknown", t.response_unknown);
  t.emotion_prompt = j.value("emotion_prompt", t.emotion_prompt);
  t.emotion_response = j.value("emotion_response", t.emotion_response);
}

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"templates", s.templates},
       {"fillers", s.fillers},
       {"items", s.items},
       {"emotions", s.emotions},
       {"condition", s.condition},
       {"persona_size", s.persona_size},
       {"count", s.count},
       {"min_turns", s.min_turns},
       {"max_turns", s.max_turns},
       {"corruption_rate", s.corruption_rate},
       {"corrupt_fraction", s.corrupt_fraction},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  if (j.contains("templates")) s.templates = j["templates"].get<SyntheticTemplates>();
  s.fillers = j.value("fillers", s.fillers);
  s.items = j.value("items", s.items);
  s.emotions = j.value("emotions", s.emotions);
  s.condition = j.value("condition", s.condition);
  s.persona_size = j.value("persona_size", s.persona_size);
  s.count = j.value("count", s.count);
  s.min_turns = j.value("min_turns", s.min_turns);
  s.max_turns = j.value("max_turns", s.max_turns);
  s.corruption_rate = j.value("corruption_rate", s.corruption_rate);
  s.corrupt_fraction = j.value("corrupt_fraction", s.corrupt_fraction);
  s.seed = j.value("seed", s.seed);
}

inline std::string fill_slots(std::string tpl, const std::string& item, const std::string& emotion = {}) {
  auto replace_all = [&tpl](const std::string& key, const std::string& val) {
    for (std::size_t pos = tpl.find(key); pos != std::string::npos; pos = tpl.find(key, pos + val.size())) {
      tpl.replace(pos, key.size(), val);
    }
  };
  replace_all("{x}", item);
  replace_all("{e}", emotion);
  return normalize_text(tpl, std::string::npos);
}

/// Mechanical entailment oracle for sentences built from the synthetic
/// templates. A sentence asserts (item, polarity) when it contains the
/// token sequence of statement_pos / statement_neg for that item.
class TemplateEntailment {
 public:
  explicit TemplateEntailment(const SyntheticSpec& spec) {
    for (const auto& item : spec.items) {
      patterns_.push_back({tokenize(fill_slots(spec.templates.statement_neg, item)), item, false});
      patterns_.push_back({tokenize(fill_slots(spec.templates.statement_pos, item)), item, true});
    }
  }

  /// (item, positive) pairs asserted by the sentence.
  std::vector<std::pair<std::string, bool>> propositions(std::string_view sentence) const {
    const auto toks = tokenize(sentence);
    std::vector<std::pair<std::string, bool>> out;
    std::vector<bool> used(toks.size(), false);
    for (const auto& p : patterns_) {
      if (p.tokens.empty() || p.tokens.size() > toks.size()) continue;
      for (std::size_t s = 0; s + p.tokens.size() <= toks.size(); ++s) {
        if (!std::equal(p.tokens.begin(), p.tokens.end(), toks.begin() + static_cast<std::ptrdiff_t>(s))) continue;
        bool overlap = false;
        for (std::size_t k = 0; k < p.tokens.size(); ++k) overlap = overlap || used[s + k];
        if (overlap) continue;
        for (std::size_t k = 0; k < p.tokens.size(); ++k) used[s + k] = true;
        out.emplace_back(p.item, p.positive);
      }
    }
    return out;
  }

  NLILabel label(std::string_view premise, std::string_view hypothesis) const {
    const auto prem = propositions(premise);
    const auto hyp = propositions(hypothesis);
    if (prem.empty() || hyp.empty()) return NLILabel::Neutral;
    bool all_supported = true;
    for (const auto& [item, pos] : hyp) {
      bool supported = false;
      for (const auto& [pitem, ppos] : prem) {
        if (pitem != item) continue;
        if (ppos != pos) return NLILabel::Contradict;
        supported = true;
      }
      all_supported = all_supported && supported;
    }
    return all_supported ? NLILabel::Entail : NLILabel::Neutral;
  }

 private:
  struct Pattern {
    std::vector<std::string> tokens;
    std::string item;
    bool positive;
  };
  std::vector<Pattern> patterns_;
};

namespace detail {

inline std::vector<std::string> synthetic_word_inventory(const SyntheticSpec& spec) {
  std::map<std::string, int> words;
  auto add = [&words](const std::string& s) {
    for (const auto& t : tokenize(s))
      if (t.find('{') == std::string::npos) words[t] = 1;
  };
  const auto& t = spec.templates;
  for (const auto* s : {&t.question, &t.statement_pos, &t.statement_neg, &t.response_pos, &t.response_neg,
                        &t.response_unknown, &t.emotion_prompt, &t.emotion_response}) {
    add(*s);
  }
  for (const auto& s : spec.fillers) add(s);
  for (const auto& s : spec.items) add(s);
  for (const auto& s : spec.emotions) add(s);
  std::vector<std::string> out;
  for (const auto& [w, _] : words) out.push_back(w);
  return out;
}

template <class Rng>
std::size_t pick(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

template <class Rng>
bool coin(Rng& rng, double p) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

}  // namespace detail

/// Shuffles the tokens and replaces ceil(fraction * n) positions with random words.
template <class Rng>
std::string corrupt_utterance(const std::string& text, const std::vector<std::string>& inventory, double fraction,
                              Rng& rng) {
  auto toks = tokenize(text);
  if (toks.empty()) return text;
  std::shuffle(toks.begin(), toks.end(), rng);
  const auto n_replace = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(toks.size())));
  std::vector<std::size_t> pos(toks.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  std::shuffle(pos.begin(), pos.end(), rng);
  for (std::size_t i = 0; i < std::min(n_replace, toks.size()); ++i) {
    toks[pos[i]] = inventory[detail::pick(rng, inventory.size())];
  }
  return join(toks);
}

/// Deterministic for a fixed spec (including seed). Each example carries
/// gold NLI labels from TemplateEntailment; the last context utterance is
/// corrupted with probability corruption_rate.
inline std::vector<DialogueExample> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const TemplateEntailment oracle(spec);
  const auto inventory = detail::synthetic_word_inventory(spec);
  const auto& tp = spec.templates;
  std::vector<DialogueExample> out;
  out.reserve(spec.count);

  for (std::size_t n = 0; n < spec.count; ++n) {
    const bool persona = spec.condition == "persona" || (spec.condition == "mixed" && detail::coin(rng, 0.5));
    const std::size_t turns =
        std::uniform_int_distribution<std::size_t>(spec.min_turns, spec.max_turns)(rng);
    std::vector<std::string> ctx;
    for (std::size_t t = 0; t + 2 < turns; ++t) ctx.push_back(spec.fillers[detail::pick(rng, spec.fillers.size())]);

    DialogueExample ex;
    std::string item;
    std::string response;
    if (persona) {
      std::vector<std::size_t> order(spec.items.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      PersonaSet ps;
      std::vector<bool> polarity;
      for (std::size_t k = 0; k < spec.persona_size; ++k) {
        const bool pos = detail::coin(rng, 0.5);
        polarity.push_back(pos);
        ps.statements.push_back(
            fill_slots(pos ? tp.statement_pos : tp.statement_neg, spec.items[order[k]]));
      }
      const bool known = spec.persona_size == spec.items.size() || detail::coin(rng, 0.75);
      std::size_t slot = known ? detail::pick(rng, spec.persona_size)
                               : spec.persona_size + detail::pick(rng, spec.items.size() - spec.persona_size);
      item = spec.items[order[slot]];
      if (slot < spec.persona_size) {
        response = fill_slots(polarity[slot] ? tp.response_pos : tp.response_neg, item);
      } else {
        response = fill_slots(tp.response_unknown, item);
      }
      ex.condition = std::move(ps);
    } else {
      const std::string& emotion = spec.emotions[detail::pick(rng, spec.emotions.size())];
      item = spec.items[detail::pick(rng, spec.items.size())];
      response = fill_slots(tp.emotion_response, item, emotion);
      ex.condition = EmotionLabel{normalize_text(emotion, std::string::npos)};
    }
    if (turns >= 2) {
      const std::string& other = detail::coin(rng, 0.5) ? item : spec.items[detail::pick(rng, spec.items.size())];
      ctx.push_back(fill_slots(detail::coin(rng, 0.5) ? tp.statement_pos : tp.statement_neg, other));
    }
    ctx.push_back(fill_slots(persona ? tp.question : tp.emotion_prompt, item));

    if (detail::coin(rng, spec.corruption_rate)) {
      ctx.back() = corrupt_utterance(ctx.back(), inventory, spec.corrupt_fraction, rng);
      ex.corrupted = true;
    }
    std::vector<NLILabel> gold;
    for (auto& c : ctx) {
      gold.push_back(oracle.label(c, response));
      ex.context.push_back(Utterance{c, {}});
    }
    ex.reference = Utterance{response, {}};
    ex.gold_nli = std::move(gold);
    out.push_back(std::move(ex));
  }
  return out;
}

/// Deterministic train/validation split by seeded shuffle.
inline std::pair<std::vector<DialogueExample>, std::vector<DialogueExample>> split_corpus(
    const std::vector<DialogueExample>& all, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(all.size())));
  if (all.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, all.size() - 1);
  std::pair<std::vector<DialogueExample>, std::vector<DialogueExample>> out;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? out.first : out.second).push_back(all[idx[i]]);
  return out;
}

}  // namespace uacvae
