#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uacvae/uacvae.hpp"

namespace fs = std::filesystem;
using namespace uacvae;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

std::uint64_t time_seed() {
  return static_cast<std::uint64_t>(std::chrono::system_clock::now().time_since_epoch().count());
}

nlohmann::json manifest(const std::string& command, const nlohmann::json& config, std::uint64_t seed,
                        bool seed_from_clock) {
  return {{"command", command},
          {"config", config},
          {"seed", seed},
          {"seed_source", seed_from_clock ? "clock" : "explicit"},
          {"build_id", build_id()}};
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

struct GenCorpusArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  std::optional<double> corruption_rate;
};

int run_gen_corpus(const GenCorpusArgs& a) {
  nlohmann::json spec_json = a.spec.empty() ? nlohmann::json::object() : read_json(a.spec);
  SyntheticSpec spec = spec_json.get<SyntheticSpec>();
  bool from_clock = false;
  if (a.seed) {
    spec.seed = *a.seed;
  } else if (!spec_json.contains("seed")) {
    spec.seed = time_seed();
    from_clock = true;
  }
  if (a.count) spec.count = *a.count;
  if (a.corruption_rate) spec.corruption_rate = *a.corruption_rate;
  const auto corpus = generate_synthetic(spec);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_jsonl(a.out, corpus);
  write_json(a.out + ".manifest.json", manifest("gen-corpus", spec, spec.seed, from_clock));
  std::cerr << "wrote " << corpus.size() << " examples to " << a.out << " (seed " << spec.seed << ")\n";
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

int run_train(const TrainArgs& a) {
  nlohmann::json cfg_json = a.config.empty() ? nlohmann::json::object() : read_json(a.config);
  TrainConfig cfg;
  try {
    cfg = cfg_json.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  bool from_clock = false;
  if (a.seed) {
    cfg.seed = *a.seed;
  } else if (!cfg_json.contains("seed")) {
    cfg.seed = time_seed();
    from_clock = true;
  }
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (!a.mode.empty()) cfg.model.mode = parse_mode(a.mode);
  if (a.epochs) cfg.epochs = *a.epochs;
  cfg.validate();

  const auto corpus = load_jsonl(a.data, {cfg.model.max_turns, cfg.model.max_utterance_len});
  fs::create_directories(cfg.output_dir);
  nlohmann::json m = manifest("train", cfg, cfg.seed, from_clock);
  m["data"] = a.data;
  write_json(fs::path(cfg.output_dir) / "run_manifest.json", m);

  TrainHooks hooks;
  hooks.on_step = [](const nlohmann::json& rec) {
    if (rec.contains("val_total")) {
      std::cerr << "step " << rec["step"] << " epoch " << rec["epoch"] << " train " << rec["total"] << " val "
                << rec["val_total"] << '\n';
    }
  };
  const TrainResult r = train(cfg, corpus, hooks);
  std::cerr << "trained " << r.steps << " steps; best validation loss " << r.best_validation << "; checkpoints in "
            << cfg.output_dir << '\n';
  return kOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string judge;
  std::string out;
  std::string strategy = "greedy";
  std::string mode;
  std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a) {
  std::optional<ModelMode> expected;
  if (!a.mode.empty()) expected = parse_mode(a.mode);
  const Checkpoint ck = load_checkpoint(a.ckpt, expected);
  const UaCvae<float> model = model_from_checkpoint(ck);
  const auto testset = load_jsonl(a.data, {ck.model.max_turns, ck.model.max_utterance_len});
  const bool from_clock = !a.seed;
  const std::uint64_t seed = a.seed ? *a.seed : time_seed();

  EvalOptions opt;
  opt.strategy = DecodeStrategy::parse(a.strategy, seed);
  std::optional<JudgeBackend> judge;
  if (!a.judge.empty()) {
    judge = parse_judge(a.judge, testset);
    opt.judge = &*judge;
  }
  const MetricReport rep = evaluate(model, ck.vocab, testset, opt);
  nlohmann::json out = rep;
  nlohmann::json cfg = {{"ckpt", a.ckpt},         {"data", a.data},        {"judge", a.judge},
                        {"strategy", a.strategy}, {"model", ck.model},     {"checkpoint_step", ck.step}};
  out["manifest"] = manifest("eval", cfg, seed, from_clock);
  if (a.out.empty()) {
    std::cout << out.dump(2) << '\n';
  } else {
    write_json(a.out, out);
  }
  std::cerr << "ppl " << rep.ppl << " rouge_l_f1 " << rep.rouge_l_f1 << " distinct_2 " << rep.distinct_2;
  if (rep.ue_score) std::cerr << " ue " << *rep.ue_score;
  std::cerr << '\n';
  return kOk;
}

struct UeArgs {
  std::string data;
  std::string judge = "rule";
  std::string responses;
  std::string ckpt;
  std::string out;
  std::string strategy = "greedy";
  std::optional<std::uint64_t> seed;
};

int run_ue(const UeArgs& a) {
  const auto testset = load_jsonl(a.data);
  const JudgeBackend judge = parse_judge(a.judge, testset);
  std::vector<std::string> responses;
  std::optional<std::uint64_t> seed;
  bool from_clock = false;
  if (!a.responses.empty()) {
    std::ifstream in(a.responses);
    if (!in) throw DataError("cannot open responses file: " + a.responses);
    for (std::string line; std::getline(in, line);) responses.push_back(line);
  } else if (!a.ckpt.empty()) {
    const Checkpoint ck = load_checkpoint(a.ckpt);
    const UaCvae<float> model = model_from_checkpoint(ck);
    from_clock = !a.seed;
    seed = a.seed ? *a.seed : time_seed();
    const DecodeStrategy base = DecodeStrategy::parse(a.strategy, *seed);
    for (std::size_t i = 0; i < testset.size(); ++i) {
      DecodeStrategy s = base;
      s.seed = example_seed(base.seed, i);
      responses.push_back(ck.vocab.decode(model.generate(make_input(testset[i], ck.vocab, ck.model), s)));
    }
  } else {
    for (const auto& ex : testset) responses.push_back(ex.reference.text);
  }
  const UEResult r = ue_corpus(testset, responses, judge);
  nlohmann::json out = r;
  nlohmann::json cfg = {{"data", a.data}, {"judge", a.judge}, {"responses", a.responses}, {"ckpt", a.ckpt}};
  out["manifest"] = manifest("ue", cfg, seed.value_or(0), from_clock);
  if (!seed) out["manifest"]["seed"] = nullptr;
  if (a.out.empty()) {
    std::cout << out.dump(2) << '\n';
  } else {
    write_json(a.out, out);
  }
  std::cerr << "ue_score " << r.mean << " over " << r.scores.size() << " examples\n";
  return kOk;
}

struct ChatArgs {
  std::string ckpt;
  std::vector<std::string> persona;
  std::string emotion;
  std::string strategy = "greedy";
  std::optional<std::uint64_t> seed;
};

int run_chat(const ChatArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const UaCvae<float> model = model_from_checkpoint(ck);
  const std::uint64_t seed = a.seed ? *a.seed : time_seed();
  if (!a.seed) std::cerr << "seed " << seed << '\n';
  const DecodeStrategy base = DecodeStrategy::parse(a.strategy, seed);

  DialogueExample ex;
  if (!a.persona.empty()) {
    ex.condition = PersonaSet{a.persona};
  } else {
    ex.condition = EmotionLabel{a.emotion.empty() ? "neutral" : a.emotion};
  }
  std::size_t turn = 0;
  for (std::string line; std::getline(std::cin, line);) {
    if (tokenize(line).empty()) continue;
    ex.context.push_back({normalize_text(line, ck.model.max_utterance_len), {}});
    ex.context = window(ex.context, ck.model.max_turns, ck.model.max_utterance_len);
    DecodeStrategy s = base;
    s.seed = example_seed(base.seed, turn++);
    const std::string reply = ck.vocab.decode(model.generate(make_input(ex, ck.vocab, ck.model), s));
    std::cout << reply << std::endl;
    ex.context.push_back({reply.empty() ? std::string("<eos>") : reply, {}});
    ex.context = window(ex.context, ck.model.max_turns, ck.model.max_utterance_len);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UA-CVAE dialogue generation toolkit"};
  app.require_subcommand(1);

  GenCorpusArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Generate a synthetic dialogue corpus (JSONL)");
  gen_cmd->add_option("--spec", gen.spec, "Synthetic corpus spec (JSON)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out, "Output JSONL path")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--count", gen.count, "Number of examples");
  gen_cmd->add_option("--corruption-rate", gen.corruption_rate, "Probability of corrupting the last context turn");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "Training config (JSON)")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", tr.data, "Training corpus (JSONL)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_option("--mode", tr.mode, "Model mode")->check(CLI::IsMember({"ua-m", "ua-c", "cvae", "decoder"}));
  train_cmd->add_option("--seed", tr.seed, "Training seed");
  train_cmd->add_option("--epochs", tr.epochs, "Number of epochs");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a test corpus");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", ev.data, "Test corpus (JSONL)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--judge", ev.judge, "NLI judge: rule, gold or a service URL");
  eval_cmd->add_option("--out", ev.out, "Report path (JSON); stdout when omitted");
  eval_cmd->add_option("--strategy", ev.strategy, "greedy, topk:K or temp:T");
  eval_cmd->add_option("--mode", ev.mode, "Expected model mode")->check(CLI::IsMember({"ua-m", "ua-c", "cvae", "decoder"}));
  eval_cmd->add_option("--seed", ev.seed, "Sampling seed");

  UeArgs ue;
  auto* ue_cmd = app.add_subcommand("ue", "Score responses with the utterance-entailment metric");
  ue_cmd->add_option("--data", ue.data, "Test corpus (JSONL)")->required()->check(CLI::ExistingFile);
  ue_cmd->add_option("--judge", ue.judge, "NLI judge: rule, gold or a service URL");
  auto* resp_opt = ue_cmd->add_option("--responses", ue.responses, "One response per line; references when omitted");
  ue_cmd->add_option("--ckpt", ue.ckpt, "Generate responses with this checkpoint")->excludes(resp_opt);
  ue_cmd->add_option("--out", ue.out, "Result path (JSON); stdout when omitted");
  ue_cmd->add_option("--strategy", ue.strategy, "greedy, topk:K or temp:T");
  ue_cmd->add_option("--seed", ue.seed, "Sampling seed");

  ChatArgs chat;
  auto* chat_cmd = app.add_subcommand("chat", "Interactive chat on standard input");
  chat_cmd->add_option("--ckpt", chat.ckpt, "Checkpoint directory")->required();
  auto* persona_opt = chat_cmd->add_option("--persona", chat.persona, "Persona statement (repeatable)");
  chat_cmd->add_option("--emotion", chat.emotion, "Emotion label")->excludes(persona_opt);
  chat_cmd->add_option("--strategy", chat.strategy, "greedy, topk:K or temp:T");
  chat_cmd->add_option("--seed", chat.seed, "Sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return run_gen_corpus(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*ue_cmd) return run_ue(ue);
    if (*chat_cmd) return run_chat(chat);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const JudgeError& e) {
    std::cerr << "judge error: " << e.what() << '\n';
    return kData;
  } catch (const DimensionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
