#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <thread>

#include <httplib.h>

#include "uacvae/ue.hpp"

using namespace uacvae;

namespace {

TEST(Rating, FixedMap) {
  EXPECT_EQ(rating(NLILabel::Entail), 1);
  EXPECT_EQ(rating(NLILabel::Neutral), 0);
  EXPECT_EQ(rating(NLILabel::Contradict), -1);
  EXPECT_THROW(label_from_int(3), DataError);
}

TEST(RuleJudge, BasicCases) {
  RuleJudge j;
  EXPECT_EQ(j.judge("i like tea", "i like tea"), NLILabel::Entail);
  EXPECT_EQ(j.judge("i like tea", "i do not like tea"), NLILabel::Contradict);
  EXPECT_EQ(j.judge("i like tea", "the sky is blue"), NLILabel::Neutral);
  EXPECT_EQ(j.judge("i do not like tea", "no i do not like tea at all"), NLILabel::Entail);
  EXPECT_EQ(j.judge("i like tea", "no i do not like tea at all"), NLILabel::Contradict);
  EXPECT_EQ(j.judge("i never drink tea", "i do not drink tea"), NLILabel::Entail);
}

TEST(RuleJudge, ThresholdIsInclusive) {
  RuleJudge j;
  EXPECT_EQ(j.judge("cats dogs birds lions wolves", "cats dogs birds fish mice"), NLILabel::Entail);
  EXPECT_EQ(j.judge("cats dogs zebras lions wolves", "cats dogs birds fish mice"), NLILabel::Neutral);
  // overlap is measured against the smaller content set
  EXPECT_EQ(j.judge("cats dogs", "cats dogs birds fish mice"), NLILabel::Entail);
}

TEST(Judge, EmptySideIsNeutral) {
  JudgeBackend b = RuleJudge{};
  EXPECT_EQ(judge(b, "", "i like tea"), NLILabel::Neutral);
}

TEST(UeExample, SumsRatings) {
  GoldJudge g;
  g.add("a", "r", NLILabel::Entail);
  g.add("b", "r", NLILabel::Entail);
  g.add("c", "r", NLILabel::Neutral);
  g.add("d", "r", NLILabel::Contradict);
  JudgeBackend b = g;
  EXPECT_EQ(ue_example({"a", "b", "c"}, "r", b).score, 2);
  EXPECT_EQ(ue_example({"a", "c", "d"}, "r", b).score, 0);
  EXPECT_EQ(ue_example({"d", "d", "d", "d"}, "r", b).score, -4);
  EXPECT_THROW(ue_example({}, "r", b), DataError);
}

TEST(GoldJudge, ConflictingLabelsRejected) {
  GoldJudge g;
  g.add("a", "r", NLILabel::Entail);
  EXPECT_NO_THROW(g.add("A", "r", NLILabel::Entail));
  EXPECT_THROW(g.add("a", "r", NLILabel::Contradict), DataError);
}

TEST(GoldJudge, ReadsCorpusLabels) {
  SyntheticSpec spec;
  spec.count = 300;
  spec.seed = 3;
  auto corpus = generate_synthetic(spec);
  JudgeBackend b = GoldJudge::from_corpus(corpus);
  for (const auto& ex : corpus) {
    for (std::size_t i = 0; i < ex.context.size(); ++i) {
      ASSERT_EQ(judge(b, ex.context[i].text, ex.reference.text), (*ex.gold_nli)[i]);
    }
  }
}

TEST(UeCorpus, MeanAndTrace) {
  GoldJudge g;
  g.add("a", "r1", NLILabel::Entail);
  g.add("b", "r1", NLILabel::Entail);
  g.add("a", "r2", NLILabel::Neutral);
  std::vector<DialogueExample> ts(2);
  ts[0].context = {{"a", {}}, {"b", {}}};
  ts[1].context = {{"a", {}}};
  auto r = ue_corpus(ts, {"r1", "r2"}, g);
  EXPECT_EQ(r.scores, (std::vector<int>{2, 0}));
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
  EXPECT_EQ(r.trace[0].size(), 2u);
  nlohmann::json j = r;
  EXPECT_EQ(j["ue_score"], 1.0);
  EXPECT_THROW(ue_corpus(ts, {"r1"}, g), DataError);
}

TEST(ParseJudge, Specs) {
  EXPECT_TRUE(std::holds_alternative<RuleJudge>(parse_judge("rule", {})));
  EXPECT_TRUE(std::holds_alternative<GoldJudge>(parse_judge("gold", {})));
  EXPECT_EQ(std::get<RemoteJudge>(parse_judge("http://localhost:9", {})).endpoint, "http://localhost:9");
  EXPECT_THROW(parse_judge("bert", {}), ConfigError);
}

// Stand-in for the classification service.
class MockService {
 public:
  explicit MockService(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    svr_.Post("/classify", [this, handler](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight_;
      int prev = max_in_flight_.load();
      while (now > prev && !max_in_flight_.compare_exchange_weak(prev, now)) {
      }
      ++calls_;
      handler(req, res);
      --in_flight_;
    });
    port_ = svr_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }
  ~MockService() {
    svr_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int calls() const { return calls_; }
  int max_in_flight() const { return max_in_flight_; }

 private:
  httplib::Server svr_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> in_flight_{0}, max_in_flight_{0}, calls_{0};
};

void reply(httplib::Response& res, const std::string& label) {
  nlohmann::json probs = label == "entailment"      ? nlohmann::json{0.9, 0.05, 0.05}
                         : label == "contradiction" ? nlohmann::json{0.05, 0.05, 0.9}
                                                    : nlohmann::json{0.05, 0.9, 0.05};
  res.set_content(nlohmann::json{{"label", label}, {"probs", probs}}.dump(), "application/json");
}

// Entailment when the hypothesis contains the premise text, else contradiction.
void containment(const httplib::Request& req, httplib::Response& res) {
  auto j = nlohmann::json::parse(req.body);
  const auto p = j.at("premise").get<std::string>(), h = j.at("hypothesis").get<std::string>();
  reply(res, h.find(p) != std::string::npos ? "entailment" : "contradiction");
}

TEST(RemoteJudge, SendsPremiseAndHypothesis) {
  MockService svc(containment);
  RemoteJudge r;
  r.endpoint = svc.url();
  EXPECT_EQ(r.judge("tea", "i like tea"), NLILabel::Entail);
  EXPECT_EQ(r.judge("coffee", "i like tea"), NLILabel::Contradict);
}

TEST(RemoteJudge, RetriesOnceThenSucceeds) {
  std::atomic<int> n{0};
  MockService svc([&](const httplib::Request&, httplib::Response& res) {
    if (n++ == 0) {
      res.status = 503;
      return;
    }
    reply(res, "neutral");
  });
  RemoteJudge r;
  r.endpoint = svc.url();
  EXPECT_EQ(r.judge("a", "b"), NLILabel::Neutral);
  EXPECT_EQ(svc.calls(), 2);
}

TEST(RemoteJudge, PersistentFailureIsAnErrorNotNeutral) {
  MockService svc([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  RemoteJudge r;
  r.endpoint = svc.url();
  EXPECT_THROW(r.judge("a", "b"), JudgeError);
  EXPECT_EQ(svc.calls(), 2);
}

TEST(RemoteJudge, TimeoutIsAnError) {
  MockService svc([](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(600));
    reply(res, "neutral");
  });
  RemoteJudge r;
  r.endpoint = svc.url();
  r.timeout_seconds = 0.2;
  EXPECT_THROW(r.judge("a", "b"), JudgeError);
}

TEST(RemoteJudge, UnreachableServiceIsAnError) {
  std::string url;
  {
    MockService svc(containment);
    url = svc.url();
  }
  RemoteJudge r;
  r.endpoint = url;
  r.timeout_seconds = 1;
  EXPECT_THROW(r.judge("a", "b"), JudgeError);
}

TEST(RemoteJudge, MalformedResponses) {
  EXPECT_THROW(RemoteJudge::parse_response("not json"), JudgeError);
  EXPECT_THROW(RemoteJudge::parse_response(R"({"probs":[1,0,0]})"), JudgeError);
  EXPECT_THROW(RemoteJudge::parse_response(R"({"label":"maybe"})"), JudgeError);
  EXPECT_EQ(RemoteJudge::parse_response(R"({"label":"contradiction","probs":[0,0,1]})"), NLILabel::Contradict);
}

TEST(RemoteJudge, BoundedConcurrencyAndOrder) {
  MockService svc([](const httplib::Request& req, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    containment(req, res);
  });
  RemoteJudge r;
  r.endpoint = svc.url();
  r.max_concurrent = 3;
  std::vector<std::pair<std::string, std::string>> pairs;
  std::vector<NLILabel> expect;
  for (int i = 0; i < 24; ++i) {
    const bool hit = i % 3 == 0;
    pairs.emplace_back("w" + std::to_string(i), hit ? "has w" + std::to_string(i) + " inside" : "nothing");
    expect.push_back(hit ? NLILabel::Entail : NLILabel::Contradict);
  }
  EXPECT_EQ(judge_all(JudgeBackend{r}, pairs), expect);
  EXPECT_LE(svc.max_in_flight(), 3);
  EXPECT_GE(svc.max_in_flight(), 2);
}

TEST(RemoteJudge, UeCorpusThroughService) {
  MockService svc(containment);
  RemoteJudge r;
  r.endpoint = svc.url();
  std::vector<DialogueExample> ts(2);
  ts[0].context = {{"tea", {}}, {"coffee", {}}};
  ts[1].context = {{"tea", {}}, {"i like tea", {}}};
  auto res = ue_corpus(ts, {"i like tea", "i like tea"}, JudgeBackend{r});
  EXPECT_EQ(res.scores, (std::vector<int>{0, 2}));
}

}  // namespace
