#include <doctest.h>

#include <chrono>
#include <stdexcept>

#include "coloop/action_db.hpp"
#include "coloop/common.hpp"
#include "coloop/evaluation.hpp"
#include "test_support.hpp"

using namespace coloop;

namespace {

EvalScores scores(double certainty, double sim_raw, double targeting, double trust, double acceptance,
                  double consistency) {
  EvalScores s;
  s.certainty = certainty;
  s.similarity_raw = sim_raw;
  s.targeting = targeting;
  s.trust = trust;
  s.acceptance = acceptance;
  s.consistency = consistency;
  return s;
}

/// Scripted client: fixed answers, records what each phase was told.
class ScriptedEvaluator final : public EvaluatorClient {
 public:
  PhaseScores evaluate(const EvalRequest& r) override {
    seen.push_back(r.revealed_message);
    PhaseScores p;
    if (r.phase == EvalPhase::kIntention) {
      p.certainty = 8;
      p.interpreted_message = "please cross now";
      p.targeting = 7;
      p.trust = 6;
    } else {
      p.acceptance = 5;
      p.consistency = 4;
    }
    return p;
  }
  CostClass cost_class() const override { return CostClass::kFull; }
  std::vector<std::optional<std::string>> seen;
};

}  // namespace

TEST_CASE("kernel score combines the six metrics") {
  const auto k = kernel_score(scores(7.013, 0.373 * 9.0, 6.577, 6.874, 5.889, 6.061));
  CHECK(k.k == doctest::Approx(28.017).epsilon(1e-4));
  CHECK(k.s_norm == doctest::Approx(0.373));
  CHECK(kernel_score(scores(1, 1, 1, 1, 1, 1)).k == doctest::Approx(kKernelMin));
  CHECK(kernel_score(scores(9, 9, 9, 9, 9, 9)).k == doctest::Approx(kKernelMax));
  MetricWeights w;
  w.trust = 0.0;
  CHECK(kernel_score(scores(9, 9, 9, 9, 9, 9), w).k == doctest::Approx(36.0));
}

TEST_CASE("scores outside the Likert range are rejected") {
  CHECK_THROWS_AS(scores(10, 5, 5, 5, 5, 5).validate(), ValidationError);
  CHECK_THROWS_AS(scores(5, 5, 5, 5, 0.5, 5).validate(), ValidationError);
  CHECK_NOTHROW(scores(1, 9, 5, 5, 5, 5).validate());
  const auto s = scores(2, 3, 4, 5, 6, 7);
  const auto back = EvalScores::from_json(s.to_json());
  CHECK(back.consistency == 7);
  CHECK(back.similarity_raw == 3);
}

TEST_CASE("implied certainty recovers the certainty used in the kernel") {
  const auto s = scores(6.5, 4.5, 6, 7, 5, 5.5);
  const auto k = kernel_score(s);
  CHECK(implied_certainty(k.k, s.acceptance, s.consistency, s.targeting, s.trust, k.s_norm) == doctest::Approx(6.5));
}

TEST_CASE("mixed score and uncertainty flag") {
  MixedEvalConfig cfg;
  cfg.lambda = 0.5;
  cfg.uncertainty_threshold = 3;
  const auto m = mixed_score(28, 20, cfg);
  CHECK(m.k == doctest::Approx(24.0));
  CHECK(m.uncertain);
  CHECK_FALSE(mixed_score(28, 26, cfg).uncertain);
  cfg.lambda = 0.0;
  CHECK(mixed_score(28, 20, cfg).k == doctest::Approx(28.0));
  cfg.lambda = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("drift monitor counts the uncertain share of the window") {
  MixedEvalConfig cfg;
  cfg.drift_window = 10;
  cfg.drift_rate_trigger = 0.3;
  std::vector<DisagreementRecord> stream(15);
  for (std::size_t i = 0; i < stream.size(); ++i) stream[i].uncertain = i < 5 || (i >= 5 && i % 3 == 0);
  // Window = records 5..14; uncertain at 6, 9, 12: 3 of 10.
  auto rep = drift_monitor(stream, cfg);
  CHECK(rep.window == 10U);
  CHECK(rep.disagree_rate == doctest::Approx(0.3));
  CHECK(rep.refresh_recommended);
  stream.back().uncertain = true;
  rep = drift_monitor(stream, cfg);
  CHECK(rep.disagree_rate == doctest::Approx(0.4));
  CHECK(drift_monitor({}, cfg).window == 0U);
}

TEST_CASE("disagreement log appends in order and persists") {
  coloop::testing::TempDir dir;
  DisagreementLog log;
  MixedEvalConfig cfg;
  const auto t1 = log.append(make_disagreement("s", "a", 30, 20, cfg));
  const auto t2 = log.append(make_disagreement("s", "b", 30, 29, cfg));
  CHECK(t2 > t1);
  CHECK(log.last(1).front().action_ref == "b");
  const std::vector<std::uint64_t> ts{t1};
  log.mark_replayed(ts);
  log.save((dir / "d.jsonl").string());
  const auto back = DisagreementLog::load((dir / "d.jsonl").string());
  REQUIRE(back.size() == 2U);
  CHECK(back.snapshot()[0].replayed);
  CHECK(back.snapshot()[0].uncertain);
  CHECK_FALSE(back.snapshot()[1].uncertain);
  CHECK(DisagreementLog::load((dir / "missing.jsonl").string()).size() == 0U);
}

TEST_CASE("hard negatives pair a disagreement with the scenario's best action") {
  ActionDb db;
  std::mt19937_64 rng(1);
  const auto good = coloop::testing::random_sequence(Modality::kEyes, rng);
  const auto bad = coloop::testing::random_sequence(Modality::kEyes, rng);
  auto best = make_record("s", "m", 0, good, scores(9, 9, 8, 4, 5, 4));  // 30
  auto weak = make_record("s", "m", 0, bad, scores(9, 9, 6, 4, 5, 1));  // 25
  REQUIRE(best.k == doctest::Approx(30.0));
  REQUIRE(weak.k == doctest::Approx(25.0));
  db.append(best);
  db.append(weak);
  MixedEvalConfig cfg;
  std::vector<DisagreementRecord> recs{make_disagreement("s", weak.action_hash(), weak.k, 15, cfg),
                                       make_disagreement("s", "missing", 20, 10, cfg)};
  recs[0].timestamp = 1;
  recs[1].timestamp = 2;
  auto res = hard_negative_pairs(recs, db, 4.0);
  REQUIRE(res.pairs.size() == 1U);
  CHECK(res.pairs[0].gap == doctest::Approx(5.0));
  CHECK(res.pairs[0].origin == PairOrigin::kHardNegativeReplay);
  CHECK(res.skipped.size() == 1U);
  CHECK(recs[0].replayed);
  // Replayed records are not paired twice.
  CHECK(hard_negative_pairs(recs, db, 4.0).pairs.empty());
}

TEST_CASE("two-phase evaluation withholds the message until phase two") {
  ScriptedEvaluator client;
  TokenOverlapJudge judge;
  Scenario sc{enumerate_scenarios(FactorConfig{})[0], 0, "please cross now", {}};
  const auto s = evaluate_two_phase(client, judge, sc, "clip");
  REQUIRE(client.seen.size() == 2U);
  CHECK_FALSE(client.seen[0].has_value());
  CHECK(client.seen[1] == std::optional<std::string>("please cross now"));
  CHECK(s.similarity_raw == doctest::Approx(9.0));
  CHECK(s.acceptance == 5);
}

TEST_CASE("token overlap similarity") {
  CHECK(token_f1("Please cross now", "please cross now!") == doctest::Approx(1.0));
  CHECK(token_f1("stop", "go") == 0.0);
  CHECK(token_f1("a b", "a c") == doctest::Approx(0.5));
  TokenOverlapJudge j;
  CHECK(j.similarity("stop", "go") == doctest::Approx(1.0));
}

TEST_CASE("retries back off exponentially and wrap the final failure") {
  RetryPolicy p;
  p.max_attempts = 4;
  p.initial_backoff = std::chrono::milliseconds(100);
  p.max_backoff = std::chrono::milliseconds(250);
  CHECK(p.backoff_for(1).count() == 100);
  CHECK(p.backoff_for(2).count() == 200);
  CHECK(p.backoff_for(3).count() == 250);

  std::vector<long long> slept;
  int calls = 0;
  with_retries(p, "flaky", [&] {
    if (++calls < 3) throw std::runtime_error("down");
  }, [&](std::chrono::milliseconds d) { slept.push_back(d.count()); });
  CHECK(calls == 3);
  CHECK(slept == std::vector<long long>{100, 200});

  calls = 0;
  CHECK_THROWS_AS(with_retries(p, "dead", [&] {
    ++calls;
    throw std::runtime_error("down");
  }, [](std::chrono::milliseconds) {}), ServiceError);
  CHECK(calls == 4);

  calls = 0;
  CHECK_THROWS_AS(with_retries(p, "bad", [&] {
    ++calls;
    throw ValidationError("schema");
  }, [](std::chrono::milliseconds) {}), ValidationError);
  CHECK(calls == 1);
}

TEST_CASE("evaluator request bodies never leak the message into phase one") {
  Scenario sc{enumerate_scenarios(FactorConfig{})[0], 0, "secret words", {}};
  const auto body = HttpEvaluatorClient::request_body({&sc, "clip", EvalPhase::kIntention, std::nullopt});
  CHECK(body.dump().find("secret") == std::string::npos);
  CHECK_THROWS_AS(HttpEvaluatorClient::request_body({&sc, "clip", EvalPhase::kIntention, "secret words"}),
                  ValidationError);
  CHECK_THROWS_AS(HttpEvaluatorClient::parse_response(EvalPhase::kInformed, {{"acceptance", 5}}), ValidationError);
}
