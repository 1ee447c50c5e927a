#include <doctest.h>

#include <map>
#include <random>

#include "coloop/clients.hpp"
#include "coloop/common.hpp"
#include "coloop/config.hpp"
#include "coloop/orchestrator.hpp"
#include "coloop/synthetic.hpp"
#include "test_support.hpp"

using namespace coloop;

namespace {

const ScenarioSkeleton kSkeleton = enumerate_scenarios(FactorConfig{})[42];

class CountingRenderer final : public RendererClient {
 public:
  RenderedClip render(const RenderKey& key, const ActionSequence&, const Timeline&) override {
    ++calls;
    if (fail_next > 0) {
      --fail_next;
      throw std::runtime_error("renderer busy");
    }
    return {"clip:" + key.str(), 100};
  }
  int calls = 0;
  int fail_next = 0;
};

}  // namespace

TEST_CASE("render keys round-trip through their string form") {
  std::mt19937_64 rng(1);
  const auto action = coloop::testing::random_sequence(Modality::kEyes, rng);
  const auto key = make_render_key(kSkeleton, action, RenderProfile{4.0, 512});
  CHECK(key.timeline_hash == action_hash(action));
  CHECK(key.direction == kSkeleton.direction);
  CHECK(key.distance_band == distance_band_index(kSkeleton.safety));
  CHECK(RenderKey::parse(key.str()) == key);
  CHECK_THROWS_AS(RenderKey::parse("garbage"), ValidationError);
  CHECK_THROWS_AS(RenderKey::parse(key.str() + "x"), ValidationError);

  auto moved = kSkeleton;
  moved.direction = kSkeleton.direction % 12 + 1;
  CHECK(make_render_key(moved, action, RenderProfile{4.0, 512}).str() != key.str());
  CHECK(make_render_key(kSkeleton, action, RenderProfile{12.0, 1080}).str() != key.str());
  // Messages do not enter the key: every message of a skeleton shares renders.
  CHECK(make_render_key(kSkeleton, action, RenderProfile{4.0, 512}) == key);
}

TEST_CASE("cache evicts the least recently used clip within the byte budget") {
  RenderCache cache(250);
  cache.put("a", {"A", 100});
  cache.put("b", {"B", 100});
  CHECK(cache.get("a").has_value());  // a is now most recent
  cache.put("c", {"C", 100});
  CHECK(cache.size() == 2U);
  CHECK(cache.evictions() == 1U);
  CHECK_FALSE(cache.peek("b").has_value());
  CHECK(cache.peek("a").has_value());
  CHECK(cache.bytes() == 200U);
  cache.put("huge", {"H", 1000});
  CHECK_FALSE(cache.peek("huge").has_value());
  const auto back = RenderCache::from_json(cache.to_json(), 250);
  CHECK(back.size() == 2U);
  CHECK(back.peek("c")->clip_ref == "C");
}

TEST_CASE("render_or_reuse hits on the second request and never caches failures") {
  std::mt19937_64 rng(2);
  const auto action = coloop::testing::random_sequence(Modality::kEyes, rng);
  const auto key = make_render_key(kSkeleton, action, RenderProfile{});
  RenderCache cache;
  CountingRenderer r;
  RetryPolicy fast;
  fast.initial_backoff = std::chrono::milliseconds(0);
  const auto first = render_or_reuse(key, action, cache, r, fast);
  const auto second = render_or_reuse(key, action, cache, r, fast);
  CHECK_FALSE(first.hit);
  CHECK(second.hit);
  CHECK(first.clip_ref == second.clip_ref);
  CHECK(r.calls == 1);

  auto other = kSkeleton;
  other.direction = kSkeleton.direction % 12 + 1;
  const auto key2 = make_render_key(other, action, RenderProfile{});
  r.fail_next = 10;
  fast.max_attempts = 2;
  CHECK_THROWS_AS(render_or_reuse(key2, action, cache, r, fast), ServiceError);
  CHECK_FALSE(cache.peek(key2.str()).has_value());
  r.fail_next = 1;
  CHECK_FALSE(render_or_reuse(key2, action, cache, r, fast).hit);
}

TEST_CASE("config reads flat keys, keeps defaults and validates") {
  const auto c = Config::from_json({{"modality", "lightbar"}, {"delta_min", 5.0}, {"unknown_key", 1}});
  CHECK(c.modality == Modality::kLightbar);
  CHECK(c.pairs.delta_min == 5.0);
  CHECK(c.candidates_per_scenario == 6U);
  const auto back = Config::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(Config::from_json({{"sample_ratio", 0.0}}).validate(), ConfigError);
  CHECK_THROWS_AS(Config::from_json({{"modality", "horn"}}), Error);
}

TEST_CASE("environment overrides") {
  std::map<std::string, std::string> env{{"COLOOP_LAMBDA", "0.6"},
                                         {"COLOOP_DELTA_MIN", "3.5"},
                                         {"COLOOP_EVALUATOR_URL", "http://127.0.0.1:9"}};
  Config c;
  c.apply_env([&](const char* name) -> const char* {
    const auto it = env.find(name);
    return it == env.end() ? nullptr : it->second.c_str();
  });
  CHECK(c.mixed.lambda == 0.6);
  CHECK(c.pairs.delta_min == 3.5);
  CHECK(c.evaluator_url == "http://127.0.0.1:9");
  env["COLOOP_THETA"] = "not-a-number";
  CHECK_THROWS_AS(c.apply_env([&](const char* name) -> const char* {
    const auto it = env.find(name);
    return it == env.end() ? nullptr : it->second.c_str();
  }), ConfigError);
}

TEST_CASE("staged admission keeps the top q, ties to the earlier candidate") {
  CHECK(staged_admit({1, 5, 3, 5, 2, 0}, 2) == std::vector<std::size_t>{1, 3});
  CHECK(staged_admit({4, 4, 4}, 2) == std::vector<std::size_t>{0, 1});
  CHECK(staged_admit({1, 2}, 5) == std::vector<std::size_t>{0, 1});
  CHECK(staged_admit({}, 2).empty());
}

TEST_CASE("synthetic world is a pure function of the seed") {
  SyntheticWorld a(Modality::kEyes, 7, SyntheticConfig{});
  SyntheticWorld b(Modality::kEyes, 7, SyntheticConfig{});
  const std::string sid = Scenario{kSkeleton, 0, "", {}}.id();
  CHECK(a.target(sid) == b.target(sid));
  CHECK(a.closeness(sid, a.target(sid)) == doctest::Approx(1.0));
  CHECK(a.distance(sid, a.target(sid)) == doctest::Approx(0.0));
  const auto r = a.random_action(99);
  CHECK(a.mutate(r, 0.0, 5) == r);
  CHECK(a.mutate(r, 1.0, 5) == b.mutate(r, 1.0, 5));
  for (auto m : {Modality::kEyes, Modality::kLightbar, Modality::kArm}) {
    SyntheticWorld w(m, 3, SyntheticConfig{});
    for (std::uint64_t s = 0; s < 50; ++s) {
      const auto x = w.mutate(w.random_action(s), 1.0, s + 1000);
      REQUIRE(parse_action(serialize(x), m).ok());
    }
  }
}

TEST_CASE("synthetic designer plants the configured share of malformed outputs") {
  SyntheticConfig cfg;
  cfg.invalid_rate = 1.0 / 6.0;
  SyntheticWorld world(Modality::kLightbar, 7, cfg);
  SyntheticDesigner designer(world);
  Scenario sc{kSkeleton, 0, "go", {}};
  const auto out = designer.generate(sc, Modality::kLightbar, 6, 0);
  REQUIRE(out.size() == 6U);
  int bad = 0;
  for (const auto& t : out) bad += parse_action(t, Modality::kLightbar).ok() ? 0 : 1;
  CHECK(bad == 1);
  CHECK(designer.generate(sc, Modality::kLightbar, 6, 0) == out);
  CHECK(designer.mutation_scale(1) == doctest::Approx(cfg.mutation_scale));
  CHECK(designer.mutation_scale(3) == doctest::Approx(cfg.mutation_scale * cfg.mutation_decay * cfg.mutation_decay));
}

TEST_CASE("synthetic evaluator scores the target highest and is deterministic") {
  SyntheticWorld world(Modality::kEyes, 7, SyntheticConfig{});
  SyntheticEvaluator eval(world);
  SyntheticRenderer renderer;
  TokenOverlapJudge judge;
  Scenario sc{kSkeleton, 0, "the car will wait for you", {}};
  const auto score = [&](const ActionSequence& a) {
    world.register_action(a);
    const auto key = make_render_key(sc.skeleton, a, RenderProfile{});
    const auto clip = renderer.render(key, a, compile_timeline(a, key.fps));
    return kernel_score(evaluate_two_phase(eval, judge, sc, clip.clip_ref)).k;
  };
  const auto target = world.target(sc.id());
  const auto far = world.random_action(12345);
  CHECK(score(target) > score(far));
  CHECK(score(far) == score(far));
  CHECK(score(target) <= kKernelMax);
}
