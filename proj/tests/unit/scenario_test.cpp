#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "coloop/common.hpp"
#include "coloop/scenario.hpp"

using namespace coloop;

TEST_CASE("default factor space has 6912 skeletons in safety-fastest order") {
  const auto all = enumerate_scenarios(FactorConfig{});
  CHECK(all.size() == 4U * 2U * 3U * 8U * 12U * 3U);
  CHECK(all.size() == 6912U);
  CHECK(enumerate_scenarios(FactorConfig::full()).size() == 4U * 2U * 4U * 8U * 12U * 3U);
  CHECK(all[0].safety == Safety::kCritical);
  CHECK(all[1].safety == Safety::kModerate);
  CHECK(all[3].direction == 2);
  std::set<std::string> ids;
  for (const auto& s : all) ids.insert(s.id());
  CHECK(ids.size() == all.size());
}

TEST_CASE("restricted factors shrink the product") {
  FactorConfig f;
  f.receivers = {Receiver::kPedestrian};
  f.directions = {12};
  CHECK(enumerate_scenarios(f).size() == 4U * 2U * 1U * 8U * 1U * 3U);
  f.safety.clear();
  CHECK_THROWS_AS(enumerate_scenarios(f), ConfigError);
}

TEST_CASE("factor config reads wire names and rejects unknown ones") {
  const auto f = FactorConfig::from_json({{"receiver", {"pedestrian", "cyclist"}}, {"direction", {3}}});
  CHECK(f.receivers.size() == 2U);
  CHECK(f.directions == std::vector<int>{3});
  CHECK(f.emitters.size() == 2U);
  CHECK_THROWS_AS(FactorConfig::from_json({{"receiver", {"horse"}}}), ConfigError);
}

TEST_CASE("scenario ids round-trip") {
  for (const auto& s : enumerate_scenarios(FactorConfig{})) {
    REQUIRE(ScenarioSkeleton::from_id(s.id()) == s);
  }
  Scenario sc{enumerate_scenarios(FactorConfig{})[17], 2, "go ahead", {}};
  const auto [sk, idx] = parse_scenario_id(sc.id());
  CHECK(sk == sc.skeleton);
  CHECK(idx == 2);
  CHECK_THROWS_AS(parse_scenario_id("nonsense#m1"), ValidationError);
  CHECK_THROWS_AS(parse_scenario_id(sc.skeleton.id() + "#mx"), ValidationError);
}

TEST_CASE("distance bands partition the range") {
  CHECK(safety_for_distance(0.0) == Safety::kCritical);
  CHECK(safety_for_distance(4.99) == Safety::kCritical);
  CHECK(safety_for_distance(5.0) == Safety::kModerate);
  CHECK(safety_for_distance(10.0) == Safety::kRoutine);
  CHECK(std::isinf(distance_band(Safety::kRoutine).max_m));
  CHECK(distance_band_index(Safety::kCritical) == 1);
  CHECK(distance_band_index(Safety::kRoutine) == 3);
}

namespace {

std::vector<EmbeddedItem> points(const std::vector<double>& xs) {
  std::vector<EmbeddedItem> out;
  for (double x : xs) {
    std::ostringstream id;
    id << x;
    out.push_back({id.str(), {x}});
  }
  return out;
}

double min_pairwise(const std::vector<std::vector<double>>& v) {
  double best = INFINITY;
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t j = i + 1; j < v.size(); ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < v[i].size(); ++d) s += (v[i][d] - v[j][d]) * (v[i][d] - v[j][d]);
      best = std::min(best, std::sqrt(s));
    }
  }
  return best;
}

}  // namespace

TEST_CASE("farthest point sampling on a line keeps the spread-out points") {
  const auto kept = farthest_point_sample(points({0, 1, 2, 10}), 0.7);
  CHECK(kept == std::vector<std::string>{"0", "2", "10"});
  CHECK(farthest_point_sample(points({0, 1, 2, 10}), 1.0).size() == 4U);
  CHECK(farthest_point_sample({}, 0.7).empty());
}

TEST_CASE("farthest point sampling beats a random subset on minimum spacing") {
  std::vector<double> fps_min;
  std::vector<double> rnd_min;
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
    std::normal_distribution<double> g;
    std::vector<EmbeddedItem> items;
    for (int i = 0; i < 100; ++i) {
      std::vector<double> v(8);
      double norm = 0.0;
      for (auto& x : v) {
        x = g(rng);
        norm += x * x;
      }
      for (auto& x : v) x /= std::sqrt(norm);
      items.push_back({std::to_string(i), v});
    }
    const auto kept = farthest_point_sample(items, 0.7);
    REQUIRE(kept.size() == 70U);
    std::vector<std::vector<double>> sel;
    for (const auto& id : kept) sel.push_back(items[static_cast<std::size_t>(std::stoi(id))].vector);
    fps_min.push_back(min_pairwise(sel));
    std::vector<std::size_t> idx(100);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<double>> rsel;
    for (std::size_t i = 0; i < 70; ++i) rsel.push_back(items[idx[i]].vector);
    rnd_min.push_back(min_pairwise(rsel));
  }
  std::sort(fps_min.begin(), fps_min.end());
  std::sort(rnd_min.begin(), rnd_min.end());
  CHECK(fps_min[25] >= rnd_min[25]);
}

TEST_CASE("hash embeddings are deterministic and unit norm") {
  HashEmbeddingProvider p(16, 3);
  const auto a = p.embed("yield to the pedestrian");
  const auto b = p.embed("yield to the pedestrian");
  CHECK(a == b);
  double norm = 0.0;
  for (double x : a) norm += x * x;
  CHECK(norm == doctest::Approx(1.0));
  CHECK(p.embed("something else") != a);
  const auto all = embed_all(p, {"one", "two", "three"}, 2);
  REQUIRE(all.size() == 3U);
  CHECK(all[1] == p.embed("two"));
}

TEST_CASE("catalog ingest assigns message indices and reports rejections") {
  auto skeletons = enumerate_scenarios(FactorConfig{});
  skeletons.resize(2);
  ScenarioCatalog cat(skeletons);
  std::istringstream in(
      "{\"scenario_id\": \"" + skeletons[0].id() + "\", \"text\": \"please cross\"}\n" +
      "{\"scenario_id\": \"" + skeletons[0].id() + "\", \"text\": \"wait here\"}\n" +
      "{\"scenario_id\": \"unknown.x\", \"text\": \"hi\"}\n" +
      "not json\n" +
      "{\"scenario_id\": \"" + skeletons[1].id() + "#m4\", \"text\": \"slowing down\"}\n");
  const auto rep = cat.ingest_jsonl(in);
  CHECK(rep.accepted == 3U);
  REQUIRE(rep.rejections.size() == 2U);
  CHECK(rep.rejections[0].line == 3U);
  CHECK(rep.rejections[1].line == 4U);
  REQUIRE(cat.find(skeletons[0].id() + "#m1") != nullptr);
  CHECK(cat.find(skeletons[0].id() + "#m1")->intended_message == "wait here");
  CHECK(cat.find(skeletons[1].id() + "#m4") != nullptr);

  const auto dup = cat.ingest({{skeletons[1].id() + "#m4", "again"}});
  CHECK(dup.accepted == 0U);
  CHECK(dup.rejections.size() == 1U);

  const auto restored = ScenarioCatalog::from_json(cat.to_json());
  CHECK(restored.scenarios().size() == cat.scenarios().size());
  CHECK(restored.find(skeletons[0].id() + "#m0")->intended_message == "please cross");
}

TEST_CASE("deduplication keeps the farthest-point share of messages") {
  auto skeletons = enumerate_scenarios(FactorConfig{});
  skeletons.resize(10);
  ScenarioCatalog cat(skeletons);
  cat.ingest_synthetic(3);
  REQUIRE(cat.scenarios().size() == 30U);
  cat.embed(HashEmbeddingProvider(16, 1));
  CHECK(cat.deduplicate(0.7, DedupScope::kGlobal) == 21U);
  CHECK(cat.scenarios().size() == 21U);

  ScenarioCatalog per(skeletons);
  per.ingest_synthetic(3);
  per.embed(HashEmbeddingProvider(16, 1));
  // ceil(0.7 * 3) = 3 per skeleton: nothing is dropped.
  CHECK(per.deduplicate(0.7, DedupScope::kPerScenario) == 30U);
}

TEST_CASE("synthetic messages are deterministic per index") {
  const auto s = enumerate_scenarios(FactorConfig{})[100];
  CHECK(synthetic_message(s, 0) == synthetic_message(s, 0));
  CHECK(synthetic_message(s, 0) != synthetic_message(s, 1));
  CHECK_FALSE(describe(s).empty());
}
