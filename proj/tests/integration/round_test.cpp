#include <doctest.h>

#include <mutex>
#include <set>

#include "test_support.hpp"
#include "workspace_fixture.hpp"

using namespace coloop;
using coloop::testing::run_one;
using coloop::testing::TempDir;

namespace {

Workspace fresh(const std::filesystem::path& root, std::size_t scenarios, Config cfg = {}) {
  return Workspace::create(root, cfg, make_synthetic_catalog(FactorConfig{}, scenarios, 1));
}

void check_conservation(const RoundReport& r) {
  CHECK(r.discarded == r.format_errors + r.duplicates);
  CHECK(r.generated == r.discarded + r.stage1_only + r.fully_evaluated);
  std::size_t breakdown = 0;
  for (const auto& [category, n] : r.format_error_breakdown) breakdown += n;
  CHECK(breakdown == r.format_errors);
}

struct Interrupt : std::runtime_error {
  Interrupt() : std::runtime_error("interrupted") {}
};

}  // namespace

TEST_CASE("bootstrap round evaluates every candidate of every scenario") {
  TempDir dir;
  Config cfg;
  cfg.synthetic.invalid_rate = 0.0;
  auto ws = fresh(dir / "ws", 10, cfg);
  const auto r = run_one(ws);
  CHECK(r.bootstrap);
  CHECK(r.scenarios == 10U);
  CHECK(r.generated == 60U);
  CHECK(r.format_errors == 0U);
  CHECK(r.stage1_only == 0U);
  CHECK(r.full_eval_calls == r.fully_evaluated);
  CHECK(ws.db().scenario_ids().size() == 10U);
  check_conservation(r);
}

TEST_CASE("planted malformed outputs are counted exactly") {
  TempDir dir;
  Config cfg;
  cfg.synthetic.invalid_rate = 1.0 / 6.0;
  auto ws = fresh(dir / "ws", 12, cfg);
  const auto r = run_one(ws);
  CHECK(r.format_errors == 12U);
  CHECK(r.format_error_pct == doctest::Approx(100.0 * 12.0 / 72.0).epsilon(1e-12));
  check_conservation(r);
}

TEST_CASE("an interrupted round resumes to the uninterrupted report") {
  TempDir dir;
  Config cfg;
  cfg.sample_ratio = 0.5;
  auto straight = fresh(dir / "a", 12, cfg);
  auto broken = fresh(dir / "b", 12, cfg);
  run_one(straight);
  run_one(broken);
  const auto expected = run_one(straight);

  std::mutex mu;
  std::set<std::string> started;
  const StageHook hook = [&](std::string_view stage, const std::string& sid) {
    std::lock_guard lock(mu);
    if (stage == "generate") started.insert(sid);
    if (stage == "evaluate" && started.size() >= 3) throw Interrupt();
  };
  {
    auto clients = make_clients(broken.config(), broken.model());
    Orchestrator orch(broken, clients->view());
    CHECK_THROWS_AS(orch.run_next({}, hook), Interrupt);
    REQUIRE(orch.pending_plan().has_value());
  }
  auto reopened = Workspace::open(dir / "b");
  CHECK(reopened.completed_rounds() == 1);
  const auto resumed = run_one(reopened);
  CHECK(resumed.to_json() == expected.to_json());
  CHECK(reopened.db().size() == straight.db().size());
  check_conservation(resumed);
}

TEST_CASE("staged evaluation sends exactly q candidates per scenario through both phases") {
  TempDir dir;
  Config cfg;
  cfg.synthetic.invalid_rate = 0.0;
  cfg.sample_ratio = 1.0;
  cfg.stage1_keep = 2;
  auto ws = fresh(dir / "ws", 8, cfg);
  run_one(ws);
  RoundOptions staged;
  staged.staged_eval = true;
  const auto r = run_one(ws, staged);
  CHECK(r.staged);
  CHECK(r.scenarios == 8U);
  CHECK(r.full_eval_calls == 2U * 8U);
  CHECK(r.fully_evaluated == 2U * 8U);
  CHECK(r.stage1_only + r.duplicates == 4U * 8U);
  check_conservation(r);
}

TEST_CASE("replaying a round's renders hits the cache for every repeated key") {
  TempDir dir;
  auto ws = fresh(dir / "ws", 6);
  run_one(ws);
  for (int round = 0; round < 1; ++round) {
    SyntheticRenderer renderer;
    const auto replay = replay_round_renders(ws, round, renderer);
    REQUIRE(replay.requests > 0U);
    CHECK(renderer.calls() == replay.unique_keys);
    CHECK(replay.hits == replay.requests - replay.unique_keys);
    CHECK(replay.hit_rate ==
          doctest::Approx(1.0 - static_cast<double>(replay.unique_keys) / static_cast<double>(replay.requests)));
  }
  SyntheticRenderer renderer;
  CHECK_THROWS(replay_round_renders(ws, 5, renderer));
}

TEST_CASE("uncertain candidates are queued once each") {
  TempDir dir;
  auto ws = coloop::testing::gated_workspace(dir / "ws", 6);
  const auto report = RoundReport::from_json(read_json(ws.report_path(1)));
  CHECK(report.uncertainty_active);
  CHECK(report.uncertain == report.fully_evaluated);
  CHECK(ws.queue().size() == report.uncertain);
  std::set<std::string> keys;
  for (const auto& q : ws.queue().peek(1000)) keys.insert(q.key());
  CHECK(keys.size() == ws.queue().size());

  RoundOptions gated;
  gated.uncertainty_gating = true;
  const auto next = run_one(ws, gated);
  CHECK(ws.queue().size() == report.uncertain + next.uncertain);
}

TEST_CASE("gating without a model runs the round ungated and says so") {
  TempDir dir;
  auto ws = fresh(dir / "ws", 4);
  run_one(ws);
  RoundOptions gated;
  gated.uncertainty_gating = true;
  const auto r = run_one(ws, gated);
  CHECK_FALSE(r.uncertainty_active);
  CHECK(r.uncertain == 0U);
  CHECK(ws.queue().size() == 0U);
}

TEST_CASE("simulate keeps every round consistent") {
  TempDir dir;
  SimulateOptions opt;
  opt.rounds = 2;
  opt.scenarios = 12;
  opt.workspace = dir / "sim";
  const auto res = simulate(opt);
  REQUIRE(res.reports.size() == 3U);
  for (const auto& r : res.reports) check_conservation(r);
  auto ws = Workspace::open(dir / "sim");
  CHECK(ws.completed_rounds() == 3);
  for (int round = 1; round <= 2; ++round) CHECK(std::filesystem::exists(ws.exports_dir(round)));
}
