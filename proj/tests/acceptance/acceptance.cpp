// Acceptance suite: one PASS/FAIL line per primary criterion. Exits non-zero
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "coloop/action.hpp"
#include "coloop/common.hpp"
#include "coloop/evaluation.hpp"
#include "coloop/hpm.hpp"
#include "coloop/optimizer.hpp"
#include "coloop/orchestrator.hpp"
#include "coloop/scenario.hpp"
#include "coloop/workspace.hpp"
#include "test_support.hpp"

using namespace coloop;
namespace ts = coloop::testing;

namespace {

/// Collects failed expectations of one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  void note(const std::string& s) { notes_ += (notes_.empty() ? "" : "; ") + s; }

  bool ok() const { return failed_ == 0; }
  std::string summary() const {
    std::ostringstream os;
    if (ok()) {
      os << total_ << " checks";
    } else {
      os << failed_ << " of " << total_ << " checks failed:";
      for (const auto& f : failures_) os << " [" << f << "]";
    }
    if (!notes_.empty()) os << "; " << notes_;
    return os.str();
  }

 private:
  std::size_t total_ = 0;
  std::size_t failed_ = 0;
  std::vector<std::string> failures_;
  std::string notes_;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

bool rel_close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

// ---------------------------------------------------------------- criteria

void kernel_arithmetic(Check& c) {
  for (const auto& row : ts::reported_rows()) {
    const double by_hand = (row.k - (row.acceptance + row.consistency + row.targeting + row.trust)) / row.s_norm;
    const double kappa =
        implied_certainty(row.k, row.acceptance, row.consistency, row.targeting, row.trust, row.s_norm);
    const std::string tag = std::string(row.modality) + "/" + row.source;
    c.expect(std::abs(kappa - by_hand) < 1e-12, tag + " implied certainty " + fmt(kappa));
    c.expect(kappa >= 1.0 && kappa <= 9.0, tag + " certainty " + fmt(kappa) + " outside 1..9");
    EvalScores s;
    s.certainty = kappa;
    s.similarity_raw = row.s_norm * 9.0;
    s.targeting = row.targeting;
    s.trust = row.trust;
    s.acceptance = row.acceptance;
    s.consistency = row.consistency;
    c.expect(std::abs(kernel_score(s).k - row.k) < 1e-9, tag + " kernel score does not reproduce K");
  }
  const std::map<std::string, double> spot = {{"lightbar", 7.013}, {"eyes", 6.694}, {"arm", 6.717}};
  for (const auto& row : ts::reported_rows()) {
    if (std::string(row.source) != "designer-7b") continue;
    const double kappa =
        implied_certainty(row.k, row.acceptance, row.consistency, row.targeting, row.trust, row.s_norm);
    c.expect(std::abs(kappa - spot.at(row.modality)) <= 0.01,
             std::string(row.modality) + " spot value " + fmt(kappa));
    c.note(std::string(row.modality) + " " + fmt(kappa, 4));
  }
}

void scenario_combinatorics(Check& c) {
  const auto skeletons = enumerate_scenarios(FactorConfig{});
  c.expect(skeletons.size() == 6912U, "skeleton count " + std::to_string(skeletons.size()));
  std::set<std::string> ids;
  for (const auto& s : skeletons) ids.insert(s.id());
  c.expect(ids.size() == skeletons.size(), "skeleton ids not unique");
  ScenarioCatalog catalog(skeletons);
  const auto rep = catalog.ingest_synthetic(3);
  c.expect(rep.accepted == 20736U, "message count " + std::to_string(rep.accepted));
  std::set<std::string> sids;
  for (const auto& s : catalog.scenarios()) sids.insert(s.id());
  c.expect(sids.size() == 20736U, "scenario-message ids " + std::to_string(sids.size()));
}

std::map<std::string, ScenarioStats> fuzz_stats(std::mt19937_64& rng) {
  std::map<std::string, ScenarioStats> stats;
  const int n = ts::uniform_int(rng, 2, 15);
  for (int i = 0; i < n; ++i) {
    const double worst = ts::uniform(rng, kKernelMin, 40.0);
    const double best = ts::uniform(rng, worst, kKernelMax);
    stats["s" + std::to_string(i)] = {best, worst, static_cast<std::size_t>(ts::uniform_int(rng, 1, 60))};
  }
  return stats;
}

void importance_oracle(Check& c) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto stats = fuzz_stats(rng);
    const auto rep = importance_scores(stats);
    const auto ref = ts::oracle::importance_raw(stats);
    for (const auto& [id, v] : ref) {
      const double got = rep.raw.at(id);
      c.expect(std::abs(got - v) <= 1e-12 * std::max(std::abs(v), 1e-300) || got == v,
               "trial " + std::to_string(trial) + " " + id + ": " + fmt(got, 17) + " vs " + fmt(v, 17));
    }
  }

  // A reference scenario holds the largest spread so that dK_max stays fixed.
  const ScenarioStats reference{kKernelMax, kKernelMin, 6};
  const auto raw_of = [&](const ScenarioStats& s) {
    return importance_scores({{"ref", reference}, {"x", s}}).raw.at("x");
  };
  int trials = 0;
  for (; trials < 1000; ++trials) {
    const double worst = ts::uniform(rng, 6.0, 30.0);
    const double best = ts::uniform(rng, worst + 1.0, std::min(42.0, worst + 30.0));
    const auto count = static_cast<std::size_t>(ts::uniform_int(rng, 6, 60));
    const ScenarioStats base{best, worst, count};
    const double i0 = raw_of(base);
    const double step = ts::uniform(rng, 0.05, 1.0);
    const std::string t = "trial " + std::to_string(trials);
    c.expect(raw_of({best + step, worst, count}) < i0, t + ": raising K_best did not lower I");
    c.expect(raw_of({best, worst - step, count}) < i0, t + ": widening dK at fixed K_best did not lower I");
    c.expect(raw_of({best, worst + std::min(step, (best - worst) / 2), count}) > i0,
             t + ": raising K_worst did not raise I");
    c.expect(rel_close(raw_of({best, worst, count + 6}), i0 / 2.0, 1e-12), t + ": six more samples did not halve I");
  }
  c.note("200 oracle sets, " + std::to_string(trials) + " perturbation trials");
}

void pair_oracle(Check& c) {
  std::mt19937_64 rng(13);
  PairConfig cfg;
  cfg.delta_min = 4.0;
  cfg.extras_keep = 0.3;
  std::size_t total_pairs = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<DbRecord> records;
    std::uint64_t t = 1;
    const int scenarios = ts::uniform_int(rng, 1, 5);
    std::vector<int> remaining(static_cast<std::size_t>(scenarios));
    for (auto& r : remaining) r = ts::uniform_int(rng, 1, 10);
    // Interleave scenarios so creation order is not grouped by scenario.
    for (bool any = true; any;) {
      any = false;
      for (int s = 0; s < scenarios; ++s) {
        if (remaining[static_cast<std::size_t>(s)]-- <= 0) continue;
        any = true;
        const double k = ts::uniform_int(rng, 20, 80) * 0.5;
        auto rec = ts::record_with_k("s" + std::to_string(s), k, static_cast<std::size_t>(t));
        rec.created_at = t++;
        records.push_back(rec);
      }
    }
    const auto got = build_pairs(records, cfg);
    const auto want = ts::oracle::pairs(records, 4.0, 30);
    std::vector<ts::oracle::PairKey> keys;
    for (const auto& p : got) {
      keys.emplace_back(p.scenario_id, p.chosen.created_at, p.rejected.created_at,
                        p.origin == PairOrigin::kMaxMin ? 0 : 1);
      c.expect(p.gap >= 4.0, "pair below the gap threshold");
    }
    c.expect(keys == want, "trial " + std::to_string(trial) + ": " + std::to_string(keys.size()) + " pairs vs " +
                               std::to_string(want.size()) + " expected");
    total_pairs += want.size();
  }
  c.note(std::to_string(total_pairs) + " pairs compared");
}

void closed_loop_trend(Check& c) {
  ts::TempDir dir;
  SimulateOptions opt;
  opt.rounds = 3;
  opt.seed = 7;
  opt.workspace = dir / "sim";
  const auto res = simulate(opt);
  c.expect(res.reports.size() == 4U, "expected baseline plus 3 rounds");
  std::vector<double> means;
  for (const auto& r : res.reports) {
    c.expect(r.mean_k.has_value(), "round " + std::to_string(r.round) + " has no mean K");
    means.push_back(r.mean_k.value_or(0.0));
  }
  std::string trace;
  for (std::size_t i = 0; i < means.size(); ++i) {
    trace += (i ? " -> " : "") + fmt(means[i], 5);
    if (i > 0) c.expect(means[i] >= means[i - 1], "mean K fell in round " + std::to_string(i));
  }
  if (!means.empty()) c.expect(means.back() - means.front() >= 1.0, "gain " + fmt(means.back() - means.front()));
  c.note("mean K " + trace);
}

void staged_economics(Check& c) {
  ts::TempDir dir;
  Config cfg;
  cfg.stage1_keep = 2;
  auto ws = Workspace::create(dir / "ws", cfg, make_synthetic_catalog(FactorConfig{}, 60, 3));
  const auto run = [&](const RoundOptions& o) {
    auto clients = make_clients(ws.config(), ws.model());
    Orchestrator orch(ws, clients->view());
    return orch.run_next(o);
  };
  run({});
  RoundOptions staged;
  staged.staged_eval = true;
  std::size_t staged_calls = 0;
  std::size_t staged_scenarios = 0;
  for (int i = 0; i < 3; ++i) {
    const auto r = run(staged);
    c.expect(r.staged, "round not staged");
    c.expect(r.full_eval_calls == 2U * r.scenarios, "round " + std::to_string(r.round) + ": " +
                                                        std::to_string(r.full_eval_calls) + " full evals for " +
                                                        std::to_string(r.scenarios) + " scenarios");
    c.expect(r.generated == r.format_errors + r.duplicates + r.stage1_only + r.fully_evaluated, "conservation");
    staged_calls += r.full_eval_calls;
    staged_scenarios += r.scenarios;
  }
  const auto unstaged = run({});
  c.note(fmt(static_cast<double>(staged_calls) / static_cast<double>(staged_scenarios), 3) +
         " full evals per scenario staged vs " +
         fmt(static_cast<double>(unstaged.full_eval_calls) / static_cast<double>(unstaged.scenarios), 3) +
         " unstaged");

  // Replay: count requests and distinct keys from the manifests directly.
  for (int round = 0; round < ws.completed_rounds(); ++round) {
    const auto manifest = read_json(ws.manifest_path(round));
    std::size_t requests = 0;
    std::set<std::string> unique;
    for (const auto& [sid, tally] : manifest.at("completed").items()) {
      for (const auto& k : tally.at("render_keys")) {
        ++requests;
        unique.insert(k.get<std::string>());
      }
    }
    SyntheticRenderer renderer;
    const auto replay = replay_round_renders(ws, round, renderer);
    const std::string t = "round " + std::to_string(round);
    c.expect(replay.requests == requests, t + " request count");
    c.expect(replay.unique_keys == unique.size(), t + " unique keys");
    c.expect(renderer.calls() == unique.size(), t + " renderer calls");
    // Exact in counts; the rate itself may differ from 1 - unique/requests in the last bit.
    c.expect(replay.hits == requests - unique.size(), t + " hits");
    const double expected = 1.0 - static_cast<double>(unique.size()) / static_cast<double>(requests);
    c.expect(std::abs(replay.hit_rate - expected) <= 1e-15, t + " hit rate " + fmt(replay.hit_rate, 17));
    if (round == 0) c.note("round 0 replay hit rate " + fmt(replay.hit_rate, 4));
  }
}

void format_handling(Check& c) {
  const auto corpus = ts::load_corpus();
  std::vector<ParseOutcome> outcomes;
  std::size_t invalid = 0;
  std::set<std::string> categories;
  for (const auto& e : corpus) {
    const auto o = parse_action(ts::read_file(e.path), e.modality);
    const std::string got = o.ok() ? "ok" : std::string(to_string(o.error().category));
    c.expect(got == e.expected, e.path.filename().string() + ": " + got + " vs " + e.expected);
    if (e.expected != "ok") {
      ++invalid;
      categories.insert(e.expected);
    }
    outcomes.push_back(o);
  }
  c.expect(corpus.size() == 26U && invalid == 19U, "corpus size changed");
  for (const char* required : {"bad-bitstring", "off-grid-transition", "range-violation"}) {
    c.expect(categories.count(required) == 1U, std::string("corpus lacks ") + required);
  }
  const double rate = format_error_rate(outcomes);
  c.expect(rate == 100.0 * 19.0 / 26.0, "format error rate " + fmt(rate, 17));
  c.note(std::to_string(invalid) + " of " + std::to_string(corpus.size()) + " rejected, rate " + fmt(rate, 6) + "%");
}

bool frame_ok(const State& s, const ArmLimits& limits) {
  if (const auto* e = std::get_if<EyeState>(&s)) {
    return e->angle >= 0.0 && e->angle <= 360.0 && e->radius >= 0.0 && e->radius <= 1.0;
  }
  if (const auto* l = std::get_if<LightbarState>(&s)) {
    for (auto r : l->regions) {
      if (r > 1) return false;
    }
    return true;
  }
  const auto& a = std::get<ArmState>(s);
  for (std::size_t j = 0; j < kArmJoints; ++j) {
    if (a.joints[j] < limits.ranges[j].min_deg || a.joints[j] > limits.ranges[j].max_deg) return false;
  }
  return true;
}

/// Distance between two states written from the state definitions.
double frame_distance(const State& x, const State& y, const ArmLimits& limits) {
  if (const auto* a = std::get_if<EyeState>(&x)) {
    const auto& b = std::get<EyeState>(y);
    // Chord between the two polar points (law of cosines) plus the radius change.
    const double d = (a->angle - b.angle) * M_PI / 180.0;
    const double chord =
        std::sqrt(std::max(0.0, a->radius * a->radius + b.radius * b.radius - 2.0 * a->radius * b.radius * std::cos(d)));
    return chord + std::abs(a->radius - b.radius);
  }
  if (const auto* a = std::get_if<LightbarState>(&x)) {
    const auto& b = std::get<LightbarState>(y);
    double n = 0.0;
    for (std::size_t i = 0; i < a->regions.size(); ++i) n += a->regions[i] != b.regions[i] ? 1.0 : 0.0;
    return n;
  }
  const auto& a = std::get<ArmState>(x);
  const auto& b = std::get<ArmState>(y);
  double s = 0.0;
  for (std::size_t j = 0; j < kArmJoints; ++j) {
    const double span = limits.ranges[j].max_deg - limits.ranges[j].min_deg;
    const double d = (a.joints[j] - b.joints[j]) / span;
    s += d * d;
  }
  return std::sqrt(s);
}

double brute_distance(const Timeline& a, const Timeline& b, const ArmLimits& limits) {
  const std::size_t n = std::max(a.frames.size(), b.frames.size());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& fa = a.frames[std::min(i, a.frames.size() - 1)];
    const auto& fb = b.frames[std::min(i, b.frames.size() - 1)];
    s += frame_distance(fa, fb, limits);
  }
  return s / static_cast<double>(n);
}

void timeline_and_diversity(Check& c) {
  std::mt19937_64 rng(17);
  const ArmLimits limits;
  std::size_t frames = 0;
  for (auto m : {Modality::kEyes, Modality::kLightbar, Modality::kArm}) {
    for (int i = 0; i < 300; ++i) {
      const auto seq = ts::random_sequence(m, rng);
      const auto tl = compile_timeline(seq, 4.0);
      c.expect(!tl.frames.empty(), "empty timeline");
      for (const auto& f : tl.frames) c.expect(frame_ok(f, limits), "frame outside the state bounds");
      frames += tl.frames.size();
    }
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<ActionSequence> set;
      const int n = ts::uniform_int(rng, 2, 6);
      for (int i = 0; i < n; ++i) set.push_back(ts::random_sequence(m, rng));
      std::vector<Timeline> tls;
      for (const auto& s : set) tls.push_back(compile_timeline(s, 4.0));
      double sum = 0.0;
      double pairs = 0.0;
      for (std::size_t i = 0; i < tls.size(); ++i) {
        for (std::size_t j = i + 1; j < tls.size(); ++j) {
          sum += brute_distance(tls[i], tls[j], limits);
          pairs += 1.0;
          c.expect(std::abs(timeline_distance(tls[i], tls[j]) - timeline_distance(tls[j], tls[i])) < 1e-12,
                   "asymmetric timeline distance");
        }
      }
      const double div = diversity(set, 4.0);
      c.expect(std::abs(div - sum / pairs) < 1e-9, "diversity " + fmt(div, 12) + " vs " + fmt(sum / pairs, 12));
      auto reversed = set;
      std::reverse(reversed.begin(), reversed.end());
      c.expect(std::abs(diversity(reversed, 4.0) - div) < 1e-12, "diversity depends on candidate order");
      const std::vector<ActionSequence> same(static_cast<std::size_t>(n), set.front());
      c.expect(diversity(same, 4.0) == 0.0, "identical candidates have non-zero diversity");
    }
  }
  c.note(std::to_string(frames) + " frames checked");
}

void hpm_and_reliability(Check& c) {
  std::mt19937_64 rng(19);
  const std::size_t d = 8;
  std::vector<double> w;
  for (std::size_t j = 0; j < d; ++j) w.push_back(ts::uniform(rng, -2.0, 2.0));
  std::vector<FeatureVector> xs;
  std::vector<double> ys;
  for (int i = 0; i < 300; ++i) {
    FeatureVector f;
    for (std::size_t j = 0; j + 1 < d; ++j) f.values.push_back(ts::uniform(rng, -3.0, 3.0));
    f.values.push_back(1.0);
    double y = 0.0;
    for (std::size_t j = 0; j < d; ++j) y += w[j] * f.values[j];
    xs.push_back(f);
    ys.push_back(y);
  }
  const auto raw = fit(xs, ys, 1e-8).raw_weights();
  double worst = 0.0;
  for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(raw[j] - w[j]));
  c.expect(worst <= 1e-4, "weight error " + fmt(worst));
  c.note("max weight error " + fmt(worst, 3));

  for (const auto& m : ts::oracle::reliability_matrices()) {
    const auto r = reliability(m);
    const double alpha = ts::oracle::cronbach_alpha(m);
    const double icc = ts::oracle::icc_2_1(m);
    c.expect(std::abs(r.cronbach_alpha - alpha) <= 1e-9, "alpha " + fmt(r.cronbach_alpha, 12) + " vs " + fmt(alpha, 12));
    c.expect(std::abs(r.icc_2_1 - icc) <= 1e-9, "icc " + fmt(r.icc_2_1, 12) + " vs " + fmt(icc, 12));
  }
}

void export_determinism(Check& c) {
  const auto skeletons = enumerate_scenarios(FactorConfig{});
  for (std::size_t n : {10U, 100U}) {
    std::vector<DbRecord> records;
    std::uint64_t t = 1;
    for (std::size_t s = 0; s < n; ++s) {
      const auto sid = skeletons[s * 61 % skeletons.size()].id() + "#m0";
      for (double k : {36.0, 29.5, 21.0}) {
        auto r = ts::record_with_k(sid, k, static_cast<std::size_t>(t));
        r.created_at = t++;
        records.push_back(r);
      }
    }
    std::vector<std::string> files[2];
    ExportResult sft[2];
    ExportResult dpo[2];
    ts::TempDir dirs[2];
    for (int run = 0; run < 2; ++run) {
      std::map<std::string, DbRecord> best;
      for (const auto& r : records) {
        auto it = best.find(r.scenario_id);
        if (it == best.end() || r.k > it->second.k) best[r.scenario_id] = r;
      }
      std::vector<DbRecord> best_list;
      for (const auto& [id, r] : best) best_list.push_back(r);
      sft[run] = export_sft(best_list, nullptr, dirs[run] / "sft");
      dpo[run] = export_dpo(build_pairs(records, PairConfig{}), nullptr, dirs[run] / "dpo");
      for (const auto* res : {&sft[run], &dpo[run]}) {
        files[run].push_back(ts::read_file(res->train_path));
        files[run].push_back(ts::read_file(res->test_path));
      }
    }
    const std::string tag = std::to_string(n) + " scenarios";
    c.expect(files[0] == files[1], tag + ": exports differ between runs");
    const std::size_t train = n * 8 / 10;
    for (const auto* res : {&sft[0], &dpo[0]}) {
      c.expect(res->train_scenarios == train && res->test_scenarios == n - train,
               tag + ": split " + std::to_string(res->train_scenarios) + "/" + std::to_string(res->test_scenarios));
    }
    c.expect(ts::count_lines(sft[0].train_path) == train, tag + ": sft train lines");
  }
}

struct Criterion {
  const char* name;
  double budget_s;
  std::function<void(Check&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"kernel-score-arithmetic", 1.0, kernel_arithmetic},
      {"scenario-combinatorics", 1.0, scenario_combinatorics},
      {"importance-oracle", 5.0, importance_oracle},
      {"pair-oracle", 5.0, pair_oracle},
      {"closed-loop-trend", 60.0, closed_loop_trend},
      {"staged-evaluation-economics", 0.0, staged_economics},
      {"format-handling", 0.0, format_handling},
      {"timeline-and-diversity", 0.0, timeline_and_diversity},
      {"hpm-and-reliability", 0.0, hpm_and_reliability},
      {"export-determinism", 0.0, export_determinism},
  };
  int failed = 0;
  for (const auto& crit : criteria) {
    Check check;
    const auto start = std::chrono::steady_clock::now();
    try {
      crit.run(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (crit.budget_s > 0.0) check.expect(secs < crit.budget_s, "runtime budget " + fmt(crit.budget_s) + " s exceeded");
    const bool ok = check.ok();
    failed += ok ? 0 : 1;
    std::cout << (ok ? "PASS " : "FAIL ") << crit.name << " (" << std::fixed << std::setprecision(3) << secs
              << " s) " << std::defaultfloat << check.summary() << '\n';
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
