#include "coloop/orchestrator.hpp"

#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <numeric>
#include <set>

#include "coloop/common.hpp"
#include "coloop/parallel.hpp"

namespace coloop {

namespace fs = std::filesystem;

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<double>();
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::optional<double> median_of(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string disagreement_key(const std::string& scenario, const std::string& action_ref) {
  return scenario + "|" + action_ref;
}

}  // namespace

// ---------------------------------------------------------------- plan / report

void RoundPlan::validate() const {
  if (round < 0) throw ConfigError("round numbers start at 0");
  if (candidates_per_scenario < 1) throw ConfigError("candidates_per_scenario must be at least 1");
  if (stage1_keep < 1 || stage1_keep > candidates_per_scenario) {
    throw ConfigError("stage1_keep must lie in [1, candidates_per_scenario]");
  }
  std::set<std::string> seen;
  for (const auto& s : scenarios) {
    if (!seen.insert(s).second) throw ConfigError("scenario " + s + " appears twice in the plan");
  }
}

nlohmann::json RoundPlan::to_json() const {
  return {{"round", round},
          {"bootstrap", bootstrap},
          {"scenarios", scenarios},
          {"candidates_per_scenario", candidates_per_scenario},
          {"stage1_keep", stage1_keep},
          {"staged_eval", staged_eval},
          {"uncertainty_gating", uncertainty_gating},
          {"cache_reuse", cache_reuse}};
}

RoundPlan RoundPlan::from_json(const nlohmann::json& j) {
  RoundPlan p;
  p.round = j.at("round").get<int>();
  p.bootstrap = j.at("bootstrap").get<bool>();
  p.scenarios = j.at("scenarios").get<std::vector<std::string>>();
  p.candidates_per_scenario = j.at("candidates_per_scenario").get<std::size_t>();
  p.stage1_keep = j.at("stage1_keep").get<std::size_t>();
  p.staged_eval = j.at("staged_eval").get<bool>();
  p.uncertainty_gating = j.at("uncertainty_gating").get<bool>();
  p.cache_reuse = j.at("cache_reuse").get<bool>();
  return p;
}

nlohmann::json ScenarioTally::to_json() const {
  return {{"generated", generated},
          {"format_errors", format_errors},
          {"format_error_breakdown", format_error_breakdown},
          {"duplicates", duplicates},
          {"stage1_only", stage1_only},
          {"fully_evaluated", fully_evaluated},
          {"render_requests", render_requests},
          {"cache_hits", cache_hits},
          {"renderer_calls", renderer_calls},
          {"uncertain", uncertain},
          {"k_values", k_values},
          {"k_mixed", k_mixed},
          {"diversity", optional_json(diversity)},
          {"render_keys", render_keys}};
}

ScenarioTally ScenarioTally::from_json(const nlohmann::json& j) {
  ScenarioTally t;
  t.generated = j.at("generated").get<std::size_t>();
  t.format_errors = j.at("format_errors").get<std::size_t>();
  t.format_error_breakdown = j.at("format_error_breakdown").get<std::map<std::string, std::size_t>>();
  t.duplicates = j.at("duplicates").get<std::size_t>();
  t.stage1_only = j.at("stage1_only").get<std::size_t>();
  t.fully_evaluated = j.at("fully_evaluated").get<std::size_t>();
  t.render_requests = j.at("render_requests").get<std::size_t>();
  t.cache_hits = j.at("cache_hits").get<std::size_t>();
  t.renderer_calls = j.at("renderer_calls").get<std::size_t>();
  t.uncertain = j.at("uncertain").get<std::size_t>();
  t.k_values = j.at("k_values").get<std::vector<double>>();
  t.k_mixed = j.at("k_mixed").get<std::vector<double>>();
  t.diversity = optional_from(j, "diversity");
  t.render_keys = j.at("render_keys").get<std::vector<std::string>>();
  return t;
}

nlohmann::json RoundReport::to_json() const {
  return {{"round", round},
          {"bootstrap", bootstrap},
          {"staged", staged},
          {"uncertainty_active", uncertainty_active},
          {"scenarios", scenarios},
          {"generated", generated},
          {"format_errors", format_errors},
          {"format_error_pct", format_error_pct},
          {"format_error_breakdown", format_error_breakdown},
          {"duplicates", duplicates},
          {"discarded", discarded},
          {"stage1_only", stage1_only},
          {"fully_evaluated", fully_evaluated},
          {"full_eval_calls", full_eval_calls},
          {"mean_k", optional_json(mean_k)},
          {"median_k", optional_json(median_k)},
          {"mean_k_mixed", optional_json(mean_k_mixed)},
          {"diversity", optional_json(diversity)},
          {"render_requests", render_requests},
          {"cache_hits", cache_hits},
          {"renderer_calls", renderer_calls},
          {"cache_hit_rate", cache_hit_rate},
          {"uncertain", uncertain},
          {"pair_count", pair_count},
          {"human_queue_depth", human_queue_depth},
          {"exports", exports}};
}

RoundReport RoundReport::from_json(const nlohmann::json& j) {
  RoundReport r;
  r.round = j.at("round").get<int>();
  r.bootstrap = j.at("bootstrap").get<bool>();
  r.staged = j.at("staged").get<bool>();
  r.uncertainty_active = j.at("uncertainty_active").get<bool>();
  r.scenarios = j.at("scenarios").get<std::size_t>();
  r.generated = j.at("generated").get<std::size_t>();
  r.format_errors = j.at("format_errors").get<std::size_t>();
  r.format_error_pct = j.at("format_error_pct").get<double>();
  r.format_error_breakdown = j.at("format_error_breakdown").get<std::map<std::string, std::size_t>>();
  r.duplicates = j.at("duplicates").get<std::size_t>();
  r.discarded = j.at("discarded").get<std::size_t>();
  r.stage1_only = j.at("stage1_only").get<std::size_t>();
  r.fully_evaluated = j.at("fully_evaluated").get<std::size_t>();
  r.full_eval_calls = j.at("full_eval_calls").get<std::size_t>();
  r.mean_k = optional_from(j, "mean_k");
  r.median_k = optional_from(j, "median_k");
  r.mean_k_mixed = optional_from(j, "mean_k_mixed");
  r.diversity = optional_from(j, "diversity");
  r.render_requests = j.at("render_requests").get<std::size_t>();
  r.cache_hits = j.at("cache_hits").get<std::size_t>();
  r.renderer_calls = j.at("renderer_calls").get<std::size_t>();
  r.cache_hit_rate = j.at("cache_hit_rate").get<double>();
  r.uncertain = j.at("uncertain").get<std::size_t>();
  r.pair_count = j.at("pair_count").get<std::size_t>();
  r.human_queue_depth = j.at("human_queue_depth").get<std::size_t>();
  r.exports = j.at("exports").get<std::vector<std::string>>();
  return r;
}

std::vector<std::size_t> staged_admit(const std::vector<double>& light_scores, std::size_t q) {
  std::vector<std::size_t> order(light_scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return light_scores[a] > light_scores[b]; });
  order.resize(std::min(q, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------- clients

std::unique_ptr<ClientBundle> make_clients(const Config& config, const std::optional<HpmModel>& model) {
  auto b = std::make_unique<ClientBundle>();
  b->world = std::make_unique<SyntheticWorld>(config.modality, config.seed, config.synthetic);
  if (config.designer_url.empty()) {
    b->designer = std::make_unique<SyntheticDesigner>(*b->world);
  } else {
    b->designer = std::make_unique<HttpDesignerClient>(HttpEndpoint{config.designer_url, "/generate"}, config.retry);
  }
  if (config.renderer_url.empty()) {
    b->renderer = std::make_unique<SyntheticRenderer>();
  } else {
    b->renderer = std::make_unique<HttpRendererClient>(HttpEndpoint{config.renderer_url, "/render"}, config.retry);
  }
  if (config.evaluator_url.empty()) {
    b->evaluator = std::make_unique<SyntheticEvaluator>(*b->world);
  } else {
    b->evaluator = std::make_unique<HttpEvaluatorClient>(HttpEndpoint{config.evaluator_url, "/evaluate"}, config.retry);
  }
  if (model && model->modality == config.modality) {
    b->light = std::make_unique<HpmLightScorer>(*model);
  } else if (config.evaluator_url.empty()) {
    b->light = std::make_unique<SyntheticLightScorer>(*b->world);
  }
  return b;
}

// ---------------------------------------------------------------- orchestrator

Orchestrator::Orchestrator(Workspace& ws, Clients clients) : ws_(ws), clients_(clients) {}

std::optional<RoundPlan> Orchestrator::pending_plan() const {
  const int n = ws_.completed_rounds();
  if (!fs::exists(ws_.manifest_path(n))) return std::nullopt;
  return RoundPlan::from_json(read_json(ws_.manifest_path(n)).at("plan"));
}

RoundPlan Orchestrator::next_plan(const RoundOptions& options) const {
  if (auto pending = pending_plan()) return *pending;
  const auto& cfg = ws_.config();
  RoundPlan plan;
  plan.round = ws_.completed_rounds();
  plan.candidates_per_scenario = cfg.candidates_per_scenario;
  plan.stage1_keep = options.stage1_keep.value_or(cfg.stage1_keep);
  plan.cache_reuse = cfg.cache_reuse;
  if (ws_.db().empty()) {
    plan.bootstrap = true;
    for (const auto& s : ws_.catalog().scenarios()) plan.scenarios.push_back(s.id());
  } else {
    plan.staged_eval = options.staged_eval.value_or(cfg.staged_eval);
    plan.uncertainty_gating = options.uncertainty_gating.value_or(cfg.uncertainty_gating);
    const double ratio = options.sample_ratio.value_or(cfg.sample_ratio);
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("sample ratio must lie in (0, 1]");
    const auto report = importance_scores(ws_.db().all_stats());
    plan.scenarios = sample_scenarios(report, ratio, derive_seed(cfg.seed, "sample|r" + std::to_string(plan.round)),
                                      options.sampling.value_or(cfg.sampling));
  }
  if (plan.scenarios.empty()) throw ConfigError("the catalog has no scenarios");
  plan.validate();
  return plan;
}

RoundReport Orchestrator::run_next(const RoundOptions& options, const StageHook& hook) {
  return run_round(next_plan(options), hook);
}

ScenarioTally Orchestrator::process_scenario(const RoundPlan& plan, const Scenario& scenario, RenderCache& cache,
                                             const StageHook& hook) {
  const auto& cfg = ws_.config();
  const auto sid = scenario.id();
  auto stage = [&](std::string_view name) {
    if (hook) hook(name, sid);
  };
  ScenarioTally t;

  stage("generate");
  const auto texts = clients_.designer.generate(scenario, cfg.modality, plan.candidates_per_scenario, plan.round);
  if (texts.size() != plan.candidates_per_scenario) {
    throw ServiceError("designer returned " + std::to_string(texts.size()) + " outputs for " + sid + ", expected " +
                       std::to_string(plan.candidates_per_scenario));
  }
  t.generated = texts.size();

  stage("validate");
  std::vector<ActionSequence> valid;
  std::set<std::string> hashes;
  for (const auto& text : texts) {
    auto outcome = parse_action(text, cfg.modality);
    if (!outcome) {
      ++t.format_errors;
      ++t.format_error_breakdown[std::string(to_string(outcome.error().category))];
      continue;
    }
    if (!hashes.insert(action_hash(outcome.value())).second) {
      ++t.duplicates;
      continue;
    }
    valid.push_back(std::move(outcome.value()));
  }
  if (valid.size() >= 2) t.diversity = diversity(valid, cfg.vlm_profile.fps);

  std::vector<std::size_t> admitted(valid.size());
  std::iota(admitted.begin(), admitted.end(), 0);
  if (plan.staged_eval && !plan.bootstrap) {
    stage("light");
    if (clients_.light == nullptr) throw ConfigError("staged evaluation needs a light scorer (fit the preference model)");
    std::vector<double> light;
    for (const auto& a : valid) light.push_back(clients_.light->score(scenario, a));
    admitted = staged_admit(light, plan.stage1_keep);
  }
  t.stage1_only = valid.size() - admitted.size();

  stage("render");
  std::vector<RenderKey> keys;
  for (auto i : admitted) keys.push_back(make_render_key(scenario.skeleton, valid[i], cfg.vlm_profile));
  std::vector<std::optional<RenderedClip>> clips(keys.size());
  std::vector<std::size_t> misses;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    t.render_keys.push_back(keys[i].str());
    ++t.render_requests;
    if (plan.cache_reuse) {
      if (auto hit = cache.get(keys[i].str())) {
        clips[i] = std::move(hit);
        ++t.cache_hits;
        continue;
      }
    }
    misses.push_back(i);
  }
  auto rendered = bounded_parallel_map(misses.size(), cfg.renderer_parallelism, [&](std::size_t m) {
    const auto i = misses[m];
    const auto& action = valid[admitted[i]];
    const auto timeline = compile_timeline(action, keys[i].fps);
    RenderedClip clip;
    with_retries(cfg.retry, "render " + keys[i].str(),
                 [&] { clip = clients_.renderer.render(keys[i], action, timeline); });
    if (clip.clip_ref.empty()) throw ServiceError("renderer returned an empty clip reference");
    return clip;
  });
  t.renderer_calls = misses.size();

  stage("evaluate");
  auto scores = bounded_parallel_map(keys.size(), cfg.evaluator_parallelism, [&](std::size_t i) {
    const auto& clip = clips[i] ? *clips[i] : rendered[static_cast<std::size_t>(
                                                  std::find(misses.begin(), misses.end(), i) - misses.begin())];
    return evaluate_two_phase(clients_.evaluator, clients_.judge, scenario, clip.clip_ref);
  });
  t.fully_evaluated = keys.size();

  std::vector<DbRecord> records;
  std::vector<DisagreementRecord> disagreements;
  std::vector<QueueItem> queue_items;
  const auto& model = ws_.model();
  const bool gating = plan.uncertainty_gating && !plan.bootstrap && model && model->modality == cfg.modality;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const auto& action = valid[admitted[i]];
    auto rec = make_record(sid, cfg.model_tag, plan.round, action, scores[i], keys[i].str());
    t.k_values.push_back(rec.k);
    if (gating) {
      const double k_hpm = predict(*model, featurize(scenario.skeleton, action));
      rec.k_hpm = k_hpm;
      t.k_mixed.push_back(mixed_score(rec.k, k_hpm, cfg.mixed).k);
      auto d = make_disagreement(sid, rec.action_hash(), rec.k, k_hpm, cfg.mixed);
      if (d.uncertain) {
        ++t.uncertain;
        QueueItem q;
        q.scenario_id = sid;
        q.action_ref = d.action_ref;
        q.clip_key = make_render_key(scenario.skeleton, action, cfg.human_profile).str();
        q.k_vlm = d.k_vlm;
        q.k_hpm = d.k_hpm;
        q.abs_delta = d.abs_delta;
        queue_items.push_back(std::move(q));
      }
      disagreements.push_back(std::move(d));
    }
    records.push_back(std::move(rec));
  }

  stage("commit");
  // Every step here is idempotent, so a scenario interrupted mid-commit is
  // simply processed again on resume.
  if (plan.cache_reuse) {
    for (std::size_t m = 0; m < misses.size(); ++m) cache.put(keys[misses[m]].str(), rendered[m]);
  }
  for (auto& r : records) ws_.db().append(std::move(r));
  if (!disagreements.empty()) {
    std::set<std::string> logged;
    for (const auto& d : ws_.disagreements().snapshot()) logged.insert(disagreement_key(d.scenario_id, d.action_ref));
    for (auto& d : disagreements) {
      if (logged.insert(disagreement_key(d.scenario_id, d.action_ref)).second) ws_.disagreements().append(std::move(d));
    }
    ws_.save_disagreements();
  }
  if (!queue_items.empty()) {
    for (auto& q : queue_items) ws_.queue().push(std::move(q));
    ws_.save_queue();
  }
  return t;
}

RoundReport Orchestrator::run_round(const RoundPlan& plan, const StageHook& hook) {
  plan.validate();
  const auto& cfg = ws_.config();
  if (plan.round != ws_.completed_rounds()) {
    throw ConfigError("round " + std::to_string(plan.round) + " is not the next round (" +
                      std::to_string(ws_.completed_rounds()) + ")");
  }
  const auto manifest_path = ws_.manifest_path(plan.round);
  nlohmann::json manifest;
  RenderCache cache(cfg.cache_budget_bytes);
  std::map<std::string, ScenarioTally> tallies;
  if (fs::exists(manifest_path)) {
    manifest = read_json(manifest_path);
    if (RoundPlan::from_json(manifest.at("plan")) != plan) {
      throw ConfigError("round " + std::to_string(plan.round) + " was started with a different plan; resume it first");
    }
    cache = RenderCache::from_json(manifest.at("cache"), cfg.cache_budget_bytes);
    for (const auto& [sid, t] : manifest.at("completed").items()) tallies.emplace(sid, ScenarioTally::from_json(t));
  } else {
    cache = ws_.load_cache();
    manifest = {{"plan", plan.to_json()},
                {"status", "running"},
                {"completed", nlohmann::json::object()},
                {"cache", cache.to_json()}};
    write_json_atomic(manifest_path, manifest);
  }

  // The designer learns only from rounds that finished before this one, so a
  // resumed round sees the same elites as an uninterrupted one.
  std::vector<DbRecord> history;
  for (auto& r : ws_.db().records()) {
    if (r.round < plan.round) history.push_back(std::move(r));
  }
  clients_.designer.observe_pairs(build_pairs(history, cfg.pairs), plan.round);

  for (const auto& sid : plan.scenarios) {
    if (tallies.count(sid) != 0U) continue;
    const auto* scenario = ws_.catalog().find(sid);
    if (scenario == nullptr) throw NotFoundError("scenario " + sid + " is not in the catalog");
    auto tally = process_scenario(plan, *scenario, cache, hook);
    manifest["completed"][sid] = tally.to_json();
    manifest["cache"] = cache.to_json();
    write_json_atomic(manifest_path, manifest);
    tallies.emplace(sid, std::move(tally));
  }
  return finalize(plan, tallies, cache);
}

RoundReport Orchestrator::finalize(const RoundPlan& plan, const std::map<std::string, ScenarioTally>& tallies,
                                   const RenderCache& cache) {
  const auto& cfg = ws_.config();
  RoundReport r;
  r.round = plan.round;
  r.bootstrap = plan.bootstrap;
  r.staged = plan.staged_eval && !plan.bootstrap;
  r.uncertainty_active =
      plan.uncertainty_gating && !plan.bootstrap && ws_.model() && ws_.model()->modality == cfg.modality;
  r.scenarios = plan.scenarios.size();
  std::vector<double> ks;
  std::vector<double> mixed;
  std::vector<double> div;
  for (const auto& sid : plan.scenarios) {
    const auto& t = tallies.at(sid);
    r.generated += t.generated;
    r.format_errors += t.format_errors;
    for (const auto& [cat, n] : t.format_error_breakdown) r.format_error_breakdown[cat] += n;
    r.duplicates += t.duplicates;
    r.stage1_only += t.stage1_only;
    r.fully_evaluated += t.fully_evaluated;
    r.render_requests += t.render_requests;
    r.cache_hits += t.cache_hits;
    r.renderer_calls += t.renderer_calls;
    r.uncertain += t.uncertain;
    ks.insert(ks.end(), t.k_values.begin(), t.k_values.end());
    mixed.insert(mixed.end(), t.k_mixed.begin(), t.k_mixed.end());
    if (t.diversity) div.push_back(*t.diversity);
  }
  r.discarded = r.format_errors + r.duplicates;
  r.full_eval_calls = r.fully_evaluated;
  r.format_error_pct = r.generated == 0 ? 0.0 : format_error_rate(r.format_errors, r.generated);
  r.mean_k = mean_of(ks);
  r.median_k = median_of(ks);
  r.mean_k_mixed = mean_of(mixed);
  r.diversity = mean_of(div);
  r.cache_hit_rate =
      r.render_requests == 0 ? 0.0 : static_cast<double>(r.cache_hits) / static_cast<double>(r.render_requests);

  const auto pairs = build_pairs(ws_.db(), cfg.pairs);
  r.pair_count = pairs.size();
  r.human_queue_depth = ws_.queue().size();
  if (!pairs.empty()) {
    const auto dir = ws_.exports_dir(plan.round);
    const auto dpo = export_dpo(pairs, &ws_.catalog(), dir);
    const auto sft = export_sft(best_per_scenario(ws_.db()), &ws_.catalog(), dir);
    for (const auto& p : {dpo.train_path, dpo.test_path, sft.train_path, sft.test_path}) {
      r.exports.push_back(fs::relative(p, ws_.root()).string());
    }
  }

  ws_.db().checkpoint();
  ws_.save_cache(cache);
  write_json_atomic(ws_.report_path(plan.round), r.to_json());
  auto manifest = read_json(ws_.manifest_path(plan.round));
  manifest["status"] = "done";
  write_json_atomic(ws_.manifest_path(plan.round), manifest);
  return r;
}

// ---------------------------------------------------------------- replay

ReplayResult replay_round_renders(const Workspace& ws, int round, RendererClient& renderer) {
  const auto manifest = read_json(ws.manifest_path(round));
  const auto plan = RoundPlan::from_json(manifest.at("plan"));
  RenderCache cache(std::numeric_limits<std::size_t>::max());
  ReplayResult out;
  std::set<std::string> unique;
  for (const auto& sid : plan.scenarios) {
    const auto tally = ScenarioTally::from_json(manifest.at("completed").at(sid));
    for (const auto& k : tally.render_keys) {
      const auto key = RenderKey::parse(k);
      const auto rec = ws.db().find(sid, key.timeline_hash);
      if (!rec) throw NotFoundError("no stored action for render key " + k);
      const auto outcome = render_or_reuse(key, rec->action, cache, renderer, ws.config().retry);
      ++out.requests;
      if (outcome.hit) ++out.hits;
      unique.insert(k);
    }
  }
  out.unique_keys = unique.size();
  out.hit_rate = out.requests == 0 ? 0.0 : static_cast<double>(out.hits) / static_cast<double>(out.requests);
  return out;
}

// ---------------------------------------------------------------- simulate

SimulateResult simulate(const SimulateOptions& options) {
  if (options.rounds < 0) throw ConfigError("rounds must be non-negative");
  SimulateResult result;
  if (options.workspace) {
    result.workspace = *options.workspace;
  } else {
    auto tmpl = (fs::temp_directory_path() / "coloop-sim-XXXXXX").string();
    if (mkdtemp(tmpl.data()) == nullptr) throw IoError("cannot create a temporary workspace");
    result.workspace = tmpl;
  }
  Config cfg = options.config;
  cfg.seed = options.seed;
  auto ws = Workspace::create(result.workspace, cfg,
                              make_synthetic_catalog(FactorConfig{}, options.scenarios, options.messages_per_skeleton));
  auto clients = make_clients(ws.config(), ws.model());
  Orchestrator orch(ws, clients->view());
  for (int i = 0; i <= options.rounds; ++i) result.reports.push_back(orch.run_next());
  return result;
}

}  // namespace coloop
