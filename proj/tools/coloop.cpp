// coloop: command-line driver for the co-learning engine.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "coloop/common.hpp"
#include "coloop/hpm.hpp"
#include "coloop/optimizer.hpp"
#include "coloop/orchestrator.hpp"
#include "coloop/service.hpp"
#include "coloop/workspace.hpp"

namespace fs = std::filesystem;
using namespace coloop;

namespace {

std::string default_workspace() {
  const char* env = std::getenv("COLOOP_WORKSPACE");
  return env != nullptr && *env != '\0' ? env : "coloop-ws";
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

int cmd_init(const std::string& root, const std::string& config_path, const std::string& modality,
             std::optional<std::uint64_t> seed, const std::string& messages, std::size_t per_skeleton,
             std::size_t limit, std::optional<double> dedup_ratio, const std::string& factors_path) {
  const FactorConfig factors = factors_path.empty() ? FactorConfig{} : FactorConfig::from_json(read_json(factors_path));
  Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
  if (!modality.empty()) cfg.modality = modality_from_string(modality);
  if (seed) cfg.seed = *seed;
  cfg.apply_env();

  ScenarioCatalog catalog = make_synthetic_catalog(factors, limit, per_skeleton);
  if (!messages.empty()) {
    // Real messages replace the synthetic ones.
    auto skeletons = catalog.skeletons();
    if (limit == 0) skeletons = enumerate_scenarios(factors);
    catalog = ScenarioCatalog(std::move(skeletons));
    std::ifstream in(messages);
    if (!in) throw IoError("cannot read " + messages);
    const auto report = catalog.ingest_jsonl(in);
    std::cerr << "ingested " << report.accepted << " messages, rejected " << report.rejections.size() << '\n';
    for (const auto& r : report.rejections) std::cerr << "  line " << r.line << ": " << r.reason << '\n';
  }
  if (dedup_ratio) {
    catalog.embed(HashEmbeddingProvider(16, cfg.seed));
    catalog.deduplicate(*dedup_ratio, DedupScope::kGlobal);
  }
  auto ws = Workspace::create(root, cfg, std::move(catalog));
  std::cout << "initialized " << root << ": " << ws.catalog().scenarios().size() << " scenarios, modality "
            << to_string(ws.config().modality) << '\n';
  return 0;
}

int cmd_round(const std::string& root, const RoundOptions& options) {
  auto ws = Workspace::open(root);
  auto clients = make_clients(ws.config(), ws.model());
  Orchestrator orch(ws, clients->view());
  print_json(orch.run_next(options).to_json());
  return 0;
}

int cmd_simulate(int rounds, std::uint64_t seed, std::size_t scenarios, double ratio, const std::string& modality,
                 const std::string& root, bool staged, const std::string& config_path) {
  SimulateOptions opt;
  if (!config_path.empty()) opt.config = Config::load(config_path);
  opt.rounds = rounds;
  opt.seed = seed;
  opt.scenarios = scenarios;
  opt.config.sample_ratio = ratio;
  opt.config.pairs.sample_ratio = ratio;
  opt.config.staged_eval = staged;
  if (!modality.empty()) opt.config.modality = modality_from_string(modality);
  opt.config.apply_env();
  if (!root.empty()) opt.workspace = root;
  const auto result = simulate(opt);
  for (const auto& r : result.reports) {
    std::cout << "round " << r.round << ": scenarios " << r.scenarios << ", generated " << r.generated
              << ", format errors " << r.format_error_pct << "%, full evals " << r.full_eval_calls << ", mean K "
              << (r.mean_k ? std::to_string(*r.mean_k) : "n/a") << ", diversity "
              << (r.diversity ? std::to_string(*r.diversity) : "n/a") << ", cache hit rate " << r.cache_hit_rate
              << ", pairs " << r.pair_count << '\n';
  }
  std::cout << "workspace: " << result.workspace.string() << '\n';
  return 0;
}

int cmd_export(const std::string& root, const std::string& mode, std::optional<double> delta_min,
               std::optional<double> extras, const std::string& scope, const std::string& out) {
  auto ws = Workspace::open(root);
  auto cfg = ws.config().pairs;
  if (delta_min) cfg.delta_min = *delta_min;
  if (extras) cfg.extras_keep = *extras;
  if (scope == "global") cfg.extras_scope = ExtrasScope::kGlobal;
  else if (scope == "per-scenario") cfg.extras_scope = ExtrasScope::kPerScenario;
  else if (!scope.empty()) throw ConfigError("unknown extras scope '" + scope + "'");
  ExportResult res;
  if (mode == "dpo") {
    res = export_dpo(build_pairs(ws.db(), cfg), &ws.catalog(), out);
  } else if (mode == "sft") {
    res = export_sft(best_per_scenario(ws.db()), &ws.catalog(), out);
  } else {
    throw ConfigError("unknown export mode '" + mode + "' (sft, dpo)");
  }
  print_json({{"train", res.train_path.string()},
              {"test", res.test_path.string()},
              {"train_records", res.train_records},
              {"test_records", res.test_records},
              {"train_scenarios", res.train_scenarios},
              {"test_scenarios", res.test_scenarios}});
  return 0;
}

int cmd_stats(const std::string& root) {
  auto ws = Workspace::open(root);
  const auto records = ws.db().records();
  double sum = 0.0;
  for (const auto& r : records) sum += r.k;
  const auto stats = ws.db().all_stats();
  double best = 0.0;
  for (const auto& [id, st] : stats) best += st.k_best;
  nlohmann::json top = nlohmann::json::array();
  if (!stats.empty()) {
    const auto imp = importance_scores(stats);
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [id, v] : imp.normalized) ranked.emplace_back(-v, id);
    std::sort(ranked.begin(), ranked.end());
    for (std::size_t i = 0; i < std::min<std::size_t>(5, ranked.size()); ++i) {
      top.push_back({{"scenario_id", ranked[i].second}, {"importance", -ranked[i].first}});
    }
  }
  print_json({{"modality", to_string(ws.config().modality)},
              {"catalog_scenarios", ws.catalog().scenarios().size()},
              {"completed_rounds", ws.completed_rounds()},
              {"records", records.size()},
              {"scenarios_scored", stats.size()},
              {"mean_k", records.empty() ? nlohmann::json() : nlohmann::json(sum / records.size())},
              {"mean_best_k", stats.empty() ? nlohmann::json() : nlohmann::json(best / stats.size())},
              {"pairs", build_pairs(ws.db(), ws.config().pairs).size()},
              {"human_queue_depth", ws.queue().size()},
              {"ratings_complete", ws.ratings().complete().size()},
              {"hpm_version", ws.model() ? nlohmann::json(ws.model()->version) : nlohmann::json()},
              {"top_importance", top}});
  return 0;
}

int cmd_validate(const std::string& file, const std::string& modality) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto outcome = parse_action(ss.str(), modality_from_string(modality));
  if (outcome) {
    std::cout << "ok: " << outcome.value().keyframes.size() << " keyframes, " << outcome.value().total_seconds()
              << " s\n";
    return 0;
  }
  std::cout << "invalid: " << to_string(outcome.error().category) << ": " << outcome.error().detail << '\n';
  return 1;
}

int cmd_hpm_fit(const std::string& root, std::optional<double> ridge) {
  auto ws = Workspace::open(root);
  const double lambda = ridge.value_or(ws.config().ridge);
  std::vector<FeatureVector> features;
  std::vector<double> targets;
  std::size_t skipped = 0;
  for (const auto& r : ws.ratings().complete()) {
    const auto rec = ws.db().find(r.scenario_id, r.action_ref);
    const auto* sc = ws.catalog().find(r.scenario_id);
    if (!rec || sc == nullptr || rec->action.modality != ws.config().modality) {
      ++skipped;
      continue;
    }
    features.push_back(featurize(sc->skeleton, rec->action));
    targets.push_back(human_target(r));
  }
  const int previous = ws.model() ? ws.model()->version : 0;
  auto model = fit(features, targets, lambda, previous);
  ws.set_model(model);
  print_json({{"version", model.version},
              {"ratings_used", features.size()},
              {"ratings_skipped", skipped},
              {"ridge", model.ridge},
              {"fingerprint", model.fingerprint}});
  return 0;
}

int cmd_hpm_stats(const std::string& root) {
  auto ws = Workspace::open(root);
  nlohmann::json rel = nlohmann::json::object();
  for (const char* metric : {"targeting", "trust", "perceived_safety", "mental_workload", "acceptance", "consistency"}) {
    try {
      const auto s = reliability(ws.ratings().matrix(metric));
      rel[metric] = {{"cronbach_alpha", s.cronbach_alpha}, {"icc_2_1", s.icc_2_1}, {"icc_2_k", s.icc_2_k}};
    } catch (const UndefinedInputError& e) {
      rel[metric] = {{"undefined", e.what()}};
    }
  }
  nlohmann::json model;
  if (ws.model()) model = {{"version", ws.model()->version}, {"ridge", ws.model()->ridge},
                           {"fingerprint", ws.model()->fingerprint}, {"modality", to_string(ws.model()->modality)}};
  print_json({{"ratings", ws.ratings().all().size()},
              {"ratings_complete", ws.ratings().complete().size()},
              {"queue_depth", ws.queue().size()},
              {"reliability", rel},
              {"model", model}});
  return 0;
}

int cmd_replay(const std::string& root, int round) {
  auto ws = Workspace::open(root);
  auto clients = make_clients(ws.config(), ws.model());
  const auto r = replay_round_renders(ws, round, *clients->renderer);
  print_json({{"requests", r.requests}, {"unique_keys", r.unique_keys}, {"hits", r.hits}, {"hit_rate", r.hit_rate}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coloop: co-learning engine for eHMI action design"};
  app.require_subcommand(1);
  std::string root = default_workspace();
  app.add_option("-w,--workspace", root, "Workspace directory (env COLOOP_WORKSPACE)");

  std::function<int()> run;

  auto* init = app.add_subcommand("init", "Create a workspace with a scenario catalog");
  std::string config_path;
  std::string init_modality;
  std::optional<std::uint64_t> init_seed;
  std::string messages;
  std::size_t per_skeleton = 3;
  std::size_t limit = 0;
  std::optional<double> dedup_ratio;
  std::string factors_path;
  init->add_option("--factors", factors_path, "JSON object of enabled values per factor")->check(CLI::ExistingFile);
  init->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  init->add_option("--modality", init_modality, "eyes, lightbar or arm");
  init->add_option("--seed", init_seed, "Random seed");
  init->add_option("--messages", messages, "JSONL file of {scenario_id, text}")->check(CLI::ExistingFile);
  init->add_option("--synthetic-messages", per_skeleton, "Synthetic messages per skeleton")->check(CLI::Range(1, 100));
  init->add_option("--limit", limit, "Keep at most this many scenarios (0 = all)");
  init->add_option("--dedup-ratio", dedup_ratio, "Farthest-point keep ratio for messages")->check(CLI::Range(0.0, 1.0));
  init->callback([&] {
    run = [&] {
      return cmd_init(root, config_path, init_modality, init_seed, messages, per_skeleton, limit, dedup_ratio, factors_path);
    };
  });

  auto* round = app.add_subcommand("round", "Run (or resume) the next co-learning round");
  RoundOptions round_opts;
  std::optional<double> ratio;
  std::optional<std::size_t> q;
  bool staged = false;
  bool uncertainty = false;
  bool top_k = false;
  round->add_option("--sample-ratio", ratio, "Share of scenarios to sample")->check(CLI::Range(0.0, 1.0));
  round->add_flag("--staged", staged, "Pre-filter candidates with the light scorer");
  round->add_option("--q", q, "Candidates passed to the full evaluator when staged");
  round->add_flag("--uncertainty", uncertainty, "Route VLM/HPM disagreements to the human queue");
  round->add_flag("--top-k", top_k, "Sample the highest-importance scenarios deterministically");
  round->callback([&] {
    round_opts.sample_ratio = ratio;
    if (staged) round_opts.staged_eval = true;
    if (uncertainty) round_opts.uncertainty_gating = true;
    if (top_k) round_opts.sampling = SamplingMode::kTopK;
    round_opts.stage1_keep = q;
    run = [&] { return cmd_round(root, round_opts); };
  });

  auto* sim = app.add_subcommand("simulate", "Synthetic closed loop: baseline plus N rounds");
  int rounds = 3;
  std::uint64_t seed = 7;
  std::size_t scenarios = 60;
  double sim_ratio = 0.2;
  std::string sim_modality;
  std::string sim_root;
  bool sim_staged = false;
  std::string sim_config;
  sim->add_option("--config", sim_config, "JSON config file")->check(CLI::ExistingFile);
  sim->add_option("--rounds", rounds, "Rounds after the baseline")->check(CLI::Range(0, 1000));
  sim->add_option("--seed", seed, "Random seed");
  sim->add_option("--scenarios", scenarios, "Scenario count (0 = full space)");
  sim->add_option("--ratio", sim_ratio, "Sample ratio per round")->check(CLI::Range(0.0, 1.0));
  sim->add_option("--modality", sim_modality, "eyes, lightbar or arm");
  sim->add_option("--out", sim_root, "Workspace directory (default: a new temporary directory)");
  sim->add_flag("--staged", sim_staged, "Use staged evaluation after the baseline");
  sim->callback([&] {
    run = [&] { return cmd_simulate(rounds, seed, scenarios, sim_ratio, sim_modality, sim_root, sim_staged, sim_config); };
  });

  auto* exp = app.add_subcommand("export-pairs", "Write SFT or DPO training files");
  std::string mode = "dpo";
  std::optional<double> delta_min;
  std::optional<double> extras;
  std::string scope;
  std::string out;
  exp->add_option("--mode", mode, "sft or dpo")->check(CLI::IsMember({"sft", "dpo"}));
  exp->add_option("--delta-min", delta_min, "Minimum kernel-score gap");
  exp->add_option("--extras", extras, "Share of extra high-gap pairs kept")->check(CLI::Range(0.0, 1.0));
  exp->add_option("--scope", scope, "per-scenario or global extras truncation");
  exp->add_option("--out", out, "Output directory")->required();
  exp->callback([&] { run = [&] { return cmd_export(root, mode, delta_min, extras, scope, out); }; });

  auto* st = app.add_subcommand("stats", "Summarize the workspace");
  st->callback([&] { run = [&] { return cmd_stats(root); }; });

  auto* srv = app.add_subcommand("serve", "Serve the rating endpoints");
  int port = 8080;
  std::string host = "127.0.0.1";
  srv->add_option("--port", port, "TCP port")->check(CLI::Range(1, 65535));
  srv->add_option("--host", host, "Bind address");
  srv->callback([&] {
    run = [&] {
      auto ws = Workspace::open(root);
      std::cerr << "serving " << root << " on " << host << ":" << port << '\n';
      serve(ws, host, port);
      return 0;
    };
  });

  auto* val = app.add_subcommand("validate", "Check one designer output against the action schema");
  std::string file;
  std::string val_modality;
  val->add_option("file", file, "Action document")->required()->check(CLI::ExistingFile);
  val->add_option("--modality", val_modality, "eyes, lightbar or arm")->required();
  val->callback([&] { run = [&] { return cmd_validate(file, val_modality); }; });

  auto* hpm = app.add_subcommand("hpm", "Human preference model");
  hpm->require_subcommand(1);
  auto* hfit = hpm->add_subcommand("fit", "Fit the model on completed ratings");
  std::optional<double> ridge;
  hfit->add_option("--ridge", ridge, "Ridge strength")->check(CLI::NonNegativeNumber);
  hfit->callback([&] { run = [&] { return cmd_hpm_fit(root, ridge); }; });
  auto* hstats = hpm->add_subcommand("stats", "Rating reliability and model status");
  hstats->callback([&] { run = [&] { return cmd_hpm_stats(root); }; });

  auto* rep = app.add_subcommand("replay-renders", "Replay a round's render requests on a fresh cache");
  int replay_round = 0;
  rep->add_option("--round", replay_round, "Round number")->required();
  rep->callback([&] { run = [&] { return cmd_replay(root, replay_round); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return run();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
