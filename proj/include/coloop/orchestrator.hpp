#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "coloop/clients.hpp"
#include "coloop/config.hpp"
#include "coloop/synthetic.hpp"
#include "coloop/workspace.hpp"

namespace coloop {

struct RoundPlan {
  int round = 0;
  bool bootstrap = false;  // round over an empty db: every scenario, all fully evaluated
  std::vector<std::string> scenarios;
  std::size_t candidates_per_scenario = 6;
  std::size_t stage1_keep = 2;
  bool staged_eval = false;
  bool uncertainty_gating = false;
  bool cache_reuse = true;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static RoundPlan from_json(const nlohmann::json& j);
  friend bool operator==(const RoundPlan&, const RoundPlan&) = default;
};

/// Exact event counts of one scenario within a round.
struct ScenarioTally {
  std::size_t generated = 0;
  std::size_t format_errors = 0;
  std::map<std::string, std::size_t> format_error_breakdown;
  std::size_t duplicates = 0;
  std::size_t stage1_only = 0;
  std::size_t fully_evaluated = 0;
  std::size_t render_requests = 0;
  std::size_t cache_hits = 0;
  std::size_t renderer_calls = 0;
  std::size_t uncertain = 0;
  std::vector<double> k_values;
  std::vector<double> k_mixed;
  std::optional<double> diversity;
  std::vector<std::string> render_keys;

  nlohmann::json to_json() const;
  static ScenarioTally from_json(const nlohmann::json& j);
};

struct RoundReport {
  int round = 0;
  bool bootstrap = false;
  bool staged = false;
  bool uncertainty_active = false;
  std::size_t scenarios = 0;
  std::size_t generated = 0;
  std::size_t format_errors = 0;
  double format_error_pct = 0.0;
  std::map<std::string, std::size_t> format_error_breakdown;
  std::size_t duplicates = 0;
  std::size_t discarded = 0;  // format errors + duplicates
  std::size_t stage1_only = 0;
  std::size_t fully_evaluated = 0;
  std::size_t full_eval_calls = 0;  // one per candidate sent through both evaluation phases
  std::optional<double> mean_k;
  std::optional<double> median_k;
  std::optional<double> mean_k_mixed;
  std::optional<double> diversity;  // mean over scenarios with at least two valid candidates
  std::size_t render_requests = 0;
  std::size_t cache_hits = 0;
  std::size_t renderer_calls = 0;
  double cache_hit_rate = 0.0;
  std::size_t uncertain = 0;
  std::size_t pair_count = 0;
  std::size_t human_queue_depth = 0;
  std::vector<std::string> exports;

  nlohmann::json to_json() const;
  static RoundReport from_json(const nlohmann::json& j);
};

/// Indices of the min(q, n) highest light scores, ties to the lower index;
/// returned in ascending index order.
std::vector<std::size_t> staged_admit(const std::vector<double>& light_scores, std::size_t q);

struct Clients {
  DesignerClient& designer;
  RendererClient& renderer;
  EvaluatorClient& evaluator;
  const SimilarityJudge& judge;
  LightScorer* light = nullptr;  // required for staged evaluation
};

/// Owns the clients selected by a configuration: HTTP where a URL is set,
/// synthetic otherwise. The light scorer is the fitted preference model when
/// one exists for the modality, else the synthetic pre-filter when the
/// evaluator is synthetic.
struct ClientBundle {
  std::unique_ptr<SyntheticWorld> world;
  std::unique_ptr<DesignerClient> designer;
  std::unique_ptr<RendererClient> renderer;
  std::unique_ptr<EvaluatorClient> evaluator;
  std::unique_ptr<LightScorer> light;
  TokenOverlapJudge judge;

  Clients view() { return {*designer, *renderer, *evaluator, judge, light.get()}; }
};
std::unique_ptr<ClientBundle> make_clients(const Config& config, const std::optional<HpmModel>& model);

struct RoundOptions {
  std::optional<double> sample_ratio;
  std::optional<SamplingMode> sampling;
  std::optional<bool> staged_eval;
  std::optional<bool> uncertainty_gating;
  std::optional<std::size_t> stage1_keep;
};

/// Called before each stage of each scenario ("generate", "validate",
/// "light", "render", "evaluate", "commit"); throwing aborts the round.
using StageHook = std::function<void(std::string_view stage, const std::string& scenario_id)>;

class Orchestrator {
 public:
  Orchestrator(Workspace& ws, Clients clients);

  /// Plan of the next round: the unfinished one if a checkpoint exists,
  /// otherwise a fresh sample (or the bootstrap round on an empty db).
  RoundPlan next_plan(const RoundOptions& options = {}) const;
  std::optional<RoundPlan> pending_plan() const;

  /// Runs (or resumes) the round. Each scenario commits atomically to the
  /// round manifest, so an aborted round resumes to an identical report.
  RoundReport run_round(const RoundPlan& plan, const StageHook& hook = {});
  RoundReport run_next(const RoundOptions& options = {}, const StageHook& hook = {});

 private:
  ScenarioTally process_scenario(const RoundPlan& plan, const Scenario& scenario, RenderCache& cache,
                                 const StageHook& hook);
  RoundReport finalize(const RoundPlan& plan, const std::map<std::string, ScenarioTally>& tallies,
                       const RenderCache& cache);

  Workspace& ws_;
  Clients clients_;
};

struct ReplayResult {
  std::size_t requests = 0;
  std::size_t unique_keys = 0;
  std::size_t hits = 0;
  double hit_rate = 0.0;
};

/// Re-issues every render request of a completed round against a fresh cache.
ReplayResult replay_round_renders(const Workspace& ws, int round, RendererClient& renderer);

struct SimulateOptions {
  int rounds = 3;
  std::uint64_t seed = 7;
  std::size_t scenarios = 60;
  std::size_t messages_per_skeleton = 3;
  Config config;  // seed is overwritten by `seed`
  std::optional<std::filesystem::path> workspace;  // temporary directory when empty
};

struct SimulateResult {
  std::filesystem::path workspace;
  std::vector<RoundReport> reports;  // baseline first
};

/// Synthetic closed loop: bootstrap round plus `rounds` sampled rounds.
SimulateResult simulate(const SimulateOptions& options);

}  // namespace coloop
