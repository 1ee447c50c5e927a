#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "coloop/action.hpp"
#include "coloop/clients.hpp"
#include "coloop/config.hpp"
#include "coloop/evaluation.hpp"

namespace coloop {

/// Shared state of the offline harness: a hidden target action per scenario
/// and a registry of every action the synthetic designer emitted, so that the
/// synthetic evaluator can resolve clip references back to timelines.
/// Everything is a pure function of (seed, ids); the registry is a cache.
class SyntheticWorld {
 public:
  SyntheticWorld(Modality modality, std::uint64_t seed, SyntheticConfig cfg, ArmLimits limits = {});

  Modality modality() const { return modality_; }
  std::uint64_t seed() const { return seed_; }
  const SyntheticConfig& config() const { return cfg_; }
  const ArmLimits& limits() const { return limits_; }

  /// Hidden target, seeded from the scenario id: a per-scenario perturbation
  /// of a prototype shared by every scenario with the same message type.
  ActionSequence target(const std::string& scenario_id) const;
  /// Frame-averaged distance to the target at 4 fps.
  double distance(const std::string& scenario_id, const ActionSequence& action) const;
  /// 1 at the target, falling linearly to 0 at the modality's reference distance.
  double closeness(const std::string& scenario_id, const ActionSequence& action) const;

  void register_action(const ActionSequence& action);
  std::optional<ActionSequence> resolve(const std::string& action_hash) const;

  /// Random valid action; keyframe count 2..5, transitions on the grid.
  ActionSequence random_action(std::uint64_t seed) const;
  /// Perturbs every parameter; scale 0 returns the input unchanged.
  ActionSequence mutate(const ActionSequence& base, double scale, std::uint64_t seed) const;

  double reference_distance() const;

 private:
  Modality modality_;
  std::uint64_t seed_;
  SyntheticConfig cfg_;
  ArmLimits limits_;
  mutable std::shared_mutex mu_;
  std::map<std::string, ActionSequence> registry_;
  mutable std::map<std::string, Timeline> target_timelines_;
};

/// Baseline (round 0, or no elite yet): random candidates shared by every
/// message of a scenario skeleton. Later rounds: mutations of the scenario's
/// elite (the chosen side of its max-min preference pair) and of the best
/// elite among scenarios of the same message type, with the mutation scale
/// decaying per round. A fixed share of outputs is corrupted.
class SyntheticDesigner final : public DesignerClient {
 public:
  explicit SyntheticDesigner(SyntheticWorld& world) : world_(world) {}
  std::vector<std::string> generate(const Scenario& scenario, Modality modality, std::size_t n, int round) override;
  void observe_pairs(const std::vector<PreferencePair>& pairs, int round) override;

  const std::map<std::string, ActionSequence>& elites() const { return elites_; }
  double mutation_scale(int round) const;

 private:
  SyntheticWorld& world_;
  std::map<std::string, ActionSequence> elites_;       // by scenario id
  std::map<std::string, ActionSequence> type_elites_;  // by message type
};

/// Deterministic clip token; byte size grows with frame count and resolution.
class SyntheticRenderer final : public RendererClient {
 public:
  RenderedClip render(const RenderKey& key, const ActionSequence& action, const Timeline& timeline) override;
  std::size_t calls() const { return calls_.load(); }

 private:
  std::atomic<std::size_t> calls_{0};
};

/// Scores each metric as 9 - 8 * clamp(d / d_ref, 0, 1) plus seeded uniform
/// noise, where d is the distance to the hidden target. The interpreted
/// message keeps a share of the intended message's words proportional to the
/// closeness. Noise is keyed by (scenario, action, metric), so the same clip
/// always receives the same scores.
class SyntheticEvaluator final : public EvaluatorClient {
 public:
  explicit SyntheticEvaluator(const SyntheticWorld& world) : world_(world) {}
  PhaseScores evaluate(const EvalRequest& request) override;
  CostClass cost_class() const override { return CostClass::kFull; }

 private:
  const SyntheticWorld& world_;
};

/// Cheap, noisier view of the same closeness, on the kernel scale.
class SyntheticLightScorer final : public LightScorer {
 public:
  explicit SyntheticLightScorer(const SyntheticWorld& world) : world_(world) {}
  double score(const Scenario& scenario, const ActionSequence& action) override;

 private:
  const SyntheticWorld& world_;
};

}  // namespace coloop
