#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include <json.hpp>

#include "coloop/action.hpp"
#include "coloop/evaluation.hpp"
#include "coloop/optimizer.hpp"

namespace coloop {

struct RenderProfile {
  double fps = 4.0;
  int resolution = 512;
};

/// Knobs of the synthetic closed-loop harness.
struct SyntheticConfig {
  double invalid_rate = 1.0 / 6.0;  // share of designer outputs deliberately malformed
  double mutation_scale = 1.0;      // round-1 mutation strength; 0 freezes the designer
  double mutation_decay = 0.6;      // per-round multiplier on the mutation strength
  double noise = 0.25;              // uniform metric noise, Likert units
  double light_noise = 1.0;         // noise on the cheap pre-filter score, K units
};

/// Engine configuration. Read from a flat JSON object; absent keys keep their
/// defaults and unknown keys are ignored.
struct Config {
  Modality modality = Modality::kEyes;
  std::uint64_t seed = 7;

  std::size_t candidates_per_scenario = 6;
  std::size_t stage1_keep = 2;
  double sample_ratio = 0.2;
  SamplingMode sampling = SamplingMode::kWeighted;
  bool staged_eval = false;
  bool uncertainty_gating = false;
  bool cache_reuse = true;

  PairConfig pairs;
  MixedEvalConfig mixed;
  double ridge = 1.0;

  std::size_t evaluator_parallelism = 8;
  std::size_t renderer_parallelism = 16;
  std::size_t cache_budget_bytes = std::size_t{256} << 20;
  RenderProfile vlm_profile{4.0, 512};
  RenderProfile human_profile{12.0, 1080};

  // Empty URL: use the synthetic client.
  std::string designer_url;
  std::string renderer_url;
  std::string evaluator_url;
  std::string model_tag = "designer";
  RetryPolicy retry;

  SyntheticConfig synthetic;

  void validate() const;  // ConfigError
  nlohmann::json to_json() const;
  static Config from_json(const nlohmann::json& j);
  static Config load(const std::string& path);

  /// Applies COLOOP_* environment overrides (see README). The lookup is
  /// injectable for tests.
  void apply_env(const std::function<const char*(const char*)>& lookup = {});
};

}  // namespace coloop
