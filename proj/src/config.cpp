#include "coloop/config.hpp"

#include <cstdlib>
#include <fstream>

#include "coloop/common.hpp"

namespace coloop {
namespace {

SamplingMode sampling_from_string(const std::string& s) {
  if (s == "weighted") return SamplingMode::kWeighted;
  if (s == "top-k") return SamplingMode::kTopK;
  throw ConfigError("unknown sampling mode '" + s + "' (weighted, top-k)");
}

std::string to_string(SamplingMode m) { return m == SamplingMode::kTopK ? "top-k" : "weighted"; }

ExtrasScope scope_from_string(const std::string& s) {
  if (s == "per-scenario") return ExtrasScope::kPerScenario;
  if (s == "global") return ExtrasScope::kGlobal;
  throw ConfigError("unknown extras scope '" + s + "' (per-scenario, global)");
}

std::string to_string(ExtrasScope s) { return s == ExtrasScope::kGlobal ? "global" : "per-scenario"; }

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

double parse_double(const char* name, const char* value) {
  char* end = nullptr;
  const double v = std::strtod(value, &end);
  if (end == value || *end != '\0') throw ConfigError(std::string(name) + ": not a number: " + value);
  return v;
}

std::size_t parse_count(const char* name, const char* value) {
  const double v = parse_double(name, value);
  if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
    throw ConfigError(std::string(name) + ": not a non-negative integer: " + value);
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

void Config::validate() const {
  if (candidates_per_scenario < 1) throw ConfigError("candidates_per_scenario must be at least 1");
  if (stage1_keep < 1 || stage1_keep > candidates_per_scenario) {
    throw ConfigError("stage1_keep must lie in [1, candidates_per_scenario]");
  }
  pairs.validate();
  mixed.validate();
  if (!(sample_ratio > 0.0 && sample_ratio <= 1.0)) throw ConfigError("sample_ratio must lie in (0, 1]");
  if (!(ridge >= 0.0)) throw ConfigError("ridge must be non-negative");
  if (evaluator_parallelism < 1 || renderer_parallelism < 1) throw ConfigError("parallelism must be at least 1");
  if (!(vlm_profile.fps > 0) || !(human_profile.fps > 0) || vlm_profile.resolution < 1 ||
      human_profile.resolution < 1) {
    throw ConfigError("render profiles need positive fps and resolution");
  }
  if (!(synthetic.invalid_rate >= 0.0 && synthetic.invalid_rate <= 1.0)) {
    throw ConfigError("synthetic invalid_rate must lie in [0, 1]");
  }
  if (synthetic.mutation_scale < 0.0 || synthetic.mutation_decay < 0.0 || synthetic.noise < 0.0 ||
      synthetic.light_noise < 0.0) {
    throw ConfigError("synthetic parameters must be non-negative");
  }
  if (retry.max_attempts < 1) throw ConfigError("retry attempts must be at least 1");
}

nlohmann::json Config::to_json() const {
  return {
      {"modality", coloop::to_string(modality)},
      {"seed", seed},
      {"candidates_per_scenario", candidates_per_scenario},
      {"stage1_keep", stage1_keep},
      {"sample_ratio", sample_ratio},
      {"sampling", to_string(sampling)},
      {"staged_eval", staged_eval},
      {"uncertainty_gating", uncertainty_gating},
      {"cache_reuse", cache_reuse},
      {"delta_min", pairs.delta_min},
      {"extras_keep", pairs.extras_keep},
      {"extras_scope", to_string(pairs.extras_scope)},
      {"lambda", mixed.lambda},
      {"theta", mixed.uncertainty_threshold},
      {"drift_window", mixed.drift_window},
      {"drift_rate_trigger", mixed.drift_rate_trigger},
      {"ridge", ridge},
      {"evaluator_parallelism", evaluator_parallelism},
      {"renderer_parallelism", renderer_parallelism},
      {"cache_budget_bytes", cache_budget_bytes},
      {"vlm_fps", vlm_profile.fps},
      {"vlm_resolution", vlm_profile.resolution},
      {"human_fps", human_profile.fps},
      {"human_resolution", human_profile.resolution},
      {"designer_url", designer_url},
      {"renderer_url", renderer_url},
      {"evaluator_url", evaluator_url},
      {"model_tag", model_tag},
      {"retry_attempts", retry.max_attempts},
      {"retry_initial_ms", retry.initial_backoff.count()},
      {"synthetic_invalid_rate", synthetic.invalid_rate},
      {"synthetic_mutation_scale", synthetic.mutation_scale},
      {"synthetic_mutation_decay", synthetic.mutation_decay},
      {"synthetic_noise", synthetic.noise},
      {"synthetic_light_noise", synthetic.light_noise},
  };
}

Config Config::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  Config c;
  std::string s;
  if (j.contains("modality")) {
    read(j, "modality", s);
    try {
      c.modality = modality_from_string(s);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  read(j, "seed", c.seed);
  read(j, "candidates_per_scenario", c.candidates_per_scenario);
  read(j, "stage1_keep", c.stage1_keep);
  read(j, "sample_ratio", c.sample_ratio);
  if (j.contains("sampling")) {
    read(j, "sampling", s);
    c.sampling = sampling_from_string(s);
  }
  read(j, "staged_eval", c.staged_eval);
  read(j, "uncertainty_gating", c.uncertainty_gating);
  read(j, "cache_reuse", c.cache_reuse);
  read(j, "delta_min", c.pairs.delta_min);
  read(j, "extras_keep", c.pairs.extras_keep);
  if (j.contains("extras_scope")) {
    read(j, "extras_scope", s);
    c.pairs.extras_scope = scope_from_string(s);
  }
  c.pairs.sample_ratio = c.sample_ratio;
  read(j, "lambda", c.mixed.lambda);
  read(j, "theta", c.mixed.uncertainty_threshold);
  read(j, "drift_window", c.mixed.drift_window);
  read(j, "drift_rate_trigger", c.mixed.drift_rate_trigger);
  read(j, "ridge", c.ridge);
  read(j, "evaluator_parallelism", c.evaluator_parallelism);
  read(j, "renderer_parallelism", c.renderer_parallelism);
  read(j, "cache_budget_bytes", c.cache_budget_bytes);
  read(j, "vlm_fps", c.vlm_profile.fps);
  read(j, "vlm_resolution", c.vlm_profile.resolution);
  read(j, "human_fps", c.human_profile.fps);
  read(j, "human_resolution", c.human_profile.resolution);
  read(j, "designer_url", c.designer_url);
  read(j, "renderer_url", c.renderer_url);
  read(j, "evaluator_url", c.evaluator_url);
  read(j, "model_tag", c.model_tag);
  read(j, "retry_attempts", c.retry.max_attempts);
  long long initial_ms = c.retry.initial_backoff.count();
  read(j, "retry_initial_ms", initial_ms);
  c.retry.initial_backoff = std::chrono::milliseconds(initial_ms);
  read(j, "synthetic_invalid_rate", c.synthetic.invalid_rate);
  read(j, "synthetic_mutation_scale", c.synthetic.mutation_scale);
  read(j, "synthetic_mutation_decay", c.synthetic.mutation_decay);
  read(j, "synthetic_noise", c.synthetic.noise);
  read(j, "synthetic_light_noise", c.synthetic.light_noise);
  c.validate();
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

void Config::apply_env(const std::function<const char*(const char*)>& lookup) {
  const auto get = [&](const char* name) -> const char* {
    const char* v = lookup ? lookup(name) : std::getenv(name);
    return (v != nullptr && *v != '\0') ? v : nullptr;
  };
  if (const char* v = get("COLOOP_DESIGNER_URL")) designer_url = v;
  if (const char* v = get("COLOOP_RENDERER_URL")) renderer_url = v;
  if (const char* v = get("COLOOP_EVALUATOR_URL")) evaluator_url = v;
  if (const char* v = get("COLOOP_LAMBDA")) mixed.lambda = parse_double("COLOOP_LAMBDA", v);
  if (const char* v = get("COLOOP_THETA")) mixed.uncertainty_threshold = parse_double("COLOOP_THETA", v);
  if (const char* v = get("COLOOP_DELTA_MIN")) pairs.delta_min = parse_double("COLOOP_DELTA_MIN", v);
  if (const char* v = get("COLOOP_EXTRAS_KEEP")) pairs.extras_keep = parse_double("COLOOP_EXTRAS_KEEP", v);
  if (const char* v = get("COLOOP_SAMPLE_RATIO")) {
    sample_ratio = parse_double("COLOOP_SAMPLE_RATIO", v);
    pairs.sample_ratio = sample_ratio;
  }
  if (const char* v = get("COLOOP_STAGE1_KEEP")) stage1_keep = parse_count("COLOOP_STAGE1_KEEP", v);
  if (const char* v = get("COLOOP_EVAL_PARALLELISM")) {
    evaluator_parallelism = parse_count("COLOOP_EVAL_PARALLELISM", v);
  }
  if (const char* v = get("COLOOP_RENDER_PARALLELISM")) {
    renderer_parallelism = parse_count("COLOOP_RENDER_PARALLELISM", v);
  }
  if (const char* v = get("COLOOP_RIDGE")) ridge = parse_double("COLOOP_RIDGE", v);
  validate();
}

}  // namespace coloop
