#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "coloop/action_db.hpp"
#include "coloop/scenario.hpp"

namespace coloop {

struct ImportanceReport {
  std::map<std::string, double> raw;
  std::map<std::string, double> normalized;  // max = 1 when any raw score is positive
  double delta_k_max = 0.0;
  bool uniform_fallback = false;  // every raw score was zero
};

/// I_i = (dK_max - dK_i) * K_worst_i / K_best_i^3 * 0.5^n_i, normalized so the
/// largest score is 1. Falls back to uniform weights 1/|scenarios| when every
/// raw score is zero.
ImportanceReport importance_scores(const std::map<std::string, ScenarioStats>& stats);

enum class SamplingMode { kWeighted, kTopK };

/// Picks ceil(ratio * n) distinct scenarios. kWeighted draws without
/// replacement with probability proportional to the normalized importance
/// (exponential-key method); zero-weight scenarios fill any remaining slots in
/// seeded random order. kTopK takes the highest scores, ties by id.
std::vector<std::string> sample_scenarios(const ImportanceReport& report, double ratio, std::uint64_t seed,
                                          SamplingMode mode = SamplingMode::kWeighted);

enum class PairOrigin { kMaxMin, kHighGapExtra, kHardNegativeReplay };
std::string_view to_string(PairOrigin o);

struct PreferencePair {
  std::string scenario_id;
  DbRecord chosen;
  DbRecord rejected;
  double gap = 0.0;
  PairOrigin origin = PairOrigin::kMaxMin;
};

enum class ExtrasScope { kPerScenario, kGlobal };

struct PairConfig {
  double delta_min = 4.0;
  double extras_keep = 0.30;
  double sample_ratio = 0.20;
  ExtrasScope extras_scope = ExtrasScope::kPerScenario;

  void validate() const;
};

/// Two-stage pair extraction. Stage 1: (argmax K, argmin K) when the gap is at
/// least delta_min; ties go to the earlier record. Stage 2: every other
/// within-scenario pair with gap >= delta_min, sorted by gap (descending, then
/// earlier chosen, then earlier rejected), truncated to ceil(p * count).
/// Output is ordered by scenario id, stage-1 pair first.
std::vector<PreferencePair> build_pairs(const ActionDb& db, const PairConfig& cfg);
std::vector<PreferencePair> build_pairs(const std::vector<DbRecord>& records, const PairConfig& cfg);

/// Best-K record per scenario (ties: earliest).
std::vector<DbRecord> best_per_scenario(const ActionDb& db);

enum class ExportMode { kSft, kDpo };

struct ExportResult {
  std::filesystem::path train_path;
  std::filesystem::path test_path;
  std::size_t train_records = 0;
  std::size_t test_records = 0;
  std::size_t train_scenarios = 0;
  std::size_t test_scenarios = 0;
};

/// Splits scenario ids 80/20 by ranking them on a stable hash; the first
/// round(0.8 * n) ranks train.
std::map<std::string, bool> train_split(const std::vector<std::string>& scenario_ids);

/// System prompt describing the action schema of a modality.
std::string system_prompt(Modality m);
/// User turn: scenario factors and the intended message.
std::string user_prompt(const std::string& scenario_id, const ScenarioCatalog* catalog);

/// Writes ShareGPT-style JSONL into out_dir/<mode>_train.jsonl and
/// <mode>_test.jsonl. sft takes best-per-scenario records; dpo takes pairs.
ExportResult export_sft(const std::vector<DbRecord>& best, const ScenarioCatalog* catalog,
                        const std::filesystem::path& out_dir);
ExportResult export_dpo(const std::vector<PreferencePair>& pairs, const ScenarioCatalog* catalog,
                        const std::filesystem::path& out_dir);

}  // namespace coloop
