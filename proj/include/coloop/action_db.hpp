#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "coloop/action.hpp"
#include "coloop/evaluation.hpp"

namespace coloop {

/// One scored candidate.
struct DbRecord {
  std::string scenario_id;
  std::string model;  // generating model tag
  int round = 0;
  ActionSequence action;
  EvalScores scores;
  double k = 0.0;  // must equal kernel_score(scores)
  std::string clip_key;
  std::uint64_t created_at = 0;  // assigned by the database; logical append order
  std::optional<double> k_hpm;

  /// Source tag "<model>@r<round>".
  std::string source() const;
  std::string action_hash() const { return coloop::action_hash(action); }

  nlohmann::json to_json() const;
  static DbRecord from_json(const nlohmann::json& j);
};

/// Builds a record whose k is computed from the scores.
DbRecord make_record(std::string scenario_id, std::string model, int round, ActionSequence action, EvalScores scores,
                     std::string clip_key = {});

struct ScenarioStats {
  double k_best = 0.0;
  double k_worst = 0.0;
  std::size_t count = 0;

  double delta() const { return k_best - k_worst; }
  /// Rounds of sampling beyond a six-candidate baseline: max(0, N/6 - 1).
  double prior_attempts() const;
};

struct AppendResult {
  bool appended = false;
  bool duplicate = false;
  std::uint64_t created_at = 0;
};

/// Shared action database. Append-only; stats are maintained per scenario on
/// every append. When opened on a directory, appends go to actions.jsonl and
/// checkpoint() folds the log into snapshot.jsonl.gz.
class ActionDb {
 public:
  ActionDb() = default;
  ActionDb(const ActionDb&) = delete;
  ActionDb& operator=(const ActionDb&) = delete;
  ActionDb(ActionDb&& other) noexcept;
  ActionDb& operator=(ActionDb&& other) noexcept;

  /// Loads snapshot + log tail from dir (created if absent) and persists appends there.
  static ActionDb open(const std::filesystem::path& dir);
  /// In-memory database loaded from a gzipped JSONL snapshot.
  static ActionDb restore(const std::filesystem::path& snapshot_path);

  AppendResult append(DbRecord record);

  ScenarioStats stats(const std::string& scenario_id) const;  // NotFoundError when empty
  std::map<std::string, ScenarioStats> all_stats() const;
  std::vector<DbRecord> records() const;  // append order
  std::vector<DbRecord> records_for(const std::string& scenario_id) const;
  /// Earliest record of the scenario with the given action hash.
  std::optional<DbRecord> find(const std::string& scenario_id, const std::string& action_hash) const;
  std::vector<std::string> scenario_ids() const;
  std::size_t size() const;
  bool empty() const { return size() == 0; }

  /// Writes every record as gzipped JSONL in append order.
  void snapshot(const std::filesystem::path& path) const;
  /// Persistent mode only: snapshot into the directory and truncate the log.
  void checkpoint();

  static constexpr const char* kLogFile = "actions.jsonl";
  static constexpr const char* kSnapshotFile = "snapshot.jsonl.gz";

 private:
  struct Entry {
    DbRecord record;
    std::string hash;
  };

  void insert_locked(Entry entry);
  void load_lines(const std::filesystem::path& path, bool gzipped);

  mutable std::shared_mutex mu_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_scenario_;
  std::unordered_map<std::string, std::size_t> identity_;  // scenario|source|hash -> index
  std::map<std::string, ScenarioStats> stats_;
  std::uint64_t next_created_at_ = 1;
  std::optional<std::filesystem::path> dir_;
};

}  // namespace coloop
