#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "coloop/action_db.hpp"
#include "coloop/clients.hpp"
#include "coloop/config.hpp"
#include "coloop/evaluation.hpp"
#include "coloop/hpm.hpp"
#include "coloop/scenario.hpp"

namespace coloop {

/// Writes via a temporary file and rename, so readers never see a partial document.
void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

/// Catalog of at most `limit` scenarios (0 = all): skeletons are taken at an
/// even stride through the factor space, each with `per_skeleton` synthetic messages.
ScenarioCatalog make_synthetic_catalog(const FactorConfig& factors, std::size_t limit, std::size_t per_skeleton);

/// On-disk state of one engine instance:
///
///   config.json  catalog.json  db/  render_cache.json  human_queue.json
///   ratings.json  disagreements.jsonl  hpm_model.json
///   rounds/<n>/{manifest.json, report.json}  exports/round_<n>/
class Workspace {
 public:
  static Workspace create(const std::filesystem::path& root, Config config, ScenarioCatalog catalog);
  static Workspace open(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  Config& config() { return config_; }
  const Config& config() const { return config_; }
  const ScenarioCatalog& catalog() const { return *catalog_; }
  ActionDb& db() { return db_; }
  const ActionDb& db() const { return db_; }
  HumanQueue& queue() { return queue_; }
  const HumanQueue& queue() const { return queue_; }
  RatingStore& ratings() { return ratings_; }
  const RatingStore& ratings() const { return ratings_; }
  DisagreementLog& disagreements() { return disagreements_; }
  const std::optional<HpmModel>& model() const { return model_; }
  void set_model(HpmModel model);

  std::filesystem::path round_dir(int round) const;
  std::filesystem::path manifest_path(int round) const { return round_dir(round) / "manifest.json"; }
  std::filesystem::path report_path(int round) const { return round_dir(round) / "report.json"; }
  std::filesystem::path exports_dir(int round) const;

  /// Number of rounds with a final report (rounds are numbered from 0).
  int completed_rounds() const;

  RenderCache load_cache() const;
  void save_cache(const RenderCache& cache) const;
  void save_config() const;
  void save_queue() const;
  void save_ratings() const;
  void save_disagreements() const;

 private:
  Workspace(std::filesystem::path root, Config config, ScenarioCatalog catalog);
  std::filesystem::path root_;
  Config config_;
  std::optional<ScenarioCatalog> catalog_;
  ActionDb db_;
  HumanQueue queue_;
  RatingStore ratings_;
  DisagreementLog disagreements_;
  std::optional<HpmModel> model_;
};

}  // namespace coloop
