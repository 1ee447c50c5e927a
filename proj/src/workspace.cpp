#include "coloop/workspace.hpp"

#include <fstream>

#include "coloop/common.hpp"

namespace coloop {

namespace fs = std::filesystem;

namespace {

constexpr const char* kConfigFile = "config.json";
constexpr const char* kCatalogFile = "catalog.json";
constexpr const char* kCacheFile = "render_cache.json";
constexpr const char* kQueueFile = "human_queue.json";
constexpr const char* kRatingsFile = "ratings.json";
constexpr const char* kDisagreementsFile = "disagreements.jsonl";
constexpr const char* kModelFile = "hpm_model.json";

}  // namespace

void write_json_atomic(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("write to " + tmp + " failed");
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

ScenarioCatalog make_synthetic_catalog(const FactorConfig& factors, std::size_t limit, std::size_t per_skeleton) {
  if (per_skeleton < 1) throw ConfigError("at least one message per skeleton is required");
  auto all = enumerate_scenarios(factors);
  if (limit > 0) {
    const std::size_t want = std::min(all.size(), (limit + per_skeleton - 1) / per_skeleton);
    std::vector<ScenarioSkeleton> picked;
    picked.reserve(want);
    for (std::size_t i = 0; i < want; ++i) picked.push_back(all[i * all.size() / want]);
    all = std::move(picked);
  }
  ScenarioCatalog catalog(all);
  catalog.ingest_synthetic(per_skeleton);
  if (limit > 0 && catalog.scenarios().size() > limit) {
    // Drop the surplus messages from the last skeletons.
    auto j = catalog.to_json();
    auto& sc = j.at("scenarios");
    sc.erase(sc.begin() + static_cast<std::ptrdiff_t>(limit), sc.end());
    return ScenarioCatalog::from_json(j);
  }
  return catalog;
}

Workspace::Workspace(fs::path root, Config config, ScenarioCatalog catalog)
    : root_(std::move(root)), config_(std::move(config)), catalog_(std::move(catalog)) {}

Workspace Workspace::create(const fs::path& root, Config config, ScenarioCatalog catalog) {
  if (fs::exists(root / kConfigFile)) throw ConfigError("workspace already initialized: " + root.string());
  config.validate();
  fs::create_directories(root);
  write_json_atomic(root / kConfigFile, config.to_json());
  write_json_atomic(root / kCatalogFile, catalog.to_json());
  return open(root);
}

Workspace Workspace::open(const fs::path& root) {
  if (!fs::exists(root / kConfigFile)) {
    throw ConfigError("not a workspace (missing " + (root / kConfigFile).string() + "); run `coloop init`");
  }
  auto config = Config::from_json(read_json(root / kConfigFile));
  config.apply_env();
  auto catalog = ScenarioCatalog::from_json(read_json(root / kCatalogFile));
  Workspace ws(root, std::move(config), std::move(catalog));
  ws.db_ = ActionDb::open(root / "db");
  if (fs::exists(root / kQueueFile)) ws.queue_ = HumanQueue::from_json(read_json(root / kQueueFile));
  if (fs::exists(root / kRatingsFile)) ws.ratings_ = RatingStore::from_json(read_json(root / kRatingsFile));
  ws.disagreements_ = DisagreementLog::load((root / kDisagreementsFile).string());
  if (fs::exists(root / kModelFile)) ws.model_ = HpmModel::from_json(read_json(root / kModelFile));
  return ws;
}

void Workspace::set_model(HpmModel model) {
  write_json_atomic(root_ / kModelFile, model.to_json());
  model_ = std::move(model);
}

fs::path Workspace::round_dir(int round) const { return root_ / "rounds" / std::to_string(round); }

fs::path Workspace::exports_dir(int round) const { return root_ / "exports" / ("round_" + std::to_string(round)); }

int Workspace::completed_rounds() const {
  int n = 0;
  while (fs::exists(report_path(n))) ++n;
  return n;
}

RenderCache Workspace::load_cache() const {
  if (!fs::exists(root_ / kCacheFile)) return RenderCache(config_.cache_budget_bytes);
  return RenderCache::from_json(read_json(root_ / kCacheFile), config_.cache_budget_bytes);
}

void Workspace::save_cache(const RenderCache& cache) const { write_json_atomic(root_ / kCacheFile, cache.to_json()); }

void Workspace::save_config() const { write_json_atomic(root_ / kConfigFile, config_.to_json()); }

void Workspace::save_queue() const { write_json_atomic(root_ / kQueueFile, queue_.to_json()); }

void Workspace::save_ratings() const { write_json_atomic(root_ / kRatingsFile, ratings_.to_json()); }

void Workspace::save_disagreements() const {
  const auto path = root_ / kDisagreementsFile;
  const auto tmp = path.string() + ".tmp";
  disagreements_.save(tmp);
  fs::rename(tmp, path);
}

}  // namespace coloop
