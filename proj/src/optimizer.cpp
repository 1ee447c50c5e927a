#include "coloop/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "coloop/common.hpp"

namespace coloop {
namespace {

// Record order used for every tie-break: earlier append wins.
bool earlier(const DbRecord& a, const DbRecord& b) { return a.created_at < b.created_at; }

std::map<std::string, std::vector<DbRecord>> group_by_scenario(const std::vector<DbRecord>& records) {
  std::map<std::string, std::vector<DbRecord>> groups;
  for (const auto& r : records) groups[r.scenario_id].push_back(r);
  for (auto& [id, v] : groups) std::sort(v.begin(), v.end(), earlier);
  return groups;
}

bool extra_before(const PreferencePair& a, const PreferencePair& b) {
  if (a.gap != b.gap) return a.gap > b.gap;
  if (a.chosen.created_at != b.chosen.created_at) return a.chosen.created_at < b.chosen.created_at;
  return a.rejected.created_at < b.rejected.created_at;
}

std::string modality_schema(Modality m) {
  switch (m) {
    case Modality::kEyes:
      return "Eyes: pupil in polar coordinates, angle in degrees [0, 360] (0 = up, counterclockwise) and radius in "
             "[0, 1] (0 = center, 1 = edge). State: {\"angle\": number, \"radius\": number}. Transition durations "
             "0.5 to 2.0 s in 0.1 s steps.";
    case Modality::kLightbar:
      return "Lightbar: 16 binary lighting regions ordered left to right from the vehicle's perspective. State: a "
             "16-character string of 0/1, e.g. \"0000000011111111\" (left half off, right half on). Transition "
             "durations 0.1 to 1.0 s in 0.1 s steps.";
    case Modality::kArm:
      return "Arm: five single-axis joints in degrees. State: {\"shoulder\", \"upper_arm\", \"forearm\", \"hand\", "
             "\"fingers\"}. Transition durations 0.5 to 2.0 s in 0.1 s steps.";
  }
  return {};
}

nlohmann::json turn(const char* from, std::string value) { return {{"from", from}, {"value", std::move(value)}}; }

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

}  // namespace

ImportanceReport importance_scores(const std::map<std::string, ScenarioStats>& stats) {
  if (stats.empty()) throw UndefinedInputError("importance scores need at least one scenario");
  ImportanceReport rep;
  for (const auto& [id, st] : stats) {
    if (st.k_best <= 0.0) throw IntegrityError("non-positive best kernel score for scenario " + id);
    if (st.k_best < st.k_worst || st.count == 0) throw IntegrityError("inconsistent stats for scenario " + id);
    rep.delta_k_max = std::max(rep.delta_k_max, st.delta());
  }
  double max_raw = 0.0;
  for (const auto& [id, st] : stats) {
    const double raw = (rep.delta_k_max - st.delta()) * st.k_worst / (st.k_best * st.k_best * st.k_best) *
                       std::pow(0.5, st.prior_attempts());
    rep.raw[id] = raw;
    max_raw = std::max(max_raw, raw);
  }
  if (max_raw > 0.0) {
    for (const auto& [id, raw] : rep.raw) rep.normalized[id] = raw / max_raw;
  } else {
    rep.uniform_fallback = true;
    const double w = 1.0 / static_cast<double>(stats.size());
    for (const auto& [id, raw] : rep.raw) rep.normalized[id] = w;
  }
  return rep;
}

std::vector<std::string> sample_scenarios(const ImportanceReport& report, double ratio, std::uint64_t seed,
                                          SamplingMode mode) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("sample ratio must lie in (0, 1]");
  const std::size_t n = report.normalized.size();
  const std::size_t k = std::min(n, ceil_count(ratio, n));

  struct Keyed {
    double key;
    bool positive;
    const std::string* id;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(n);
  std::mt19937_64 rng(seed);
  for (const auto& [id, w] : report.normalized) {
    double u = unit_uniform(rng);
    if (u <= 0.0) u = 0x1.0p-53;
    if (mode == SamplingMode::kTopK) {
      keyed.push_back({w, w > 0.0, &id});
    } else if (w > 0.0) {
      // log(u)/w orders identically to u^(1/w).
      keyed.push_back({std::log(u) / w, true, &id});
    } else {
      keyed.push_back({u, false, &id});
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    if (a.positive != b.positive) return a.positive;
    return a.key > b.key;
  });
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(*keyed[i].id);
  return out;
}

std::string_view to_string(PairOrigin o) {
  switch (o) {
    case PairOrigin::kMaxMin:
      return "max-min";
    case PairOrigin::kHighGapExtra:
      return "high-gap-extra";
    case PairOrigin::kHardNegativeReplay:
      return "hard-negative-replay";
  }
  return "max-min";
}

void PairConfig::validate() const {
  if (!(delta_min > 0.0)) throw ConfigError("delta_min must be positive");
  if (!(extras_keep >= 0.0 && extras_keep <= 1.0)) throw ConfigError("extras fraction must lie in [0, 1]");
  if (!(sample_ratio > 0.0 && sample_ratio <= 1.0)) throw ConfigError("sample ratio must lie in (0, 1]");
}

std::vector<PreferencePair> build_pairs(const ActionDb& db, const PairConfig& cfg) {
  return build_pairs(db.records(), cfg);
}

std::vector<PreferencePair> build_pairs(const std::vector<DbRecord>& records, const PairConfig& cfg) {
  cfg.validate();
  std::vector<PreferencePair> out;
  std::vector<PreferencePair> global_pool;
  for (const auto& [id, recs] : group_by_scenario(records)) {
    if (recs.size() < 2) continue;
    std::size_t best = 0;
    std::size_t worst = 0;
    for (std::size_t i = 1; i < recs.size(); ++i) {
      if (recs[i].k > recs[best].k) best = i;
      if (recs[i].k < recs[worst].k) worst = i;
    }
    const double spread = recs[best].k - recs[worst].k;
    const bool stage1 = best != worst && spread >= cfg.delta_min;
    if (stage1) out.push_back({id, recs[best], recs[worst], spread, PairOrigin::kMaxMin});

    std::vector<PreferencePair> pool;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      for (std::size_t j = i + 1; j < recs.size(); ++j) {
        if (stage1 && ((i == best && j == worst) || (i == worst && j == best))) continue;
        const bool i_higher = recs[i].k >= recs[j].k;
        const auto& hi = i_higher ? recs[i] : recs[j];
        const auto& lo = i_higher ? recs[j] : recs[i];
        const double gap = hi.k - lo.k;
        if (gap >= cfg.delta_min) pool.push_back({id, hi, lo, gap, PairOrigin::kHighGapExtra});
      }
    }
    if (cfg.extras_scope == ExtrasScope::kGlobal) {
      global_pool.insert(global_pool.end(), pool.begin(), pool.end());
      continue;
    }
    std::sort(pool.begin(), pool.end(), extra_before);
    pool.resize(std::min(pool.size(), ceil_count(cfg.extras_keep, pool.size())));
    out.insert(out.end(), pool.begin(), pool.end());
  }
  if (cfg.extras_scope == ExtrasScope::kGlobal) {
    std::sort(global_pool.begin(), global_pool.end(), extra_before);
    global_pool.resize(std::min(global_pool.size(), ceil_count(cfg.extras_keep, global_pool.size())));
    out.insert(out.end(), global_pool.begin(), global_pool.end());
    std::stable_sort(out.begin(), out.end(),
                     [](const PreferencePair& a, const PreferencePair& b) { return a.scenario_id < b.scenario_id; });
  }
  return out;
}

std::vector<DbRecord> best_per_scenario(const ActionDb& db) {
  std::vector<DbRecord> out;
  for (const auto& [id, recs] : group_by_scenario(db.records())) {
    const DbRecord* best = &recs.front();
    for (const auto& r : recs) {
      if (r.k > best->k) best = &r;
    }
    out.push_back(*best);
  }
  return out;
}

std::map<std::string, bool> train_split(const std::vector<std::string>& scenario_ids) {
  std::vector<std::string> ids = scenario_ids;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::sort(ids.begin(), ids.end(), [](const std::string& a, const std::string& b) {
    const auto ha = fnv1a64(a);
    const auto hb = fnv1a64(b);
    return ha != hb ? ha < hb : a < b;
  });
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(ids.size())));
  std::map<std::string, bool> out;
  for (std::size_t i = 0; i < ids.size(); ++i) out[ids[i]] = i < n_train;
  return out;
}

std::string system_prompt(Modality m) {
  return "You design eHMI actions for an automated vehicle. Reply with one JSON document "
         "{\"modality\": \"" +
         std::string(to_string(m)) + "\", \"actions\": [{\"state\": ..., \"transition\": seconds}, ...]}. " +
         modality_schema(m);
}

std::string user_prompt(const std::string& scenario_id, const ScenarioCatalog* catalog) {
  const Scenario* sc = catalog != nullptr ? catalog->find(scenario_id) : nullptr;
  const auto skeleton = sc != nullptr ? sc->skeleton : parse_scenario_id(scenario_id).first;
  std::string out = "Scenario " + scenario_id + ". " + describe(skeleton) + ".";
  if (sc != nullptr) out += " Intended message: \"" + sc->intended_message + "\"";
  return out;
}

ExportResult export_sft(const std::vector<DbRecord>& best, const ScenarioCatalog* catalog,
                        const std::filesystem::path& out_dir) {
  if (best.empty()) throw ValidationError("nothing to export: no scenarios with records");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  std::vector<DbRecord> sorted = best;
  std::sort(sorted.begin(), sorted.end(),
            [](const DbRecord& a, const DbRecord& b) { return a.scenario_id < b.scenario_id; });
  std::vector<std::string> ids;
  for (const auto& r : sorted) ids.push_back(r.scenario_id);
  const auto split = train_split(ids);

  ExportResult res{out_dir / "sft_train.jsonl", out_dir / "sft_test.jsonl"};
  auto train = open_out(res.train_path);
  auto test = open_out(res.test_path);
  for (const auto& r : sorted) {
    nlohmann::json line = {{"conversations",
                            {turn("system", system_prompt(r.action.modality)),
                             turn("human", user_prompt(r.scenario_id, catalog)), turn("gpt", serialize(r.action))}}};
    const bool is_train = split.at(r.scenario_id);
    (is_train ? train : test) << line.dump() << '\n';
    ++(is_train ? res.train_records : res.test_records);
    ++(is_train ? res.train_scenarios : res.test_scenarios);
  }
  if (!train || !test) throw IoError("write failed under " + out_dir.string());
  return res;
}

ExportResult export_dpo(const std::vector<PreferencePair>& pairs, const ScenarioCatalog* catalog,
                        const std::filesystem::path& out_dir) {
  if (pairs.empty()) throw ValidationError("nothing to export: empty pair list");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  std::vector<std::string> ids;
  for (const auto& p : pairs) ids.push_back(p.scenario_id);
  const auto split = train_split(ids);

  // Stable by scenario so each scenario's pairs stay in build order.
  std::vector<const PreferencePair*> ordered;
  for (const auto& p : pairs) ordered.push_back(&p);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto* a, const auto* b) { return a->scenario_id < b->scenario_id; });

  ExportResult res{out_dir / "dpo_train.jsonl", out_dir / "dpo_test.jsonl"};
  auto train = open_out(res.train_path);
  auto test = open_out(res.test_path);
  std::set<std::string> train_ids;
  std::set<std::string> test_ids;
  for (const auto* p : ordered) {
    nlohmann::json line = {
        {"conversations",
         {turn("system", system_prompt(p->chosen.action.modality)), turn("human", user_prompt(p->scenario_id, catalog))}},
        {"chosen", turn("gpt", serialize(p->chosen.action))},
        {"rejected", turn("gpt", serialize(p->rejected.action))}};
    const bool is_train = split.at(p->scenario_id);
    (is_train ? train : test) << line.dump() << '\n';
    ++(is_train ? res.train_records : res.test_records);
    (is_train ? train_ids : test_ids).insert(p->scenario_id);
  }
  res.train_scenarios = train_ids.size();
  res.test_scenarios = test_ids.size();
  if (!train || !test) throw IoError("write failed under " + out_dir.string());
  return res;
}

}  // namespace coloop
