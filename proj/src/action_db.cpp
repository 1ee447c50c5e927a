#include "coloop/action_db.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>

#include "coloop/common.hpp"

namespace coloop {
namespace {

constexpr double kKernelTolerance = 1e-9;

std::string identity_key(const DbRecord& r, const std::string& hash) {
  return r.scenario_id + '|' + r.source() + '|' + hash;
}

class GzWriter {
 public:
  explicit GzWriter(const std::filesystem::path& path) : f_(gzopen(path.c_str(), "wb")) {
    if (f_ == nullptr) throw IoError("cannot open " + path.string() + " for writing");
  }
  ~GzWriter() {
    if (f_ != nullptr) gzclose(f_);
  }
  GzWriter(const GzWriter&) = delete;
  GzWriter& operator=(const GzWriter&) = delete;

  void write(const std::string& s) {
    if (!s.empty() && gzwrite(f_, s.data(), static_cast<unsigned>(s.size())) != static_cast<int>(s.size())) {
      throw IoError("gzip write failed");
    }
  }
  void close() {
    if (gzclose(f_) != Z_OK) {
      f_ = nullptr;
      throw IoError("gzip close failed");
    }
    f_ = nullptr;
  }

 private:
  gzFile f_;
};

/// Reads every line (without the trailing newline) of a plain or gzipped file.
/// The flag reports whether the final line ended with '\n'.
std::vector<std::string> read_lines(const std::filesystem::path& path, bool gzipped, bool& last_terminated) {
  std::string content;
  if (gzipped) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw IoError("cannot open " + path.string());
    char buf[1 << 15];
    int n = 0;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) content.append(buf, static_cast<std::size_t>(n));
    // A truncated stream still yields its decodable prefix; the per-line
    // checks in load_lines report where the damage starts.
    gzclose(f);
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    content.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < content.size()) {
    const auto nl = content.find('\n', start);
    if (nl == std::string::npos) {
      lines.push_back(content.substr(start));
      last_terminated = false;
      return lines;
    }
    lines.push_back(content.substr(start, nl - start));
    start = nl + 1;
  }
  last_terminated = true;
  return lines;
}

}  // namespace

std::string DbRecord::source() const { return model + "@r" + std::to_string(round); }

nlohmann::json DbRecord::to_json() const {
  nlohmann::json j = {{"scenario_id", scenario_id},
                      {"model", model},
                      {"round", round},
                      {"source", source()},
                      {"action", coloop::to_json(action)},
                      {"scores", scores.to_json()},
                      {"K", k},
                      {"clip_key", clip_key},
                      {"created_at", created_at}};
  if (k_hpm) j["k_hpm"] = *k_hpm;
  return j;
}

DbRecord DbRecord::from_json(const nlohmann::json& j) {
  DbRecord r;
  r.scenario_id = j.at("scenario_id").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.round = j.at("round").get<int>();
  const auto& doc = j.at("action");
  const auto modality = modality_from_string(doc.at("modality").get<std::string>());
  auto parsed = parse_action(doc.dump(), modality);
  if (!parsed) throw ValidationError("stored action fails validation: " + parsed.error().detail);
  r.action = std::move(parsed.value());
  r.scores = EvalScores::from_json(j.at("scores"));
  r.k = j.at("K").get<double>();
  r.clip_key = j.value("clip_key", std::string{});
  r.created_at = j.at("created_at").get<std::uint64_t>();
  if (j.contains("k_hpm")) r.k_hpm = j.at("k_hpm").get<double>();
  return r;
}

DbRecord make_record(std::string scenario_id, std::string model, int round, ActionSequence action, EvalScores scores,
                     std::string clip_key) {
  DbRecord r;
  r.scenario_id = std::move(scenario_id);
  r.model = std::move(model);
  r.round = round;
  r.action = std::move(action);
  r.k = kernel_score(scores).k;
  r.scores = std::move(scores);
  r.clip_key = std::move(clip_key);
  return r;
}

double ScenarioStats::prior_attempts() const { return std::max(0.0, static_cast<double>(count) / 6.0 - 1.0); }

ActionDb::ActionDb(ActionDb&& other) noexcept
    : entries_(std::move(other.entries_)),
      by_scenario_(std::move(other.by_scenario_)),
      identity_(std::move(other.identity_)),
      stats_(std::move(other.stats_)),
      next_created_at_(other.next_created_at_),
      dir_(std::move(other.dir_)) {}

ActionDb& ActionDb::operator=(ActionDb&& other) noexcept {
  if (this != &other) {
    std::unique_lock lock(mu_);
    entries_ = std::move(other.entries_);
    by_scenario_ = std::move(other.by_scenario_);
    identity_ = std::move(other.identity_);
    stats_ = std::move(other.stats_);
    next_created_at_ = other.next_created_at_;
    dir_ = std::move(other.dir_);
  }
  return *this;
}

void ActionDb::insert_locked(Entry entry) {
  const auto idx = entries_.size();
  const auto& r = entry.record;
  identity_.emplace(identity_key(r, entry.hash), idx);
  by_scenario_[r.scenario_id].push_back(idx);
  auto [it, fresh] = stats_.try_emplace(r.scenario_id);
  auto& st = it->second;
  if (fresh) {
    st.k_best = st.k_worst = r.k;
  } else {
    st.k_best = std::max(st.k_best, r.k);
    st.k_worst = std::min(st.k_worst, r.k);
  }
  ++st.count;
  next_created_at_ = std::max(next_created_at_, r.created_at + 1);
  entries_.push_back(std::move(entry));
}

AppendResult ActionDb::append(DbRecord record) {
  if (record.action.keyframes.empty()) throw ValidationError("record has an empty action");
  const double recomputed = kernel_score(record.scores).k;
  if (std::abs(recomputed - record.k) > kKernelTolerance) {
    throw IntegrityError("stored K " + std::to_string(record.k) + " disagrees with recomputed K " +
                         std::to_string(recomputed) + " for scenario " + record.scenario_id);
  }
  std::string hash = record.action_hash();

  std::unique_lock lock(mu_);
  if (const auto it = identity_.find(identity_key(record, hash)); it != identity_.end()) {
    return {false, true, entries_[it->second].record.created_at};
  }
  record.created_at = next_created_at_;
  if (dir_) {
    std::ofstream log(*dir_ / kLogFile, std::ios::app);
    if (!log) throw IoError("cannot append to " + (*dir_ / kLogFile).string());
    log << record.to_json().dump() << '\n';
    log.flush();
    if (!log) throw IoError("append to " + (*dir_ / kLogFile).string() + " failed");
  }
  const auto created = record.created_at;
  insert_locked({std::move(record), std::move(hash)});
  return {true, false, created};
}

ScenarioStats ActionDb::stats(const std::string& scenario_id) const {
  std::shared_lock lock(mu_);
  const auto it = stats_.find(scenario_id);
  if (it == stats_.end()) throw NotFoundError("no records for scenario " + scenario_id);
  return it->second;
}

std::map<std::string, ScenarioStats> ActionDb::all_stats() const {
  std::shared_lock lock(mu_);
  return stats_;
}

std::vector<DbRecord> ActionDb::records() const {
  std::shared_lock lock(mu_);
  std::vector<DbRecord> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.record);
  return out;
}

std::vector<DbRecord> ActionDb::records_for(const std::string& scenario_id) const {
  std::shared_lock lock(mu_);
  std::vector<DbRecord> out;
  const auto it = by_scenario_.find(scenario_id);
  if (it == by_scenario_.end()) return out;
  out.reserve(it->second.size());
  for (auto idx : it->second) out.push_back(entries_[idx].record);
  return out;
}

std::optional<DbRecord> ActionDb::find(const std::string& scenario_id, const std::string& action_hash) const {
  std::shared_lock lock(mu_);
  const auto it = by_scenario_.find(scenario_id);
  if (it == by_scenario_.end()) return std::nullopt;
  for (auto idx : it->second) {
    if (entries_[idx].hash == action_hash) return entries_[idx].record;
  }
  return std::nullopt;
}

std::vector<std::string> ActionDb::scenario_ids() const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  out.reserve(stats_.size());
  for (const auto& [id, st] : stats_) out.push_back(id);
  return out;
}

std::size_t ActionDb::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

void ActionDb::snapshot(const std::filesystem::path& path) const {
  std::shared_lock lock(mu_);
  const auto tmp = path.string() + ".tmp";
  {
    GzWriter w(tmp);
    for (const auto& e : entries_) w.write(e.record.to_json().dump() + '\n');
    w.close();
  }
  std::filesystem::rename(tmp, path);
}

void ActionDb::checkpoint() {
  if (!dir_) throw ConfigError("checkpoint requires a database opened on a directory");
  snapshot(*dir_ / kSnapshotFile);
  std::unique_lock lock(mu_);
  std::ofstream truncate(*dir_ / kLogFile, std::ios::trunc);
  if (!truncate) throw IoError("cannot truncate " + (*dir_ / kLogFile).string());
}

void ActionDb::load_lines(const std::filesystem::path& path, bool gzipped) {
  bool terminated = true;
  const auto lines = read_lines(path, gzipped, terminated);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty()) continue;
    DbRecord rec;
    try {
      rec = DbRecord::from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      const bool truncated_tail = (i + 1 == lines.size()) && !terminated;
      throw LoadError(path.string(), i + 1, std::string(truncated_tail ? "truncated record: " : "bad record: ") + e.what());
    }
    if (std::abs(kernel_score(rec.scores).k - rec.k) > kKernelTolerance) {
      throw LoadError(path.string(), i + 1, "stored K disagrees with recomputed K");
    }
    auto hash = rec.action_hash();
    if (identity_.count(identity_key(rec, hash)) != 0U) {
      throw LoadError(path.string(), i + 1, "duplicate record identity");
    }
    if (!entries_.empty() && rec.created_at <= entries_.back().record.created_at) {
      throw LoadError(path.string(), i + 1, "created_at not increasing");
    }
    insert_locked({std::move(rec), std::move(hash)});
  }
}

ActionDb ActionDb::restore(const std::filesystem::path& snapshot_path) {
  ActionDb db;
  db.load_lines(snapshot_path, true);
  return db;
}

ActionDb ActionDb::open(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ActionDb db;
  if (std::filesystem::exists(dir / kSnapshotFile)) db.load_lines(dir / kSnapshotFile, true);
  if (std::filesystem::exists(dir / kLogFile)) db.load_lines(dir / kLogFile, false);
  db.dir_ = dir;
  return db;
}

}  // namespace coloop
