#include "coloop/scenario.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <future>
#include <limits>
#include <sstream>

#include "coloop/common.hpp"

namespace coloop {
namespace {

struct Names {
  std::string_view wire;
  std::string_view abbrev;
};

constexpr std::array<Names, 4> kRelationshipNames = {{{"first-person-1to1", "fp-1to1"},
                                                      {"first-person-1toMany", "fp-1toN"},
                                                      {"third-person-1to1", "tp-1to1"},
                                                      {"third-person-1toMany", "tp-1toN"}}};
constexpr std::array<Names, 2> kEmitterNames = {{{"self-driving-car", "sdc"}, {"delivery-robot", "dr"}}};
constexpr std::array<Names, 4> kReceiverNames = {
    {{"vehicle-driver", "drv"}, {"pedestrian", "ped"}, {"cyclist", "cyc"}, {"motorcyclist", "moto"}}};
constexpr std::array<Names, 8> kMessageTypeNames = {{{"instruction", "instruction"},
                                                     {"advisory", "advisory"},
                                                     {"question", "question"},
                                                     {"answer", "answer"},
                                                     {"current", "current"},
                                                     {"historical", "historical"},
                                                     {"predictive", "predictive"},
                                                     {"warn", "warn"}}};
constexpr std::array<Names, 3> kSafetyNames = {{{"critical", "crit"}, {"moderate", "mod"}, {"routine", "rout"}}};

template <class E, std::size_t N>
E lookup(const std::array<Names, N>& table, std::string_view s, bool abbrev, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if ((abbrev ? table[i].abbrev : table[i].wire) == s) return static_cast<E>(i);
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

template <class T>
void require_non_empty(const std::vector<T>& v, const char* name) {
  if (v.empty()) throw ConfigError(std::string("factor list '") + name + "' is empty");
}

}  // namespace

std::string_view to_string(Relationship v) { return kRelationshipNames[static_cast<int>(v)].wire; }
std::string_view to_string(Emitter v) { return kEmitterNames[static_cast<int>(v)].wire; }
std::string_view to_string(Receiver v) { return kReceiverNames[static_cast<int>(v)].wire; }
std::string_view to_string(MessageType v) { return kMessageTypeNames[static_cast<int>(v)].wire; }
std::string_view to_string(Safety v) { return kSafetyNames[static_cast<int>(v)].wire; }

Relationship relationship_from_string(std::string_view s) {
  return lookup<Relationship>(kRelationshipNames, s, false, "relationship");
}
Emitter emitter_from_string(std::string_view s) { return lookup<Emitter>(kEmitterNames, s, false, "emitter"); }
Receiver receiver_from_string(std::string_view s) { return lookup<Receiver>(kReceiverNames, s, false, "receiver"); }
MessageType message_type_from_string(std::string_view s) {
  return lookup<MessageType>(kMessageTypeNames, s, false, "message type");
}
Safety safety_from_string(std::string_view s) { return lookup<Safety>(kSafetyNames, s, false, "safety"); }

DistanceBand distance_band(Safety s) {
  switch (s) {
    case Safety::kCritical:
      return {0.0, 5.0};
    case Safety::kModerate:
      return {5.0, 10.0};
    case Safety::kRoutine:
      return {10.0, std::numeric_limits<double>::infinity()};
  }
  return {0.0, 0.0};
}

Safety safety_for_distance(double meters) {
  if (meters < 0.0) throw ValidationError("negative distance");
  if (meters < 5.0) return Safety::kCritical;
  if (meters < 10.0) return Safety::kModerate;
  return Safety::kRoutine;
}

int distance_band_index(Safety s) { return static_cast<int>(s) + 1; }

FactorConfig FactorConfig::full() {
  FactorConfig cfg;
  cfg.receivers.assign(kAllReceivers.begin(), kAllReceivers.end());
  return cfg;
}

FactorConfig FactorConfig::from_json(const nlohmann::json& j) {
  FactorConfig cfg;
  auto read = [&](const char* key, auto& dst, auto parse) {
    if (!j.contains(key)) return;
    dst.clear();
    for (const auto& v : j.at(key)) dst.push_back(parse(v));
  };
  read("relationship", cfg.relationships, [](const nlohmann::json& v) {
    return relationship_from_string(v.get<std::string>());
  });
  read("emitter", cfg.emitters, [](const nlohmann::json& v) { return emitter_from_string(v.get<std::string>()); });
  read("receiver", cfg.receivers, [](const nlohmann::json& v) { return receiver_from_string(v.get<std::string>()); });
  read("message_type", cfg.message_types,
       [](const nlohmann::json& v) { return message_type_from_string(v.get<std::string>()); });
  read("direction", cfg.directions, [](const nlohmann::json& v) {
    const int d = v.get<int>();
    if (d < 1 || d > 12) throw ConfigError("direction must be a clock hour 1..12, got " + std::to_string(d));
    return d;
  });
  read("safety", cfg.safety, [](const nlohmann::json& v) { return safety_from_string(v.get<std::string>()); });
  return cfg;
}

std::string ScenarioSkeleton::id() const {
  std::ostringstream os;
  os << kRelationshipNames[static_cast<int>(relationship)].abbrev << '.'
     << kEmitterNames[static_cast<int>(emitter)].abbrev << '.' << kReceiverNames[static_cast<int>(receiver)].abbrev
     << '.' << kMessageTypeNames[static_cast<int>(message_type)].abbrev << ".d" << (direction < 10 ? "0" : "")
     << direction << '.' << kSafetyNames[static_cast<int>(safety)].abbrev;
  return os.str();
}

ScenarioSkeleton ScenarioSkeleton::from_id(std::string_view skeleton_id) {
  const auto parts = split(skeleton_id, '.');
  if (parts.size() != 6 || parts[4].size() != 3 || parts[4][0] != 'd') {
    throw ValidationError("malformed scenario id '" + std::string(skeleton_id) + "'");
  }
  try {
    ScenarioSkeleton s{lookup<Relationship>(kRelationshipNames, parts[0], true, "relationship"),
                       lookup<Emitter>(kEmitterNames, parts[1], true, "emitter"),
                       lookup<Receiver>(kReceiverNames, parts[2], true, "receiver"),
                       lookup<MessageType>(kMessageTypeNames, parts[3], true, "message type"),
                       std::stoi(parts[4].substr(1)),
                       lookup<Safety>(kSafetyNames, parts[5], true, "safety")};
    if (s.direction < 1 || s.direction > 12) throw ValidationError("direction out of range");
    return s;
  } catch (const ConfigError& e) {
    throw ValidationError("malformed scenario id '" + std::string(skeleton_id) + "': " + e.what());
  } catch (const std::logic_error&) {
    throw ValidationError("malformed scenario id '" + std::string(skeleton_id) + "'");
  }
}

std::string Scenario::id() const { return skeleton.id() + "#m" + std::to_string(message_index); }

std::pair<ScenarioSkeleton, int> parse_scenario_id(std::string_view scenario_id) {
  const auto hash = scenario_id.find("#m");
  if (hash == std::string_view::npos) throw ValidationError("scenario id lacks message index: " + std::string(scenario_id));
  const auto skel = ScenarioSkeleton::from_id(scenario_id.substr(0, hash));
  const auto idx = scenario_id.substr(hash + 2);
  if (idx.empty() || !std::all_of(idx.begin(), idx.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    throw ValidationError("bad message index in scenario id: " + std::string(scenario_id));
  }
  return {skel, std::stoi(std::string(idx))};
}

std::vector<ScenarioSkeleton> enumerate_scenarios(const FactorConfig& f) {
  require_non_empty(f.relationships, "relationship");
  require_non_empty(f.emitters, "emitter");
  require_non_empty(f.receivers, "receiver");
  require_non_empty(f.message_types, "message_type");
  require_non_empty(f.directions, "direction");
  require_non_empty(f.safety, "safety");
  for (int d : f.directions) {
    if (d < 1 || d > 12) throw ConfigError("direction must be a clock hour 1..12");
  }

  std::vector<ScenarioSkeleton> out;
  out.reserve(f.relationships.size() * f.emitters.size() * f.receivers.size() * f.message_types.size() *
              f.directions.size() * f.safety.size());
  for (auto rel : f.relationships)
    for (auto em : f.emitters)
      for (auto rc : f.receivers)
        for (auto mt : f.message_types)
          for (int dir : f.directions)
            for (auto sf : f.safety) out.push_back({rel, em, rc, mt, dir, sf});
  return out;
}

std::string describe(const ScenarioSkeleton& s) {
  const auto band = distance_band(s.safety);
  std::ostringstream os;
  os << "Relationship: " << to_string(s.relationship) << "; emitter: " << to_string(s.emitter)
     << "; receiver: " << to_string(s.receiver) << " at " << s.direction << " o'clock; message type: "
     << to_string(s.message_type) << "; safety: " << to_string(s.safety) << " (";
  if (std::isinf(band.max_m)) {
    os << ">" << band.min_m << " m)";
  } else {
    os << band.min_m << "-" << band.max_m << " m)";
  }
  return os.str();
}

// ---------------------------------------------------------------- embeddings

HashEmbeddingProvider::HashEmbeddingProvider(std::size_t dimension, std::uint64_t seed)
    : dimension_(dimension), seed_(seed) {
  if (dimension == 0) throw ConfigError("embedding dimension must be positive");
}

std::vector<double> HashEmbeddingProvider::embed(std::string_view text) const {
  std::vector<double> v(dimension_, 0.0);
  const auto tokens = tokenize(text);
  auto add = [&](std::string_view feature, double weight) {
    const std::uint64_t h = splitmix64(fnv1a64(feature) ^ seed_);
    const std::size_t idx = h % dimension_;
    v[idx] += ((h >> 63) != 0U ? -weight : weight);
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    add(tokens[i], 1.0);
    if (i + 1 < tokens.size()) add(tokens[i] + " " + tokens[i + 1], 0.5);
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm == 0.0) {
    // Empty or fully-cancelled text: fixed fallback direction.
    v[splitmix64(seed_) % dimension_] = 1.0;
    return v;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

std::vector<std::vector<double>> embed_all(const EmbeddingProvider& provider, const std::vector<std::string>& texts,
                                           std::size_t max_in_flight) {
  std::vector<std::vector<double>> out(texts.size());
  if (max_in_flight <= 1) {
    for (std::size_t i = 0; i < texts.size(); ++i) out[i] = provider.embed(texts[i]);
    return out;
  }
  // Strided workers; each writes only its own output slots.
  const std::size_t workers = std::min(max_in_flight, std::max<std::size_t>(texts.size(), 1));
  std::vector<std::future<void>> futures;
  for (std::size_t w = 0; w < workers; ++w) {
    futures.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < texts.size(); i += workers) out[i] = provider.embed(texts[i]);
    }));
  }
  for (auto& f : futures) f.get();
  return out;
}

// ---------------------------------------------------------------- dedup

std::vector<std::string> farthest_point_sample(const std::vector<EmbeddedItem>& items, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ValidationError("keep_ratio must lie in (0, 1]");
  const std::size_t n = items.size();
  if (n == 0) return {};
  const std::size_t dim = items.front().vector.size();
  for (const auto& it : items) {
    if (it.vector.size() != dim) throw ValidationError("embedding dimension mismatch at id '" + it.id + "'");
  }
  const std::size_t k = std::min(n, ceil_count(keep_ratio, n));

  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  std::size_t current = 0;
  for (std::size_t picked = 0; picked < k; ++picked) {
    chosen[current] = 1;
    const auto& c = items[current].vector;
    std::size_t next = n;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen[i]) continue;
      double d2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = items[i].vector[j] - c[j];
        d2 += diff * diff;
      }
      min_dist[i] = std::min(min_dist[i], d2);
      if (min_dist[i] > best) {
        best = min_dist[i];
        next = i;
      }
    }
    if (next == n) break;
    current = next;
  }

  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (chosen[i]) out.push_back(items[i].id);
  }
  return out;
}

// ---------------------------------------------------------------- messages

std::string synthetic_message(const ScenarioSkeleton& s, int message_index) {
  static constexpr std::array<std::string_view, 8> kVerb = {
      "please proceed",        "you may want to slow down", "are you crossing",   "yes, go ahead",
      "I am stopping now",     "I just yielded to you",     "I will turn soon",   "watch out"};
  static constexpr std::array<std::string_view, 4> kWho = {"driver", "pedestrian", "cyclist", "motorcyclist"};
  static constexpr std::array<std::string_view, 3> kUrgency = {"immediately", "shortly", "when ready"};
  static constexpr std::array<std::string_view, 3> kFrame = {"{v}, {w} at {d} o'clock, {u}.",
                                                             "To the {w} at {d} o'clock: {v} {u}.",
                                                             "{w}, {v}; {u} ({d} o'clock)."};
  std::string out(kFrame[static_cast<std::size_t>(message_index) % kFrame.size()]);
  auto replace = [&out](std::string_view key, std::string_view val) {
    const auto pos = out.find(key);
    if (pos != std::string::npos) out.replace(pos, key.size(), val);
  };
  replace("{v}", kVerb[static_cast<int>(s.message_type)]);
  replace("{w}", kWho[static_cast<int>(s.receiver)]);
  replace("{d}", std::to_string(s.direction));
  replace("{u}", kUrgency[static_cast<int>(s.safety)]);
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

ScenarioCatalog::ScenarioCatalog(std::vector<ScenarioSkeleton> skeletons) : skeletons_(std::move(skeletons)) {
  for (std::size_t i = 0; i < skeletons_.size(); ++i) skeleton_index_.emplace(skeletons_[i].id(), i);
}

void ScenarioCatalog::reindex() {
  scenario_index_.clear();
  next_message_index_.clear();
  for (std::size_t i = 0; i < scenarios_.size(); ++i) {
    scenario_index_.emplace(scenarios_[i].id(), i);
    auto& next = next_message_index_[scenarios_[i].skeleton.id()];
    next = std::max(next, scenarios_[i].message_index + 1);
  }
}

IngestReport ScenarioCatalog::ingest(const std::vector<MessageRecord>& records) {
  IngestReport report;
  for (const auto& rec : records) {
    std::string skeleton_id = rec.scenario_id;
    std::optional<int> explicit_index;
    if (const auto hash = rec.scenario_id.find("#m"); hash != std::string::npos) {
      try {
        explicit_index = parse_scenario_id(rec.scenario_id).second;
      } catch (const ValidationError& e) {
        report.rejections.push_back({0, rec.scenario_id, e.what()});
        continue;
      }
      skeleton_id = rec.scenario_id.substr(0, hash);
    }
    const auto it = skeleton_index_.find(skeleton_id);
    if (it == skeleton_index_.end()) {
      report.rejections.push_back({0, rec.scenario_id, "unknown scenario id"});
      continue;
    }
    auto& next = next_message_index_[skeleton_id];
    const int index = explicit_index.value_or(next);
    Scenario sc{skeletons_[it->second], index, rec.text, {}};
    if (scenario_index_.count(sc.id()) != 0U) {
      report.rejections.push_back({0, rec.scenario_id, "duplicate message index"});
      continue;
    }
    next = std::max(next, index + 1);
    scenario_index_.emplace(sc.id(), scenarios_.size());
    scenarios_.push_back(std::move(sc));
    ++report.accepted;
  }
  return report;
}

IngestReport ScenarioCatalog::ingest_jsonl(std::istream& in) {
  std::vector<MessageRecord> records;
  std::vector<std::size_t> lines;
  IngestReport report;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      records.push_back({j.at("scenario_id").get<std::string>(), j.at("text").get<std::string>()});
      lines.push_back(lineno);
    } catch (const nlohmann::json::exception& e) {
      report.rejections.push_back({lineno, "", std::string("malformed record: ") + e.what()});
    }
  }
  // Ingest one at a time so rejections keep their source line.
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto r = ingest({records[i]});
    report.accepted += r.accepted;
    for (auto& rej : r.rejections) {
      rej.line = lines[i];
      report.rejections.push_back(std::move(rej));
    }
  }
  std::stable_sort(report.rejections.begin(), report.rejections.end(),
                   [](const auto& a, const auto& b) { return a.line < b.line; });
  return report;
}

IngestReport ScenarioCatalog::ingest_synthetic(std::size_t per_skeleton) {
  std::vector<MessageRecord> records;
  records.reserve(skeletons_.size() * per_skeleton);
  for (const auto& s : skeletons_) {
    const int base = next_message_index_.count(s.id()) != 0U ? next_message_index_.at(s.id()) : 0;
    for (std::size_t m = 0; m < per_skeleton; ++m) {
      const int idx = base + static_cast<int>(m);
      records.push_back({s.id() + "#m" + std::to_string(idx), synthetic_message(s, idx)});
    }
  }
  return ingest(records);
}

void ScenarioCatalog::embed(const EmbeddingProvider& provider, std::size_t max_in_flight) {
  std::vector<std::string> texts;
  texts.reserve(scenarios_.size());
  for (const auto& s : scenarios_) texts.push_back(s.intended_message);
  auto vectors = embed_all(provider, texts, max_in_flight);
  for (std::size_t i = 0; i < scenarios_.size(); ++i) scenarios_[i].embedding = std::move(vectors[i]);
}

std::size_t ScenarioCatalog::deduplicate(double keep_ratio, DedupScope scope) {
  for (const auto& s : scenarios_) {
    if (s.embedding.empty()) throw ValidationError("deduplicate requires embeddings; call embed() first");
  }
  std::vector<std::string> keep;
  if (scope == DedupScope::kGlobal) {
    std::vector<EmbeddedItem> items;
    items.reserve(scenarios_.size());
    for (const auto& s : scenarios_) items.push_back({s.id(), s.embedding});
    keep = farthest_point_sample(items, keep_ratio);
  } else {
    std::map<std::string, std::vector<EmbeddedItem>> groups;
    std::vector<std::string> order;
    for (const auto& s : scenarios_) {
      const auto key = s.skeleton.id();
      if (groups.count(key) == 0U) order.push_back(key);
      groups[key].push_back({s.id(), s.embedding});
    }
    for (const auto& key : order) {
      auto part = farthest_point_sample(groups[key], keep_ratio);
      keep.insert(keep.end(), part.begin(), part.end());
    }
  }
  std::sort(keep.begin(), keep.end());
  std::vector<Scenario> kept;
  kept.reserve(keep.size());
  for (auto& s : scenarios_) {
    if (std::binary_search(keep.begin(), keep.end(), s.id())) kept.push_back(std::move(s));
  }
  scenarios_ = std::move(kept);
  reindex();
  return scenarios_.size();
}

const Scenario* ScenarioCatalog::find(std::string_view scenario_id) const {
  const auto it = scenario_index_.find(std::string(scenario_id));
  return it == scenario_index_.end() ? nullptr : &scenarios_[it->second];
}

nlohmann::json ScenarioCatalog::to_json() const {
  nlohmann::json skel = nlohmann::json::array();
  for (const auto& s : skeletons_) skel.push_back(s.id());
  nlohmann::json sc = nlohmann::json::array();
  for (const auto& s : scenarios_) {
    sc.push_back({{"id", s.id()}, {"text", s.intended_message}, {"embedding", s.embedding}});
  }
  return {{"skeletons", skel}, {"scenarios", sc}};
}

ScenarioCatalog ScenarioCatalog::from_json(const nlohmann::json& j) {
  std::vector<ScenarioSkeleton> skeletons;
  for (const auto& id : j.at("skeletons")) skeletons.push_back(ScenarioSkeleton::from_id(id.get<std::string>()));
  ScenarioCatalog cat(std::move(skeletons));
  for (const auto& s : j.at("scenarios")) {
    auto [skel, idx] = parse_scenario_id(s.at("id").get<std::string>());
    Scenario sc{skel, idx, s.at("text").get<std::string>(), s.value("embedding", std::vector<double>{})};
    cat.scenarios_.push_back(std::move(sc));
  }
  cat.reindex();
  return cat;
}

}  // namespace coloop
