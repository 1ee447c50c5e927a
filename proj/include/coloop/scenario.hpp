#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace coloop {

enum class Relationship { kFirstPerson1to1, kFirstPerson1toMany, kThirdPerson1to1, kThirdPerson1toMany };
enum class Emitter { kSelfDrivingCar, kDeliveryRobot };
enum class Receiver { kVehicleDriver, kPedestrian, kCyclist, kMotorcyclist };
enum class MessageType { kInstruction, kAdvisory, kQuestion, kAnswer, kCurrent, kHistorical, kPredictive, kWarn };
enum class Safety { kCritical, kModerate, kRoutine };

inline constexpr std::array kAllRelationships = {Relationship::kFirstPerson1to1, Relationship::kFirstPerson1toMany,
                                                 Relationship::kThirdPerson1to1, Relationship::kThirdPerson1toMany};
inline constexpr std::array kAllEmitters = {Emitter::kSelfDrivingCar, Emitter::kDeliveryRobot};
inline constexpr std::array kAllReceivers = {Receiver::kVehicleDriver, Receiver::kPedestrian, Receiver::kCyclist,
                                             Receiver::kMotorcyclist};
inline constexpr std::array kAllMessageTypes = {MessageType::kInstruction, MessageType::kAdvisory,
                                                MessageType::kQuestion,    MessageType::kAnswer,
                                                MessageType::kCurrent,     MessageType::kHistorical,
                                                MessageType::kPredictive,  MessageType::kWarn};
inline constexpr std::array kAllSafety = {Safety::kCritical, Safety::kModerate, Safety::kRoutine};

// Wire names ("first-person-1to1", "self-driving-car", ...). from_string throws
// ConfigError on unknown names.
std::string_view to_string(Relationship v);
std::string_view to_string(Emitter v);
std::string_view to_string(Receiver v);
std::string_view to_string(MessageType v);
std::string_view to_string(Safety v);

Relationship relationship_from_string(std::string_view s);
Emitter emitter_from_string(std::string_view s);
Receiver receiver_from_string(std::string_view s);
MessageType message_type_from_string(std::string_view s);
Safety safety_from_string(std::string_view s);

/// Distance band in meters for a safety level: critical [0,5), moderate [5,10),
/// routine [10, inf).
struct DistanceBand {
  double min_m;
  double max_m;  // +inf for routine
};
DistanceBand distance_band(Safety s);
Safety safety_for_distance(double meters);
/// 1-based camera distance band index (critical=1 ... routine=3).
int distance_band_index(Safety s);

/// Enabled values per factor. The default space has 6912 skeletons: every
/// value of every factor except the motorcyclist receiver. full() enables all
/// values (9216 skeletons).
struct FactorConfig {
  std::vector<Relationship> relationships{kAllRelationships.begin(), kAllRelationships.end()};
  std::vector<Emitter> emitters{kAllEmitters.begin(), kAllEmitters.end()};
  std::vector<Receiver> receivers{Receiver::kVehicleDriver, Receiver::kPedestrian, Receiver::kCyclist};
  std::vector<MessageType> message_types{kAllMessageTypes.begin(), kAllMessageTypes.end()};
  std::vector<int> directions{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  std::vector<Safety> safety{kAllSafety.begin(), kAllSafety.end()};

  /// Reads {"relationship":[...], "emitter":[...], ...}; absent keys keep defaults.
  static FactorConfig from_json(const nlohmann::json& j);
  static FactorConfig full();
};

/// One point of the factor space without its intended message.
struct ScenarioSkeleton {
  Relationship relationship;
  Emitter emitter;
  Receiver receiver;
  MessageType message_type;
  int direction;  // clock hour 1..12
  Safety safety;

  /// Deterministic key, e.g. "fp-1to1.sdc.ped.warn.d03.crit".
  std::string id() const;
  static ScenarioSkeleton from_id(std::string_view skeleton_id);

  friend bool operator==(const ScenarioSkeleton&, const ScenarioSkeleton&) = default;
};

struct Scenario {
  ScenarioSkeleton skeleton;
  int message_index = 0;
  std::string intended_message;
  std::vector<double> embedding;

  /// Skeleton id plus "#m<index>".
  std::string id() const;
};

/// Splits "skeleton#mN" into (skeleton, N); throws ValidationError when malformed.
std::pair<ScenarioSkeleton, int> parse_scenario_id(std::string_view scenario_id);

/// Full Cartesian product in relationship → emitter → receiver → message_type
/// → direction → safety order (safety varies fastest).
std::vector<ScenarioSkeleton> enumerate_scenarios(const FactorConfig& factors);

/// Human-readable one-liner used in training prompts and synthetic messages.
std::string describe(const ScenarioSkeleton& s);

// ---------------------------------------------------------------- embeddings

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dimension() const = 0;
  /// Unit-norm embedding; identical text yields an identical vector.
  virtual std::vector<double> embed(std::string_view text) const = 0;
};

/// Offline stand-in for a sentence encoder: hashed bag of tokens and bigrams,
/// mixed with a per-instance seed and normalized.
class HashEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit HashEmbeddingProvider(std::size_t dimension = 16, std::uint64_t seed = 0);
  std::size_t dimension() const override { return dimension_; }
  std::vector<double> embed(std::string_view text) const override;

 private:
  std::size_t dimension_;
  std::uint64_t seed_;
};

/// Embeds every text with at most max_in_flight concurrent calls; output order
/// follows input order regardless of completion order.
std::vector<std::vector<double>> embed_all(const EmbeddingProvider& provider, const std::vector<std::string>& texts,
                                           std::size_t max_in_flight = 4);

// ---------------------------------------------------------------- dedup

struct EmbeddedItem {
  std::string id;
  std::vector<double> vector;
};

/// Greedy max-min (farthest point) selection of ceil(keep_ratio * n) ids,
/// seeded with the first item. Output keeps the input order of the selected ids.
std::vector<std::string> farthest_point_sample(const std::vector<EmbeddedItem>& items, double keep_ratio);

enum class DedupScope { kGlobal, kPerScenario };

// ---------------------------------------------------------------- messages

struct MessageRecord {
  std::string scenario_id;  // skeleton id or full scenario id
  std::string text;
};

struct Rejection {
  std::size_t line = 0;  // 1-based line in the source, 0 for generated records
  std::string scenario_id;
  std::string reason;
};

struct IngestReport {
  std::size_t accepted = 0;
  std::vector<Rejection> rejections;
};

/// Scenario catalog: skeletons known to the run plus the messages attached to them.
class ScenarioCatalog {
 public:
  explicit ScenarioCatalog(std::vector<ScenarioSkeleton> skeletons);

  const std::vector<ScenarioSkeleton>& skeletons() const { return skeletons_; }
  const std::vector<Scenario>& scenarios() const { return scenarios_; }

  /// Reads JSONL {scenario_id, text}. scenario_id may name a skeleton (the
  /// message gets the next index) or a full "skeleton#mN" id.
  IngestReport ingest_jsonl(std::istream& in);
  IngestReport ingest(const std::vector<MessageRecord>& records);
  /// Deterministic template text, per_skeleton messages per skeleton.
  IngestReport ingest_synthetic(std::size_t per_skeleton);

  void embed(const EmbeddingProvider& provider, std::size_t max_in_flight = 4);
  /// Keeps the farthest-point subset of messages (requires embed()).
  /// Returns the number of scenarios kept.
  std::size_t deduplicate(double keep_ratio, DedupScope scope);

  const Scenario* find(std::string_view scenario_id) const;

  nlohmann::json to_json() const;
  static ScenarioCatalog from_json(const nlohmann::json& j);

 private:
  std::vector<ScenarioSkeleton> skeletons_;
  std::map<std::string, std::size_t> skeleton_index_;
  std::map<std::string, int> next_message_index_;
  std::vector<Scenario> scenarios_;
  std::map<std::string, std::size_t> scenario_index_;

  void reindex();
};

std::string synthetic_message(const ScenarioSkeleton& s, int message_index);

}  // namespace coloop
