#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "coloop/scenario.hpp"

namespace coloop {

class ActionDb;
struct PreferencePair;

/// Kernel score range for Likert inputs in [1, 9] with s_norm = s_raw / 9.
inline constexpr double kKernelMin = 4.0 + 1.0 / 9.0;
inline constexpr double kKernelMax = 45.0;

/// The six rater metrics. Phase 1: certainty, similarity, targeting, trust.
/// Phase 2: acceptance, consistency. All on 9-point scales.
struct EvalScores {
  double certainty = 1.0;
  double similarity_raw = 1.0;
  double targeting = 1.0;
  double trust = 1.0;
  double acceptance = 1.0;
  double consistency = 1.0;
  std::string interpreted_message;

  void validate() const;  // ValidationError when a metric leaves [1, 9]
  nlohmann::json to_json() const;
  static EvalScores from_json(const nlohmann::json& j);
};

struct KernelScore {
  double k;
  double s_norm;
};

/// Per-term multipliers for experiments; the default is the unweighted kernel.
struct MetricWeights {
  double certainty_similarity = 1.0;
  double targeting = 1.0;
  double trust = 1.0;
  double acceptance = 1.0;
  double consistency = 1.0;
};

/// K = certainty * (similarity / 9) + targeting + trust + acceptance + consistency.
KernelScore kernel_score(const EvalScores& scores);
KernelScore kernel_score(const EvalScores& scores, const MetricWeights& weights);

/// Certainty implied by averaged metrics and K: (K - (acceptance + consistency + targeting + trust)) / s_norm.
double implied_certainty(double k, double acceptance, double consistency, double targeting, double trust,
                         double s_norm);

// ---------------------------------------------------------------- mixing

struct MixedEvalConfig {
  double lambda = 0.3;               // weight on the preference model
  double uncertainty_threshold = 3;  // K units
  std::size_t drift_window = 200;
  double drift_rate_trigger = 0.25;

  void validate() const;
};

struct MixedScore {
  double k;
  bool uncertain;
};

MixedScore mixed_score(double k_vlm, double k_hpm, const MixedEvalConfig& cfg);

struct DisagreementRecord {
  std::string scenario_id;
  std::string action_ref;  // action content hash
  double k_vlm = 0.0;
  double k_hpm = 0.0;
  double abs_delta = 0.0;
  bool uncertain = false;
  std::uint64_t timestamp = 0;  // logical append order
  bool replayed = false;

  nlohmann::json to_json() const;
  static DisagreementRecord from_json(const nlohmann::json& j);
};

DisagreementRecord make_disagreement(std::string scenario_id, std::string action_ref, double k_vlm, double k_hpm,
                                     const MixedEvalConfig& cfg);

/// Append-only disagreement log: one writer, any number of readers.
class DisagreementLog {
 public:
  DisagreementLog() = default;
  DisagreementLog(DisagreementLog&& other) noexcept : records_(std::move(other.records_)) {}
  DisagreementLog& operator=(DisagreementLog&& other) noexcept {
    if (this != &other) {
      std::unique_lock lock(mu_);
      records_ = std::move(other.records_);
    }
    return *this;
  }

  std::uint64_t append(DisagreementRecord rec);
  std::vector<DisagreementRecord> snapshot() const;
  std::vector<DisagreementRecord> last(std::size_t n) const;
  /// Marks the records at the given timestamps as replayed.
  void mark_replayed(std::span<const std::uint64_t> timestamps);
  std::size_t size() const;

  void save(const std::string& path) const;
  static DisagreementLog load(const std::string& path);

 private:
  mutable std::shared_mutex mu_;
  std::vector<DisagreementRecord> records_;
};

struct DriftReport {
  double disagree_rate;
  bool refresh_recommended;
  std::size_t window;  // records actually inspected
};

/// Uncertain fraction over the last cfg.drift_window records.
DriftReport drift_monitor(std::span<const DisagreementRecord> stream, const MixedEvalConfig& cfg);

struct HardNegativeResult {
  std::vector<PreferencePair> pairs;
  std::vector<std::uint64_t> replayed;  // timestamps newly marked as replayed
  std::vector<std::string> skipped;     // dangling references, one message each
};

/// Pairs each unreplayed disagreement's action with its scenario's best action
/// when the gap is at least delta_min. Records are marked replayed in place.
HardNegativeResult hard_negative_pairs(std::span<DisagreementRecord> records, const ActionDb& db, double delta_min);

// ---------------------------------------------------------------- clients

enum class EvalPhase { kIntention = 1, kInformed = 2 };
enum class CostClass { kLight, kFull };

struct EvalRequest {
  const Scenario* scenario = nullptr;
  std::string clip_ref;
  EvalPhase phase = EvalPhase::kIntention;
  std::optional<std::string> revealed_message;  // set only in the informed phase
};

/// Partial scores returned by one phase.
struct PhaseScores {
  std::optional<double> certainty;
  std::optional<std::string> interpreted_message;
  std::optional<double> targeting;
  std::optional<double> trust;
  std::optional<double> acceptance;
  std::optional<double> consistency;
};

class EvaluatorClient {
 public:
  virtual ~EvaluatorClient() = default;
  virtual PhaseScores evaluate(const EvalRequest& request) = 0;
  virtual CostClass cost_class() const = 0;
};

/// Compares the interpreted message with the intended one on the 1..9 scale.
class SimilarityJudge {
 public:
  virtual ~SimilarityJudge() = default;
  virtual double similarity(const std::string& interpreted, const std::string& intended) const = 0;
};

/// Token-set F1 mapped affinely onto 1..9.
class TokenOverlapJudge final : public SimilarityJudge {
 public:
  double similarity(const std::string& interpreted, const std::string& intended) const override;
};

double token_f1(const std::string& a, const std::string& b);

/// Runs both phases for one clip. The intended message is withheld from the
/// intention phase and revealed in the informed phase.
EvalScores evaluate_two_phase(EvaluatorClient& client, const SimilarityJudge& judge, const Scenario& scenario,
                              const std::string& clip_ref);

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{100};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{5000};

  std::chrono::milliseconds backoff_for(int attempt) const;  // attempt is 1-based
};

/// Calls fn until it succeeds or attempts run out; sleeps between attempts.
/// The last failure is rethrown wrapped in ServiceError.
void with_retries(const RetryPolicy& policy, const std::string& what, const std::function<void()>& fn,
                  const std::function<void(std::chrono::milliseconds)>& sleeper = {});

struct HttpEndpoint {
  std::string base_url;  // e.g. http://127.0.0.1:8081
  std::string path = "/evaluate";
  std::chrono::milliseconds connect_timeout{2000};
  std::chrono::milliseconds read_timeout{30000};
};

/// POSTs {scenario, clip_ref, phase, revealed_message?} and reads the phase's
/// fields from the JSON response.
class HttpEvaluatorClient final : public EvaluatorClient {
 public:
  HttpEvaluatorClient(HttpEndpoint endpoint, RetryPolicy retry, CostClass cost = CostClass::kFull);
  PhaseScores evaluate(const EvalRequest& request) override;
  CostClass cost_class() const override { return cost_; }

  static nlohmann::json request_body(const EvalRequest& request);
  static PhaseScores parse_response(EvalPhase phase, const nlohmann::json& body);

 private:
  HttpEndpoint endpoint_;
  RetryPolicy retry_;
  CostClass cost_;
};

}  // namespace coloop
