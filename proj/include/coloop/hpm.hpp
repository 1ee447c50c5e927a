#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "coloop/action.hpp"
#include "coloop/evaluation.hpp"
#include "coloop/scenario.hpp"

namespace coloop {

/// Features for the human preference model. Layout (see feature_names):
/// message type one-hot (8), receiver one-hot (4), safety one-hot (3),
/// sin/cos of the clock direction, total duration, mean transition, then the
/// modality block (eyes: mean radius, angular spread; lightbar: lit fraction,
/// switch count; arm: per-joint normalized mean and variance), then bias = 1.
struct FeatureVector {
  Modality modality = Modality::kEyes;
  std::vector<double> values;
};

std::vector<std::string> feature_names(Modality m);
std::size_t feature_dimension(Modality m);

/// Timeline statistics are taken at 4 fps over the frames after t = 0 (the
/// start frame reflects the rest pose, not the action).
FeatureVector featurize(const ScenarioSkeleton& scenario, const ActionSequence& action, const ArmLimits& limits = {});

struct HumanRating {
  std::string rater_id;
  std::string scenario_id;
  std::string action_ref;
  // Stage 1 (message hidden).
  double targeting = 0.0;
  double trust = 0.0;
  double perceived_safety = 0.0;
  double mental_workload = 0.0;  // 1..20
  // Stage 2 (message revealed); absent until stage 1 is complete.
  std::optional<double> acceptance;
  std::optional<double> consistency;
  std::uint64_t stage1_at = 0;
  std::uint64_t stage2_at = 0;

  bool complete() const { return acceptance.has_value() && consistency.has_value(); }
  void validate() const;
  nlohmann::json to_json() const;
  static HumanRating from_json(const nlohmann::json& j);
};

/// Weighted composite 0.3 acceptance + 0.3 consistency + 0.2 targeting + 0.2
/// trust, mapped affinely from [1, 9] onto the kernel range.
double human_target(const HumanRating& r);

struct HpmModel {
  Modality modality = Modality::kEyes;
  std::vector<double> weights;  // in standardized feature space; last entry is the bias
  std::vector<double> mean;     // per-feature training mean (bias: 0)
  std::vector<double> scale;    // per-feature training std (bias, constant features: 1)
  double ridge = 1.0;
  std::string fingerprint;  // hash of the training set
  int version = 0;

  /// Weights and intercept in the original feature units.
  std::vector<double> raw_weights() const;
  nlohmann::json to_json() const;
  static HpmModel from_json(const nlohmann::json& j);
};

/// Ridge regression on standardized features minimizing
/// mean squared error + ridge * |w|^2 (bias unpenalized), solved in closed form.
/// Duplicating the data set leaves the solution unchanged.
HpmModel fit(const std::vector<FeatureVector>& features, const std::vector<double>& targets, double ridge,
             int previous_version = 0);

/// Unclamped affine prediction.
double predict_raw(const HpmModel& model, const FeatureVector& x);
/// Prediction clamped to the kernel range.
double predict(const HpmModel& model, const FeatureVector& x);

struct ReliabilityStats {
  double cronbach_alpha;
  double icc_2_1;  // two-way random, absolute agreement, single rater
  double icc_2_k;  // two-way random, absolute agreement, mean of k raters
};

/// Scores matrix: one row per rater, one column per rated item. Raters act as
/// the scale items for alpha. Throws UndefinedInputError on fewer than two
/// raters or items, ragged rows, or zero variance in a required denominator.
ReliabilityStats reliability(const std::vector<std::vector<double>>& matrix);

// ---------------------------------------------------------------- queue / store

struct QueueItem {
  std::string scenario_id;
  std::string action_ref;
  std::string clip_key;
  double k_vlm = 0.0;
  double k_hpm = 0.0;
  double abs_delta = 0.0;
  std::uint64_t seq = 0;  // enqueue order

  std::string key() const { return scenario_id + "|" + action_ref; }
  nlohmann::json to_json() const;
  static QueueItem from_json(const nlohmann::json& j);
};

/// Uncertain candidates awaiting human ratings, most uncertain first. Each
/// (scenario, action) is admitted at most once over the queue's lifetime.
class HumanQueue {
 public:
  HumanQueue() = default;
  HumanQueue(HumanQueue&& other) noexcept;
  HumanQueue& operator=(HumanQueue&& other) noexcept;

  bool push(QueueItem item);  // false when the item was seen before
  std::vector<QueueItem> peek(std::size_t limit) const;
  std::optional<QueueItem> pop();
  bool remove(const std::string& key);
  bool contains(const std::string& key) const;
  bool seen(const std::string& key) const;
  std::size_t size() const;

  nlohmann::json to_json() const;
  static HumanQueue from_json(const nlohmann::json& j);

 private:
  static bool before(const QueueItem& a, const QueueItem& b);
  mutable std::shared_mutex mu_;
  std::vector<QueueItem> pending_;
  std::set<std::string> seen_;
  std::uint64_t next_seq_ = 1;
};

enum class RatingSubmit { kAccepted, kDuplicate };

/// Two-stage rating store keyed by (rater, scenario, action).
class RatingStore {
 public:
  RatingStore() = default;
  RatingStore(RatingStore&& other) noexcept;
  RatingStore& operator=(RatingStore&& other) noexcept;

  /// Stage-1 fields: targeting, trust, perceived_safety, mental_workload.
  /// Throws ValidationError on out-of-range values or missing fields.
  RatingSubmit submit_stage1(const std::string& rater, const std::string& scenario, const std::string& action,
                             const nlohmann::json& scores);
  /// Stage-2 fields: acceptance, consistency. Requires a stage-1 submission.
  RatingSubmit submit_stage2(const std::string& rater, const std::string& scenario, const std::string& action,
                             const nlohmann::json& scores);
  bool has_stage1(const std::string& rater, const std::string& scenario) const;

  std::vector<HumanRating> complete() const;
  std::vector<HumanRating> all() const;
  /// Raters x items matrix of a stage metric over items every listed rater completed.
  std::vector<std::vector<double>> matrix(const std::string& metric) const;

  nlohmann::json to_json() const;
  static RatingStore from_json(const nlohmann::json& j);

 private:
  static std::string key(const std::string& rater, const std::string& scenario, const std::string& action);
  mutable std::shared_mutex mu_;
  std::map<std::string, HumanRating> ratings_;
  std::uint64_t clock_ = 0;
};

}  // namespace coloop
