#include "coloop/hpm.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>

#include "coloop/common.hpp"

namespace coloop {
namespace {

constexpr double kFeatureFps = 4.0;
constexpr std::size_t kScenarioFeatures = 8 + 4 + 3 + 2;
constexpr std::size_t kCommonActionFeatures = 2;

std::size_t modality_block(Modality m) { return m == Modality::kArm ? 2 * kArmJoints : 2; }

double sample_variance(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size() - 1);
}

void check_range(const nlohmann::json& scores, const char* field, double lo, double hi, double& out) {
  const auto it = scores.find(field);
  if (it == scores.end() || it->is_null()) throw ValidationError(std::string(field) + ": required");
  if (!it->is_number()) throw ValidationError(std::string(field) + ": must be a number");
  const double v = it->get<double>();
  if (v < lo || v > hi) {
    throw ValidationError(std::string(field) + ": " + std::to_string(v) + " outside " + std::to_string(int(lo)) +
                          ".." + std::to_string(int(hi)));
  }
  out = v;
}

}  // namespace

std::vector<std::string> feature_names(Modality m) {
  std::vector<std::string> names;
  for (auto t : kAllMessageTypes) names.push_back("message_type=" + std::string(to_string(t)));
  for (auto r : kAllReceivers) names.push_back("receiver=" + std::string(to_string(r)));
  for (auto s : kAllSafety) names.push_back("safety=" + std::string(to_string(s)));
  names.emplace_back("direction_sin");
  names.emplace_back("direction_cos");
  names.emplace_back("total_duration_s");
  names.emplace_back("mean_transition_s");
  switch (m) {
    case Modality::kEyes:
      names.emplace_back("mean_radius");
      names.emplace_back("angular_spread");
      break;
    case Modality::kLightbar:
      names.emplace_back("lit_fraction");
      names.emplace_back("switch_count");
      break;
    case Modality::kArm:
      for (auto j : kArmJointNames) names.push_back(std::string(j) + "_mean");
      for (auto j : kArmJointNames) names.push_back(std::string(j) + "_variance");
      break;
  }
  names.emplace_back("bias");
  return names;
}

std::size_t feature_dimension(Modality m) { return kScenarioFeatures + kCommonActionFeatures + modality_block(m) + 1; }

FeatureVector featurize(const ScenarioSkeleton& scenario, const ActionSequence& action, const ArmLimits& limits) {
  if (action.keyframes.empty()) throw ValidationError("cannot featurize an empty action");
  FeatureVector fv;
  fv.modality = action.modality;
  auto& v = fv.values;
  v.reserve(feature_dimension(action.modality));

  for (auto t : kAllMessageTypes) v.push_back(scenario.message_type == t ? 1.0 : 0.0);
  for (auto r : kAllReceivers) v.push_back(scenario.receiver == r ? 1.0 : 0.0);
  for (auto s : kAllSafety) v.push_back(scenario.safety == s ? 1.0 : 0.0);
  const double theta = 2.0 * M_PI * scenario.direction / 12.0;
  v.push_back(std::sin(theta));
  v.push_back(std::cos(theta));

  v.push_back(action.total_seconds());
  v.push_back(action.total_seconds() / static_cast<double>(action.keyframes.size()));

  const auto tl = compile_timeline(action, kFeatureFps, std::nullopt, limits);
  const std::size_t first = tl.frames.size() > 1 ? 1 : 0;
  const auto n = static_cast<double>(tl.frames.size() - first);

  switch (action.modality) {
    case Modality::kEyes: {
      double radius = 0.0;
      std::complex<double> dir{0.0, 0.0};
      for (std::size_t i = first; i < tl.frames.size(); ++i) {
        const auto& e = std::get<EyeState>(tl.frames[i]);
        radius += e.radius;
        dir += std::polar(1.0, e.angle * M_PI / 180.0);
      }
      v.push_back(radius / n);
      v.push_back(std::max(0.0, 1.0 - std::abs(dir) / n));
      break;
    }
    case Modality::kLightbar: {
      double lit = 0.0;
      for (std::size_t i = first; i < tl.frames.size(); ++i) {
        lit += std::get<LightbarState>(tl.frames[i]).lit_count() / static_cast<double>(kLightbarRegions);
      }
      int switches = 0;
      for (std::size_t k = 1; k < action.keyframes.size(); ++k) {
        if (action.keyframes[k].state != action.keyframes[k - 1].state) ++switches;
      }
      v.push_back(lit / n);
      v.push_back(switches);
      break;
    }
    case Modality::kArm: {
      std::array<double, kArmJoints> mean{};
      std::array<double, kArmJoints> sq{};
      for (std::size_t i = first; i < tl.frames.size(); ++i) {
        const auto& a = std::get<ArmState>(tl.frames[i]);
        for (std::size_t j = 0; j < kArmJoints; ++j) {
          const double x = limits.normalize(j, a.joints[j]);
          mean[j] += x;
          sq[j] += x * x;
        }
      }
      for (std::size_t j = 0; j < kArmJoints; ++j) v.push_back(mean[j] / n);
      for (std::size_t j = 0; j < kArmJoints; ++j) {
        const double m = mean[j] / n;
        v.push_back(std::max(0.0, sq[j] / n - m * m));
      }
      break;
    }
  }
  v.push_back(1.0);
  return fv;
}

// ---------------------------------------------------------------- ratings

void HumanRating::validate() const {
  auto in = [](double x, double lo, double hi) { return x >= lo && x <= hi; };
  if (!in(targeting, 1, 9) || !in(trust, 1, 9) || !in(perceived_safety, 1, 9)) {
    throw ValidationError("stage-1 Likert score outside 1..9");
  }
  if (!in(mental_workload, 1, 20)) throw ValidationError("mental workload outside 1..20");
  if (acceptance.has_value() != consistency.has_value()) throw ValidationError("stage 2 is partially filled");
  if (acceptance && (!in(*acceptance, 1, 9) || !in(*consistency, 1, 9))) {
    throw ValidationError("stage-2 Likert score outside 1..9");
  }
}

nlohmann::json HumanRating::to_json() const {
  nlohmann::json j = {{"rater_id", rater_id},
                      {"scenario_id", scenario_id},
                      {"action_ref", action_ref},
                      {"stage1",
                       {{"targeting", targeting},
                        {"trust", trust},
                        {"perceived_safety", perceived_safety},
                        {"mental_workload", mental_workload}}},
                      {"stage1_at", stage1_at}};
  if (complete()) {
    j["stage2"] = {{"acceptance", *acceptance}, {"consistency", *consistency}};
    j["stage2_at"] = stage2_at;
  }
  return j;
}

HumanRating HumanRating::from_json(const nlohmann::json& j) {
  HumanRating r;
  r.rater_id = j.at("rater_id").get<std::string>();
  r.scenario_id = j.at("scenario_id").get<std::string>();
  r.action_ref = j.at("action_ref").get<std::string>();
  const auto& s1 = j.at("stage1");
  r.targeting = s1.at("targeting").get<double>();
  r.trust = s1.at("trust").get<double>();
  r.perceived_safety = s1.at("perceived_safety").get<double>();
  r.mental_workload = s1.at("mental_workload").get<double>();
  r.stage1_at = j.value("stage1_at", std::uint64_t{0});
  if (j.contains("stage2")) {
    r.acceptance = j.at("stage2").at("acceptance").get<double>();
    r.consistency = j.at("stage2").at("consistency").get<double>();
    r.stage2_at = j.value("stage2_at", std::uint64_t{0});
  }
  r.validate();
  return r;
}

double human_target(const HumanRating& r) {
  if (!r.complete()) throw ValidationError("human target needs both rating stages");
  const double composite = 0.3 * *r.acceptance + 0.3 * *r.consistency + 0.2 * r.targeting + 0.2 * r.trust;
  return kKernelMin + (composite - 1.0) / 8.0 * (kKernelMax - kKernelMin);
}

// ---------------------------------------------------------------- model

std::vector<double> HpmModel::raw_weights() const {
  const std::size_t d = weights.size();
  std::vector<double> out(d, 0.0);
  double bias = weights[d - 1];
  for (std::size_t j = 0; j + 1 < d; ++j) {
    out[j] = weights[j] / scale[j];
    bias -= weights[j] * mean[j] / scale[j];
  }
  out[d - 1] = bias;
  return out;
}

nlohmann::json HpmModel::to_json() const {
  return {{"modality", to_string(modality)},
          {"feature_names", feature_names(modality)},
          {"weights", weights},
          {"mean", mean},
          {"scale", scale},
          {"ridge", ridge},
          {"fingerprint", fingerprint},
          {"version", version}};
}

HpmModel HpmModel::from_json(const nlohmann::json& j) {
  HpmModel m;
  m.modality = modality_from_string(j.at("modality").get<std::string>());
  m.weights = j.at("weights").get<std::vector<double>>();
  m.mean = j.at("mean").get<std::vector<double>>();
  m.scale = j.at("scale").get<std::vector<double>>();
  m.ridge = j.at("ridge").get<double>();
  m.fingerprint = j.value("fingerprint", std::string{});
  m.version = j.at("version").get<int>();
  if (m.weights.size() != m.mean.size() || m.weights.size() != m.scale.size() || m.weights.empty()) {
    throw ValidationError("model vectors have inconsistent dimensions");
  }
  return m;
}

HpmModel fit(const std::vector<FeatureVector>& features, const std::vector<double>& targets, double ridge,
             int previous_version) {
  if (features.size() != targets.size()) throw ValidationError("feature and target counts differ");
  if (features.size() < 2) throw InsufficientDataError("fitting needs at least two ratings");
  if (!(ridge >= 0.0)) throw ConfigError("ridge strength must be non-negative");
  const std::size_t d = features.front().values.size();
  if (d < 1) throw ValidationError("empty feature vectors");
  for (const auto& f : features) {
    if (f.values.size() != d || f.modality != features.front().modality) {
      throw ValidationError("feature vectors differ in modality or dimension");
    }
  }
  const auto n = static_cast<Eigen::Index>(features.size());
  const auto dim = static_cast<Eigen::Index>(d);

  HpmModel model;
  model.modality = features.front().modality;
  model.ridge = ridge;
  model.version = previous_version + 1;
  model.mean.assign(d, 0.0);
  model.scale.assign(d, 1.0);
  for (std::size_t j = 0; j + 1 < d; ++j) {
    double m = 0.0;
    for (const auto& f : features) m += f.values[j];
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (const auto& f : features) ss += (f.values[j] - m) * (f.values[j] - m);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    model.mean[j] = m;
    model.scale[j] = sd > 1e-12 ? sd : 1.0;
  }

  Eigen::MatrixXd z(n, dim);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = features[static_cast<std::size_t>(i)].values;
    for (Eigen::Index j = 0; j + 1 < dim; ++j) {
      z(i, j) = (f[static_cast<std::size_t>(j)] - model.mean[static_cast<std::size_t>(j)]) /
                model.scale[static_cast<std::size_t>(j)];
    }
    z(i, dim - 1) = 1.0;
    y(i) = targets[static_cast<std::size_t>(i)];
  }
  Eigen::MatrixXd gram = z.transpose() * z / static_cast<double>(n);
  for (Eigen::Index j = 0; j + 1 < dim; ++j) gram(j, j) += ridge;
  const Eigen::VectorXd rhs = z.transpose() * y / static_cast<double>(n);
  const Eigen::VectorXd w = gram.ldlt().solve(rhs);
  if (!w.allFinite()) throw UndefinedInputError("ridge system is singular; increase the ridge strength");
  model.weights.assign(w.data(), w.data() + w.size());

  std::string fp;
  for (std::size_t i = 0; i < features.size(); ++i) {
    fp += nlohmann::json(features[i].values).dump() + ":" + nlohmann::json(targets[i]).dump() + ";";
  }
  model.fingerprint = sha256_hex(fp);
  return model;
}

double predict_raw(const HpmModel& model, const FeatureVector& x) {
  if (x.values.size() != model.weights.size()) {
    throw ValidationError("feature dimension " + std::to_string(x.values.size()) + " does not match model dimension " +
                          std::to_string(model.weights.size()));
  }
  const std::size_t d = model.weights.size();
  double y = model.weights[d - 1];
  for (std::size_t j = 0; j + 1 < d; ++j) y += model.weights[j] * (x.values[j] - model.mean[j]) / model.scale[j];
  return y;
}

double predict(const HpmModel& model, const FeatureVector& x) {
  return std::clamp(predict_raw(model, x), kKernelMin, kKernelMax);
}

// ---------------------------------------------------------------- reliability

ReliabilityStats reliability(const std::vector<std::vector<double>>& matrix) {
  const std::size_t k = matrix.size();
  if (k < 2) throw UndefinedInputError("reliability needs at least two raters");
  const std::size_t n = matrix.front().size();
  if (n < 2) throw UndefinedInputError("reliability needs at least two items");
  for (const auto& row : matrix) {
    if (row.size() != n) throw UndefinedInputError("ragged score matrix (missing cells)");
  }

  double grand = 0.0;
  for (const auto& row : matrix) grand += std::accumulate(row.begin(), row.end(), 0.0);
  grand /= static_cast<double>(k * n);
  double sst = 0.0;
  for (const auto& row : matrix)
    for (double x : row) sst += (x - grand) * (x - grand);
  if (sst <= 0.0) throw UndefinedInputError("zero total variance");

  // Alpha with raters as the scale items.
  double rater_var_sum = 0.0;
  for (const auto& row : matrix) rater_var_sum += sample_variance(row);
  std::vector<double> item_sums(n, 0.0);
  for (const auto& row : matrix)
    for (std::size_t j = 0; j < n; ++j) item_sums[j] += row[j];
  const double sum_var = sample_variance(item_sums);
  if (sum_var <= 0.0) throw UndefinedInputError("variance of item totals is zero");
  const double kd = static_cast<double>(k);
  const double nd = static_cast<double>(n);
  const double alpha = kd / (kd - 1.0) * (1.0 - rater_var_sum / sum_var);

  // Two-way ANOVA: items are the targets, raters the judges.
  double ss_items = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double m = item_sums[j] / kd;
    ss_items += kd * (m - grand) * (m - grand);
  }
  double ss_raters = 0.0;
  for (const auto& row : matrix) {
    const double m = std::accumulate(row.begin(), row.end(), 0.0) / nd;
    ss_raters += nd * (m - grand) * (m - grand);
  }
  const double ss_err = std::max(0.0, sst - ss_items - ss_raters);
  const double ms_items = ss_items / (nd - 1.0);
  const double ms_raters = ss_raters / (kd - 1.0);
  const double ms_err = ss_err / ((nd - 1.0) * (kd - 1.0));

  const double den1 = ms_items + (kd - 1.0) * ms_err + kd * (ms_raters - ms_err) / nd;
  const double denk = ms_items + (ms_raters - ms_err) / nd;
  if (den1 == 0.0 || denk == 0.0) throw UndefinedInputError("ICC denominator is zero");
  return {alpha, (ms_items - ms_err) / den1, (ms_items - ms_err) / denk};
}

// ---------------------------------------------------------------- queue

nlohmann::json QueueItem::to_json() const {
  return {{"scenario_id", scenario_id}, {"action_ref", action_ref}, {"clip_key", clip_key}, {"k_vlm", k_vlm},
          {"k_hpm", k_hpm},             {"abs_delta", abs_delta},   {"seq", seq}};
}

QueueItem QueueItem::from_json(const nlohmann::json& j) {
  QueueItem q;
  q.scenario_id = j.at("scenario_id").get<std::string>();
  q.action_ref = j.at("action_ref").get<std::string>();
  q.clip_key = j.value("clip_key", std::string{});
  q.k_vlm = j.at("k_vlm").get<double>();
  q.k_hpm = j.at("k_hpm").get<double>();
  q.abs_delta = j.at("abs_delta").get<double>();
  q.seq = j.value("seq", std::uint64_t{0});
  return q;
}

HumanQueue::HumanQueue(HumanQueue&& other) noexcept
    : pending_(std::move(other.pending_)), seen_(std::move(other.seen_)), next_seq_(other.next_seq_) {}

HumanQueue& HumanQueue::operator=(HumanQueue&& other) noexcept {
  if (this != &other) {
    std::unique_lock lock(mu_);
    pending_ = std::move(other.pending_);
    seen_ = std::move(other.seen_);
    next_seq_ = other.next_seq_;
  }
  return *this;
}

bool HumanQueue::before(const QueueItem& a, const QueueItem& b) {
  if (a.abs_delta != b.abs_delta) return a.abs_delta > b.abs_delta;
  return a.seq < b.seq;
}

bool HumanQueue::push(QueueItem item) {
  std::unique_lock lock(mu_);
  if (!seen_.insert(item.key()).second) return false;
  item.seq = next_seq_++;
  pending_.insert(std::upper_bound(pending_.begin(), pending_.end(), item, before), std::move(item));
  return true;
}

std::vector<QueueItem> HumanQueue::peek(std::size_t limit) const {
  std::shared_lock lock(mu_);
  return {pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(std::min(limit, pending_.size()))};
}

std::optional<QueueItem> HumanQueue::pop() {
  std::unique_lock lock(mu_);
  if (pending_.empty()) return std::nullopt;
  auto item = std::move(pending_.front());
  pending_.erase(pending_.begin());
  return item;
}

bool HumanQueue::remove(const std::string& key) {
  std::unique_lock lock(mu_);
  const auto it = std::find_if(pending_.begin(), pending_.end(), [&](const QueueItem& q) { return q.key() == key; });
  if (it == pending_.end()) return false;
  pending_.erase(it);
  return true;
}

bool HumanQueue::contains(const std::string& key) const {
  std::shared_lock lock(mu_);
  return std::any_of(pending_.begin(), pending_.end(), [&](const QueueItem& q) { return q.key() == key; });
}

bool HumanQueue::seen(const std::string& key) const {
  std::shared_lock lock(mu_);
  return seen_.count(key) != 0U;
}

std::size_t HumanQueue::size() const {
  std::shared_lock lock(mu_);
  return pending_.size();
}

nlohmann::json HumanQueue::to_json() const {
  std::shared_lock lock(mu_);
  nlohmann::json pending = nlohmann::json::array();
  for (const auto& q : pending_) pending.push_back(q.to_json());
  return {{"pending", pending}, {"seen", seen_}, {"next_seq", next_seq_}};
}

HumanQueue HumanQueue::from_json(const nlohmann::json& j) {
  HumanQueue q;
  for (const auto& item : j.at("pending")) q.pending_.push_back(QueueItem::from_json(item));
  std::sort(q.pending_.begin(), q.pending_.end(), before);
  q.seen_ = j.at("seen").get<std::set<std::string>>();
  q.next_seq_ = j.value("next_seq", std::uint64_t{1});
  return q;
}

// ---------------------------------------------------------------- ratings

RatingStore::RatingStore(RatingStore&& other) noexcept : ratings_(std::move(other.ratings_)), clock_(other.clock_) {}

RatingStore& RatingStore::operator=(RatingStore&& other) noexcept {
  if (this != &other) {
    std::unique_lock lock(mu_);
    ratings_ = std::move(other.ratings_);
    clock_ = other.clock_;
  }
  return *this;
}

std::string RatingStore::key(const std::string& rater, const std::string& scenario, const std::string& action) {
  return rater + "|" + scenario + "|" + action;
}

RatingSubmit RatingStore::submit_stage1(const std::string& rater, const std::string& scenario,
                                        const std::string& action, const nlohmann::json& scores) {
  if (rater.empty() || scenario.empty() || action.empty()) throw ValidationError("rater, scenario and action required");
  HumanRating r;
  r.rater_id = rater;
  r.scenario_id = scenario;
  r.action_ref = action;
  check_range(scores, "targeting", 1, 9, r.targeting);
  check_range(scores, "trust", 1, 9, r.trust);
  check_range(scores, "perceived_safety", 1, 9, r.perceived_safety);
  check_range(scores, "mental_workload", 1, 20, r.mental_workload);

  std::unique_lock lock(mu_);
  const auto k = key(rater, scenario, action);
  if (ratings_.count(k) != 0U) return RatingSubmit::kDuplicate;
  r.stage1_at = ++clock_;
  ratings_.emplace(k, std::move(r));
  return RatingSubmit::kAccepted;
}

RatingSubmit RatingStore::submit_stage2(const std::string& rater, const std::string& scenario,
                                        const std::string& action, const nlohmann::json& scores) {
  double acceptance = 0.0;
  double consistency = 0.0;
  check_range(scores, "acceptance", 1, 9, acceptance);
  check_range(scores, "consistency", 1, 9, consistency);

  std::unique_lock lock(mu_);
  const auto it = ratings_.find(key(rater, scenario, action));
  if (it == ratings_.end()) throw ValidationError("stage 2 submitted before stage 1 for this clip");
  if (it->second.complete()) return RatingSubmit::kDuplicate;
  it->second.acceptance = acceptance;
  it->second.consistency = consistency;
  it->second.stage2_at = ++clock_;
  return RatingSubmit::kAccepted;
}

bool RatingStore::has_stage1(const std::string& rater, const std::string& scenario) const {
  std::shared_lock lock(mu_);
  const auto prefix = rater + "|" + scenario + "|";
  const auto it = ratings_.lower_bound(prefix);
  return it != ratings_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
}

std::vector<HumanRating> RatingStore::complete() const {
  std::shared_lock lock(mu_);
  std::vector<HumanRating> out;
  for (const auto& [k, r] : ratings_) {
    if (r.complete()) out.push_back(r);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.stage2_at < b.stage2_at; });
  return out;
}

std::vector<HumanRating> RatingStore::all() const {
  std::shared_lock lock(mu_);
  std::vector<HumanRating> out;
  for (const auto& [k, r] : ratings_) out.push_back(r);
  return out;
}

std::vector<std::vector<double>> RatingStore::matrix(const std::string& metric) const {
  const auto value = [&](const HumanRating& r) -> std::optional<double> {
    if (metric == "targeting") return r.targeting;
    if (metric == "trust") return r.trust;
    if (metric == "perceived_safety") return r.perceived_safety;
    if (metric == "mental_workload") return r.mental_workload;
    if (metric == "acceptance") return r.acceptance;
    if (metric == "consistency") return r.consistency;
    throw ValidationError("unknown rating metric '" + metric + "'");
  };
  std::map<std::string, std::map<std::string, double>> by_rater;
  for (const auto& r : all()) {
    if (auto v = value(r)) by_rater[r.rater_id][r.scenario_id + "|" + r.action_ref] = *v;
  }
  if (by_rater.empty()) return {};
  std::vector<std::string> items;
  for (const auto& [item, v] : by_rater.begin()->second) {
    const bool everyone = std::all_of(by_rater.begin(), by_rater.end(),
                                      [&](const auto& kv) { return kv.second.count(item) != 0U; });
    if (everyone) items.push_back(item);
  }
  std::vector<std::vector<double>> out;
  for (const auto& [rater, vals] : by_rater) {
    std::vector<double> row;
    for (const auto& item : items) row.push_back(vals.at(item));
    out.push_back(std::move(row));
  }
  return out;
}

nlohmann::json RatingStore::to_json() const {
  std::shared_lock lock(mu_);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [k, r] : ratings_) arr.push_back(r.to_json());
  return {{"ratings", arr}, {"clock", clock_}};
}

RatingStore RatingStore::from_json(const nlohmann::json& j) {
  RatingStore s;
  for (const auto& r : j.at("ratings")) {
    auto rating = HumanRating::from_json(r);
    s.ratings_.emplace(key(rating.rater_id, rating.scenario_id, rating.action_ref), std::move(rating));
  }
  s.clock_ = j.value("clock", std::uint64_t{0});
  return s;
}

}  // namespace coloop
