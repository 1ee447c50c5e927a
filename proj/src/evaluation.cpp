#include "coloop/evaluation.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "coloop/action_db.hpp"
#include "coloop/common.hpp"
#include "coloop/optimizer.hpp"

namespace coloop {
namespace {

void check_likert(double v, const char* name) {
  if (!std::isfinite(v) || v < 1.0 || v > 9.0) {
    throw ValidationError(std::string(name) + " = " + std::to_string(v) + " outside the 1..9 scale");
  }
}

std::set<std::string> token_set(const std::string& s) {
  std::set<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.insert(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.insert(cur);
  return out;
}

std::optional<double> opt_number(const nlohmann::json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_number()) throw ValidationError(std::string("evaluator field '") + key + "' is not a number");
  return it->get<double>();
}

}  // namespace

void EvalScores::validate() const {
  check_likert(certainty, "certainty");
  check_likert(similarity_raw, "similarity");
  check_likert(targeting, "targeting");
  check_likert(trust, "trust");
  check_likert(acceptance, "acceptance");
  check_likert(consistency, "consistency");
}

nlohmann::json EvalScores::to_json() const {
  return {{"certainty", certainty},   {"similarity", similarity_raw}, {"targeting", targeting},
          {"trust", trust},           {"acceptance", acceptance},     {"consistency", consistency},
          {"interpreted_message", interpreted_message}};
}

EvalScores EvalScores::from_json(const nlohmann::json& j) {
  EvalScores s;
  s.certainty = j.at("certainty").get<double>();
  s.similarity_raw = j.at("similarity").get<double>();
  s.targeting = j.at("targeting").get<double>();
  s.trust = j.at("trust").get<double>();
  s.acceptance = j.at("acceptance").get<double>();
  s.consistency = j.at("consistency").get<double>();
  s.interpreted_message = j.value("interpreted_message", std::string{});
  return s;
}

KernelScore kernel_score(const EvalScores& scores) { return kernel_score(scores, MetricWeights{}); }

KernelScore kernel_score(const EvalScores& s, const MetricWeights& w) {
  s.validate();
  const double s_norm = s.similarity_raw / 9.0;
  const double k = w.certainty_similarity * (s.certainty * s_norm) + w.targeting * s.targeting + w.trust * s.trust +
                   w.acceptance * s.acceptance + w.consistency * s.consistency;
  return {k, s_norm};
}

double implied_certainty(double k, double acceptance, double consistency, double targeting, double trust,
                         double s_norm) {
  if (s_norm == 0.0) throw UndefinedInputError("similarity of zero leaves certainty undetermined");
  return (k - (acceptance + consistency + targeting + trust)) / s_norm;
}

void MixedEvalConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(uncertainty_threshold > 0.0)) throw ConfigError("uncertainty threshold must be positive");
  if (drift_window == 0) throw ConfigError("drift window must be at least 1");
  if (!(drift_rate_trigger >= 0.0 && drift_rate_trigger <= 1.0)) throw ConfigError("drift trigger must lie in [0, 1]");
}

MixedScore mixed_score(double k_vlm, double k_hpm, const MixedEvalConfig& cfg) {
  if (!std::isfinite(k_vlm) || !std::isfinite(k_hpm)) throw ValidationError("mixed score inputs must be finite");
  return {(1.0 - cfg.lambda) * k_vlm + cfg.lambda * k_hpm, std::abs(k_vlm - k_hpm) >= cfg.uncertainty_threshold};
}

nlohmann::json DisagreementRecord::to_json() const {
  return {{"scenario_id", scenario_id}, {"action_ref", action_ref}, {"k_vlm", k_vlm},
          {"k_hpm", k_hpm},             {"abs_delta", abs_delta},   {"uncertain", uncertain},
          {"timestamp", timestamp},     {"replayed", replayed}};
}

DisagreementRecord DisagreementRecord::from_json(const nlohmann::json& j) {
  DisagreementRecord r;
  r.scenario_id = j.at("scenario_id").get<std::string>();
  r.action_ref = j.at("action_ref").get<std::string>();
  r.k_vlm = j.at("k_vlm").get<double>();
  r.k_hpm = j.at("k_hpm").get<double>();
  r.abs_delta = j.at("abs_delta").get<double>();
  r.uncertain = j.at("uncertain").get<bool>();
  r.timestamp = j.at("timestamp").get<std::uint64_t>();
  r.replayed = j.value("replayed", false);
  return r;
}

DisagreementRecord make_disagreement(std::string scenario_id, std::string action_ref, double k_vlm, double k_hpm,
                                     const MixedEvalConfig& cfg) {
  DisagreementRecord r;
  r.scenario_id = std::move(scenario_id);
  r.action_ref = std::move(action_ref);
  r.k_vlm = k_vlm;
  r.k_hpm = k_hpm;
  r.abs_delta = std::abs(k_vlm - k_hpm);
  r.uncertain = mixed_score(k_vlm, k_hpm, cfg).uncertain;
  return r;
}

std::uint64_t DisagreementLog::append(DisagreementRecord rec) {
  std::unique_lock lock(mu_);
  rec.timestamp = records_.empty() ? 1 : records_.back().timestamp + 1;
  records_.push_back(std::move(rec));
  return records_.back().timestamp;
}

std::vector<DisagreementRecord> DisagreementLog::snapshot() const {
  std::shared_lock lock(mu_);
  return records_;
}

std::vector<DisagreementRecord> DisagreementLog::last(std::size_t n) const {
  std::shared_lock lock(mu_);
  const std::size_t start = records_.size() > n ? records_.size() - n : 0;
  return {records_.begin() + static_cast<std::ptrdiff_t>(start), records_.end()};
}

void DisagreementLog::mark_replayed(std::span<const std::uint64_t> timestamps) {
  std::unique_lock lock(mu_);
  for (auto ts : timestamps) {
    auto it = std::lower_bound(records_.begin(), records_.end(), ts,
                               [](const DisagreementRecord& r, std::uint64_t t) { return r.timestamp < t; });
    if (it != records_.end() && it->timestamp == ts) it->replayed = true;
  }
}

std::size_t DisagreementLog::size() const {
  std::shared_lock lock(mu_);
  return records_.size();
}

void DisagreementLog::save(const std::string& path) const {
  std::shared_lock lock(mu_);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : records_) out << r.to_json().dump() << '\n';
}

DisagreementLog DisagreementLog::load(const std::string& path) {
  DisagreementLog log;
  std::ifstream in(path);
  if (!in) return log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      log.records_.push_back(DisagreementRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path, lineno, e.what());
    }
  }
  return log;
}

DriftReport drift_monitor(std::span<const DisagreementRecord> stream, const MixedEvalConfig& cfg) {
  if (cfg.drift_window == 0) throw ConfigError("drift window must be at least 1");
  const std::size_t n = std::min(cfg.drift_window, stream.size());
  if (n == 0) return {0.0, false, 0};
  const auto window = stream.subspan(stream.size() - n);
  const auto uncertain = std::count_if(window.begin(), window.end(), [](const auto& r) { return r.uncertain; });
  const double rate = static_cast<double>(uncertain) / static_cast<double>(n);
  return {rate, rate >= cfg.drift_rate_trigger, n};
}

HardNegativeResult hard_negative_pairs(std::span<DisagreementRecord> records, const ActionDb& db, double delta_min) {
  HardNegativeResult out;
  for (auto& rec : records) {
    if (rec.replayed) continue;
    const auto rejected = db.find(rec.scenario_id, rec.action_ref);
    if (!rejected) {
      out.skipped.push_back("dangling action " + rec.action_ref + " in scenario " + rec.scenario_id);
      continue;
    }
    const auto all = db.records_for(rec.scenario_id);
    const DbRecord* best = nullptr;
    for (const auto& r : all) {
      if (best == nullptr || r.k > best->k || (r.k == best->k && r.created_at < best->created_at)) best = &r;
    }
    rec.replayed = true;
    out.replayed.push_back(rec.timestamp);
    if (best->created_at == rejected->created_at) continue;
    const double gap = best->k - rejected->k;
    if (gap < delta_min) continue;
    out.pairs.push_back({rec.scenario_id, *best, *rejected, gap, PairOrigin::kHardNegativeReplay});
  }
  return out;
}

// ---------------------------------------------------------------- similarity

double token_f1(const std::string& a, const std::string& b) {
  const auto ta = token_set(a);
  const auto tb = token_set(b);
  if (ta.empty() && tb.empty()) return 1.0;
  if (ta.empty() || tb.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& t : ta) common += tb.count(t);
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(ta.size());
  const double recall = static_cast<double>(common) / static_cast<double>(tb.size());
  return 2.0 * precision * recall / (precision + recall);
}

double TokenOverlapJudge::similarity(const std::string& interpreted, const std::string& intended) const {
  return 1.0 + 8.0 * token_f1(interpreted, intended);
}

EvalScores evaluate_two_phase(EvaluatorClient& client, const SimilarityJudge& judge, const Scenario& scenario,
                              const std::string& clip_ref) {
  EvalRequest p1{&scenario, clip_ref, EvalPhase::kIntention, std::nullopt};
  const auto first = client.evaluate(p1);
  EvalRequest p2{&scenario, clip_ref, EvalPhase::kInformed, scenario.intended_message};
  const auto second = client.evaluate(p2);

  if (!first.certainty || !first.interpreted_message || !first.targeting || !first.trust) {
    throw ValidationError("intention-phase response is missing fields");
  }
  if (!second.acceptance || !second.consistency) throw ValidationError("informed-phase response is missing fields");

  EvalScores s;
  s.certainty = *first.certainty;
  s.interpreted_message = *first.interpreted_message;
  s.targeting = *first.targeting;
  s.trust = *first.trust;
  s.acceptance = *second.acceptance;
  s.consistency = *second.consistency;
  s.similarity_raw = judge.similarity(s.interpreted_message, scenario.intended_message);
  s.validate();
  return s;
}

// ---------------------------------------------------------------- retries / HTTP

std::chrono::milliseconds RetryPolicy::backoff_for(int attempt) const {
  double ms = static_cast<double>(initial_backoff.count()) * std::pow(multiplier, std::max(0, attempt - 1));
  ms = std::min(ms, static_cast<double>(max_backoff.count()));
  return std::chrono::milliseconds(static_cast<long long>(ms));
}

void with_retries(const RetryPolicy& policy, const std::string& what, const std::function<void()>& fn,
                  const std::function<void(std::chrono::milliseconds)>& sleeper) {
  if (policy.max_attempts < 1) throw ConfigError("retry policy needs at least one attempt");
  std::string last_error;
  for (int attempt = 1; attempt <= policy.max_attempts; ++attempt) {
    try {
      fn();
      return;
    } catch (const ValidationError&) {
      throw;  // a malformed response will not improve on retry
    } catch (const std::exception& e) {
      last_error = e.what();
    }
    if (attempt < policy.max_attempts) {
      const auto delay = policy.backoff_for(attempt);
      if (sleeper) {
        sleeper(delay);
      } else {
        std::this_thread::sleep_for(delay);
      }
    }
  }
  throw ServiceError(what + " failed after " + std::to_string(policy.max_attempts) + " attempts: " + last_error);
}

HttpEvaluatorClient::HttpEvaluatorClient(HttpEndpoint endpoint, RetryPolicy retry, CostClass cost)
    : endpoint_(std::move(endpoint)), retry_(retry), cost_(cost) {}

nlohmann::json HttpEvaluatorClient::request_body(const EvalRequest& request) {
  if (request.scenario == nullptr) throw ValidationError("evaluation request without scenario");
  if (request.phase == EvalPhase::kIntention && request.revealed_message) {
    throw ValidationError("the intention phase must not receive the intended message");
  }
  if (request.phase == EvalPhase::kInformed && !request.revealed_message) {
    throw ValidationError("the informed phase requires the intended message");
  }
  const auto& sk = request.scenario->skeleton;
  nlohmann::json scenario = {{"id", request.scenario->id()},
                             {"relationship", to_string(sk.relationship)},
                             {"emitter", to_string(sk.emitter)},
                             {"receiver", to_string(sk.receiver)},
                             {"message_type", to_string(sk.message_type)},
                             {"direction", sk.direction},
                             {"safety", to_string(sk.safety)}};
  nlohmann::json body = {{"scenario", std::move(scenario)},
                         {"clip_ref", request.clip_ref},
                         {"phase", static_cast<int>(request.phase)}};
  if (request.revealed_message) body["revealed_message"] = *request.revealed_message;
  return body;
}

PhaseScores HttpEvaluatorClient::parse_response(EvalPhase phase, const nlohmann::json& body) {
  if (!body.is_object()) throw ValidationError("evaluator response is not a JSON object");
  PhaseScores s;
  if (phase == EvalPhase::kIntention) {
    s.certainty = opt_number(body, "certainty");
    s.targeting = opt_number(body, "targeting");
    s.trust = opt_number(body, "trust");
    if (const auto it = body.find("interpreted_message"); it != body.end() && it->is_string()) {
      s.interpreted_message = it->get<std::string>();
    }
    if (!s.certainty || !s.targeting || !s.trust || !s.interpreted_message) {
      throw ValidationError("intention-phase response needs certainty, interpreted_message, targeting, trust");
    }
  } else {
    s.acceptance = opt_number(body, "acceptance");
    s.consistency = opt_number(body, "consistency");
    if (!s.acceptance || !s.consistency) {
      throw ValidationError("informed-phase response needs acceptance and consistency");
    }
  }
  return s;
}

PhaseScores HttpEvaluatorClient::evaluate(const EvalRequest& request) {
  const auto body = request_body(request).dump();
  PhaseScores result;
  with_retries(retry_, "evaluator " + endpoint_.base_url + endpoint_.path, [&] {
    httplib::Client cli(endpoint_.base_url);
    cli.set_connection_timeout(endpoint_.connect_timeout);
    cli.set_read_timeout(endpoint_.read_timeout);
    auto res = cli.Post(endpoint_.path, body, "application/json");
    if (!res) throw ServiceError("transport error: " + httplib::to_string(res.error()));
    if (res->status != 200) throw ServiceError("HTTP status " + std::to_string(res->status));
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(std::string("evaluator returned invalid JSON: ") + e.what());
    }
    result = parse_response(request.phase, parsed);
  });
  return result;
}

}  // namespace coloop
