#include "coloop/synthetic.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>

#include "coloop/common.hpp"

namespace coloop {
namespace {

constexpr const char* kClipPrefix = "synthetic-clip:";
constexpr double kTargetSpread = 0.25;

std::string message_type_of(const std::string& scenario_id) {
  return std::string(to_string(parse_scenario_id(scenario_id).first.message_type));
}

double round_to(double x, double step) { return std::round(x / step) * step; }

double wrap_degrees(double a) {
  a = std::fmod(a, 360.0);
  if (a < 0) a += 360.0;
  return round_to(a, 0.1) >= 360.0 ? 0.0 : round_to(a, 0.1);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  double uniform() { return unit_uniform(eng_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return normal_sample(eng_); }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(uniform() * (hi - lo + 1));
  }
  bool chance(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
};

std::vector<std::string> words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

SyntheticWorld::SyntheticWorld(Modality modality, std::uint64_t seed, SyntheticConfig cfg, ArmLimits limits)
    : modality_(modality), seed_(seed), cfg_(cfg), limits_(limits) {}

double SyntheticWorld::reference_distance() const {
  switch (modality_) {
    case Modality::kEyes:
      return 1.5;
    case Modality::kLightbar:
      return 10.0;
    case Modality::kArm:
      return 1.2;
  }
  return 1.0;
}

ActionSequence SyntheticWorld::random_action(std::uint64_t seed) const {
  Rng rng(seed);
  const auto grid = transition_grid(modality_);
  ActionSequence seq;
  seq.modality = modality_;
  const int count = rng.integer(2, 5);
  for (int i = 0; i < count; ++i) {
    Keyframe kf;
    kf.transition_ds = rng.integer(grid.min_ds, grid.max_ds);
    switch (modality_) {
      case Modality::kEyes:
        kf.state = EyeState{wrap_degrees(rng.uniform(0.0, 360.0)), round_to(rng.uniform(), 0.01)};
        break;
      case Modality::kLightbar: {
        LightbarState s;
        for (auto& r : s.regions) r = rng.chance(0.5) ? 1 : 0;
        kf.state = s;
        break;
      }
      case Modality::kArm: {
        ArmState s;
        for (std::size_t j = 0; j < kArmJoints; ++j) {
          const auto& r = limits_.ranges[j];
          s.joints[j] = round_to(rng.uniform(r.min_deg, r.max_deg), 0.1);
        }
        kf.state = s;
        break;
      }
    }
    seq.keyframes.push_back(std::move(kf));
  }
  return seq;
}

ActionSequence SyntheticWorld::mutate(const ActionSequence& base, double scale, std::uint64_t seed) const {
  if (scale <= 0.0) return base;
  Rng rng(seed);
  const auto grid = transition_grid(modality_);
  ActionSequence out = base;
  auto perturb = [&](State& state) {
    if (auto* e = std::get_if<EyeState>(&state)) {
      e->angle = wrap_degrees(e->angle + 40.0 * scale * rng.normal());
      e->radius = round_to(std::clamp(e->radius + 0.2 * scale * rng.normal(), 0.0, 1.0), 0.01);
    } else if (auto* l = std::get_if<LightbarState>(&state)) {
      const double p = std::min(0.5, 0.12 * scale);
      for (auto& r : l->regions) {
        if (rng.chance(p)) r = r != 0 ? 0 : 1;
      }
    } else if (auto* a = std::get_if<ArmState>(&state)) {
      for (std::size_t j = 0; j < kArmJoints; ++j) {
        const auto& r = limits_.ranges[j];
        const double span = r.max_deg - r.min_deg;
        a->joints[j] = round_to(std::clamp(a->joints[j] + 0.15 * span * scale * rng.normal(), r.min_deg, r.max_deg), 0.1);
      }
    }
  };
  for (auto& kf : out.keyframes) {
    perturb(kf.state);
    if (rng.chance(std::min(1.0, 0.3 * scale))) {
      const int step = rng.integer(1, 3) * (rng.chance(0.5) ? 1 : -1);
      kf.transition_ds = std::clamp(kf.transition_ds + step, grid.min_ds, grid.max_ds);
    }
  }
  if (rng.chance(std::min(1.0, 0.15 * scale))) {
    if (out.keyframes.size() < 6 && rng.chance(0.5)) {
      const auto src = static_cast<std::size_t>(rng.integer(0, static_cast<int>(out.keyframes.size()) - 1));
      Keyframe extra = out.keyframes[src];
      perturb(extra.state);
      out.keyframes.insert(out.keyframes.begin() + static_cast<std::ptrdiff_t>(src) + 1, extra);
    } else if (out.keyframes.size() > 2) {
      const auto drop = rng.integer(0, static_cast<int>(out.keyframes.size()) - 1);
      out.keyframes.erase(out.keyframes.begin() + drop);
    }
  }
  return out;
}

ActionSequence SyntheticWorld::target(const std::string& scenario_id) const {
  // Scenarios of one message type share a prototype; each scenario perturbs it.
  const auto prototype = random_action(derive_seed(seed_, "prototype|" + message_type_of(scenario_id)));
  return mutate(prototype, kTargetSpread, derive_seed(seed_, "target|" + scenario_id));
}

double SyntheticWorld::distance(const std::string& scenario_id, const ActionSequence& action) const {
  Timeline target_tl;
  {
    std::shared_lock lock(mu_);
    if (const auto it = target_timelines_.find(scenario_id); it != target_timelines_.end()) target_tl = it->second;
  }
  if (target_tl.frames.empty()) {
    target_tl = compile_timeline(target(scenario_id), 4.0, std::nullopt, limits_);
    std::unique_lock lock(mu_);
    target_timelines_.emplace(scenario_id, target_tl);
  }
  return timeline_distance(compile_timeline(action, 4.0, std::nullopt, limits_), target_tl, limits_);
}

double SyntheticWorld::closeness(const std::string& scenario_id, const ActionSequence& action) const {
  return 1.0 - std::clamp(distance(scenario_id, action) / reference_distance(), 0.0, 1.0);
}

void SyntheticWorld::register_action(const ActionSequence& action) {
  auto hash = action_hash(action);
  std::unique_lock lock(mu_);
  registry_.emplace(std::move(hash), action);
}

std::optional<ActionSequence> SyntheticWorld::resolve(const std::string& hash) const {
  std::shared_lock lock(mu_);
  const auto it = registry_.find(hash);
  if (it == registry_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------- designer

double SyntheticDesigner::mutation_scale(int round) const {
  const auto& c = world_.config();
  if (round <= 1) return c.mutation_scale;
  return c.mutation_scale * std::pow(c.mutation_decay, round - 1);
}

void SyntheticDesigner::observe_pairs(const std::vector<PreferencePair>& pairs, int /*round*/) {
  elites_.clear();
  type_elites_.clear();
  std::map<std::string, const DbRecord*> best;
  for (const auto& p : pairs) {
    if (p.origin != PairOrigin::kMaxMin) continue;
    elites_[p.scenario_id] = p.chosen.action;
    const auto type = message_type_of(p.scenario_id);
    auto& b = best[type];
    if (b == nullptr || p.chosen.k > b->k || (p.chosen.k == b->k && p.chosen.created_at < b->created_at)) {
      b = &p.chosen;
    }
  }
  for (const auto& [type, rec] : best) type_elites_[type] = rec->action;
}

std::vector<std::string> SyntheticDesigner::generate(const Scenario& scenario, Modality modality, std::size_t n,
                                                     int round) {
  if (modality != world_.modality()) throw ConfigError("synthetic designer is configured for another modality");
  const auto sid = scenario.id();
  const auto skeleton = scenario.skeleton.id();
  // Parents: the scenario's own elite and the best winner among scenarios
  // of the same message type, alternating when both exist.
  std::vector<const ActionSequence*> parents;
  if (round > 0) {
    if (const auto it = elites_.find(sid); it != elites_.end()) parents.push_back(&it->second);
    if (const auto it = type_elites_.find(message_type_of(sid)); it != type_elites_.end()) {
      if (parents.empty() || *parents.front() != it->second) parents.push_back(&it->second);
    }
  }
  const bool explore = parents.empty();
  // Random candidates are shared by all messages of a skeleton; a scene
  // rendered for one message is reused by the others.
  const std::string stream = explore ? "base|" + skeleton : "mutate|" + sid;
  const std::string tag = stream + "|r" + std::to_string(round);

  std::vector<ActionSequence> actions;
  for (std::size_t j = 0; j < n; ++j) {
    const auto seed = derive_seed(world_.seed(), tag + "|" + std::to_string(j));
    actions.push_back(explore ? world_.random_action(seed)
                              : world_.mutate(*parents[j % parents.size()], mutation_scale(round), seed));
    world_.register_action(actions.back());
  }

  std::vector<std::string> out;
  for (const auto& a : actions) out.push_back(serialize(a));

  const auto corrupt = static_cast<std::size_t>(std::llround(world_.config().invalid_rate * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(world_.seed(), "corrupt|" + tag));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform() * static_cast<double>(i))]);
  }
  for (std::size_t c = 0; c < std::min(corrupt, n); ++c) {
    const auto idx = order[c];
    auto doc = to_json(actions[idx]);
    switch (rng.integer(0, 3)) {
      case 0:
        out[idx] = out[idx].substr(0, out[idx].size() / 2);
        break;
      case 1:
        doc["actions"][0]["transition"] = 0.05;
        out[idx] = doc.dump();
        break;
      case 2:
        if (modality == Modality::kEyes) {
          doc["actions"][0]["state"]["radius"] = 1.5;
        } else if (modality == Modality::kArm) {
          doc["actions"][0]["state"]["shoulder"] = 200.0;
        } else {
          doc["actions"][0]["state"] = "0101";
        }
        out[idx] = doc.dump();
        break;
      default:
        doc["modality"] = modality == Modality::kEyes ? "arm" : "eyes";
        out[idx] = doc.dump();
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- renderer

RenderedClip SyntheticRenderer::render(const RenderKey& key, const ActionSequence& /*action*/,
                                       const Timeline& timeline) {
  calls_.fetch_add(1);
  const auto pixels = static_cast<std::size_t>(key.resolution) * static_cast<std::size_t>(key.resolution);
  return {kClipPrefix + key.str(), std::max<std::size_t>(1, timeline.frames.size() * pixels / 64)};
}

// ---------------------------------------------------------------- evaluator

PhaseScores SyntheticEvaluator::evaluate(const EvalRequest& request) {
  if (request.scenario == nullptr) throw ValidationError("evaluation request without scenario");
  if (request.phase == EvalPhase::kIntention && request.revealed_message) {
    throw ValidationError("the intention phase must not receive the intended message");
  }
  const std::string prefix = kClipPrefix;
  if (request.clip_ref.rfind(prefix, 0) != 0) throw ValidationError("unknown clip reference " + request.clip_ref);
  const auto key = RenderKey::parse(std::string_view(request.clip_ref).substr(prefix.size()));
  const auto action = world_.resolve(key.timeline_hash);
  if (!action) throw ValidationError("clip " + request.clip_ref + " was not produced in this session");

  const auto sid = request.scenario->id();
  const double c = world_.closeness(sid, *action);
  const double noise = world_.config().noise;
  auto metric = [&](const char* name) {
    Rng rng(derive_seed(world_.seed(), "noise|" + sid + "|" + key.timeline_hash + "|" + name));
    return std::clamp(9.0 - 8.0 * (1.0 - c) + rng.uniform(-noise, noise), 1.0, 9.0);
  };

  PhaseScores s;
  if (request.phase == EvalPhase::kIntention) {
    s.certainty = metric("certainty");
    s.targeting = metric("targeting");
    s.trust = metric("trust");
    const auto w = words(request.scenario->intended_message);
    const auto keep = static_cast<std::size_t>(std::llround(c * static_cast<double>(w.size())));
    std::string interpreted;
    for (std::size_t i = 0; i < keep; ++i) interpreted += (i ? " " : "") + w[i];
    s.interpreted_message = interpreted.empty() ? "unclear signal" : interpreted;
  } else {
    s.acceptance = metric("acceptance");
    s.consistency = metric("consistency");
  }
  return s;
}

double SyntheticLightScorer::score(const Scenario& scenario, const ActionSequence& action) {
  const auto sid = scenario.id();
  Rng rng(derive_seed(world_.seed(), "light|" + sid + "|" + action_hash(action)));
  const double c = world_.closeness(sid, action);
  const double n = world_.config().light_noise;
  return kKernelMin + (kKernelMax - kKernelMin) * c + rng.uniform(-n, n);
}

}  // namespace coloop
