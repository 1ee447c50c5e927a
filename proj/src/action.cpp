#include "coloop/action.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "coloop/common.hpp"

namespace coloop {
namespace {

constexpr double kTimeEps = 1e-9;

using nlohmann::json;

FormatError fail(FormatErrorCategory c, std::string detail) { return FormatError{c, std::move(detail)}; }

std::string_view strip_fence(std::string_view s) {
  auto trim = [](std::string_view v) {
    const auto b = v.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = v.find_last_not_of(" \t\r\n");
    return v.substr(b, e - b + 1);
  };
  s = trim(s);
  if (s.size() >= 6 && s.substr(0, 3) == "```" && s.substr(s.size() - 3) == "```") {
    const auto nl = s.find('\n');
    if (nl != std::string_view::npos && nl < s.size() - 3) s = trim(s.substr(nl + 1, s.size() - 3 - nl - 1));
  }
  return s;
}

std::optional<FormatError> read_number(const json& obj, std::string_view key, std::string_view where, double& out) {
  const auto it = obj.find(std::string(key));
  if (it == obj.end()) {
    return fail(FormatErrorCategory::kSchemaMismatch, std::string(where) + ": missing '" + std::string(key) + "'");
  }
  if (!it->is_number()) {
    return fail(FormatErrorCategory::kSchemaMismatch, std::string(where) + ": '" + std::string(key) + "' is not a number");
  }
  out = it->get<double>();
  return std::nullopt;
}

// Each parse_*_state returns the state or the first failure found.
std::variant<State, FormatError> parse_eye_state(const json& j, const std::string& where) {
  if (!j.is_object()) return fail(FormatErrorCategory::kSchemaMismatch, where + ": eye state must be an object");
  EyeState s;
  if (auto e = read_number(j, "angle", where, s.angle)) return *e;
  if (auto e = read_number(j, "radius", where, s.radius)) return *e;
  if (s.angle < 0.0 || s.angle > 360.0) {
    return fail(FormatErrorCategory::kRangeViolation, where + ": angle outside [0, 360]");
  }
  if (s.radius < 0.0 || s.radius > 1.0) {
    return fail(FormatErrorCategory::kRangeViolation, where + ": radius outside [0, 1]");
  }
  return State{s};
}

std::variant<State, FormatError> parse_lightbar_state(const json& j, const std::string& where) {
  if (!j.is_string()) return fail(FormatErrorCategory::kSchemaMismatch, where + ": lightbar state must be a string");
  const auto& bits = j.get_ref<const std::string&>();
  if (bits.size() != kLightbarRegions) {
    return fail(FormatErrorCategory::kBadBitstring,
                where + ": expected 16 regions, got " + std::to_string(bits.size()));
  }
  if (bits.find_first_not_of("01") != std::string::npos) {
    return fail(FormatErrorCategory::kBadBitstring, where + ": regions must be '0' or '1'");
  }
  return State{LightbarState::from_bits(bits)};
}

std::variant<State, FormatError> parse_arm_state(const json& j, const std::string& where, const ArmLimits& limits) {
  if (!j.is_object()) return fail(FormatErrorCategory::kSchemaMismatch, where + ": arm state must be an object");
  ArmState s;
  for (std::size_t i = 0; i < kArmJoints; ++i) {
    if (auto e = read_number(j, kArmJointNames[i], where, s.joints[i])) return *e;
  }
  for (std::size_t i = 0; i < kArmJoints; ++i) {
    const auto& r = limits.ranges[i];
    if (s.joints[i] < r.min_deg || s.joints[i] > r.max_deg) {
      std::ostringstream os;
      os << where << ": " << kArmJointNames[i] << " " << s.joints[i] << " outside [" << r.min_deg << ", "
         << r.max_deg << "]";
      return fail(FormatErrorCategory::kRangeViolation, os.str());
    }
  }
  return State{s};
}

double shortest_arc(double from, double to) {
  double d = std::fmod(to - from, 360.0);
  if (d > 180.0) d -= 360.0;
  if (d < -180.0) d += 360.0;
  return d;
}

double wrap_angle(double a) {
  a = std::fmod(a, 360.0);
  if (a < 0.0) a += 360.0;
  return a;
}

State interpolate(const State& from, const State& to, double frac) {
  return std::visit(
      [&](const auto& a) -> State {
        using T = std::decay_t<decltype(a)>;
        const auto& b = std::get<T>(to);
        if constexpr (std::is_same_v<T, EyeState>) {
          EyeState s;
          s.radius = a.radius + (b.radius - a.radius) * frac;
          s.angle = wrap_angle(a.angle + shortest_arc(a.angle, b.angle) * frac);
          // Keyframe endpoints keep their literal value (360 stays 360).
          if (frac >= 1.0) s.angle = b.angle;
          return s;
        } else if constexpr (std::is_same_v<T, LightbarState>) {
          return frac >= 1.0 ? b : a;
        } else {
          ArmState s;
          for (std::size_t i = 0; i < kArmJoints; ++i) s.joints[i] = a.joints[i] + (b.joints[i] - a.joints[i]) * frac;
          return s;
        }
      },
      from);
}

}  // namespace

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::kEyes:
      return "eyes";
    case Modality::kLightbar:
      return "lightbar";
    case Modality::kArm:
      return "arm";
  }
  return "eyes";
}

Modality modality_from_string(std::string_view s) {
  if (s == "eyes") return Modality::kEyes;
  if (s == "lightbar") return Modality::kLightbar;
  if (s == "arm") return Modality::kArm;
  throw ValidationError("unknown modality '" + std::string(s) + "'");
}

LightbarState LightbarState::from_bits(std::string_view bits) {
  LightbarState s;
  for (std::size_t i = 0; i < kLightbarRegions && i < bits.size(); ++i) s.regions[i] = bits[i] == '1' ? 1 : 0;
  return s;
}

std::string LightbarState::bits() const {
  std::string out(kLightbarRegions, '0');
  for (std::size_t i = 0; i < kLightbarRegions; ++i) out[i] = regions[i] != 0U ? '1' : '0';
  return out;
}

int LightbarState::lit_count() const {
  return static_cast<int>(std::count_if(regions.begin(), regions.end(), [](std::uint8_t r) { return r != 0U; }));
}

Modality modality_of(const State& s) {
  switch (s.index()) {
    case 0:
      return Modality::kEyes;
    case 1:
      return Modality::kLightbar;
    default:
      return Modality::kArm;
  }
}

bool satisfies_invariants(const State& s, const ArmLimits& limits) {
  constexpr double eps = 1e-9;
  if (const auto* e = std::get_if<EyeState>(&s)) {
    return e->angle >= -eps && e->angle <= 360.0 + eps && e->radius >= -eps && e->radius <= 1.0 + eps;
  }
  if (const auto* l = std::get_if<LightbarState>(&s)) {
    return std::all_of(l->regions.begin(), l->regions.end(), [](std::uint8_t r) { return r <= 1U; });
  }
  const auto& a = std::get<ArmState>(s);
  for (std::size_t i = 0; i < kArmJoints; ++i) {
    if (a.joints[i] < limits.ranges[i].min_deg - eps || a.joints[i] > limits.ranges[i].max_deg + eps) return false;
  }
  return true;
}

TransitionGrid transition_grid(Modality m) {
  return m == Modality::kLightbar ? TransitionGrid{1, 10} : TransitionGrid{5, 20};
}

int ActionSequence::total_ds() const {
  int total = 0;
  for (const auto& k : keyframes) total += k.transition_ds;
  return total;
}

std::string_view to_string(FormatErrorCategory c) {
  switch (c) {
    case FormatErrorCategory::kMalformedDocument:
      return "malformed-document";
    case FormatErrorCategory::kSchemaMismatch:
      return "schema-mismatch";
    case FormatErrorCategory::kRangeViolation:
      return "range-violation";
    case FormatErrorCategory::kOffGridTransition:
      return "off-grid-transition";
    case FormatErrorCategory::kBadBitstring:
      return "bad-bitstring";
  }
  return "malformed-document";
}

ParseOutcome parse_action(std::string_view raw_text, Modality expected, const ArmLimits& limits) {
  json doc;
  try {
    doc = json::parse(strip_fence(raw_text));
  } catch (const json::parse_error& e) {
    return fail(FormatErrorCategory::kMalformedDocument, e.what());
  }
  if (!doc.is_object()) return fail(FormatErrorCategory::kMalformedDocument, "document is not a JSON object");

  const auto mod = doc.find("modality");
  if (mod == doc.end() || !mod->is_string()) {
    return fail(FormatErrorCategory::kSchemaMismatch, "missing string field 'modality'");
  }
  if (mod->get<std::string>() != to_string(expected)) {
    return fail(FormatErrorCategory::kSchemaMismatch,
                "modality '" + mod->get<std::string>() + "' does not match expected '" +
                    std::string(to_string(expected)) + "'");
  }
  const auto actions = doc.find("actions");
  if (actions == doc.end() || !actions->is_array()) {
    return fail(FormatErrorCategory::kSchemaMismatch, "missing array field 'actions'");
  }
  if (actions->empty()) return fail(FormatErrorCategory::kSchemaMismatch, "'actions' must hold at least one keyframe");

  const auto grid = transition_grid(expected);
  ActionSequence seq;
  seq.modality = expected;
  for (std::size_t i = 0; i < actions->size(); ++i) {
    const auto& a = (*actions)[i];
    const std::string where = "actions[" + std::to_string(i) + "]";
    if (!a.is_object()) return fail(FormatErrorCategory::kSchemaMismatch, where + " is not an object");
    const auto st = a.find("state");
    if (st == a.end()) return fail(FormatErrorCategory::kSchemaMismatch, where + ": missing 'state'");

    std::variant<State, FormatError> parsed = [&]() -> std::variant<State, FormatError> {
      switch (expected) {
        case Modality::kEyes:
          return parse_eye_state(*st, where);
        case Modality::kLightbar:
          return parse_lightbar_state(*st, where);
        case Modality::kArm:
          return parse_arm_state(*st, where, limits);
      }
      return fail(FormatErrorCategory::kSchemaMismatch, where);
    }();
    if (auto* err = std::get_if<FormatError>(&parsed)) return std::move(*err);

    double seconds = 0.0;
    if (auto e = read_number(a, "transition", where, seconds)) return *e;
    const double tenths = seconds * 10.0;
    const double rounded = std::round(tenths);
    if (std::abs(tenths - rounded) > 1e-6 || !grid.contains(static_cast<int>(rounded))) {
      std::ostringstream os;
      os << where << ": transition " << seconds << " s is not on the " << to_string(expected) << " grid ["
         << grid.min_ds / 10.0 << ", " << grid.max_ds / 10.0 << "] step 0.1";
      return fail(FormatErrorCategory::kOffGridTransition, os.str());
    }
    seq.keyframes.push_back({std::get<State>(std::move(parsed)), static_cast<int>(rounded)});
  }
  return seq;
}

nlohmann::json to_json(const ActionSequence& seq) {
  json actions = json::array();
  for (const auto& k : seq.keyframes) {
    json state = std::visit(
        [](const auto& s) -> json {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, EyeState>) {
            return {{"angle", s.angle}, {"radius", s.radius}};
          } else if constexpr (std::is_same_v<T, LightbarState>) {
            return s.bits();
          } else {
            json o = json::object();
            for (std::size_t i = 0; i < kArmJoints; ++i) o[std::string(kArmJointNames[i])] = s.joints[i];
            return o;
          }
        },
        k.state);
    actions.push_back({{"state", std::move(state)}, {"transition", k.transition_seconds()}});
  }
  return {{"modality", to_string(seq.modality)}, {"actions", std::move(actions)}};
}

std::string serialize(const ActionSequence& seq) { return to_json(seq).dump(); }

std::string action_hash(const ActionSequence& seq) { return sha256_hex(serialize(seq)); }

double format_error_rate(std::size_t failures, std::size_t total) {
  if (total == 0) throw UndefinedInputError("format error rate of an empty result list");
  return 100.0 * static_cast<double>(failures) / static_cast<double>(total);
}

double format_error_rate(std::span<const ParseOutcome> outcomes) {
  const auto failures = static_cast<std::size_t>(
      std::count_if(outcomes.begin(), outcomes.end(), [](const ParseOutcome& o) { return !o.ok(); }));
  return format_error_rate(failures, outcomes.size());
}

State default_start_state(Modality m, const ArmLimits& limits) {
  switch (m) {
    case Modality::kEyes:
      return EyeState{};
    case Modality::kLightbar:
      return LightbarState{};
    case Modality::kArm: {
      ArmState s;
      for (std::size_t i = 0; i < kArmJoints; ++i) {
        s.joints[i] = std::clamp(0.0, limits.ranges[i].min_deg, limits.ranges[i].max_deg);
      }
      return s;
    }
  }
  return EyeState{};
}

Timeline compile_timeline(const ActionSequence& seq, double fps, const std::optional<State>& start_state,
                          const ArmLimits& limits) {
  if (!(fps > 0.0)) throw ValidationError("fps must be positive");
  State start = start_state.value_or(default_start_state(seq.modality, limits));
  if (modality_of(start) != seq.modality) throw ValidationError("start state modality does not match the sequence");
  for (const auto& k : seq.keyframes) {
    if (modality_of(k.state) != seq.modality) throw ValidationError("keyframe modality does not match the sequence");
  }

  Timeline tl;
  tl.modality = seq.modality;
  tl.fps = fps;
  const double total = seq.total_seconds();
  const auto frame_count = static_cast<std::size_t>(std::floor(total * fps + kTimeEps)) + 1;
  tl.frames.reserve(frame_count);

  // Walk frames and segments together; segment j spans [seg_start, seg_end).
  std::size_t seg = 0;
  double seg_start = 0.0;
  State from = start;
  for (std::size_t f = 0; f < frame_count; ++f) {
    const double t = static_cast<double>(f) / fps;
    while (seg < seq.keyframes.size()) {
      const double seg_end = seg_start + seq.keyframes[seg].transition_seconds();
      if (t + kTimeEps < seg_end) break;
      from = seq.keyframes[seg].state;
      seg_start = seg_end;
      ++seg;
    }
    if (seg >= seq.keyframes.size()) {
      tl.frames.push_back(from);
      continue;
    }
    const double frac = (t - seg_start) / seq.keyframes[seg].transition_seconds();
    tl.frames.push_back(interpolate(from, seq.keyframes[seg].state, std::clamp(frac, 0.0, 1.0)));
  }
  return tl;
}

NyquistResult nyquist_check(const ActionSequence& seq, double fps) {
  if (seq.keyframes.empty()) throw ValidationError("sequence has no keyframes");
  int min_ds = seq.keyframes.front().transition_ds;
  for (const auto& k : seq.keyframes) min_ds = std::min(min_ds, k.transition_ds);
  const double required = 2.0 / (min_ds / 10.0);
  return {fps + kTimeEps >= required, required};
}

double state_distance(const State& a, const State& b, const ArmLimits& limits) {
  if (a.index() != b.index()) throw ValidationError("cannot compare states of different modalities");
  if (const auto* ea = std::get_if<EyeState>(&a)) {
    const auto& eb = std::get<EyeState>(b);
    constexpr double kDeg = M_PI / 180.0;
    const double dx = ea->radius * std::cos(ea->angle * kDeg) - eb.radius * std::cos(eb.angle * kDeg);
    const double dy = ea->radius * std::sin(ea->angle * kDeg) - eb.radius * std::sin(eb.angle * kDeg);
    return std::hypot(dx, dy) + std::abs(ea->radius - eb.radius);
  }
  if (const auto* la = std::get_if<LightbarState>(&a)) {
    const auto& lb = std::get<LightbarState>(b);
    int diff = 0;
    for (std::size_t i = 0; i < kLightbarRegions; ++i) diff += (la->regions[i] != lb.regions[i]) ? 1 : 0;
    return diff;
  }
  const auto& aa = std::get<ArmState>(a);
  const auto& ab = std::get<ArmState>(b);
  double sum = 0.0;
  for (std::size_t i = 0; i < kArmJoints; ++i) {
    const double d = limits.normalize(i, aa.joints[i]) - limits.normalize(i, ab.joints[i]);
    sum += d * d;
  }
  return std::sqrt(sum);
}

double timeline_distance(const Timeline& a, const Timeline& b, const ArmLimits& limits) {
  if (a.modality != b.modality) throw ValidationError("timelines of different modalities");
  if (a.frames.empty() || b.frames.empty()) throw UndefinedInputError("empty timeline");
  const std::size_t n = std::max(a.frames.size(), b.frames.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& fa = a.frames[std::min(i, a.frames.size() - 1)];
    const auto& fb = b.frames[std::min(i, b.frames.size() - 1)];
    sum += state_distance(fa, fb, limits);
  }
  return sum / static_cast<double>(n);
}

double diversity(std::span<const ActionSequence> candidates, double fps, const ArmLimits& limits) {
  if (candidates.size() < 2) throw UndefinedInputError("diversity needs at least two candidates");
  const Modality m = candidates.front().modality;
  for (const auto& c : candidates) {
    if (c.modality != m) throw ValidationError("diversity over mixed modalities");
  }
  std::vector<Timeline> timelines;
  timelines.reserve(candidates.size());
  for (const auto& c : candidates) timelines.push_back(compile_timeline(c, fps, std::nullopt, limits));

  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < timelines.size(); ++i) {
    for (std::size_t j = i + 1; j < timelines.size(); ++j) {
      sum += timeline_distance(timelines[i], timelines[j], limits);
      ++pairs;
    }
  }
  return sum / static_cast<double>(pairs);
}

}  // namespace coloop
