#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

namespace coloop {

enum class Modality { kEyes, kLightbar, kArm };

std::string_view to_string(Modality m);
/// Throws ValidationError for names other than eyes / lightbar / arm.
Modality modality_from_string(std::string_view s);

/// Pupil position in polar coordinates. angle: degrees, 0 = up, counterclockwise.
struct EyeState {
  double angle = 0.0;
  double radius = 0.0;
  friend bool operator==(const EyeState&, const EyeState&) = default;
};

inline constexpr std::size_t kLightbarRegions = 16;

/// Sixteen on/off regions ordered left to right from the vehicle's perspective.
struct LightbarState {
  std::array<std::uint8_t, kLightbarRegions> regions{};

  static LightbarState from_bits(std::string_view bits);  // caller guarantees 16 chars of 0/1
  std::string bits() const;
  int lit_count() const;
  friend bool operator==(const LightbarState&, const LightbarState&) = default;
};

inline constexpr std::size_t kArmJoints = 5;
inline constexpr std::array<std::string_view, kArmJoints> kArmJointNames = {"shoulder", "upper_arm", "forearm",
                                                                            "hand", "fingers"};

struct ArmState {
  std::array<double, kArmJoints> joints{};
  friend bool operator==(const ArmState&, const ArmState&) = default;
};

struct JointRange {
  double min_deg;
  double max_deg;
};

/// Per-joint angle limits in degrees, in kArmJointNames order.
struct ArmLimits {
  std::array<JointRange, kArmJoints> ranges{{{-90, 90}, {0, 135}, {0, 135}, {-90, 90}, {0, 90}}};

  double normalize(std::size_t joint, double deg) const {
    const auto& r = ranges[joint];
    return (deg - r.min_deg) / (r.max_deg - r.min_deg);
  }
};

using State = std::variant<EyeState, LightbarState, ArmState>;

Modality modality_of(const State& s);
bool satisfies_invariants(const State& s, const ArmLimits& limits = {});

/// Allowed transition durations, in tenths of a second.
struct TransitionGrid {
  int min_ds;
  int max_ds;
  bool contains(int ds) const { return ds >= min_ds && ds <= max_ds; }
};
TransitionGrid transition_grid(Modality m);

struct Keyframe {
  State state;
  int transition_ds = 5;  // tenths of a second

  double transition_seconds() const { return transition_ds / 10.0; }
  friend bool operator==(const Keyframe&, const Keyframe&) = default;
};

struct ActionSequence {
  Modality modality = Modality::kEyes;
  std::vector<Keyframe> keyframes;

  int total_ds() const;
  double total_seconds() const { return total_ds() / 10.0; }
  friend bool operator==(const ActionSequence&, const ActionSequence&) = default;
};

// ---------------------------------------------------------------- parsing

enum class FormatErrorCategory { kMalformedDocument, kSchemaMismatch, kRangeViolation, kOffGridTransition, kBadBitstring };

std::string_view to_string(FormatErrorCategory c);

struct FormatError {
  FormatErrorCategory category;
  std::string detail;
};

/// Outcome of validating one designer output. Failures are values: the
/// format-error rate is a reported statistic, not an exceptional condition.
class ParseOutcome {
 public:
  ParseOutcome(ActionSequence seq) : v_(std::move(seq)) {}  // NOLINT(google-explicit-constructor)
  ParseOutcome(FormatError err) : v_(std::move(err)) {}     // NOLINT(google-explicit-constructor)

  bool ok() const { return std::holds_alternative<ActionSequence>(v_); }
  explicit operator bool() const { return ok(); }
  const ActionSequence& value() const { return std::get<ActionSequence>(v_); }
  ActionSequence& value() { return std::get<ActionSequence>(v_); }
  const FormatError& error() const { return std::get<FormatError>(v_); }

 private:
  std::variant<ActionSequence, FormatError> v_;
};

/// Validates raw designer text against the modality's action schema:
///
///   {"modality": "eyes|lightbar|arm",
///    "actions": [{"state": <state>, "transition": <seconds>}, ...]}
///
/// with <state> = {"angle", "radius"} for eyes, a 16-character "0"/"1" string
/// for the lightbar, and {"shoulder", "upper_arm", "forearm", "hand",
/// "fingers"} in degrees for the arm. A surrounding ```json fence is tolerated.
ParseOutcome parse_action(std::string_view raw_text, Modality expected, const ArmLimits& limits = {});

nlohmann::json to_json(const ActionSequence& seq);
/// Canonical compact document; parse_action(serialize(x)) == x.
std::string serialize(const ActionSequence& seq);
/// Content identity: SHA-256 of the canonical document.
std::string action_hash(const ActionSequence& seq);

/// Percentage of failed outcomes; throws UndefinedInputError on an empty list.
double format_error_rate(std::span<const ParseOutcome> outcomes);
double format_error_rate(std::size_t failures, std::size_t total);

// ---------------------------------------------------------------- timelines

struct Timeline {
  Modality modality = Modality::kEyes;
  double fps = 4.0;
  std::vector<State> frames;

  double duration() const { return frames.empty() ? 0.0 : static_cast<double>(frames.size() - 1) / fps; }
};

State default_start_state(Modality m, const ArmLimits& limits = {});

/// Samples the sequence every 1/fps seconds starting at t = 0. Eye radius and
/// arm joints interpolate linearly, eye angle along the shorter arc, and
/// lightbar regions switch at the end of each transition.
Timeline compile_timeline(const ActionSequence& seq, double fps, const std::optional<State>& start_state = std::nullopt,
                          const ArmLimits& limits = {});

struct NyquistResult {
  bool ok;
  double required_min_fps;  // 2 / shortest transition
};
NyquistResult nyquist_check(const ActionSequence& seq, double fps);

/// Per-frame distance: Hamming bits for the lightbar, Cartesian pupil distance
/// plus |delta radius| for eyes, L2 of range-normalized joints for the arm.
double state_distance(const State& a, const State& b, const ArmLimits& limits = {});

/// Frame-averaged distance after padding the shorter timeline with its last frame.
double timeline_distance(const Timeline& a, const Timeline& b, const ArmLimits& limits = {});

/// Mean pairwise timeline distance over all unordered candidate pairs.
double diversity(std::span<const ActionSequence> candidates, double fps, const ArmLimits& limits = {});

}  // namespace coloop
