#pragma once

#include <cstddef>
#include <list>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "coloop/action.hpp"
#include "coloop/config.hpp"
#include "coloop/evaluation.hpp"
#include "coloop/hpm.hpp"
#include "coloop/optimizer.hpp"
#include "coloop/scenario.hpp"

namespace coloop {

// ---------------------------------------------------------------- render keys

/// Identity of one rendered clip. Two keys are equal exactly when every field is.
struct RenderKey {
  Modality modality = Modality::kEyes;
  Emitter emitter = Emitter::kSelfDrivingCar;
  int direction = 1;      // camera position, clock hour
  int distance_band = 1;  // 1 (critical) .. 3 (routine)
  std::string timeline_hash;
  double fps = 4.0;
  int resolution = 512;

  /// "eyes-sdc" etc.; one asset per modality and emitter.
  std::string asset_id() const;
  /// Stable, URL-safe string form, e.g. "eyes-sdc.d03.b1.<hash>.4fps.512".
  std::string str() const;
  static RenderKey parse(std::string_view s);  // ValidationError when malformed

  friend bool operator==(const RenderKey&, const RenderKey&) = default;
};

RenderKey make_render_key(const ScenarioSkeleton& scenario, const ActionSequence& action,
                          const RenderProfile& profile);

struct RenderedClip {
  std::string clip_ref;
  std::size_t bytes = 1;
};

class RendererClient {
 public:
  virtual ~RendererClient() = default;
  /// Must be deterministic per key. The timeline is compiled at key.fps.
  virtual RenderedClip render(const RenderKey& key, const ActionSequence& action, const Timeline& timeline) = 0;
};

/// Least-recently-used clip cache bounded by a byte budget. Clips larger than
/// the budget are never stored. Not thread-safe; the round driver owns it.
class RenderCache {
 public:
  explicit RenderCache(std::size_t budget_bytes = std::size_t{256} << 20);

  /// Returns the clip and marks it most recently used.
  std::optional<RenderedClip> get(const std::string& key);
  std::optional<RenderedClip> peek(const std::string& key) const;
  void put(const std::string& key, RenderedClip clip);

  std::size_t size() const { return index_.size(); }
  std::size_t bytes() const { return bytes_; }
  std::size_t budget() const { return budget_; }
  std::size_t evictions() const { return evictions_; }

  nlohmann::json to_json() const;  // entries from least to most recently used
  static RenderCache from_json(const nlohmann::json& j, std::size_t budget_bytes);

 private:
  struct Entry {
    std::string key;
    RenderedClip clip;
  };
  std::size_t budget_;
  std::size_t bytes_ = 0;
  std::size_t evictions_ = 0;
  std::list<Entry> lru_;  // front = least recently used
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
};

struct RenderOutcome {
  std::string clip_ref;
  bool hit = false;
};

/// Cache lookup, rendering (with retries) on a miss. Failures are never cached.
RenderOutcome render_or_reuse(const RenderKey& key, const ActionSequence& action, RenderCache& cache,
                              RendererClient& renderer, const RetryPolicy& retry = {});

// ---------------------------------------------------------------- designer

class DesignerClient {
 public:
  virtual ~DesignerClient() = default;
  /// Exactly n raw action texts for the scenario.
  virtual std::vector<std::string> generate(const Scenario& scenario, Modality modality, std::size_t n,
                                            int round) = 0;
  /// Preference pairs available before the given round; a fine-tuned model
  /// would learn from them. Default: ignored.
  virtual void observe_pairs(const std::vector<PreferencePair>& /*pairs*/, int /*round*/) {}
};

// ---------------------------------------------------------------- light scoring

/// Cheap pre-filter used by staged evaluation; scores on the kernel scale.
class LightScorer {
 public:
  virtual ~LightScorer() = default;
  virtual double score(const Scenario& scenario, const ActionSequence& action) = 0;
};

class HpmLightScorer final : public LightScorer {
 public:
  explicit HpmLightScorer(HpmModel model, ArmLimits limits = {}) : model_(std::move(model)), limits_(limits) {}
  double score(const Scenario& scenario, const ActionSequence& action) override;

 private:
  HpmModel model_;
  ArmLimits limits_;
};

// ---------------------------------------------------------------- HTTP clients

/// POST <base>/generate {scenario, modality, n, round} -> {"outputs": [text, ...]}.
class HttpDesignerClient final : public DesignerClient {
 public:
  HttpDesignerClient(HttpEndpoint endpoint, RetryPolicy retry);
  std::vector<std::string> generate(const Scenario& scenario, Modality modality, std::size_t n, int round) override;

 private:
  HttpEndpoint endpoint_;
  RetryPolicy retry_;
};

/// POST <base>/render {key, asset, direction, distance_band, fps, resolution,
/// frame_count, action} -> {"clip_ref": str, "bytes": n?}.
class HttpRendererClient final : public RendererClient {
 public:
  HttpRendererClient(HttpEndpoint endpoint, RetryPolicy retry);
  RenderedClip render(const RenderKey& key, const ActionSequence& action, const Timeline& timeline) override;

 private:
  HttpEndpoint endpoint_;
  RetryPolicy retry_;
};

/// JSON object of a scenario's factors (no intended message).
nlohmann::json scenario_factors(const ScenarioSkeleton& s);

}  // namespace coloop
