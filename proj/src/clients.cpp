#include "coloop/clients.hpp"

#include <httplib.h>

#include <cstdio>

#include "coloop/common.hpp"

namespace coloop {
namespace {

std::string emitter_abbrev(Emitter e) { return e == Emitter::kSelfDrivingCar ? "sdc" : "dr"; }

Emitter emitter_from_abbrev(std::string_view s) {
  if (s == "sdc") return Emitter::kSelfDrivingCar;
  if (s == "dr") return Emitter::kDeliveryRobot;
  throw ValidationError("unknown emitter in render key: " + std::string(s));
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

int parse_int(std::string_view s, const char* what) {
  if (s.empty() || s.size() > 9) throw ValidationError(std::string("bad ") + what + " in render key");
  int v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') throw ValidationError(std::string("bad ") + what + " in render key");
    v = v * 10 + (c - '0');
  }
  return v;
}

std::string format_fps(double fps) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", fps);
  return buf;
}

nlohmann::json post_json(const HttpEndpoint& ep, const RetryPolicy& retry, const std::string& what,
                         const nlohmann::json& body) {
  const auto payload = body.dump();
  nlohmann::json parsed;
  with_retries(retry, what + " " + ep.base_url + ep.path, [&] {
    httplib::Client cli(ep.base_url);
    cli.set_connection_timeout(ep.connect_timeout);
    cli.set_read_timeout(ep.read_timeout);
    auto res = cli.Post(ep.path, payload, "application/json");
    if (!res) throw ServiceError("transport error: " + httplib::to_string(res.error()));
    if (res->status != 200) throw ServiceError("HTTP status " + std::to_string(res->status));
    try {
      parsed = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(what + " returned invalid JSON: " + e.what());
    }
  });
  return parsed;
}

}  // namespace

std::string RenderKey::asset_id() const { return std::string(to_string(modality)) + "-" + emitter_abbrev(emitter); }

std::string RenderKey::str() const {
  char dir[8];
  std::snprintf(dir, sizeof dir, "d%02d", direction);
  return asset_id() + "." + dir + ".b" + std::to_string(distance_band) + "." + timeline_hash + "." +
         format_fps(fps) + "fps." + std::to_string(resolution);
}

RenderKey RenderKey::parse(std::string_view s) {
  // The fps field may itself contain a '.', so split from both ends.
  const auto parts = split(s, '.');
  if (parts.size() < 6) throw ValidationError("malformed render key: " + std::string(s));
  RenderKey k;
  const auto asset = split(parts[0], '-');
  if (asset.size() != 2) throw ValidationError("malformed asset in render key: " + std::string(s));
  k.modality = modality_from_string(asset[0]);
  k.emitter = emitter_from_abbrev(asset[1]);
  if (parts[1].size() != 3 || parts[1][0] != 'd') throw ValidationError("malformed direction in render key");
  k.direction = parse_int(parts[1].substr(1), "direction");
  if (parts[2].size() != 2 || parts[2][0] != 'b') throw ValidationError("malformed distance band in render key");
  k.distance_band = parse_int(parts[2].substr(1), "distance band");
  k.timeline_hash = std::string(parts[3]);
  if (k.timeline_hash.empty() ||
      k.timeline_hash.find_first_not_of("0123456789abcdef") != std::string::npos) {
    throw ValidationError("malformed timeline hash in render key");
  }
  k.resolution = parse_int(parts.back(), "resolution");
  std::string fps;
  for (std::size_t i = 4; i + 1 < parts.size(); ++i) {
    if (!fps.empty()) fps += '.';
    fps += parts[i];
  }
  if (fps.size() < 4 || fps.compare(fps.size() - 3, 3, "fps") != 0) {
    throw ValidationError("malformed fps in render key");
  }
  fps.resize(fps.size() - 3);
  char* end = nullptr;
  k.fps = std::strtod(fps.c_str(), &end);
  if (end == fps.c_str() || *end != '\0' || !(k.fps > 0)) throw ValidationError("malformed fps in render key");
  if (k.direction < 1 || k.direction > 12 || k.distance_band < 1 || k.distance_band > 3) {
    throw ValidationError("render key field out of range");
  }
  if (k.str() != s) throw ValidationError("render key is not in canonical form: " + std::string(s));
  return k;
}

RenderKey make_render_key(const ScenarioSkeleton& scenario, const ActionSequence& action,
                          const RenderProfile& profile) {
  RenderKey k;
  k.modality = action.modality;
  k.emitter = scenario.emitter;
  k.direction = scenario.direction;
  k.distance_band = distance_band_index(scenario.safety);
  k.timeline_hash = action_hash(action);
  k.fps = profile.fps;
  k.resolution = profile.resolution;
  return k;
}

// ---------------------------------------------------------------- cache

RenderCache::RenderCache(std::size_t budget_bytes) : budget_(budget_bytes) {}

std::optional<RenderedClip> RenderCache::get(const std::string& key) {
  const auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  lru_.splice(lru_.end(), lru_, it->second);
  return it->second->clip;
}

std::optional<RenderedClip> RenderCache::peek(const std::string& key) const {
  const auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second->clip;
}

void RenderCache::put(const std::string& key, RenderedClip clip) {
  if (const auto it = index_.find(key); it != index_.end()) {
    bytes_ -= it->second->clip.bytes;
    lru_.erase(it->second);
    index_.erase(it);
  }
  if (clip.bytes > budget_) return;
  while (bytes_ + clip.bytes > budget_ && !lru_.empty()) {
    bytes_ -= lru_.front().clip.bytes;
    index_.erase(lru_.front().key);
    lru_.pop_front();
    ++evictions_;
  }
  bytes_ += clip.bytes;
  lru_.push_back({key, std::move(clip)});
  index_[key] = std::prev(lru_.end());
}

nlohmann::json RenderCache::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : lru_) entries.push_back({{"key", e.key}, {"clip_ref", e.clip.clip_ref}, {"bytes", e.clip.bytes}});
  return {{"entries", entries}, {"evictions", evictions_}};
}

RenderCache RenderCache::from_json(const nlohmann::json& j, std::size_t budget_bytes) {
  RenderCache c(budget_bytes);
  for (const auto& e : j.at("entries")) {
    c.put(e.at("key").get<std::string>(), {e.at("clip_ref").get<std::string>(), e.at("bytes").get<std::size_t>()});
  }
  c.evictions_ = j.value("evictions", std::size_t{0});
  return c;
}

RenderOutcome render_or_reuse(const RenderKey& key, const ActionSequence& action, RenderCache& cache,
                              RendererClient& renderer, const RetryPolicy& retry) {
  const auto k = key.str();
  if (auto hit = cache.get(k)) return {hit->clip_ref, true};
  const auto timeline = compile_timeline(action, key.fps);
  RenderedClip clip;
  with_retries(retry, "render " + k, [&] { clip = renderer.render(key, action, timeline); });
  if (clip.clip_ref.empty()) throw ServiceError("renderer returned an empty clip reference for " + k);
  cache.put(k, clip);
  return {clip.clip_ref, false};
}

// ---------------------------------------------------------------- light scoring

double HpmLightScorer::score(const Scenario& scenario, const ActionSequence& action) {
  return predict(model_, featurize(scenario.skeleton, action, limits_));
}

// ---------------------------------------------------------------- HTTP

nlohmann::json scenario_factors(const ScenarioSkeleton& s) {
  return {{"relationship", to_string(s.relationship)}, {"emitter", to_string(s.emitter)},
          {"receiver", to_string(s.receiver)},         {"message_type", to_string(s.message_type)},
          {"direction", s.direction},                  {"safety", to_string(s.safety)}};
}

HttpDesignerClient::HttpDesignerClient(HttpEndpoint endpoint, RetryPolicy retry)
    : endpoint_(std::move(endpoint)), retry_(retry) {}

std::vector<std::string> HttpDesignerClient::generate(const Scenario& scenario, Modality modality, std::size_t n,
                                                      int round) {
  nlohmann::json body = {{"scenario", scenario_factors(scenario.skeleton)},
                         {"scenario_id", scenario.id()},
                         {"intended_message", scenario.intended_message},
                         {"modality", to_string(modality)},
                         {"n", n},
                         {"round", round}};
  const auto res = post_json(endpoint_, retry_, "designer", body);
  const auto it = res.find("outputs");
  if (it == res.end() || !it->is_array()) throw ValidationError("designer response lacks an outputs array");
  std::vector<std::string> out;
  for (const auto& o : *it) out.push_back(o.is_string() ? o.get<std::string>() : o.dump());
  if (out.size() != n) {
    throw ServiceError("designer returned " + std::to_string(out.size()) + " outputs, expected " + std::to_string(n));
  }
  return out;
}

HttpRendererClient::HttpRendererClient(HttpEndpoint endpoint, RetryPolicy retry)
    : endpoint_(std::move(endpoint)), retry_(retry) {}

RenderedClip HttpRendererClient::render(const RenderKey& key, const ActionSequence& action, const Timeline& timeline) {
  nlohmann::json body = {{"key", key.str()},
                         {"asset", key.asset_id()},
                         {"direction", key.direction},
                         {"distance_band", key.distance_band},
                         {"fps", key.fps},
                         {"resolution", key.resolution},
                         {"frame_count", timeline.frames.size()},
                         {"action", to_json(action)}};
  // Rendering retries are owned by render_or_reuse.
  RetryPolicy once = retry_;
  once.max_attempts = 1;
  const auto res = post_json(endpoint_, once, "renderer", body);
  const auto it = res.find("clip_ref");
  if (it == res.end() || !it->is_string()) throw ValidationError("renderer response lacks clip_ref");
  RenderedClip clip{it->get<std::string>(), 1};
  if (const auto b = res.find("bytes"); b != res.end() && b->is_number_unsigned()) clip.bytes = b->get<std::size_t>();
  return clip;
}

}  // namespace coloop
