#include "coloop/service.hpp"

#include <httplib.h>

#include <filesystem>

#include "coloop/common.hpp"

namespace coloop {
namespace {

void reply(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void fail(httplib::Response& res, int status, const std::string& message) {
  reply(res, status, {{"error", message}});
}

std::string require_string(const nlohmann::json& body, const char* field) {
  const auto it = body.find(field);
  if (it == body.end() || !it->is_string() || it->get<std::string>().empty()) {
    throw ValidationError(std::string(field) + ": required string");
  }
  return it->get<std::string>();
}

}  // namespace

Service::Service(Workspace& ws) : ws_(ws), cache_(ws.load_cache()) {}

void Service::mount(httplib::Server& server) {
  server.Get("/health", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"status", "ok"}}); });

  server.Get("/queue/uncertain", [this](const httplib::Request& req, httplib::Response& res) {
    std::size_t limit = 10;
    if (req.has_param("limit")) {
      try {
        const long v = std::stol(req.get_param_value("limit"));
        if (v < 1 || v > 1000) throw std::out_of_range("limit");
        limit = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        return fail(res, 400, "limit must be an integer in 1..1000");
      }
    }
    nlohmann::json items = nlohmann::json::array();
    for (const auto& q : ws_.queue().peek(limit)) {
      nlohmann::json item = {{"scenario_id", q.scenario_id}, {"action_ref", q.action_ref},
                             {"clip_key", q.clip_key},       {"abs_delta", q.abs_delta},
                             {"k_vlm", q.k_vlm},             {"k_hpm", q.k_hpm}};
      if (const auto* s = ws_.catalog().find(q.scenario_id)) item["factors"] = scenario_factors(s->skeleton);
      items.push_back(std::move(item));
    }
    reply(res, 200, {{"items", items}, {"depth", ws_.queue().size()}});
  });

  server.Post("/ratings", [this](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
      return fail(res, 400, "body is not valid JSON");
    }
    try {
      if (!body.is_object()) throw ValidationError("body must be a JSON object");
      const auto rater = require_string(body, "rater_id");
      const auto scenario = require_string(body, "scenario_id");
      const auto action = require_string(body, "action_ref");
      const auto stage_it = body.find("stage");
      if (stage_it == body.end() || !stage_it->is_number_integer()) throw ValidationError("stage: must be 1 or 2");
      const int stage = stage_it->get<int>();
      if (stage != 1 && stage != 2) throw ValidationError("stage: must be 1 or 2");
      const auto scores = body.value("scores", nlohmann::json::object());
      if (!scores.is_object()) throw ValidationError("scores: must be an object");

      const std::string key = scenario + "|" + action;
      if (!ws_.queue().seen(key) && !ws_.db().find(scenario, action)) {
        return fail(res, 404, "unknown item " + key);
      }
      std::lock_guard lock(write_mu_);
      const auto outcome = stage == 1 ? ws_.ratings().submit_stage1(rater, scenario, action, scores)
                                      : ws_.ratings().submit_stage2(rater, scenario, action, scores);
      if (outcome == RatingSubmit::kAccepted) {
        ws_.save_ratings();
        if (stage == 2 && ws_.queue().remove(key)) ws_.save_queue();
      }
      reply(res, 200, {{"status", outcome == RatingSubmit::kAccepted ? "accepted" : "duplicate"}, {"stage", stage}});
    } catch (const ValidationError& e) {
      fail(res, 400, e.what());
    }
  });

  server.Get(R"(/rounds/(\d+)/report)", [this](const httplib::Request& req, httplib::Response& res) {
    int round = 0;
    try {
      round = std::stoi(req.matches[1].str());
    } catch (const std::exception&) {
      return fail(res, 400, "bad round number");
    }
    const auto path = ws_.report_path(round);
    if (!std::filesystem::exists(path)) return fail(res, 404, "no report for round " + std::to_string(round));
    reply(res, 200, read_json(path));
  });

  server.Get(R"(/clips/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    RenderKey key;
    try {
      key = RenderKey::parse(req.matches[1].str());
    } catch (const Error& e) {
      return fail(res, 400, e.what());
    }
    std::optional<DbRecord> record;
    for (const auto& r : ws_.db().records()) {
      if (r.action.modality == key.modality && r.action_hash() == key.timeline_hash) {
        record = r;
        break;
      }
    }
    if (!record) return fail(res, 404, "no action stored for clip " + key.str());
    const auto timeline = compile_timeline(record->action, key.fps);
    std::optional<RenderedClip> clip;
    {
      std::lock_guard lock(write_mu_);
      clip = cache_.peek(key.str());
    }
    reply(res, 200,
          {{"key", key.str()},
           {"asset", key.asset_id()},
           {"direction", key.direction},
           {"distance_band", key.distance_band},
           {"fps", key.fps},
           {"resolution", key.resolution},
           {"frame_count", timeline.frames.size()},
           {"clip_ref", clip ? nlohmann::json(clip->clip_ref) : nlohmann::json()},
           {"action", to_json(record->action)}});
  });

  server.Get(R"(/scenarios/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto id = req.matches[1].str();
    const auto* s = ws_.catalog().find(id);
    if (s == nullptr) return fail(res, 404, "unknown scenario " + id);
    nlohmann::json body = {{"id", s->id()},
                           {"skeleton_id", s->skeleton.id()},
                           {"message_index", s->message_index},
                           {"factors", scenario_factors(s->skeleton)},
                           {"description", describe(s->skeleton)}};
    if (req.has_param("stage") && req.get_param_value("stage") == "2") {
      const auto rater = req.has_param("rater") ? req.get_param_value("rater") : std::string{};
      if (rater.empty()) return fail(res, 400, "stage 2 requires the rater parameter");
      if (!ws_.ratings().has_stage1(rater, s->id())) {
        return fail(res, 403, "stage 2 opens after the rater completes stage 1 for this scenario");
      }
      body["intended_message"] = s->intended_message;
    }
    reply(res, 200, body);
  });
}

void serve(Workspace& ws, const std::string& host, int port) {
  httplib::Server server;
  Service service(ws);
  service.mount(server);
  if (!server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace coloop
