#pragma once

#include <mutex>
#include <string>

#include "coloop/clients.hpp"
#include "coloop/workspace.hpp"

namespace httplib {
class Server;
}

namespace coloop {

/// JSON endpoints for human raters:
///   GET  /queue/uncertain?limit=N   next items, most uncertain first (no messages)
///   POST /ratings                   {rater_id, scenario_id, action_ref, stage, scores}
///   GET  /rounds/<n>/report
///   GET  /clips/<key>               clip descriptor plus the action for schematic playback
///   GET  /scenarios/<id>            factors; ?stage=2&rater=<id> adds the intended message
///                                   once that rater finished stage 1 for the scenario
class Service {
 public:
  explicit Service(Workspace& ws);
  void mount(httplib::Server& server);

 private:
  Workspace& ws_;
  RenderCache cache_;
  std::mutex write_mu_;
};

/// Blocks serving on host:port until the process is stopped.
void serve(Workspace& ws, const std::string& host, int port);

}  // namespace coloop
