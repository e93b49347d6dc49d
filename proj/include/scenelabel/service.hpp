#pragma once

// HTTP front end for one labelling session: keyframe lists, PNG previews,
// clicks, schema edits, hands-free queries, mesh export jobs, stats and a
// server-sent event stream. Endpoint table: docs/api.md.

#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "scenelabel/session.hpp"

namespace scenelabel {

struct ServiceOptions {
  std::string session_id = "session";
  /// Dataset manifest or synthetic scene the session was built from.
  std::string scene_ref;
  /// Where mesh export jobs write their PLY files.
  std::string export_dir = "exports";
  /// When nonempty, every request must carry it as X-Session-Token or ?token=.
  std::string token;
  /// Poll interval of the event stream (milliseconds).
  int event_poll_ms = 100;
};

/// HTTP status for an error code (4xx for caller mistakes, 409 for conflicts).
int HttpStatus(ErrorCode code);
/// {"error": {"code": "...", "message": "..."}}
nlohmann::json ErrorBody(ErrorCode code, const std::string& message);

class LabelService {
 public:
  LabelService(std::shared_ptr<Session> session, ServiceOptions options);
  ~LabelService();
  LabelService(const LabelService&) = delete;
  LabelService& operator=(const LabelService&) = delete;

  /// Binds host:port (0 = any free port) and serves on a background thread.
  /// Returns the bound port; throws kIo when binding fails.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

  Session& session() { return *session_; }

 private:
  struct Impl;
  std::shared_ptr<Session> session_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace scenelabel
