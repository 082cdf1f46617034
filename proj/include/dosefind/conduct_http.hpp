#pragma once

#include <memory>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dosefind/conduct.hpp"

namespace dosefind::conduct {

namespace detail {

inline void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    send(res, 200, f());
  } catch (const ApiError& e) {
    send(res, e.status(), e.body());
  } catch (const std::exception& e) {
    send(res, 500, json{{"code", "internal"}, {"message", e.what()}, {"fields", json::array()}});
  }
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  auto j = nlohmann::json::parse(req.body, nullptr, false);
  if (j.is_discarded()) throw ApiError(400, "bad_json", "request body is not valid JSON");
  return j;
}

}  // namespace detail

/// HTTP front end over a SessionStore. Routes:
///   POST /sessions, GET /sessions/{id}, POST /sessions/{id}/outcomes,
///   POST /sessions/{id}/undo, POST /sessions/{id}/close, GET /designs, GET /health
inline std::unique_ptr<httplib::Server> make_server(SessionStore& store) {
  auto srv = std::make_unique<httplib::Server>();
  using httplib::Request;
  using httplib::Response;

  srv->Get("/health", [](const Request&, Response& res) { detail::send(res, 200, json{{"status", "ok"}}); });

  srv->Get("/designs", [](const Request&, Response& res) {
    detail::guarded(res, [] { return json::parse(config::catalog_json().dump()); });
  });

  srv->Post("/sessions", [&store](const Request& req, Response& res) {
    detail::guarded(res, [&] {
      const auto body = detail::parse_body(req);
      const auto& cfg = body.contains("config") && body["config"].is_object() ? body["config"] : body;
      return store.create(cfg);
    });
    if (res.status == 200) res.status = 201;
  });

  srv->Get(R"(/sessions/([A-Za-z0-9]+))", [&store](const Request& req, Response& res) {
    detail::guarded(res, [&] { return store.view(req.matches[1]); });
  });

  srv->Post(R"(/sessions/([A-Za-z0-9]+)/outcomes)", [&store](const Request& req, Response& res) {
    detail::guarded(res, [&] { return store.record(req.matches[1], detail::parse_body(req)); });
  });

  srv->Post(R"(/sessions/([A-Za-z0-9]+)/undo)", [&store](const Request& req, Response& res) {
    detail::guarded(res, [&] { return store.undo(req.matches[1]); });
  });

  srv->Post(R"(/sessions/([A-Za-z0-9]+)/close)", [&store](const Request& req, Response& res) {
    detail::guarded(res, [&] { return store.close(req.matches[1]); });
  });

  srv->set_error_handler([](const Request&, Response& res) {
    if (res.body.empty()) {
      res.set_content(json{{"code", "not_found"}, {"message", "no such route"}, {"fields", json::array()}}.dump(),
                      "application/json");
    }
  });
  return srv;
}

}  // namespace dosefind::conduct
