// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/feedbackd.hpp"

#include <httplib.h>

#include <iostream>

namespace prefres::feedbackd {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, json{{"error", message}});
}

json query_view(const teach::QueryRecord& q) {
  json doc = q.payload;
  doc["status"] = teach::to_string(q.status);
  doc["answer"] = teach::to_string(q.answer);
  return doc;
}

}  // namespace

BindAddress parse_bind(const std::string& text) {
  BindAddress out;
  std::string port_text = text;
  const auto colon = text.rfind(':');
  if (colon != std::string::npos) {
    if (colon > 0) out.host = text.substr(0, colon);
    port_text = text.substr(colon + 1);
  }
  try {
    std::size_t pos = 0;
    const int port = std::stoi(port_text, &pos);
    if (pos != port_text.size() || port < 0 || port > 65535) throw Error("");
    out.port = port;
  } catch (const std::exception&) {
    throw Error("bind address '" + text + "' needs a port in [0, 65535]");
  }
  return out;
}

Service::Service() : server_(std::make_unique<httplib::Server>()) {
  // SO_REUSEADDR without SO_REUSEPORT.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
  });
  install_routes();
}

Service::~Service() { stop(); }

void Service::add_run(train::Trainer& trainer) {
  std::lock_guard lock(mutex_);
  runs_[trainer.status().run_id] = &trainer;
}

train::Trainer* Service::find_run(const std::string& id) const {
  std::lock_guard lock(mutex_);
  const auto it = runs_.find(id);
  return it == runs_.end() ? nullptr : it->second;
}

void Service::install_routes() {
  httplib::Server& srv = *server_;
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, json{{"status", "ok"}});
  });

  srv.Get("/runs", [this](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    std::lock_guard lock(mutex_);
    for (const auto& [id, run] : runs_) {
      const train::RunStatus st = run->status();
      list.push_back(json{{"run_id", id},
                          {"env", env::to_string(run->config().env)},
                          {"prior", priors::to_string(run->config().prior.id)},
                          {"teacher", teach::to_string(run->config().teacher.id)},
                          {"step", st.step},
                          {"finished", st.finished}});
    }
    send_json(res, 200, list);
  });

  srv.Get(R"(/runs/([^/]+)/status)", [this](const httplib::Request& req, httplib::Response& res) {
    train::Trainer* run = find_run(req.matches[1]);
    if (!run) return send_error(res, 404, "unknown run");
    send_json(res, 200, run->status().to_json());
  });

  srv.Get("/queries/pending", [this](const httplib::Request& req, httplib::Response& res) {
    std::vector<train::Trainer*> targets;
    if (req.has_param("run")) {
      train::Trainer* run = find_run(req.get_param_value("run"));
      if (!run) return send_error(res, 404, "unknown run");
      targets.push_back(run);
    } else {
      std::lock_guard lock(mutex_);
      for (const auto& [id, run] : runs_) targets.push_back(run);
    }
    json list = json::array();
    for (train::Trainer* run : targets) {
      if (teach::HumanBridge* bridge = run->human()) {
        for (auto& p : bridge->pending_payloads()) {
          p["status"] = "pending";
          list.push_back(std::move(p));
        }
      }
    }
    send_json(res, 200, list);
  });

  // Query ids are unique per service because they embed their run id.
  const auto locate = [this](const std::string& id)
      -> std::pair<teach::HumanBridge*, std::optional<teach::QueryRecord>> {
    std::lock_guard lock(mutex_);
    for (const auto& [run_id, run] : runs_) {
      teach::HumanBridge* bridge = run->human();
      if (!bridge) continue;
      if (auto q = bridge->find(id)) return {bridge, std::move(q)};
    }
    return {nullptr, std::nullopt};
  };

  srv.Get(R"(/queries/([^/]+))", [locate](const httplib::Request& req, httplib::Response& res) {
    const auto [bridge, q] = locate(req.matches[1]);
    if (!q) return send_error(res, 404, "unknown query");
    send_json(res, 200, query_view(*q));
  });

  srv.Post(R"(/queries/([^/]+)/label)",
           [locate](const httplib::Request& req, httplib::Response& res) {
             const std::string id = req.matches[1];
             std::optional<teach::Answer> answer;
             try {
               const json body = json::parse(req.body);
               if (body.is_object() && body.contains("answer") && body["answer"].is_string()) {
                 answer = teach::answer_from_string(body["answer"].get<std::string>());
               }
             } catch (const json::exception&) {
               return send_error(res, 400, "body must be JSON");
             }
             if (!answer) {
               return send_error(res, 400, "answer must be \"left\", \"right\" or \"equal\"");
             }
             const auto [bridge, q] = locate(id);
             if (!bridge) return send_error(res, 404, "unknown query");
             switch (bridge->post_label(id, *answer)) {
               case teach::PostResult::kAccepted:
                 return send_json(res, 200,
                                  json{{"query_id", id},
                                       {"status", "answered"},
                                       {"answer", teach::to_string(*answer)}});
               case teach::PostResult::kUnknownQuery:
                 return send_error(res, 404, "unknown query");
               case teach::PostResult::kAlreadyAnswered:
                 return send_error(res, 409, "query already answered");
               case teach::PostResult::kExpired:
                 return send_error(res, 410, "query expired");
             }
           });
}

void Service::start(const BindAddress& bind) {
  if (thread_.joinable()) {
    throw Error("feedbackd: already running");
  }
  if (bind.port == 0) {
    port_ = server_->bind_to_any_port(bind.host);
    if (port_ <= 0) throw Error("feedbackd: cannot bind " + bind.host);
  } else {
    if (!server_->bind_to_port(bind.host, bind.port)) {
      throw Error("feedbackd: cannot bind " + bind.host + ":" + std::to_string(bind.port));
    }
    port_ = bind.port;
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

bool Service::running() const { return server_->is_running(); }

void Service::stop() {
  std::size_t flushed = 0;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, run] : runs_) {
      if (teach::HumanBridge* bridge = run->human()) flushed += bridge->expire_all();
    }
  }
  if (flushed > 0) {
    std::clog << "[feedbackd] shutdown expired " << flushed << " pending queries\n";
  }
  if (thread_.joinable()) {
    server_->stop();
    thread_.join();
  }
}

}  // namespace prefres::feedbackd
