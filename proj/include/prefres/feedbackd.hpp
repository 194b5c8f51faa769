// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// HTTP front end for live runs and their human preference queues.
//
//   GET  /health
//   GET  /runs
//   GET  /runs/{id}/status
//   GET  /queries/pending[?run={id}]
//   GET  /queries/{id}
//   POST /queries/{id}/label   {"answer": "left" | "right" | "equal"}

#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "prefres/trainer.hpp"

namespace httplib {
class Server;
}

namespace prefres::feedbackd {

struct BindAddress {
  std::string host = "127.0.0.1";
  /// 0 asks the OS for a free port.
  int port = 8080;
};

/// Parses "host:port", ":port" or "port".
BindAddress parse_bind(const std::string& text);

class Service {
 public:
  Service();
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Registers a run; the trainer must outlive the service.
  void add_run(train::Trainer& trainer);

  /// Binds and serves on a background thread. Throws if the address cannot
  /// be bound.
  void start(const BindAddress& bind);
  /// Port actually bound.
  int port() const { return port_; }
  bool running() const;
  /// Expires every pending query, then stops serving.
  void stop();

 private:
  void install_routes();
  train::Trainer* find_run(const std::string& id) const;

  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mutex_;
  std::map<std::string, train::Trainer*> runs_;
};

}  // namespace prefres::feedbackd
