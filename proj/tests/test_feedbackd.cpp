// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <thread>

#include "prefres/feedbackd.hpp"
#include "schema_check.hpp"
#include "support.hpp"

#include <httplib.h>

using namespace prefres;
using nlohmann::json;

namespace {

train::RunConfig human_config(const std::string& run_id, double timeout = 120.0) {
  train::RunConfig c;
  c.run_id = run_id;
  c.env = env::EnvId::kPush;
  c.teacher.id = teach::TeacherId::kHuman;
  c.teacher.timeout_seconds = timeout;
  c.total_steps = 3000;
  c.seed_steps = 1000;
  c.feedback_every = 1000;
  c.queries_per_session = 5;
  c.eval_every = 1000;
  c.eval_episodes = 1;
  c.accuracy_pairs = 10;
  c.reward_epochs = 2;
  c.ensemble.hidden = {8};
  c.agent.hidden = {8};
  c.agent.batch_size = 16;
  return c;
}

// Steps the trainer through its first feedback session.
void open_first_session(train::Trainer& tr) {
  while (tr.steps_taken() <= tr.config().feedback_every) tr.step();
}

struct Fixture {
  train::Trainer trainer{human_config("alpha")};
  feedbackd::Service service;
  std::unique_ptr<httplib::Client> client;
  testing::SchemaSet schemas{PREFRES_SCHEMA_DIR};

  Fixture() {
    service.add_run(trainer);
    service.start({"127.0.0.1", 0});
    client = std::make_unique<httplib::Client>("127.0.0.1", service.port());
  }

  json get(const std::string& path, int expect) {
    auto res = client->Get(path);
    REQUIRE(res);
    CHECK(res->status == expect);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    return json::parse(res->body);
  }

  json post_label(const std::string& id, const std::string& body, int expect) {
    auto res = client->Post("/queries/" + id + "/label", body, "application/json");
    REQUIRE(res);
    CHECK(res->status == expect);
    const json doc = json::parse(res->body);
    if (expect != 200) CHECK(schemas.check("error.schema.json", doc).empty());
    return doc;
  }

  void conforms(const std::string& schema, const json& doc) {
    const auto errors = schemas.check(schema, doc);
    for (const auto& e : errors) MESSAGE(e);
    CHECK(errors.empty());
  }
};

}  // namespace

TEST_SUITE("feedbackd") {
  TEST_CASE("bind addresses parse") {
    CHECK(feedbackd::parse_bind("0.0.0.0:9000").host == "0.0.0.0");
    CHECK(feedbackd::parse_bind("0.0.0.0:9000").port == 9000);
    CHECK(feedbackd::parse_bind(":81").host == "127.0.0.1");
    CHECK(feedbackd::parse_bind("0").port == 0);
    CHECK_THROWS_AS(feedbackd::parse_bind("host:"), Error);
    CHECK_THROWS_AS(feedbackd::parse_bind("host:70000"), Error);
    CHECK_THROWS_AS(feedbackd::parse_bind("host:8o"), Error);
  }

  TEST_CASE("health, runs and fresh status") {
    Fixture f;
    CHECK(f.service.running());
    CHECK(f.get("/health", 200) == json{{"status", "ok"}});
    const json runs = f.get("/runs", 200);
    f.conforms("runs.schema.json", runs);
    REQUIRE(runs.size() == 1);
    CHECK(runs[0]["run_id"] == "alpha");
    const json st = f.get("/runs/alpha/status", 200);
    f.conforms("run_status.schema.json", st);
    CHECK(st["step"] == 0);
    CHECK(st["feedback_used"] == 0);
    CHECK(st["feedback_cap"] == 15);
    f.get("/runs/nobody/status", 404);
    CHECK(f.get("/queries/pending", 200) == json::array());
  }

  TEST_CASE("preflight requests are allowed") {
    Fixture f;
    auto res = f.client->Options("/queries/x/label");
    REQUIRE(res);
    CHECK(res->status == 204);
    CHECK(res->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
  }

  TEST_CASE("label round trip and error codes") {
    Fixture f;
    open_first_session(f.trainer);
    const json pending = f.get("/queries/pending", 200);
    f.conforms("pending.schema.json", pending);
    REQUIRE(pending.size() == 5);
    CHECK(f.get("/queries/pending?run=alpha", 200).size() == 5);
    f.get("/queries/pending?run=beta", 404);
    const std::string id = pending[0]["query_id"];
    CHECK_FALSE(pending[0]["segments"][0].contains("cum_true_reward"));
    CHECK(pending[0]["segments"][0]["positions"].size() == 50);

    const std::size_t before = f.trainer.preferences().size();
    f.post_label(id, R"({"answer": "sideways"})", 400);
    f.post_label(id, "not json", 400);
    f.post_label(id, R"({"choice": "left"})", 400);
    const json ack = f.post_label(id, R"({"answer": "left"})", 200);
    f.conforms("label_response.schema.json", ack);
    CHECK(f.trainer.preferences().size() == before + 1);
    const auto stored = f.trainer.preferences().snapshot().back();
    CHECK(stored.y0 == 1.0);
    CHECK(stored.y1 == 0.0);

    f.post_label(id, R"({"answer": "right"})", 409);
    CHECK(f.trainer.preferences().size() == before + 1);
    f.post_label("alpha-q999", R"({"answer": "left"})", 404);

    const json view = f.get("/queries/" + id, 200);
    f.conforms("query.schema.json", view);
    CHECK(view["status"] == "answered");
    CHECK(view["answer"] == "left");
    f.get("/queries/alpha-q999", 404);

    const json after = f.get("/queries/pending", 200);
    CHECK(after.size() == 4);
    for (const auto& q : after) CHECK(q["query_id"] != id);

    const std::string second = after[0]["query_id"];
    f.post_label(second, R"({"answer": "equal"})", 200);
    const auto soft = f.trainer.preferences().snapshot().back();
    CHECK(soft.y0 == 0.5);
    CHECK(soft.y1 == 0.5);
  }

  TEST_CASE("answers are consumed by the next session") {
    Fixture f;
    open_first_session(f.trainer);
    const json pending = f.get("/queries/pending", 200);
    for (int i = 0; i < 3; ++i) {
      f.post_label(pending[static_cast<std::size_t>(i)]["query_id"], R"({"answer": "right"})", 200);
    }
    while (f.trainer.steps_taken() <= 2 * f.trainer.config().feedback_every) f.trainer.step();
    const json st = f.get("/runs/alpha/status", 200);
    CHECK(st["feedback_used"] == 3);
    CHECK(st["feedback_used"].get<std::size_t>() == f.trainer.preferences().size());
    CHECK(st["sessions"] == 1);
    CHECK(st["step"].get<int>() >= 2000);
  }

  TEST_CASE("expired queries answer 410 and leave the pending list") {
    train::Trainer trainer(human_config("slow", 0.2));
    feedbackd::Service service;
    service.add_run(trainer);
    service.start({"127.0.0.1", 0});
    httplib::Client client("127.0.0.1", service.port());
    open_first_session(trainer);
    auto res = client.Get("/queries/pending");
    REQUIRE(res);
    const json pending = json::parse(res->body);
    REQUIRE_FALSE(pending.empty());
    const std::string id = pending[0]["query_id"];
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    CHECK(json::parse(client.Get("/queries/pending")->body).empty());
    auto post = client.Post("/queries/" + id + "/label", R"({"answer":"left"})", "application/json");
    REQUIRE(post);
    CHECK(post->status == 410);
    CHECK(trainer.preferences().size() == 0);
    CHECK(json::parse(client.Get("/queries/" + id)->body)["status"] == "expired");
  }

  TEST_CASE("shutdown expires pending queries") {
    Fixture f;
    open_first_session(f.trainer);
    REQUIRE(f.trainer.human()->pending_count() == 5);
    f.service.stop();
    CHECK_FALSE(f.service.running());
    CHECK(f.trainer.human()->pending_count() == 0);
    CHECK(f.trainer.human()->expired_count() == 5);
  }

  TEST_CASE("endpoints stay responsive while training runs") {
    Fixture f;
    std::thread runner([&] { f.trainer.run(); });
    std::int64_t last = 0;
    for (int i = 0; i < 20; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const json st = f.get("/runs/alpha/status", 200);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      CHECK(ms < 1000.0);
      CHECK(st["step"].get<std::int64_t>() >= last);
      last = st["step"].get<std::int64_t>();
      for (const auto& q : f.get("/queries/pending", 200)) {
        f.post_label(q["query_id"], R"({"answer": "left"})", 200);
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    runner.join();
    CHECK(f.trainer.status().finished);
    CHECK(f.trainer.status().error.empty());
  }

  TEST_CASE("label request schema accepts only the three answers") {
    const testing::SchemaSet schemas(PREFRES_SCHEMA_DIR);
    for (const char* a : {"left", "right", "equal"}) {
      CHECK(schemas.check("label_request.schema.json", json{{"answer", a}}).empty());
    }
    CHECK_FALSE(schemas.check("label_request.schema.json", json{{"answer", "none"}}).empty());
    CHECK_FALSE(schemas.check("label_request.schema.json", json::object()).empty());
  }

  TEST_CASE("a busy port is a startup error") {
    Fixture f;
    feedbackd::Service other;
    CHECK_THROWS_AS(other.start({"127.0.0.1", f.service.port()}), Error);
  }
}
