// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/teachers.hpp"

#include <algorithm>
#include <chrono>
#include <iostream>

namespace prefres::teach {

using nlohmann::json;

std::string to_string(TeacherId id) {
  switch (id) {
    case TeacherId::kOracle:
      return "oracle";
    case TeacherId::kStochastic:
      return "stochastic";
    case TeacherId::kMistaken:
      return "mistaken";
    case TeacherId::kHuman:
      return "human";
  }
  return "oracle";
}

TeacherId teacher_id_from_string(const std::string& name) {
  if (name == "oracle") return TeacherId::kOracle;
  if (name == "stochastic") return TeacherId::kStochastic;
  if (name == "mistaken") return TeacherId::kMistaken;
  if (name == "human") return TeacherId::kHuman;
  throw Error("unknown teacher '" + name + "' (expected oracle, stochastic, mistaken or human)");
}

void TeacherSpec::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
    throw Error("teacher: epsilon must lie in [0, 1]");
  }
  if (!(delta >= 0.0)) {
    throw Error("teacher: delta must be non-negative");
  }
  if (!(timeout_seconds > 0.0)) {
    throw Error("teacher: timeout must be positive");
  }
}

Label oracle_label(double return0, double return1, double delta, Rng& rng) {
  if (return0 > return1 + delta) return kPreferFirst;
  if (return1 > return0 + delta) return kPreferSecond;
  return rng.bernoulli(0.5) ? kPreferFirst : kPreferSecond;
}

Label oracle_label(const Segment& first, const Segment& second, double delta, Rng& rng) {
  return oracle_label(first.true_return(), second.true_return(), delta, rng);
}

Label stochastic_label(double return0, double return1, Rng& rng) {
  return rng.bernoulli(logistic(return0 - return1)) ? kPreferFirst : kPreferSecond;
}

Label stochastic_label(const Segment& first, const Segment& second, Rng& rng) {
  return stochastic_label(first.true_return(), second.true_return(), rng);
}

Label mistaken_label(double return0, double return1, double epsilon, double delta, Rng& rng) {
  const Label y = oracle_label(return0, return1, delta, rng);
  return rng.bernoulli(epsilon) ? y.flipped() : y;
}

Label mistaken_label(const Segment& first, const Segment& second, double epsilon, double delta,
                     Rng& rng) {
  return mistaken_label(first.true_return(), second.true_return(), epsilon, delta, rng);
}

SyntheticTeacher::SyntheticTeacher(TeacherSpec spec) : spec_(spec), rng_(spec.seed) {
  spec_.validate();
  if (spec_.id == TeacherId::kHuman) {
    throw Error("SyntheticTeacher: human teacher has no scripted labels");
  }
}

Label SyntheticTeacher::label(const Segment& first, const Segment& second) {
  switch (spec_.id) {
    case TeacherId::kOracle:
      return oracle_label(first, second, spec_.delta, rng_);
    case TeacherId::kStochastic:
      return stochastic_label(first, second, rng_);
    case TeacherId::kMistaken:
      return mistaken_label(first, second, spec_.epsilon, spec_.delta, rng_);
    case TeacherId::kHuman:
      break;
  }
  throw Error("SyntheticTeacher: unsupported teacher");
}

// ---------------------------------------------------------------------------

std::string to_string(Answer a) {
  switch (a) {
    case Answer::kLeft:
      return "left";
    case Answer::kRight:
      return "right";
    case Answer::kEqual:
      return "equal";
    case Answer::kNone:
      return "none";
  }
  return "none";
}

std::optional<Answer> answer_from_string(const std::string& name) {
  if (name == "left") return Answer::kLeft;
  if (name == "right") return Answer::kRight;
  if (name == "equal") return Answer::kEqual;
  return std::nullopt;
}

std::string to_string(QueryStatus s) {
  switch (s) {
    case QueryStatus::kPending:
      return "pending";
    case QueryStatus::kAnswered:
      return "answered";
    case QueryStatus::kExpired:
      return "expired";
  }
  return "pending";
}

Label label_for(Answer a) {
  switch (a) {
    case Answer::kLeft:
      return kPreferFirst;
    case Answer::kRight:
      return kPreferSecond;
    case Answer::kEqual:
      return kEqual;
    case Answer::kNone:
      break;
  }
  throw Error("label_for: no answer");
}

namespace {

json track(const Segment& seg, bool objects) {
  json pts = json::array();
  for (const auto& s : seg.states) {
    if (objects) {
      if (!s.object) return nullptr;
      pts.push_back({s.object->x(), s.object->y()});
    } else {
      pts.push_back({s.ee.x(), s.ee.y()});
    }
  }
  return pts;
}

double wall_clock() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

}  // namespace

json query_payload(const std::string& query_id, const std::string& run_id, const Segment& first,
                   const Segment& second, const env::EnvSpec& env, double created,
                   double deadline, bool reveal_rewards) {
  json doc;
  doc["query_id"] = query_id;
  doc["run_id"] = run_id;
  doc["env"] = env::to_string(env.id);
  doc["created"] = created;
  doc["deadline"] = deadline;
  doc["arena"] = env.arena;
  json obstacles = json::array();
  for (const auto& o : env.obstacles) obstacles.push_back({o.x(), o.y()});
  doc["obstacles"] = obstacles;
  doc["segments"] = json::array();
  for (const Segment* seg : {&first, &second}) {
    json s;
    s["positions"] = track(*seg, false);
    s["object_positions"] = track(*seg, true);
    if (!seg->states.empty()) {
      s["goal"] = {seg->states.front().goal.x(), seg->states.front().goal.y()};
    }
    if (reveal_rewards) {
      s["rewards"] = std::vector<double>(seg->true_reward.data(),
                                         seg->true_reward.data() + seg->true_reward.size());
      s["cum_true_reward"] = seg->true_return();
    }
    doc["segments"].push_back(s);
  }
  return doc;
}

HumanBridge::HumanBridge(std::string run_id, reward::PreferenceBuffer& sink, TeacherSpec spec,
                         std::size_t max_pending, Clock clock)
    : run_id_(std::move(run_id)), sink_(sink), spec_(spec), max_pending_(max_pending),
      clock_(clock ? std::move(clock) : Clock(wall_clock)) {
  spec_.validate();
}

double HumanBridge::now() const { return clock_(); }

std::string HumanBridge::request(const Segment& first, const Segment& second,
                                 const std::string& query_id, const env::EnvSpec& env) {
  const double t = now();
  std::lock_guard lock(mutex_);
  expire_locked(t);
  std::size_t pending = 0;
  for (const auto& [id, q] : queries_) {
    if (q.status == QueryStatus::kPending) ++pending;
  }
  if (pending >= max_pending_) {
    throw Backpressure("human queue full: " + std::to_string(pending) + " queries pending");
  }
  if (queries_.count(query_id) != 0) {
    throw Error("human queue: duplicate query id " + query_id);
  }
  QueryRecord q;
  q.id = query_id;
  q.run_id = run_id_;
  q.first = first;
  q.second = second;
  q.created = t;
  q.deadline = t + spec_.timeout_seconds;
  q.payload = query_payload(query_id, run_id_, first, second, env, q.created, q.deadline,
                            spec_.reveal_rewards);
  queries_.emplace(query_id, std::move(q));
  order_.push_back(query_id);
  return query_id;
}

PostResult HumanBridge::post_label(const std::string& query_id, Answer answer) {
  if (answer == Answer::kNone) {
    throw Error("post_label: missing answer");
  }
  const double t = now();
  {
    std::lock_guard lock(mutex_);
    auto it = queries_.find(query_id);
    if (it == queries_.end()) return PostResult::kUnknownQuery;
    QueryRecord& q = it->second;
    if (q.status == QueryStatus::kAnswered) return PostResult::kAlreadyAnswered;
    if (q.status == QueryStatus::kPending && t > q.deadline) {
      q.status = QueryStatus::kExpired;
      ++expired_;
    }
    if (q.status == QueryStatus::kExpired) return PostResult::kExpired;
    q.status = QueryStatus::kAnswered;
    q.answer = answer;
    ++answered_;
    if (!(answer == Answer::kEqual && spec_.skip_equal)) {
      const Label y = label_for(answer);
      sink_.push(reward::PreferenceTriple{q.first, q.second, y.y0, y.y1});
    }
  }
  changed_.notify_all();
  return PostResult::kAccepted;
}

std::vector<json> HumanBridge::pending_payloads() {
  const double t = now();
  std::lock_guard lock(mutex_);
  expire_locked(t);
  std::vector<json> out;
  for (const auto& id : order_) {
    const auto& q = queries_.at(id);
    if (q.status == QueryStatus::kPending) out.push_back(q.payload);
  }
  return out;
}

std::optional<QueryRecord> HumanBridge::find(const std::string& query_id) {
  const double t = now();
  std::lock_guard lock(mutex_);
  expire_locked(t);
  auto it = queries_.find(query_id);
  if (it == queries_.end()) return std::nullopt;
  return it->second;
}

std::size_t HumanBridge::expire_locked(double t) {
  std::size_t n = 0;
  for (auto& [id, q] : queries_) {
    if (q.status == QueryStatus::kPending && t > q.deadline) {
      q.status = QueryStatus::kExpired;
      ++expired_;
      ++n;
      std::clog << "[feedback] query " << id << " expired without an answer; dropped\n";
    }
  }
  return n;
}

std::size_t HumanBridge::expire_overdue() {
  std::size_t n;
  {
    std::lock_guard lock(mutex_);
    n = expire_locked(now());
  }
  if (n > 0) changed_.notify_all();
  return n;
}

std::size_t HumanBridge::expire_all() {
  std::size_t n = 0;
  {
    std::lock_guard lock(mutex_);
    for (auto& [id, q] : queries_) {
      if (q.status == QueryStatus::kPending) {
        q.status = QueryStatus::kExpired;
        ++expired_;
        ++n;
      }
    }
  }
  changed_.notify_all();
  return n;
}

bool HumanBridge::wait_resolved(const std::vector<std::string>& ids, double seconds) {
  const auto until = std::chrono::steady_clock::now() +
                     std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                         std::chrono::duration<double>(seconds));
  std::unique_lock lock(mutex_);
  auto resolved = [&] {
    expire_locked(now());
    for (const auto& id : ids) {
      auto it = queries_.find(id);
      if (it != queries_.end() && it->second.status == QueryStatus::kPending) return false;
    }
    return true;
  };
  while (!resolved()) {
    // Short waits so deadlines are rechecked against the injected clock.
    if (changed_.wait_until(lock, std::min(until, std::chrono::steady_clock::now() +
                                                      std::chrono::milliseconds(100))) ==
            std::cv_status::timeout &&
        std::chrono::steady_clock::now() >= until) {
      return resolved();
    }
  }
  return true;
}

std::size_t HumanBridge::answered_count() const {
  std::lock_guard lock(mutex_);
  return answered_;
}

std::size_t HumanBridge::expired_count() const {
  std::lock_guard lock(mutex_);
  return expired_;
}

std::size_t HumanBridge::pending_count() {
  std::lock_guard lock(mutex_);
  expire_locked(now());
  std::size_t n = 0;
  for (const auto& [id, q] : queries_) {
    if (q.status == QueryStatus::kPending) ++n;
  }
  return n;
}

}  // namespace prefres::teach
