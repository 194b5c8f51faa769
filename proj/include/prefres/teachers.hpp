// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Preference labelers: scripted teachers driven by the hidden true reward,
// and a queue that hands queries to people and collects their answers.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefres/envlab.hpp"
#include "prefres/rewardnet.hpp"

namespace prefres::teach {

enum class TeacherId { kOracle, kStochastic, kMistaken, kHuman };

std::string to_string(TeacherId id);
TeacherId teacher_id_from_string(const std::string& name);

struct TeacherSpec {
  TeacherId id = TeacherId::kOracle;
  /// Flip probability of the mistaken teacher.
  double epsilon = 0.1;
  /// Return gap below which the oracle answers at random.
  double delta = 1e-9;
  std::uint64_t seed = 0;
  /// Drop "equal" answers instead of storing them as (0.5, 0.5).
  bool skip_equal = false;
  double timeout_seconds = 120.0;
  /// Include per-step and cumulative true rewards in human query payloads.
  bool reveal_rewards = false;

  void validate() const;
};

struct Label {
  double y0 = 1.0;
  double y1 = 0.0;

  bool operator==(const Label&) const = default;
  Label flipped() const { return {y1, y0}; }
};

inline constexpr Label kPreferFirst{1.0, 0.0};
inline constexpr Label kPreferSecond{0.0, 1.0};
inline constexpr Label kEqual{0.5, 0.5};

/// Hard label from summed true rewards; gaps within `delta` are decided by a
/// fair coin.
Label oracle_label(double return0, double return1, double delta, Rng& rng);
Label oracle_label(const Segment& first, const Segment& second, double delta, Rng& rng);

/// Bradley-Terry teacher on the true returns.
Label stochastic_label(double return0, double return1, Rng& rng);
Label stochastic_label(const Segment& first, const Segment& second, Rng& rng);

/// Oracle label, swapped with probability `epsilon`.
Label mistaken_label(double return0, double return1, double epsilon, double delta, Rng& rng);
Label mistaken_label(const Segment& first, const Segment& second, double epsilon, double delta,
                     Rng& rng);

/// Scripted labeler owning its random stream.
class SyntheticTeacher {
 public:
  explicit SyntheticTeacher(TeacherSpec spec);
  Label label(const Segment& first, const Segment& second);
  const TeacherSpec& spec() const { return spec_; }

 private:
  TeacherSpec spec_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Human labeling queue

enum class Answer { kLeft, kRight, kEqual, kNone };
enum class QueryStatus { kPending, kAnswered, kExpired };

std::string to_string(Answer a);
std::optional<Answer> answer_from_string(const std::string& name);
std::string to_string(QueryStatus s);
Label label_for(Answer a);

struct QueryRecord {
  std::string id;
  std::string run_id;
  Segment first;
  Segment second;
  nlohmann::json payload;
  double created = 0.0;   // seconds since the epoch
  double deadline = 0.0;
  QueryStatus status = QueryStatus::kPending;
  Answer answer = Answer::kNone;
};

enum class PostResult { kAccepted, kUnknownQuery, kAlreadyAnswered, kExpired };

/// Raised when too many queries are outstanding.
class Backpressure : public Error {
 public:
  using Error::Error;
};

/// Thread-safe table of human queries. Answers are forwarded to the
/// preference buffer exactly once.
class HumanBridge {
 public:
  using Clock = std::function<double()>;

  HumanBridge(std::string run_id, reward::PreferenceBuffer& sink, TeacherSpec spec,
              std::size_t max_pending = 512, Clock clock = {});

  const std::string& run_id() const { return run_id_; }

  /// Enqueues a query; returns its id.
  std::string request(const Segment& first, const Segment& second, const std::string& query_id,
                      const env::EnvSpec& env);

  PostResult post_label(const std::string& query_id, Answer answer);

  /// Payloads of queries still open, oldest first.
  std::vector<nlohmann::json> pending_payloads();
  std::optional<QueryRecord> find(const std::string& query_id);

  /// Marks overdue queries expired. Returns how many changed state.
  std::size_t expire_overdue();
  /// Expires everything still pending (service shutdown).
  std::size_t expire_all();

  /// Blocks until none of `ids` is pending or `seconds` have elapsed.
  bool wait_resolved(const std::vector<std::string>& ids, double seconds);

  std::size_t answered_count() const;
  std::size_t expired_count() const;
  std::size_t pending_count();

  double now() const;

 private:
  std::size_t expire_locked(double now);

  std::string run_id_;
  reward::PreferenceBuffer& sink_;
  TeacherSpec spec_;
  std::size_t max_pending_;
  Clock clock_;
  mutable std::mutex mutex_;
  std::condition_variable changed_;
  std::map<std::string, QueryRecord> queries_;
  std::vector<std::string> order_;
  std::size_t answered_ = 0;
  std::size_t expired_ = 0;
};

/// Rendering payload for one segment pair.
nlohmann::json query_payload(const std::string& query_id, const std::string& run_id,
                             const Segment& first, const Segment& second,
                             const env::EnvSpec& env, double created, double deadline,
                             bool reveal_rewards);

}  // namespace prefres::teach
