// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration and the preference-driven training loop.

#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefres/envlab.hpp"
#include "prefres/priors.hpp"
#include "prefres/replay.hpp"
#include "prefres/rewardnet.hpp"
#include "prefres/sac.hpp"
#include "prefres/teachers.hpp"

namespace prefres::train {

struct RunConfig {
  /// Empty selects "<env>-<prior>-<teacher>-s<seed>".
  std::string run_id;
  env::EnvId env = env::EnvId::kReach;
  priors::PriorSpec prior;
  teach::TeacherSpec teacher;

  int segment_length = 50;
  int feedback_every = 5000;
  int queries_per_session = 50;
  /// Total stored-triple budget; 0 derives min(10000, sessions * M).
  int feedback_cap = 0;
  /// false trains the agent on the prior alone.
  bool use_residual = true;
  /// Trains the agent on the environment's true reward; no queries are made.
  bool oracle_reward = false;
  reward::SamplingStrategy sampling = reward::SamplingStrategy::kUniform;
  reward::EnsembleConfig ensemble{3, {64, 64}, 0.003, 0.0, 0};
  int reward_epochs = 50;
  int reward_minibatch = 128;
  /// Stop a reward update once training accuracy exceeds this.
  double reward_early_stop = 0.97;
  int preference_capacity = 10000;

  std::int64_t total_steps = 100000;
  int seed_steps = 1000;
  std::size_t replay_capacity = 200000;
  sac::SacConfig agent;
  int pretrain_steps = 0;

  int eval_every = 1000;
  int eval_episodes = 10;
  /// Segment pairs drawn for the reward-accuracy diagnostic.
  int accuracy_pairs = 200;

  /// How long a feedback session waits for human answers; 0 never blocks.
  double human_wait_seconds = 0.0;
  std::size_t human_max_pending = 512;

  std::uint64_t seed = 0;
  std::string out;
  bool save_checkpoints = true;
  bool quiet = true;

  void validate() const;
  /// Cap in force after resolving the automatic default.
  int effective_feedback_cap() const;
  std::string effective_run_id() const;

  /// Canonical key=value listing (sorted, `out` and `quiet` excluded).
  std::map<std::string, std::string> to_kv() const;
  /// FNV-1a over the canonical listing, as 16 hex digits.
  std::string hash() const;
  nlohmann::json to_json() const;

  void set(const std::string& key, const std::string& value);
  /// Applies a `key=value` text; '#' starts a comment.
  void apply_text(const std::string& text);
  void apply_file(const std::string& path);
};

std::vector<std::string> config_keys();

std::vector<std::string> preset_names();
/// Defaults with the named delta applied.
RunConfig preset(const std::string& name);
void apply_preset(RunConfig& cfg, const std::string& name);

struct MetricRow {
  std::int64_t step = 0;
  double success_rate = 0.0;
  double true_return = 0.0;
  double reward_accuracy = 0.0;
  double residual_mean_abs = 0.0;
  double loss = 0.0;
};

struct RunStatus {
  std::string run_id;
  std::int64_t step = 0;
  std::int64_t total_steps = 0;
  double success_rate = 0.0;
  double reward_accuracy = 0.0;
  std::size_t feedback_used = 0;
  std::size_t feedback_cap = 0;
  int sessions = 0;
  bool finished = false;
  std::string error;

  nlohmann::json to_json() const;
};

struct RunResult {
  std::vector<MetricRow> metrics;
  std::string config_hash;
  std::size_t feedback_used = 0;
  int sessions = 0;
};

/// Owns the agent, replay, reward model and teacher of one run. The
/// training loop runs on one thread; status() and the human bridge may be
/// used concurrently.
class Trainer {
 public:
  explicit Trainer(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }

  RunResult run();
  /// One environment step plus its agent update and any scheduled work.
  void step();
  bool done() const { return t_ >= cfg_.total_steps || stop_.load(); }
  void request_stop() { stop_.store(true); }

  /// Queries, labels, trains the residual and relabels. Returns the number of
  /// triples stored by this session.
  std::size_t feedback_session();
  MetricRow evaluate();

  RunStatus status() const;
  std::int64_t steps_taken() const { return t_; }
  const std::vector<MetricRow>& metrics() const { return metrics_; }

  ReplayBuffer& replay() { return replay_; }
  const ReplayBuffer& replay() const { return replay_; }
  reward::PreferenceBuffer& preferences() { return prefs_; }
  reward::RewardEnsemble& ensemble() { return ensemble_; }
  sac::SacAgent& agent() { return agent_; }
  /// Present only for human-teacher runs.
  teach::HumanBridge* human() { return human_.get(); }
  std::size_t feedback_used() const { return feedback_used_; }
  int sessions() const { return sessions_; }

  void write_checkpoints() const;

 private:
  void reset_episode();
  void write_metrics_header() const;
  void append_metrics(const MetricRow& row) const;
  std::size_t collect_labels(std::vector<reward::SegmentPair>& pairs, std::size_t budget);
  double estimated_reward(const VectorX& obs, const Vec2& action, double prior) const;
  void pretrain();

  RunConfig cfg_;
  env::EnvSpec env_;
  Rng rng_;
  Rng act_rng_;
  Rng sample_rng_;
  Rng eval_rng_;
  ReplayBuffer replay_;
  sac::SacAgent agent_;
  reward::RewardEnsemble ensemble_;
  reward::PreferenceBuffer prefs_;
  std::optional<teach::SyntheticTeacher> synthetic_;
  std::unique_ptr<teach::HumanBridge> human_;

  std::int64_t t_ = 0;
  std::int64_t episode_ = 0;
  env::EnvState state_;
  VectorX obs_;
  std::size_t feedback_used_ = 0;
  int sessions_ = 0;
  int query_counter_ = 0;
  double last_loss_ = 0.0;
  std::vector<reward::SegmentPair> accuracy_pairs_;
  std::vector<MetricRow> metrics_;
  std::atomic<bool> stop_{false};

  mutable std::mutex status_mutex_;
  RunStatus status_;
};

RunResult run_training(const RunConfig& cfg);

/// Mean distance from each column of `points` to its k-th nearest other
/// column, as log(1 + d): the particle state-entropy reward.
VectorX knn_entropy_reward(const MatrixX& points, const MatrixX& reference, int k = 5);

}  // namespace prefres::train
