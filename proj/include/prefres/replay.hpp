// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Transition storage shared by the agent and the reward model.

#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "prefres/envlab.hpp"

namespace prefres {

/// One environment step as stored in the replay buffer. Rewards are
/// functions of the state reached (`state`, observed as `next_obs`) and the
/// action taken.
struct Transition {
  env::EnvState state;
  Vec2 action = Vec2::Zero();
  VectorX obs;
  VectorX next_obs;
  double true_reward = 0.0;
  double prior_reward = 0.0;
  double estimated_reward = 0.0;
  /// Masks the bootstrap term; time-limit ends leave it false.
  bool terminal = false;
  /// Last step of its episode.
  bool episode_end = false;
  bool success = false;
  std::int64_t episode = 0;
};

/// H consecutive steps of one episode. The true rewards are visible to
/// teachers and diagnostics only.
struct Segment {
  std::int64_t episode = 0;
  int start = 0;
  MatrixX obs;      // obs_dim x H, observation reached by each step
  MatrixX actions;  // action_dim x H
  VectorX prior;
  VectorX true_reward;
  std::vector<env::EnvState> states;

  int length() const { return static_cast<int>(prior.size()); }
  double true_return() const { return true_reward.sum(); }
  /// Residual network inputs: obs, action and prior value stacked per step.
  MatrixX network_inputs() const;
};

/// Ring buffer of transitions with episode bookkeeping.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int obs_dim, int action_dim);

  void add(const Transition& t);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  std::uint64_t total_added() const { return total_added_; }

  /// Storage slot of the i-th oldest retained transition.
  std::size_t slot(std::size_t i) const;

  const MatrixX& obs() const { return obs_; }
  const MatrixX& next_obs() const { return next_obs_; }
  const MatrixX& actions() const { return actions_; }
  const VectorX& true_rewards() const { return true_r_; }
  const VectorX& prior_rewards() const { return prior_r_; }
  const VectorX& estimated_rewards() const { return est_r_; }
  VectorX& estimated_rewards() { return est_r_; }
  bool terminal(std::size_t slot) const { return terminal_[slot] != 0; }
  const env::EnvState& state(std::size_t slot) const { return states_[slot]; }

  /// Completed episodes still fully retained, oldest first.
  struct EpisodeSpan {
    std::int64_t episode = 0;
    std::uint64_t first = 0;  // logical index of the first step
    int length = 0;
  };
  std::vector<EpisodeSpan> completed_episodes() const;
  /// Number of steps held in completed episodes.
  std::size_t completed_steps() const;

  /// Number of length-`h` windows over completed episodes.
  std::uint64_t window_count(int h) const;
  /// The `index`-th window in (episode, start) order.
  Segment window(int h, std::uint64_t index) const;
  Segment extract(const EpisodeSpan& ep, int start, int h) const;

 private:
  void drop_overwritten();

  std::size_t capacity_;
  int obs_dim_;
  int action_dim_;
  std::size_t size_ = 0;
  std::uint64_t total_added_ = 0;

  MatrixX obs_;
  MatrixX next_obs_;
  MatrixX actions_;
  VectorX true_r_;
  VectorX prior_r_;
  VectorX est_r_;
  std::vector<std::uint8_t> terminal_;
  std::vector<env::EnvState> states_;

  std::deque<EpisodeSpan> episodes_;
  bool open_episode_ = false;
  EpisodeSpan current_;
};

}  // namespace prefres
