// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Soft actor-critic on relabelable rewards.

#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "prefres/replay.hpp"
#include "prefres/rewardnet.hpp"
#include "prefres/tinynn.hpp"

namespace prefres::sac {

struct SacConfig {
  std::vector<int> hidden = {64, 64};
  int batch_size = 256;
  double actor_lr = 1e-4;
  double critic_lr = 1e-4;
  double alpha_lr = 1e-4;
  double gamma = 0.99;
  double tau = 0.005;
  int target_update_every = 2;
  int actor_update_every = 1;
  double init_temperature = 0.1;
  /// NaN selects -(action dimension).
  double target_entropy = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
};

class SacAgent {
 public:
  SacAgent(int obs_dim, int action_dim, SacConfig config);

  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  const SacConfig& config() const { return config_; }
  double alpha() const { return std::exp(log_alpha_[0]); }
  double target_entropy() const;
  std::int64_t updates() const { return updates_; }

  nn::MlpD actor;
  nn::MlpD critic1;
  nn::MlpD critic2;
  nn::MlpD target1;
  nn::MlpD target2;
  nn::AdamD actor_opt;
  nn::AdamD critic1_opt;
  nn::AdamD critic2_opt;
  nn::AdamD alpha_opt;

  VectorX& log_alpha() { return log_alpha_; }
  void count_update() { ++updates_; }

  void save(const std::string& path, std::int64_t env_steps) const;
  /// Restores parameters; returns the stored environment step counter.
  std::int64_t load(const std::string& path);

 private:
  int obs_dim_;
  int action_dim_;
  SacConfig config_;
  VectorX log_alpha_;
  std::int64_t updates_ = 0;
};

enum class ActMode { kStochastic, kDeterministic };

VectorX act(const SacAgent& agent, const VectorX& obs, ActMode mode, Rng& rng);

/// Squashed-gaussian sample from actor outputs [mean; log_std] with
/// standard-normal `noise`. Fills tanh-squashed actions and per-column
/// log-probabilities.
void squash_sample(const MatrixX& actor_out, const MatrixX& noise, MatrixX& actions,
                   VectorX& log_prob);

struct Batch {
  MatrixX obs;
  MatrixX actions;
  MatrixX next_obs;
  VectorX rewards;
  VectorX not_terminal;
};

/// Uniform minibatch; rewards are the stored estimated rewards.
Batch sample_batch(const ReplayBuffer& replay, int size, Rng& rng);

struct CriticLoss {
  double loss = 0.0;
  VectorX grad1;
  VectorX grad2;
};

/// Sum of both critics' mean squared TD errors against the soft target
/// r + gamma * (1 - terminal) * (min target Q - alpha * log pi). `next_noise`
/// drives the next-action sample.
CriticLoss critic_loss(const SacAgent& agent, const Batch& batch, const MatrixX& next_noise);

struct ActorLoss {
  double loss = 0.0;
  VectorX grad;
  VectorX log_prob;
};

/// mean(alpha * log pi - min Q) under reparameterized samples.
ActorLoss actor_loss(const SacAgent& agent, const Batch& batch, const MatrixX& noise);

struct Losses {
  double critic = 0.0;
  double actor = 0.0;
  double alpha = 0.0;
};

Losses sac_update(SacAgent& agent, const Batch& batch, Rng& rng);
Losses sac_update(SacAgent& agent, const ReplayBuffer& replay, int batch_size, Rng& rng);

/// Recomputes every stored estimated reward as prior + residual. Returns the
/// number of transitions touched.
std::size_t relabel_replay(ReplayBuffer& replay, const reward::RewardEnsemble& ens);

}  // namespace prefres::sac
