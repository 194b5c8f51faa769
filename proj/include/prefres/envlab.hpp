// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Planar point-mass tasks with analytic ground-truth rewards.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prefres/common.hpp"

namespace prefres::env {

enum class EnvId { kReach, kPush, kCarAvoid, kButtonToy };

std::string to_string(EnvId id);
EnvId env_id_from_string(const std::string& name);

inline constexpr int kActionDim = 2;

/// Static description of a task instance family.
struct EnvSpec {
  EnvId id = EnvId::kReach;
  int episode_length = 100;
  /// Displacement per step at full action.
  double action_scale = 0.03;
  /// Positions are clamped to [-arena, arena]^2, a sub-square of the unit
  /// workspace [-1, 1]^2.
  double arena = 0.4;
  /// Reach/push: distance to goal. Button: residual press depth.
  double success_distance = 0.05;
  /// Car-avoid goal radius.
  double goal_radius = 0.5;
  double obstacle_radius = 0.1;
  std::vector<Vec2> obstacles;
  double contact_radius = 0.08;
  /// Gripper-open amount for the button task.
  double gripper = 1.0;

  // Initial-state distribution.
  double goal_offset_min = 0.10;  // push: object-to-goal distance range
  double goal_offset_max = 0.15;
  double ee_offset_min = 0.08;    // push: agent start behind the object
  double ee_offset_max = 0.14;
  double ee_angle_noise = 0.6;    // radians around the push direction
  double press_depth = 0.04;      // button travel

  /// Defaults for each task, including arena size and obstacle layout.
  static EnvSpec make(EnvId id);
  void validate(int segment_length) const;
};

struct EnvState {
  Vec2 ee = Vec2::Zero();
  Vec2 velocity = Vec2::Zero();
  std::optional<Vec2> object;
  Vec2 goal = Vec2::Zero();
  std::optional<double> gripper;
  int step = 0;

  // Reset-time positions, used by shaping terms and some priors.
  Vec2 ee_init = Vec2::Zero();
  std::optional<Vec2> object_init;

  bool success = false;
  /// Car-avoid: the goal region has been entered this episode, and whether
  /// that first entry happened on the step that produced this state.
  bool goal_reached = false;
  bool goal_entered_now = false;
};

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool success = false;
  bool done = false;
};

EnvState env_reset(const EnvSpec& spec, std::uint64_t seed);

/// Advances one step. Rewards are evaluated on the resulting state.
StepResult env_step(const EnvSpec& spec, const EnvState& state, const Vec2& action);

/// Observation vector fed to the agent and the reward networks.
VectorX observe(const EnvSpec& spec, const EnvState& state);
int observation_dim(const EnvSpec& spec);

/// Dispatches to the task's ground-truth reward.
double true_reward(const EnvSpec& spec, const EnvState& state);

double true_reward_reach(const EnvState& state);
double true_reward_push(const EnvState& state);
double true_reward_caravoid(const EnvState& state, const EnvSpec& spec);
double true_reward_buttontoy(const EnvState& state, const EnvSpec& spec);

bool success_predicate(const EnvSpec& spec, const EnvState& state);

/// Shaping primitive: 1 on [b_min, b_max], decaying to 0.1 at distance
/// `margin` outside the band.
double tolerance(double x, double b_min, double b_max, double margin);

/// Hamacher product ab / (a + b - ab) on [0, 1].
double hamacher(double a, double b);

}  // namespace prefres::env
