// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/envlab.hpp"

#include <algorithm>
#include <cmath>

namespace prefres::env {

namespace {

Vec2 clamp_to(const Vec2& p, double half) {
  return p.cwiseMax(-half).cwiseMin(half);
}

Vec2 rotate(const Vec2& v, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y()};
}

Vec2 uniform_in_box(Rng& rng, double half) {
  return {rng.uniform(-half, half), rng.uniform(-half, half)};
}

const Vec2& require_object(const EnvState& state) {
  if (!state.object) {
    throw Error("env: state has no object position");
  }
  return *state.object;
}

bool near_obstacle(const EnvSpec& spec, const Vec2& p) {
  return std::any_of(spec.obstacles.begin(), spec.obstacles.end(),
                     [&](const Vec2& o) { return (p - o).norm() < spec.obstacle_radius; });
}

}  // namespace

std::string to_string(EnvId id) {
  switch (id) {
    case EnvId::kReach:
      return "reach";
    case EnvId::kPush:
      return "push";
    case EnvId::kCarAvoid:
      return "caravoid";
    case EnvId::kButtonToy:
      return "buttontoy";
  }
  return "reach";
}

EnvId env_id_from_string(const std::string& name) {
  if (name == "reach") return EnvId::kReach;
  if (name == "push") return EnvId::kPush;
  if (name == "caravoid") return EnvId::kCarAvoid;
  if (name == "buttontoy") return EnvId::kButtonToy;
  throw Error("unknown env '" + name + "' (expected reach, push, caravoid or buttontoy)");
}

EnvSpec EnvSpec::make(EnvId id) {
  EnvSpec spec;
  spec.id = id;
  switch (id) {
    case EnvId::kReach:
    case EnvId::kPush:
      break;
    case EnvId::kCarAvoid:
      spec.arena = 1.0;
      spec.action_scale = 0.05;
      spec.success_distance = spec.goal_radius;
      spec.obstacles = {Vec2(0.0, 0.0), Vec2(-0.35, 0.4), Vec2(0.4, -0.35)};
      break;
    case EnvId::kButtonToy:
      spec.success_distance = 0.005;
      spec.contact_radius = 0.05;
      break;
  }
  return spec;
}

void EnvSpec::validate(int segment_length) const {
  if (episode_length < segment_length) {
    throw Error("env: episode length " + std::to_string(episode_length) +
                " is shorter than the segment length " + std::to_string(segment_length));
  }
  if (!(success_distance > 0.0) || !(goal_radius > 0.0) || !(obstacle_radius > 0.0)) {
    throw Error("env: success thresholds must be positive");
  }
  if (!(arena > 0.0 && arena <= 1.0)) {
    throw Error("env: arena half-extent must lie in (0, 1]");
  }
  if (!(action_scale > 0.0) || !(contact_radius > 0.0) || !(press_depth > 0.0)) {
    throw Error("env: action scale, contact radius and press depth must be positive");
  }
  if (gripper < 0.0 || gripper > 1.0) {
    throw Error("env: gripper amount must lie in [0, 1]");
  }
}

EnvState env_reset(const EnvSpec& spec, std::uint64_t seed) {
  Rng rng(Rng::mix(seed));
  EnvState s;
  const double inner = 0.9 * spec.arena;
  switch (spec.id) {
    case EnvId::kReach:
      s.ee = uniform_in_box(rng, inner);
      s.goal = uniform_in_box(rng, inner);
      s.object = s.goal;
      break;
    case EnvId::kPush: {
      const Vec2 obj = uniform_in_box(rng, 0.5 * spec.arena);
      const double heading = rng.uniform(-M_PI, M_PI);
      const Vec2 dir(std::cos(heading), std::sin(heading));
      s.goal = clamp_to(obj + rng.uniform(spec.goal_offset_min, spec.goal_offset_max) * dir, inner);
      const Vec2 back = rotate(-dir, rng.uniform(-spec.ee_angle_noise, spec.ee_angle_noise));
      s.ee = clamp_to(obj + rng.uniform(spec.ee_offset_min, spec.ee_offset_max) * back, spec.arena);
      s.object = obj;
      break;
    }
    case EnvId::kCarAvoid:
      s.ee = clamp_to(Vec2(-0.8, -0.8) + uniform_in_box(rng, 0.1), spec.arena);
      s.goal = clamp_to(Vec2(0.7, 0.7) + uniform_in_box(rng, 0.15), spec.arena);
      break;
    case EnvId::kButtonToy: {
      const Vec2 button(rng.uniform(-0.5 * spec.arena, 0.5 * spec.arena),
                        rng.uniform(0.0, 0.6 * spec.arena));
      s.object = button;
      s.goal = button - Vec2(0.0, spec.press_depth);
      s.ee = uniform_in_box(rng, inner);
      s.gripper = spec.gripper;
      break;
    }
  }
  s.ee_init = s.ee;
  s.object_init = s.object;
  s.success = success_predicate(spec, s);
  s.goal_reached = spec.id == EnvId::kCarAvoid && (s.ee - s.goal).norm() < spec.goal_radius;
  return s;
}

StepResult env_step(const EnvSpec& spec, const EnvState& state, const Vec2& action) {
  if (!action.allFinite()) {
    throw Error("env: non-finite action");
  }
  StepResult out;
  EnvState& next = out.state;
  next = state;
  const Vec2 a = action.cwiseMax(-1.0).cwiseMin(1.0);
  next.ee = clamp_to(state.ee + spec.action_scale * a, spec.arena);
  const Vec2 delta = next.ee - state.ee;
  next.velocity = delta;
  next.step = state.step + 1;

  if (spec.id == EnvId::kPush) {
    const Vec2 obj = require_object(state);
    if ((obj - next.ee).norm() < spec.contact_radius) {
      Vec2 normal = obj - state.ee;
      if (normal.norm() < 1e-12) {
        normal = delta;
      }
      if (normal.norm() > 1e-12) {
        normal.normalize();
        const Vec2 shove = std::max(0.0, delta.dot(normal)) * normal;
        next.object = clamp_to(obj + shove, spec.arena);
        // A wall stops the object, and the object stops the agent.
        const Vec2 blocked = obj + shove - *next.object;
        if (blocked.norm() > 0.0) {
          next.ee = clamp_to(next.ee - blocked, spec.arena);
          next.velocity = next.ee - state.ee;
        }
      }
    }
  } else if (spec.id == EnvId::kButtonToy) {
    Vec2 button = require_object(state);
    if ((button - next.ee).norm() < spec.contact_radius && delta.y() < 0.0) {
      button.y() = std::max(next.goal.y(), button.y() + delta.y());
      next.object = button;
    }
  }

  next.goal_entered_now = false;
  if (spec.id == EnvId::kCarAvoid && !state.goal_reached &&
      (next.ee - next.goal).norm() < spec.goal_radius) {
    next.goal_reached = true;
    next.goal_entered_now = true;
  }

  next.success = state.success || success_predicate(spec, next);
  out.reward = true_reward(spec, next);
  out.success = next.success;
  out.done = next.step >= spec.episode_length;
  return out;
}

int observation_dim(const EnvSpec& spec) {
  switch (spec.id) {
    case EnvId::kReach:
      return 6;
    case EnvId::kPush:
      return 10;
    case EnvId::kCarAvoid:
      return 6 + 2 * static_cast<int>(spec.obstacles.size());
    case EnvId::kButtonToy:
      return 9;
  }
  return 0;
}

VectorX observe(const EnvSpec& spec, const EnvState& s) {
  VectorX o(observation_dim(spec));
  switch (spec.id) {
    case EnvId::kReach:
      o << s.ee, s.goal, s.goal - s.ee;
      break;
    case EnvId::kPush: {
      const Vec2& obj = require_object(s);
      o << s.ee, obj, s.goal, obj - s.ee, s.goal - obj;
      break;
    }
    case EnvId::kCarAvoid:
      o.head<6>() << s.ee, s.goal, s.goal - s.ee;
      for (std::size_t i = 0; i < spec.obstacles.size(); ++i) {
        o.segment<2>(6 + 2 * static_cast<Eigen::Index>(i)) = spec.obstacles[i] - s.ee;
      }
      break;
    case EnvId::kButtonToy: {
      const Vec2& obj = require_object(s);
      o << s.ee, obj, s.goal, obj - s.ee, s.gripper.value_or(spec.gripper);
      break;
    }
  }
  o *= 10.0;
  return o;
}

double true_reward(const EnvSpec& spec, const EnvState& state) {
  switch (spec.id) {
    case EnvId::kReach:
      return true_reward_reach(state);
    case EnvId::kPush:
      return true_reward_push(state);
    case EnvId::kCarAvoid:
      return true_reward_caravoid(state, spec);
    case EnvId::kButtonToy:
      return true_reward_buttontoy(state, spec);
  }
  return 0.0;
}

double true_reward_reach(const EnvState& state) { return -(state.ee - state.goal).norm(); }

double true_reward_push(const EnvState& state) {
  const Vec2& obj = require_object(state);
  return 3.0 * (1.0 - std::tanh(10.0 * (state.goal - obj).norm()) + 1.0 -
                std::tanh(10.0 * (obj - state.ee).norm()));
}

double true_reward_caravoid(const EnvState& state, const EnvSpec& spec) {
  double r = -0.1 * (state.ee - state.goal).norm();
  if (near_obstacle(spec, state.ee)) {
    r -= 1.0;
  }
  if (state.goal_entered_now) {
    r += 10.0;
  }
  return r;
}

double true_reward_buttontoy(const EnvState& state, const EnvSpec& spec) {
  const Vec2& button = require_object(state);
  const Vec2 button_init = state.object_init.value_or(button);
  const double g = std::clamp(state.gripper.value_or(spec.gripper), 0.0, 1.0);
  const double reach_dist = (button - state.ee).norm();
  const double reach_margin = std::max((button_init - state.ee_init).norm(), 1e-6);
  double r = 2.0 * hamacher(g, tolerance(reach_dist, 0.0, 0.05, reach_margin));
  if (reach_dist <= 0.05) {
    const double press_margin = std::max(std::abs(state.goal.y() - button_init.y()), 1e-6);
    r += 8.0 * tolerance(std::abs(state.goal.y() - button.y()), 0.0, 0.005, press_margin);
  }
  return r;
}

bool success_predicate(const EnvSpec& spec, const EnvState& state) {
  switch (spec.id) {
    case EnvId::kReach:
      return (state.ee - state.goal).norm() < spec.success_distance;
    case EnvId::kPush:
      return (require_object(state) - state.goal).norm() < spec.success_distance;
    case EnvId::kCarAvoid:
      return (state.ee - state.goal).norm() < spec.goal_radius;
    case EnvId::kButtonToy:
      return std::abs(require_object(state).y() - state.goal.y()) <= spec.success_distance;
  }
  return false;
}

double tolerance(double x, double b_min, double b_max, double margin) {
  if (!(margin > 0.0)) {
    throw Error("tolerance: margin must be positive");
  }
  if (b_min > b_max) {
    throw Error("tolerance: b_min exceeds b_max");
  }
  if (x >= b_min && x <= b_max) {
    return 1.0;
  }
  const double d = x < b_min ? (b_min - x) / margin : (x - b_max) / margin;
  constexpr double kValueAtMargin = 0.1;
  return 1.0 / ((1.0 / kValueAtMargin - 1.0) * d * d + 1.0);
}

double hamacher(double a, double b) {
  if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0 || std::isnan(a) || std::isnan(b)) {
    throw Error("hamacher: inputs must lie in [0, 1]");
  }
  const double denom = a + b - a * b;
  return denom <= 0.0 ? 0.0 : a * b / denom;
}

}  // namespace prefres::env
