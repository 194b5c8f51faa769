// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Prior rewards r0(s, a): hand-written proxies, ablation priors and a
// checkpoint-backed learned prior.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "prefres/envlab.hpp"
#include "prefres/tinynn.hpp"

namespace prefres::priors {

enum class PriorId {
  kProxy1,         // -k1 |obj - goal|
  kProxy2,         // -k2 |ee - obj|
  kComplete,       // proxy1 + proxy2
  kOpposite,       // -(proxy1 + proxy2)
  kZero,
  kOneDim,         // -|ee_y - goal_y|
  kFirstStep,      // -|obj - ee|
  kInitDistance,   // -k3 |ee - obj_init|
  kPenaltyRegion,  // -k4 outside the feasible corridor
  kCarAvoidSparse, // three-branch obstacle/goal prior
  kFileBacked,
};

std::string to_string(PriorId id);
PriorId prior_id_from_string(const std::string& name);
std::vector<std::string> prior_names();

struct PriorSpec {
  PriorId id = PriorId::kComplete;
  double k1 = 1.0;
  double k2 = 1.0;
  double k3 = 1.0;
  double k4 = 1.0;
  /// Padding added around each corridor box of the penalty-region prior.
  double region_inflate = 0.05;
  std::string checkpoint_path;
  /// Loaded network for file-backed priors; shared read-only.
  std::shared_ptr<const nn::MlpD> network;

  void validate() const;
  /// Loads `checkpoint_path` into `network` for file-backed priors.
  void load();
  bool position_based() const { return id != PriorId::kFileBacked; }
};

double prior_eval(const PriorSpec& prior, const env::EnvSpec& env, const env::EnvState& state,
                  const Vec2& action);

/// Prior over a sequence of (state, action) pairs.
VectorX prior_eval_batch(const PriorSpec& prior, const env::EnvSpec& env,
                         const std::vector<env::EnvState>& states,
                         const std::vector<Vec2>& actions);

/// -1 near any obstacle, else 10 inside the goal region, else 0.
double caravoid_prior(const env::EnvState& state, const env::EnvSpec& spec);

/// Whether the end effector lies in the feasible corridor
/// box(ee_init, obj_init) U box(obj_init, goal), inflated by `inflate`.
bool in_feasible_region(const env::EnvState& state, double inflate);

}  // namespace prefres::priors
