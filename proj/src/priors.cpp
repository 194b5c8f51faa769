// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/priors.hpp"

#include <algorithm>
#include <array>
#include <utility>

namespace prefres::priors {

namespace {

constexpr std::array<std::pair<PriorId, const char*>, 11> kNames{{
    {PriorId::kProxy1, "proxy1"},
    {PriorId::kProxy2, "proxy2"},
    {PriorId::kComplete, "complete"},
    {PriorId::kOpposite, "opposite"},
    {PriorId::kZero, "zero"},
    {PriorId::kOneDim, "one_dim"},
    {PriorId::kFirstStep, "first_step"},
    {PriorId::kInitDistance, "init_distance"},
    {PriorId::kPenaltyRegion, "penalty_region"},
    {PriorId::kCarAvoidSparse, "caravoid_sparse"},
    {PriorId::kFileBacked, "file_backed"},
}};

const Vec2& object_of(const env::EnvState& s, PriorId id) {
  if (!s.object) {
    throw Error("prior " + to_string(id) + " needs an object position");
  }
  return *s.object;
}

const Vec2& object_init_of(const env::EnvState& s, PriorId id) {
  if (!s.object_init) {
    throw Error("prior " + to_string(id) + " needs the initial object position");
  }
  return *s.object_init;
}

bool in_box(const Vec2& p, const Vec2& a, const Vec2& b, double pad) {
  const Vec2 lo = a.cwiseMin(b).array() - pad;
  const Vec2 hi = a.cwiseMax(b).array() + pad;
  return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
}

}  // namespace

std::string to_string(PriorId id) {
  for (const auto& [key, name] : kNames) {
    if (key == id) return name;
  }
  return "zero";
}

PriorId prior_id_from_string(const std::string& name) {
  for (const auto& [key, n] : kNames) {
    if (name == n) return key;
  }
  throw Error("unknown prior '" + name + "'");
}

std::vector<std::string> prior_names() {
  std::vector<std::string> out;
  for (const auto& entry : kNames) out.emplace_back(entry.second);
  return out;
}

void PriorSpec::validate() const {
  if (!(k1 > 0.0 && k2 > 0.0 && k3 > 0.0 && k4 > 0.0)) {
    throw Error("prior: normalization constants must be positive");
  }
  if (region_inflate < 0.0) {
    throw Error("prior: region inflation must be non-negative");
  }
  if (id == PriorId::kFileBacked && checkpoint_path.empty() && !network) {
    throw Error("prior: file_backed needs a checkpoint path");
  }
}

void PriorSpec::load() {
  if (id == PriorId::kFileBacked && !network) {
    network = std::make_shared<const nn::MlpD>(nn::load_checkpoint(checkpoint_path));
  }
}

bool in_feasible_region(const env::EnvState& s, double inflate) {
  const Vec2& obj0 = object_init_of(s, PriorId::kPenaltyRegion);
  return in_box(s.ee, s.ee_init, obj0, inflate) || in_box(s.ee, obj0, s.goal, inflate);
}

double caravoid_prior(const env::EnvState& state, const env::EnvSpec& spec) {
  for (const Vec2& o : spec.obstacles) {
    if ((state.ee - o).norm() < spec.obstacle_radius) {
      return -1.0;
    }
  }
  if ((state.ee - state.goal).norm() < spec.goal_radius) {
    return 10.0;
  }
  return 0.0;
}

double prior_eval(const PriorSpec& prior, const env::EnvSpec& env, const env::EnvState& s,
                  const Vec2& action) {
  switch (prior.id) {
    case PriorId::kProxy1:
      return -prior.k1 * (object_of(s, prior.id) - s.goal).norm();
    case PriorId::kProxy2:
      return -prior.k2 * (s.ee - object_of(s, prior.id)).norm();
    case PriorId::kComplete:
    case PriorId::kOpposite: {
      const Vec2& obj = object_of(s, prior.id);
      const double complete = -prior.k1 * (obj - s.goal).norm() - prior.k2 * (s.ee - obj).norm();
      return prior.id == PriorId::kComplete ? complete : -complete;
    }
    case PriorId::kZero:
      return 0.0;
    case PriorId::kOneDim:
      return -std::abs(s.ee.y() - s.goal.y());
    case PriorId::kFirstStep:
      return -(object_of(s, prior.id) - s.ee).norm();
    case PriorId::kInitDistance:
      return -prior.k3 * (s.ee - object_init_of(s, prior.id)).norm();
    case PriorId::kPenaltyRegion:
      return in_feasible_region(s, prior.region_inflate) ? 0.0 : -prior.k4;
    case PriorId::kCarAvoidSparse:
      return caravoid_prior(s, env);
    case PriorId::kFileBacked: {
      if (!prior.network) {
        throw Error("prior: file_backed checkpoint is not loaded");
      }
      const VectorX obs = env::observe(env, s);
      const Eigen::Index base = obs.size() + action.size();
      const Eigen::Index in_dim = prior.network->input_dim();
      // Accept residual-member checkpoints too: their extra input slot is
      // the prior value, fed as zero here.
      if (in_dim != base && in_dim != base + 1) {
        throw Error("prior: checkpoint input width " + std::to_string(in_dim) +
                    " does not match features+action width " + std::to_string(base));
      }
      VectorX x = VectorX::Zero(in_dim);
      x.head(obs.size()) = obs;
      x.segment(obs.size(), action.size()) = action;
      return prior.network->forward_one(x)(0);
    }
  }
  return 0.0;
}

VectorX prior_eval_batch(const PriorSpec& prior, const env::EnvSpec& env,
                         const std::vector<env::EnvState>& states,
                         const std::vector<Vec2>& actions) {
  if (states.empty()) {
    throw Error("prior_eval_batch: empty segment");
  }
  if (states.size() != actions.size()) {
    throw Error("prior_eval_batch: states and actions differ in length");
  }
  VectorX out(static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = prior_eval(prior, env, states[i], actions[i]);
  }
  return out;
}

}  // namespace prefres::priors
