// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "prefres/sac.hpp"
#include "support.hpp"

using namespace prefres;
using namespace prefres::sac;

namespace {

constexpr double kPi = 3.14159265358979323846;

SacConfig tiny_config() {
  SacConfig c;
  c.hidden = {4};
  c.seed = 3;
  c.init_temperature = 0.3;
  return c;
}

Batch random_batch(int obs_dim, int n, Rng& rng, bool terminal = false) {
  Batch b;
  b.obs = MatrixX(obs_dim, n);
  b.next_obs = MatrixX(obs_dim, n);
  b.actions = MatrixX(2, n);
  b.rewards = VectorX(n);
  b.not_terminal = VectorX::Constant(n, terminal ? 0.0 : 1.0);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < obs_dim; ++i) {
      b.obs(i, j) = rng.uniform(-1, 1);
      b.next_obs(i, j) = rng.uniform(-1, 1);
    }
    b.actions(0, j) = rng.uniform(-0.9, 0.9);
    b.actions(1, j) = rng.uniform(-0.9, 0.9);
    b.rewards[j] = rng.uniform(-1, 1);
  }
  return b;
}

MatrixX normals(int rows, int cols, Rng& rng) {
  MatrixX m(rows, cols);
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) m(i, j) = rng.normal();
  }
  return m;
}

double q_of(const nn::MlpD& critic, const VectorX& obs, const VectorX& action) {
  VectorX x(obs.size() + action.size());
  x << obs, action;
  return critic.forward_one(x)[0];
}

// Per-sample squashed action and log-density, by direct change of variables.
void reference_sample(const nn::MlpD& actor, const VectorX& obs, const VectorX& noise,
                      VectorX& action, double& log_prob) {
  const VectorX out = actor.forward_one(obs);
  const Eigen::Index d = noise.size();
  action.resize(d);
  log_prob = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double sd = std::exp(out[d + i]);
    const double u = out[i] + sd * noise[i];
    action[i] = std::tanh(u);
    log_prob += -0.5 * noise[i] * noise[i] - std::log(sd) - 0.5 * std::log(2.0 * kPi) -
                std::log(1.0 - std::tanh(u) * std::tanh(u));
  }
}

double reference_critic_loss(const SacAgent& ag, const Batch& b, const MatrixX& noise) {
  double loss = 0.0;
  const auto n = b.obs.cols();
  for (Eigen::Index j = 0; j < n; ++j) {
    VectorX a;
    double lp;
    reference_sample(ag.actor, b.next_obs.col(j), noise.col(j), a, lp);
    const double v = std::min(q_of(ag.target1, b.next_obs.col(j), a),
                              q_of(ag.target2, b.next_obs.col(j), a)) -
                     ag.alpha() * lp;
    const double y = b.rewards[j] + ag.config().gamma * b.not_terminal[j] * v;
    const double e1 = q_of(ag.critic1, b.obs.col(j), b.actions.col(j)) - y;
    const double e2 = q_of(ag.critic2, b.obs.col(j), b.actions.col(j)) - y;
    loss += e1 * e1 + e2 * e2;
  }
  return loss / static_cast<double>(n);
}

double reference_actor_loss(const SacAgent& ag, const Batch& b, const MatrixX& noise) {
  double loss = 0.0;
  const auto n = b.obs.cols();
  for (Eigen::Index j = 0; j < n; ++j) {
    VectorX a;
    double lp;
    reference_sample(ag.actor, b.obs.col(j), noise.col(j), a, lp);
    loss += ag.alpha() * lp -
            std::min(q_of(ag.critic1, b.obs.col(j), a), q_of(ag.critic2, b.obs.col(j), a));
  }
  return loss / static_cast<double>(n);
}

}  // namespace

TEST_SUITE("sac") {
  TEST_CASE("agent construction") {
    const SacAgent ag(5, 2, SacConfig{});
    CHECK(ag.actor.output_dim() == 4);
    CHECK(ag.critic1.widths().front() == 7);
    CHECK(ag.target1.params() == ag.critic1.params());
    CHECK(ag.critic1.params() != ag.critic2.params());
    CHECK(ag.alpha() == doctest::Approx(0.1));
    CHECK(ag.target_entropy() == -2.0);
    SacConfig bad;
    bad.init_temperature = 0.0;
    CHECK_THROWS_AS(SacAgent(5, 2, bad), Error);
    CHECK_THROWS_AS(SacAgent(0, 2, SacConfig{}), Error);
  }

  TEST_CASE("squashed sample matches change of variables") {
    const SacAgent ag(3, 2, tiny_config());
    Rng rng(1);
    const MatrixX obs = normals(3, 20, rng);
    const MatrixX noise = normals(2, 20, rng);
    MatrixX actions;
    VectorX lp;
    squash_sample(ag.actor.forward(obs), noise, actions, lp);
    for (Eigen::Index j = 0; j < 20; ++j) {
      VectorX a;
      double ref;
      reference_sample(ag.actor, obs.col(j), noise.col(j), a, ref);
      CHECK(testing::max_relative_error(actions.col(j), a) < 1e-12);
      CHECK(lp[j] == doctest::Approx(ref).epsilon(1e-10));
      CHECK(actions.col(j).cwiseAbs().maxCoeff() < 1.0);
    }
  }

  TEST_CASE("squashed density integrates to one") {
    // One-dimensional check on a grid over (-1, 1).
    MatrixX out(2, 1);
    out << 0.3, std::log(0.8);
    const int n = 20000;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double a = -1.0 + (i + 0.5) * (2.0 / n);
      const double u = std::atanh(a);
      MatrixX noise(1, 1);
      noise(0, 0) = (u - 0.3) / 0.8;
      MatrixX act;
      VectorX lp;
      squash_sample(out, noise, act, lp);
      total += std::exp(lp[0]) * (2.0 / n);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-3));
  }

  TEST_CASE("critic gradient matches central differences") {
    SacAgent ag(2, 2, tiny_config());
    REQUIRE(ag.critic1.num_params() <= 64);
    Rng rng(2);
    // Distinct targets so the minimum is not degenerate.
    ag.target1 = nn::MlpD::init(ag.target1.widths(), nn::Head::kIdentity, 91);
    const Batch b = random_batch(2, 6, rng);
    const MatrixX noise = normals(2, 6, rng);
    const CriticLoss cl = critic_loss(ag, b, noise);
    CHECK(cl.loss == doctest::Approx(reference_critic_loss(ag, b, noise)).epsilon(1e-12));
    for (int c = 0; c < 2; ++c) {
      const VectorX numeric = testing::numeric_gradient(
          [&](const VectorX& p) {
            SacAgent probe = ag;
            (c == 0 ? probe.critic1 : probe.critic2).params() = p;
            return reference_critic_loss(probe, b, noise);
          },
          (c == 0 ? ag.critic1 : ag.critic2).params());
      CHECK(testing::max_relative_error(c == 0 ? cl.grad1 : cl.grad2, numeric) < 1e-4);
    }
  }

  TEST_CASE("actor gradient matches central differences") {
    SacAgent ag(2, 2, tiny_config());
    REQUIRE(ag.actor.num_params() <= 64);
    Rng rng(4);
    const Batch b = random_batch(2, 6, rng);
    const MatrixX noise = normals(2, 6, rng);
    const ActorLoss al = actor_loss(ag, b, noise);
    CHECK(al.loss == doctest::Approx(reference_actor_loss(ag, b, noise)).epsilon(1e-12));
    const VectorX numeric = testing::numeric_gradient(
        [&](const VectorX& p) {
          SacAgent probe = ag;
          probe.actor.params() = p;
          return reference_actor_loss(probe, b, noise);
        },
        ag.actor.params());
    CHECK(testing::max_relative_error(al.grad, numeric) < 1e-4);
  }

  TEST_CASE("terminal transitions regress on the reward alone") {
    const SacAgent ag(2, 2, tiny_config());
    Rng rng(5);
    const Batch b = random_batch(2, 8, rng, true);
    double expected = 0.0;
    for (Eigen::Index j = 0; j < 8; ++j) {
      const double e1 = q_of(ag.critic1, b.obs.col(j), b.actions.col(j)) - b.rewards[j];
      const double e2 = q_of(ag.critic2, b.obs.col(j), b.actions.col(j)) - b.rewards[j];
      expected += (e1 * e1 + e2 * e2) / 8.0;
    }
    CHECK(critic_loss(ag, b, normals(2, 8, rng)).loss == doctest::Approx(expected).epsilon(1e-12));
  }

  TEST_CASE("tau one copies critics on every target update") {
    SacConfig cfg = tiny_config();
    cfg.tau = 1.0;
    cfg.target_update_every = 1;
    SacAgent ag(2, 2, cfg);
    Rng rng(6);
    sac_update(ag, random_batch(2, 16, rng), rng);
    CHECK(ag.target1.params() == ag.critic1.params());
    CHECK(ag.target2.params() == ag.critic2.params());
  }

  TEST_CASE("targets move only every second update") {
    SacAgent ag(2, 2, tiny_config());
    Rng rng(7);
    const VectorX t0 = ag.target1.params();
    sac_update(ag, random_batch(2, 16, rng), rng);
    CHECK(ag.target1.params() == t0);
    sac_update(ag, random_batch(2, 16, rng), rng);
    CHECK(ag.target1.params() != t0);
    CHECK(ag.updates() == 2);
  }

  TEST_CASE("temperature stays positive and follows the entropy gap") {
    SacAgent ag(2, 2, tiny_config());
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
      sac_update(ag, random_batch(2, 16, rng), rng);
      REQUIRE(ag.alpha() > 0.0);
      REQUIRE(std::isfinite(ag.alpha()));
    }
    // A very low entropy target drives the temperature down.
    SacConfig cfg = tiny_config();
    cfg.target_entropy = -50.0;
    SacAgent low(2, 2, cfg);
    for (int i = 0; i < 50; ++i) sac_update(low, random_batch(2, 16, rng), rng);
    CHECK(low.alpha() < 0.3);
  }

  TEST_CASE("sampled batches read the replay") {
    ReplayBuffer rb(50, 2, 2);
    Rng rng(9);
    CHECK_THROWS_AS(sample_batch(rb, 4, rng), Error);
    for (int i = 0; i < 10; ++i) {
      Transition t;
      t.obs = VectorX::Constant(2, i);
      t.next_obs = VectorX::Constant(2, i + 1);
      t.action = Vec2(i, 0);
      t.estimated_reward = 100.0 + i;
      t.terminal = i == 3;
      rb.add(t);
    }
    CHECK_THROWS_AS(sample_batch(rb, 11, rng), Error);
    const Batch b = sample_batch(rb, 10, rng);
    for (Eigen::Index j = 0; j < 10; ++j) {
      const double i = b.obs(0, j);
      CHECK(b.next_obs(0, j) == i + 1);
      CHECK(b.actions(0, j) == i);
      CHECK(b.rewards[j] == 100.0 + i);
      CHECK(b.not_terminal[j] == (i == 3 ? 0.0 : 1.0));
    }
  }

  TEST_CASE("relabeling writes prior plus residual and is idempotent") {
    priors::PriorSpec prior;
    prior.id = priors::PriorId::kZero;
    const reward::RewardEnsemble ens(3, 2, prior, reward::EnsembleConfig{2, {8}, 0.01, 0.0, 1});
    ReplayBuffer rb(20, 3, 2);
    Rng rng(10);
    for (int i = 0; i < 30; ++i) {
      Transition t;
      t.obs = VectorX::Constant(3, -9.0);
      t.next_obs = VectorX::Constant(3, rng.uniform(-1, 1));
      t.action = Vec2(rng.uniform(-1, 1), rng.uniform(-1, 1));
      t.prior_reward = rng.uniform(-2, 0);
      rb.add(t);
    }
    CHECK(relabel_replay(rb, ens) == 20);
    const VectorX first = rb.estimated_rewards();
    for (std::size_t i = 0; i < 20; ++i) {
      const auto s = static_cast<Eigen::Index>(rb.slot(i));
      const double want = rb.prior_rewards()[s] +
                          reward::residual_forward(ens, rb.next_obs().col(s),
                                                   rb.actions().col(s), rb.prior_rewards()[s]);
      CHECK(rb.estimated_rewards()[s] == doctest::Approx(want).epsilon(1e-14));
    }
    relabel_replay(rb, ens);
    CHECK(rb.estimated_rewards() == first);
    ReplayBuffer other(5, 4, 2);
    Transition t;
    t.obs = t.next_obs = VectorX::Zero(4);
    other.add(t);
    CHECK_THROWS_AS(relabel_replay(other, ens), Error);
  }

  TEST_CASE("one-step bandit is solved") {
    SacConfig cfg;
    cfg.hidden = {32, 32};
    cfg.actor_lr = cfg.critic_lr = cfg.alpha_lr = 3e-3;
    cfg.seed = 1;
    SacAgent ag(1, 2, cfg);
    const Vec2 best(0.5, -0.3);
    ReplayBuffer rb(2000, 1, 2);
    Rng rng(11);
    for (int i = 0; i < 2000; ++i) {
      Transition t;
      t.obs = t.next_obs = VectorX::Ones(1);
      t.action = Vec2(rng.uniform(-1, 1), rng.uniform(-1, 1));
      t.estimated_reward = -10.0 * (t.action - best).squaredNorm();
      t.terminal = true;
      rb.add(t);
    }
    for (int i = 0; i < 1500; ++i) sac_update(ag, rb, 64, rng);
    const VectorX a = act(ag, VectorX::Ones(1), ActMode::kDeterministic, rng);
    CHECK((a - best).norm() < 0.1);
  }

  TEST_CASE("stochastic actions lie inside the box") {
    const SacAgent ag(3, 2, SacConfig{});
    Rng rng(12);
    for (int i = 0; i < 200; ++i) {
      const VectorX a = act(ag, normals(3, 1, rng).col(0) * 10.0, ActMode::kStochastic, rng);
      REQUIRE(a.cwiseAbs().maxCoeff() <= 1.0);
    }
  }

  TEST_CASE("checkpoint round trip") {
    SacAgent ag(2, 2, tiny_config());
    Rng rng(13);
    for (int i = 0; i < 3; ++i) sac_update(ag, random_batch(2, 8, rng), rng);
    testing::TempDir dir("sac");
    ag.save(dir.str("agent.json"), 1234);
    SacAgent back(2, 2, tiny_config());
    CHECK(back.load(dir.str("agent.json")) == 1234);
    CHECK(back.actor.params() == ag.actor.params());
    CHECK(back.target2.params() == ag.target2.params());
    CHECK(back.alpha() == ag.alpha());
    CHECK(back.updates() == 3);
    SacAgent wrong(3, 2, tiny_config());
    CHECK_THROWS_AS(wrong.load(dir.str("agent.json")), Error);
  }
}
