// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/sac.hpp"

#include <cmath>
#include <fstream>

namespace prefres::sac {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kLog2 = 0.69314718055994530942;

std::vector<int> widths(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

MatrixX stack(const MatrixX& top, const MatrixX& bottom) {
  MatrixX x(top.rows() + bottom.rows(), top.cols());
  x.topRows(top.rows()) = top;
  x.bottomRows(bottom.rows()) = bottom;
  return x;
}

MatrixX standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  MatrixX m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  }
  return m;
}

}  // namespace

SacAgent::SacAgent(int obs_dim, int action_dim, SacConfig config)
    : obs_dim_(obs_dim), action_dim_(action_dim), config_(std::move(config)) {
  if (obs_dim < 1 || action_dim < 1) {
    throw Error("sac: dimensions must be positive");
  }
  if (!(config_.init_temperature > 0.0)) {
    throw Error("sac: initial temperature must be positive");
  }
  if (config_.batch_size < 1 || config_.target_update_every < 1 ||
      config_.actor_update_every < 1) {
    throw Error("sac: batch size and update periods must be positive");
  }
  const Rng seeds(config_.seed);
  actor = nn::MlpD::init(widths(obs_dim, config_.hidden, 2 * action_dim),
                         nn::Head::kSquashGaussian, seeds.split("actor").seed());
  critic1 = nn::MlpD::init(widths(obs_dim + action_dim, config_.hidden, 1), nn::Head::kIdentity,
                           seeds.split("critic1").seed());
  critic2 = nn::MlpD::init(widths(obs_dim + action_dim, config_.hidden, 1), nn::Head::kIdentity,
                           seeds.split("critic2").seed());
  target1 = critic1;
  target2 = critic2;
  actor_opt = nn::AdamD(actor.num_params(), config_.actor_lr);
  critic1_opt = nn::AdamD(critic1.num_params(), config_.critic_lr);
  critic2_opt = nn::AdamD(critic2.num_params(), config_.critic_lr);
  alpha_opt = nn::AdamD(1, config_.alpha_lr);
  log_alpha_ = VectorX::Constant(1, std::log(config_.init_temperature));
}

double SacAgent::target_entropy() const {
  return std::isnan(config_.target_entropy) ? -static_cast<double>(action_dim_)
                                            : config_.target_entropy;
}

void SacAgent::save(const std::string& path, std::int64_t env_steps) const {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["actor"] = nn::to_json(actor);
  doc["critic1"] = nn::to_json(critic1);
  doc["critic2"] = nn::to_json(critic2);
  doc["target1"] = nn::to_json(target1);
  doc["target2"] = nn::to_json(target2);
  doc["log_alpha"] = log_alpha_[0];
  doc["alpha"] = alpha();
  doc["updates"] = updates_;
  doc["env_steps"] = env_steps;
  std::ofstream out(path);
  if (!out) {
    throw Error("sac: cannot write " + path);
  }
  out << doc.dump() << '\n';
}

std::int64_t SacAgent::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("sac: cannot read " + path);
  }
  try {
    nlohmann::json doc;
    in >> doc;
    auto restore = [&](nn::MlpD& net, const char* key) {
      nn::MlpD loaded = nn::mlp_from_json(doc.at(key));
      if (loaded.widths() != net.widths()) {
        throw Error(std::string("sac: checkpoint network '") + key + "' has a different shape");
      }
      net = std::move(loaded);
    };
    restore(actor, "actor");
    restore(critic1, "critic1");
    restore(critic2, "critic2");
    restore(target1, "target1");
    restore(target2, "target2");
    log_alpha_[0] = doc.at("log_alpha").get<double>();
    updates_ = doc.at("updates").get<std::int64_t>();
    return doc.at("env_steps").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("sac: malformed checkpoint " + path + ": " + e.what());
  }
}

void squash_sample(const MatrixX& actor_out, const MatrixX& noise, MatrixX& actions,
                   VectorX& log_prob) {
  const Eigen::Index d = actor_out.rows() / 2;
  const auto mean = actor_out.topRows(d).array();
  const auto log_std = actor_out.bottomRows(d).array();
  const Eigen::ArrayXXd u = mean + log_std.exp() * noise.array();
  actions = u.tanh().matrix();
  // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
  Eigen::ArrayXXd log_jac(u.rows(), u.cols());
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      log_jac(i, j) = 2.0 * (kLog2 - u(i, j) - softplus(-2.0 * u(i, j)));
    }
  }
  log_prob = (-0.5 * noise.array().square() - log_std - kHalfLog2Pi - log_jac)
                 .colwise()
                 .sum()
                 .transpose()
                 .matrix();
}

VectorX act(const SacAgent& agent, const VectorX& obs, ActMode mode, Rng& rng) {
  const VectorX out = agent.actor.forward_one(obs);
  const Eigen::Index d = agent.action_dim();
  if (mode == ActMode::kDeterministic) {
    return out.head(d).array().tanh().matrix();
  }
  VectorX noise(d);
  for (Eigen::Index i = 0; i < d; ++i) noise[i] = rng.normal();
  MatrixX a;
  VectorX lp;
  squash_sample(out, noise, a, lp);
  return a.col(0);
}

Batch sample_batch(const ReplayBuffer& replay, int size, Rng& rng) {
  if (size < 1 || replay.size() < static_cast<std::size_t>(size)) {
    throw Error("sac: replay holds " + std::to_string(replay.size()) +
                " transitions, batch needs " + std::to_string(size));
  }
  Batch b;
  b.obs.resize(replay.obs_dim(), size);
  b.next_obs.resize(replay.obs_dim(), size);
  b.actions.resize(replay.action_dim(), size);
  b.rewards.resize(size);
  b.not_terminal.resize(size);
  for (int j = 0; j < size; ++j) {
    const std::size_t s = replay.slot(rng.below(replay.size()));
    const auto col = static_cast<Eigen::Index>(s);
    b.obs.col(j) = replay.obs().col(col);
    b.next_obs.col(j) = replay.next_obs().col(col);
    b.actions.col(j) = replay.actions().col(col);
    b.rewards[j] = replay.estimated_rewards()[col];
    b.not_terminal[j] = replay.terminal(s) ? 0.0 : 1.0;
  }
  return b;
}

CriticLoss critic_loss(const SacAgent& agent, const Batch& batch, const MatrixX& next_noise) {
  const auto n = static_cast<double>(batch.obs.cols());
  const double alpha = agent.alpha();
  MatrixX next_actions;
  VectorX next_log_prob;
  squash_sample(agent.actor.forward(batch.next_obs), next_noise, next_actions, next_log_prob);
  const MatrixX next_in = stack(batch.next_obs, next_actions);
  const VectorX target_v =
      agent.target1.forward(next_in).cwiseMin(agent.target2.forward(next_in)).transpose() -
      alpha * next_log_prob;
  const VectorX y =
      batch.rewards + agent.config().gamma * batch.not_terminal.cwiseProduct(target_v);

  const MatrixX in = stack(batch.obs, batch.actions);
  CriticLoss out;
  nn::Tape<double> tape;
  for (int c = 0; c < 2; ++c) {
    const nn::MlpD& critic = c == 0 ? agent.critic1 : agent.critic2;
    const VectorX err = critic.forward(in, tape).transpose() - y;
    out.loss += err.squaredNorm() / n;
    const MatrixX adjoint = (2.0 / n) * err.transpose();
    (c == 0 ? out.grad1 : out.grad2) = critic.backward(tape, adjoint).params;
  }
  return out;
}

ActorLoss actor_loss(const SacAgent& agent, const Batch& batch, const MatrixX& noise) {
  const Eigen::Index d = agent.action_dim();
  const auto n = static_cast<double>(batch.obs.cols());
  const double alpha = agent.alpha();

  nn::Tape<double> actor_tape;
  const MatrixX out = agent.actor.forward(batch.obs, actor_tape);
  MatrixX actions;
  VectorX log_prob;
  squash_sample(out, noise, actions, log_prob);

  const MatrixX in = stack(batch.obs, actions);
  nn::Tape<double> tape1;
  nn::Tape<double> tape2;
  const MatrixX q1 = agent.critic1.forward(in, tape1);
  const MatrixX q2 = agent.critic2.forward(in, tape2);

  ActorLoss result;
  result.loss = (alpha * log_prob.array() - q1.cwiseMin(q2).transpose().array()).mean();
  result.log_prob = log_prob;

  // dLoss/dQ is -1/n on whichever critic attains the minimum.
  MatrixX adj1 = MatrixX::Zero(1, q1.cols());
  MatrixX adj2 = MatrixX::Zero(1, q2.cols());
  for (Eigen::Index j = 0; j < q1.cols(); ++j) {
    (q1(0, j) <= q2(0, j) ? adj1 : adj2)(0, j) = -1.0 / n;
  }
  const MatrixX dq_da = agent.critic1.input_gradient(tape1, adj1).bottomRows(d) +
                        agent.critic2.input_gradient(tape2, adj2).bottomRows(d);

  // Chain through a = tanh(u), u = mean + exp(log_std) * noise, and the
  // log-probability's explicit dependence on u and log_std.
  const auto a = actions.array();
  const Eigen::ArrayXXd std_dev = out.bottomRows(d).array().exp();
  const Eigen::ArrayXXd g_u = dq_da.array() * (1.0 - a.square()) + (alpha / n) * 2.0 * a;
  MatrixX adjoint(2 * d, q1.cols());
  adjoint.topRows(d) = g_u.matrix();
  adjoint.bottomRows(d) = (g_u * std_dev * noise.array() - alpha / n).matrix();
  result.grad = agent.actor.backward(actor_tape, adjoint).params;
  return result;
}

Losses sac_update(SacAgent& agent, const Batch& batch, Rng& rng) {
  const Eigen::Index d = agent.action_dim();
  const Eigen::Index n = batch.obs.cols();
  Losses losses;

  const CriticLoss cl = critic_loss(agent, batch, standard_normal(d, n, rng));
  losses.critic = cl.loss;
  nn::adam_step(agent.critic1, cl.grad1, agent.critic1_opt);
  nn::adam_step(agent.critic2, cl.grad2, agent.critic2_opt);

  agent.count_update();
  const std::int64_t step = agent.updates();
  if (step % agent.config().actor_update_every == 0) {
    const ActorLoss al = actor_loss(agent, batch, standard_normal(d, n, rng));
    losses.actor = al.loss;
    nn::adam_step(agent.actor, al.grad, agent.actor_opt);

    const double alpha = agent.alpha();
    const double gap = (-al.log_prob.array() - agent.target_entropy()).mean();
    losses.alpha = alpha * gap;
    VectorX grad(1);
    grad[0] = alpha * gap;
    nn::adam_step<double>(agent.log_alpha(), grad, agent.alpha_opt,
                          [](Eigen::Index) { return std::string("log_alpha"); });
  }
  if (step % agent.config().target_update_every == 0) {
    nn::soft_update(agent.target1, agent.critic1, agent.config().tau);
    nn::soft_update(agent.target2, agent.critic2, agent.config().tau);
  }
  return losses;
}

Losses sac_update(SacAgent& agent, const ReplayBuffer& replay, int batch_size, Rng& rng) {
  const Batch batch = sample_batch(replay, batch_size, rng);
  return sac_update(agent, batch, rng);
}

std::size_t relabel_replay(ReplayBuffer& replay, const reward::RewardEnsemble& ens) {
  const std::size_t n = replay.size();
  if (n == 0) {
    return 0;
  }
  if (replay.obs_dim() != ens.obs_dim() || replay.action_dim() != ens.action_dim()) {
    throw Error("relabel: ensemble input does not match the replay layout");
  }
  constexpr Eigen::Index kChunk = 4096;
  const auto total = static_cast<Eigen::Index>(n);
  const int od = replay.obs_dim();
  const int ad = replay.action_dim();
  // Slots 0..n-1 are all occupied, so relabeling by slot covers every entry.
  for (Eigen::Index begin = 0; begin < total; begin += kChunk) {
    const Eigen::Index len = std::min(kChunk, total - begin);
    MatrixX in(od + ad + 1, len);
    in.topRows(od) = replay.next_obs().middleCols(begin, len);
    in.middleRows(od, ad) = replay.actions().middleCols(begin, len);
    in.bottomRows(1) = replay.prior_rewards().segment(begin, len).transpose();
    replay.estimated_rewards().segment(begin, len) =
        replay.prior_rewards().segment(begin, len) + ens.residual(in);
  }
  return n;
}

}  // namespace prefres::sac
