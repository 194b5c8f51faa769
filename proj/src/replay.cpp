// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/replay.hpp"

#include <algorithm>

namespace prefres {

MatrixX Segment::network_inputs() const {
  MatrixX x(obs.rows() + actions.rows() + 1, length());
  x.topRows(obs.rows()) = obs;
  x.middleRows(obs.rows(), actions.rows()) = actions;
  x.bottomRows(1) = prior.transpose();
  return x;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, int obs_dim, int action_dim)
    : capacity_(capacity), obs_dim_(obs_dim), action_dim_(action_dim) {
  if (capacity == 0 || obs_dim < 1 || action_dim < 1) {
    throw Error("replay: capacity and dimensions must be positive");
  }
  const auto cap = static_cast<Eigen::Index>(capacity);
  obs_.resize(obs_dim, cap);
  next_obs_.resize(obs_dim, cap);
  actions_.resize(action_dim, cap);
  true_r_.resize(cap);
  prior_r_.resize(cap);
  est_r_.resize(cap);
  terminal_.resize(capacity);
  states_.resize(capacity);
}

std::size_t ReplayBuffer::slot(std::size_t i) const {
  const std::uint64_t oldest = total_added_ - size_;
  return static_cast<std::size_t>((oldest + i) % capacity_);
}

void ReplayBuffer::add(const Transition& t) {
  if (t.obs.size() != obs_dim_ || t.next_obs.size() != obs_dim_ ||
      t.action.size() != action_dim_) {
    throw Error("replay: transition dimensions do not match the buffer");
  }
  const std::uint64_t logical = total_added_;
  const auto s = static_cast<Eigen::Index>(logical % capacity_);
  obs_.col(s) = t.obs;
  next_obs_.col(s) = t.next_obs;
  actions_.col(s) = t.action;
  true_r_[s] = t.true_reward;
  prior_r_[s] = t.prior_reward;
  est_r_[s] = t.estimated_reward;
  terminal_[static_cast<std::size_t>(s)] = t.terminal ? 1 : 0;
  states_[static_cast<std::size_t>(s)] = t.state;

  if (!open_episode_ || current_.episode != t.episode) {
    current_ = EpisodeSpan{t.episode, logical, 0};
    open_episode_ = true;
  }
  ++current_.length;
  ++total_added_;
  size_ = std::min<std::size_t>(size_ + 1, capacity_);
  if (t.episode_end) {
    episodes_.push_back(current_);
    open_episode_ = false;
  }
  drop_overwritten();
}

void ReplayBuffer::drop_overwritten() {
  const std::uint64_t oldest = total_added_ - size_;
  while (!episodes_.empty() && episodes_.front().first < oldest) {
    episodes_.pop_front();
  }
}

std::vector<ReplayBuffer::EpisodeSpan> ReplayBuffer::completed_episodes() const {
  return {episodes_.begin(), episodes_.end()};
}

std::size_t ReplayBuffer::completed_steps() const {
  std::size_t n = 0;
  for (const auto& ep : episodes_) n += static_cast<std::size_t>(ep.length);
  return n;
}

std::uint64_t ReplayBuffer::window_count(int h) const {
  std::uint64_t n = 0;
  for (const auto& ep : episodes_) {
    if (ep.length >= h) n += static_cast<std::uint64_t>(ep.length - h + 1);
  }
  return n;
}

Segment ReplayBuffer::window(int h, std::uint64_t index) const {
  for (const auto& ep : episodes_) {
    if (ep.length < h) continue;
    const auto n = static_cast<std::uint64_t>(ep.length - h + 1);
    if (index < n) {
      return extract(ep, static_cast<int>(index), h);
    }
    index -= n;
  }
  throw Error("replay: window index out of range");
}

Segment ReplayBuffer::extract(const EpisodeSpan& ep, int start, int h) const {
  if (start < 0 || start + h > ep.length) {
    throw Error("replay: window exceeds its episode");
  }
  Segment seg;
  seg.episode = ep.episode;
  seg.start = start;
  seg.obs.resize(obs_dim_, h);
  seg.actions.resize(action_dim_, h);
  seg.prior.resize(h);
  seg.true_reward.resize(h);
  seg.states.reserve(static_cast<std::size_t>(h));
  for (int i = 0; i < h; ++i) {
    const auto s = static_cast<Eigen::Index>((ep.first + static_cast<std::uint64_t>(start + i)) %
                                             capacity_);
    seg.obs.col(i) = next_obs_.col(s);
    seg.actions.col(i) = actions_.col(s);
    seg.prior[i] = prior_r_[s];
    seg.true_reward[i] = true_r_[s];
    seg.states.push_back(states_[static_cast<std::size_t>(s)]);
  }
  return seg;
}

}  // namespace prefres
