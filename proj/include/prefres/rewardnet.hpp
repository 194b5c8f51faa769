// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Residual reward ensemble trained from pairwise segment preferences.
//
// The estimated reward is r0(s, a) + r'(s, a, r0(s, a)), where r0 is a fixed
// prior and r' is the mean of K tanh-bounded networks. Preferences are
// modelled with Bradley-Terry over summed segment rewards.

#pragma once

#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prefres/priors.hpp"
#include "prefres/replay.hpp"
#include "prefres/tinynn.hpp"

namespace prefres::reward {

struct PreferenceTriple {
  Segment first;
  Segment second;
  /// y[0] + y[1] == 1; (1, 0) means `first` is preferred.
  double y0 = 1.0;
  double y1 = 0.0;

  bool is_equal() const { return y0 == y1; }
};

/// FIFO store of preference triples. Appends may come from several threads;
/// training works on a snapshot.
class PreferenceBuffer {
 public:
  explicit PreferenceBuffer(std::size_t capacity = 10000);

  void push(PreferenceTriple triple);
  std::vector<PreferenceTriple> snapshot() const;
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  /// Triples ever appended, including evicted ones.
  std::uint64_t total_pushed() const;

  /// One JSON document per line.
  void dump_jsonl(const std::string& path) const;
  void restore_jsonl(const std::string& path);

 private:
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::deque<PreferenceTriple> items_;
  std::uint64_t total_pushed_ = 0;
};

struct EnsembleConfig {
  int members = 3;
  std::vector<int> hidden = {256, 256, 256};
  double learning_rate = 0.003;
  /// Weight of the squared-residual penalty, 1 / (2 sigma^2); 0 disables it.
  double lambda = 0.0;
  std::uint64_t seed = 0;
};

class RewardEnsemble {
 public:
  RewardEnsemble(int obs_dim, int action_dim, priors::PriorSpec prior, EnsembleConfig config);

  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  int input_dim() const { return obs_dim_ + action_dim_ + 1; }
  int size() const { return static_cast<int>(members_.size()); }
  double lambda() const { return config_.lambda; }
  void set_lambda(double lambda) { config_.lambda = lambda; }
  const EnsembleConfig& config() const { return config_; }
  const priors::PriorSpec& prior() const { return prior_; }

  std::vector<nn::MlpD>& members() { return members_; }
  const std::vector<nn::MlpD>& members() const { return members_; }
  std::vector<nn::AdamD>& optimizers() { return adam_; }

  /// Per-member residuals for a batch of network inputs: K x n.
  MatrixX member_outputs(const MatrixX& inputs) const;
  /// Ensemble-mean residual per column of `inputs`.
  VectorX residual(const MatrixX& inputs) const;

  void save(const std::string& path) const;
  static RewardEnsemble load(const std::string& path);

 private:
  int obs_dim_;
  int action_dim_;
  priors::PriorSpec prior_;
  EnsembleConfig config_;
  std::vector<nn::MlpD> members_;
  std::vector<nn::AdamD> adam_;
};

/// Stacks obs, action and prior value into one network input column.
VectorX network_input(const VectorX& obs, const Vec2& action, double r0);

/// Mean member output for one step.
double residual_forward(const RewardEnsemble& ens, const VectorX& obs, const Vec2& action,
                        double r0);

/// Prior plus residual for one environment state.
double combined_reward(const RewardEnsemble& ens, const env::EnvSpec& env,
                       const env::EnvState& state, const Vec2& action);

/// Per-step estimated reward along a segment, using its stored prior.
VectorX segment_rewards(const RewardEnsemble& ens, const Segment& seg);

/// Bradley-Terry probability that `first` is preferred to `second`.
double preference_probability(const RewardEnsemble& ens, const Segment& first,
                              const Segment& second);

struct LossResult {
  double loss = 0.0;                 // mean over members
  std::vector<double> member_loss;
  std::vector<VectorX> gradients;    // one per member, in parameter layout
  /// Per member, number of triples whose predicted argmax matches the label
  /// (ties count one half).
  std::vector<double> member_correct;
};

/// Cross-entropy preference loss plus the optional squared-residual penalty,
/// with gradients for every member.
LossResult reward_loss(const RewardEnsemble& ens,
                       const std::vector<const PreferenceTriple*>& batch);
LossResult reward_loss(const RewardEnsemble& ens, const std::vector<PreferenceTriple>& batch);

struct TrainStats {
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  int epochs_run = 0;
};

/// Shuffled minibatch epochs of Adam on every member. Training stops early
/// once an epoch's accuracy exceeds `early_stop_accuracy`.
TrainStats update_reward(RewardEnsemble& ens, const std::vector<PreferenceTriple>& data,
                         int epochs, int minibatch, Rng& rng,
                         double early_stop_accuracy = 1.0);

enum class SamplingStrategy { kUniform, kDisagreement };
std::string to_string(SamplingStrategy s);
SamplingStrategy sampling_from_string(const std::string& name);

/// Raised when the replay holds too little completed data to build queries.
class DeferQueries : public Error {
 public:
  using Error::Error;
};

using SegmentPair = std::pair<Segment, Segment>;

SegmentPair sample_segment_pair(const ReplayBuffer& replay, int h, Rng& rng);

/// `count` query pairs. Disagreement sampling draws 10 * count uniform
/// candidates and keeps those with the largest across-member spread of the
/// summed-reward difference.
std::vector<SegmentPair> sample_segment_pairs(const ReplayBuffer& replay, int h, int count,
                                              SamplingStrategy strategy,
                                              const RewardEnsemble* ens, Rng& rng);

/// Fraction of pairs ordered by the estimated reward the same way as by the
/// true reward; ties count one half.
double reward_accuracy(const RewardEnsemble& ens, const std::vector<SegmentPair>& pairs);

/// Mean |r'| over the steps of the given pairs.
double residual_mean_abs(const RewardEnsemble& ens, const std::vector<SegmentPair>& pairs);

nlohmann::json segment_to_json(const Segment& seg);
Segment segment_from_json(const nlohmann::json& doc);

}  // namespace prefres::reward
