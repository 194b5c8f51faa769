// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "prefres/rewardnet.hpp"
#include "support.hpp"

using namespace prefres;
using namespace prefres::reward;

namespace {

constexpr int kObs = 3;

RewardEnsemble small_ensemble(int members, double lambda, std::uint64_t seed = 1) {
  priors::PriorSpec prior;
  prior.id = priors::PriorId::kZero;
  return RewardEnsemble(kObs, 2, prior, EnsembleConfig{members, {4}, 0.01, lambda, seed});
}

PreferenceTriple random_triple(Rng& rng, int h, double y0) {
  PreferenceTriple t;
  t.first = testing::random_segment(kObs, h, rng);
  t.second = testing::random_segment(kObs, h, rng);
  t.y0 = y0;
  t.y1 = 1.0 - y0;
  return t;
}

// Loss of one member computed step by step, independent of the batched code.
double scalar_loss(const nn::MlpD& net, const std::vector<PreferenceTriple>& batch,
                   double lambda) {
  auto r = [&](const Segment& s, int t) {
    VectorX x(kObs + 3);
    x << s.obs.col(t), s.actions.col(t), s.prior[t];
    return net.forward_one(x)[0];
  };
  double ce = 0.0, sq = 0.0;
  int steps = 0;
  for (const auto& tr : batch) {
    double s0 = 0.0, s1 = 0.0;
    for (int t = 0; t < tr.first.length(); ++t) {
      const double a = r(tr.first, t), b = r(tr.second, t);
      s0 += tr.first.prior[t] + a;
      s1 += tr.second.prior[t] + b;
      sq += a * a + b * b;
      steps += 2;
    }
    const double p0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
    ce -= tr.y0 * std::log(p0) + tr.y1 * std::log(1.0 - p0);
  }
  return ce / static_cast<double>(batch.size()) + lambda * sq / steps;
}

// Ensemble whose residual ignores the prior input, so prior shifts are pure
// reward shifts.
RewardEnsemble prior_blind(int members) {
  RewardEnsemble ens = small_ensemble(members, 0.0, 9);
  for (auto& m : ens.members()) m.weight(0).col(kObs + 2).setZero();
  return ens;
}

}  // namespace

TEST_SUITE("rewardnet") {
  TEST_CASE("loss gradient matches central differences") {
    Rng rng(31);
    std::vector<PreferenceTriple> batch;
    for (double y0 : {1.0, 0.0, 0.5, 1.0}) batch.push_back(random_triple(rng, 3, y0));
    for (double lambda : {0.0, 0.7}) {
      CAPTURE(lambda);
      RewardEnsemble ens = small_ensemble(2, lambda);
      REQUIRE(ens.members()[0].num_params() <= 64);
      const LossResult lr = reward_loss(ens, batch);
      for (int k = 0; k < ens.size(); ++k) {
        const auto& net = ens.members()[static_cast<std::size_t>(k)];
        CHECK(lr.member_loss[static_cast<std::size_t>(k)] ==
              doctest::Approx(scalar_loss(net, batch, lambda)).epsilon(1e-12));
        const VectorX numeric = testing::numeric_gradient(
            [&](const VectorX& p) {
              nn::MlpD probe = net;
              probe.params() = p;
              return scalar_loss(probe, batch, lambda);
            },
            net.params());
        CHECK(testing::max_relative_error(lr.gradients[static_cast<std::size_t>(k)], numeric) <
              1e-4);
      }
      CHECK(lr.loss == doctest::Approx((lr.member_loss[0] + lr.member_loss[1]) / 2));
    }
  }

  TEST_CASE("zero residual gives ln 2 on equal priors") {
    RewardEnsemble ens = small_ensemble(3, 0.0);
    for (auto& m : ens.members()) m.params().setZero();
    Rng rng(2);
    PreferenceTriple t = random_triple(rng, 5, 1.0);
    t.second.prior = t.first.prior;
    const LossResult lr = reward_loss(ens, std::vector<PreferenceTriple>{t});
    CHECK(lr.loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    for (const auto& g : lr.gradients) CHECK(g.size() == ens.members()[0].num_params());
  }

  TEST_CASE("zero residual reproduces the prior") {
    const env::EnvSpec env = env::EnvSpec::make(env::EnvId::kPush);
    priors::PriorSpec prior;
    prior.id = priors::PriorId::kComplete;
    RewardEnsemble ens(env::observation_dim(env), 2, prior, EnsembleConfig{3, {8}, 0.01, 0.0, 4});
    for (auto& m : ens.members()) m.params().setZero();
    Rng rng(8);
    for (int i = 0; i < 500; ++i) {
      env::EnvState s = env::env_reset(env, rng.next_u64());
      s.ee = Vec2(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4));
      const Vec2 a(rng.uniform(-1, 1), rng.uniform(-1, 1));
      REQUIRE(combined_reward(ens, env, s, a) == priors::prior_eval(prior, env, s, a));
    }
  }

  TEST_CASE("preference probability symmetries") {
    Rng rng(12);
    const RewardEnsemble ens = prior_blind(3);
    for (int i = 0; i < 50; ++i) {
      const Segment a = testing::random_segment(kObs, 6, rng);
      Segment b = testing::random_segment(kObs, 6, rng);
      CHECK(preference_probability(ens, a, a) == 0.5);
      CHECK(std::abs(preference_probability(ens, a, b) + preference_probability(ens, b, a) - 1.0) <
            1e-12);
      const double c = rng.uniform(-3.0, 3.0);
      Segment as = a, bs = b;
      as.prior.array() += c;
      bs.prior.array() += c;
      CHECK(std::abs(preference_probability(ens, as, bs) - preference_probability(ens, a, b)) <
            1e-12);
    }
    Segment shorter = testing::random_segment(kObs, 5, rng);
    CHECK_THROWS_AS(preference_probability(ens, shorter, testing::random_segment(kObs, 6, rng)),
                    Error);
  }

  TEST_CASE("loss validates its batch") {
    const RewardEnsemble ens = small_ensemble(1, 0.0);
    CHECK_THROWS_AS(reward_loss(ens, std::vector<PreferenceTriple>{}), Error);
    Rng rng(1);
    PreferenceTriple t = random_triple(rng, 4, 1.0);
    t.second = testing::random_segment(kObs, 3, rng);
    CHECK_THROWS_AS(reward_loss(ens, std::vector<PreferenceTriple>{t}), Error);
  }

  TEST_CASE("match counts ties as one half") {
    RewardEnsemble ens = small_ensemble(1, 0.0);
    ens.members()[0].params().setZero();
    Rng rng(5);
    PreferenceTriple t = random_triple(rng, 4, 1.0);
    t.first.prior.setConstant(0.2);
    t.second.prior.setConstant(-0.2);
    std::vector<PreferenceTriple> batch{t};
    batch.push_back(t);
    batch.back().y0 = 0.0;
    batch.back().y1 = 1.0;
    batch.push_back(t);
    batch.back().y0 = batch.back().y1 = 0.5;
    CHECK(reward_loss(ens, batch).member_correct[0] == 1.5);
  }

  TEST_CASE("training recovers a hidden reward") {
    Rng rng(77);
    auto truth = [](const Segment& s) { return (s.obs.row(0).array() - s.obs.row(1).array()).sum(); };
    std::vector<PreferenceTriple> data;
    for (int i = 0; i < 300; ++i) {
      PreferenceTriple t = random_triple(rng, 5, 1.0);
      t.first.prior.setZero();
      t.second.prior.setZero();
      if (truth(t.first) < truth(t.second)) std::swap(t.first, t.second);
      data.push_back(std::move(t));
    }
    RewardEnsemble ens(kObs, 2, priors::PriorSpec{}, EnsembleConfig{3, {16, 16}, 0.003, 0.0, 2});
    const TrainStats stats = update_reward(ens, data, 100, 64, rng);
    CHECK(stats.train_accuracy > 0.95);

    std::vector<SegmentPair> held;
    for (int i = 0; i < 200; ++i) {
      Segment a = testing::random_segment(kObs, 5, rng);
      Segment b = testing::random_segment(kObs, 5, rng);
      a.prior.setZero();
      b.prior.setZero();
      a.true_reward = a.obs.row(0).transpose() - a.obs.row(1).transpose();
      b.true_reward = b.obs.row(0).transpose() - b.obs.row(1).transpose();
      held.emplace_back(std::move(a), std::move(b));
    }
    CHECK(reward_accuracy(ens, held) > 0.9);
  }

  TEST_CASE("early stop ends training after the first good epoch") {
    Rng rng(3);
    std::vector<PreferenceTriple> data;
    for (int i = 0; i < 20; ++i) data.push_back(random_triple(rng, 3, 1.0));
    RewardEnsemble ens = small_ensemble(2, 0.0);
    const TrainStats stats = update_reward(ens, data, 40, 8, rng, -1.0);
    CHECK(stats.epochs_run == 1);
    CHECK_THROWS_AS(update_reward(ens, {}, 1, 8, rng), Error);
    CHECK_THROWS_AS(update_reward(ens, data, 1, 0, rng), Error);
  }

  TEST_CASE("larger penalty shrinks the residual") {
    Rng data_rng(10);
    std::vector<PreferenceTriple> data;
    std::vector<SegmentPair> probe;
    for (int i = 0; i < 100; ++i) {
      PreferenceTriple t = random_triple(data_rng, 4, data_rng.bernoulli(0.5) ? 1.0 : 0.0);
      probe.emplace_back(t.first, t.second);
      data.push_back(std::move(t));
    }
    double previous = INFINITY;
    for (double lambda : {0.0, 1.0, 10.0}) {
      RewardEnsemble ens = small_ensemble(2, lambda, 5);
      Rng rng(4);
      update_reward(ens, data, 60, 32, rng);
      const double mag = residual_mean_abs(ens, probe);
      CHECK(mag < previous);
      previous = mag;
    }
  }

  TEST_CASE("reward accuracy on hand-built pairs") {
    RewardEnsemble ens = small_ensemble(1, 0.0);
    ens.members()[0].params().setZero();
    Rng rng(6);
    Segment hi = testing::random_segment(kObs, 2, rng), lo = hi;
    hi.prior.setConstant(1.0);
    lo.prior.setConstant(-1.0);
    hi.true_reward.setConstant(1.0);
    lo.true_reward.setConstant(0.0);
    Segment tie = lo;
    tie.true_reward = hi.true_reward;
    CHECK(reward_accuracy(ens, {{hi, lo}}) == 1.0);
    CHECK(reward_accuracy(ens, {{lo, hi}}) == 1.0);
    CHECK(reward_accuracy(ens, {{hi, tie}}) == 0.5);
    Segment wrong = hi;
    wrong.true_reward.setConstant(-5.0);
    CHECK(reward_accuracy(ens, {{wrong, lo}, {hi, lo}}) == 0.5);
    CHECK_THROWS_AS(reward_accuracy(ens, {}), Error);
  }

  TEST_CASE("preference buffer evicts oldest and validates labels") {
    PreferenceBuffer buf(3);
    Rng rng(1);
    for (int i = 0; i < 5; ++i) {
      PreferenceTriple t = random_triple(rng, 2, 1.0);
      t.first.episode = i;
      buf.push(t);
    }
    CHECK(buf.size() == 3);
    CHECK(buf.total_pushed() == 5);
    CHECK(buf.snapshot().front().first.episode == 2);
    PreferenceTriple bad = random_triple(rng, 2, 1.0);
    bad.y1 = 0.3;
    CHECK_THROWS_AS(buf.push(bad), Error);
    CHECK_THROWS_AS(PreferenceBuffer(0), Error);
  }

  TEST_CASE("preference buffer jsonl round trip") {
    const env::EnvSpec env = env::EnvSpec::make(env::EnvId::kPush);
    Rng rng(3);
    PreferenceBuffer buf;
    for (double y0 : {1.0, 0.5, 0.0}) {
      PreferenceTriple t = random_triple(rng, 3, y0);
      for (int i = 0; i < 3; ++i) {
        t.first.states.push_back(env::env_reset(env, rng.next_u64()));
        t.second.states.push_back(env::env_reset(env, rng.next_u64()));
      }
      buf.push(t);
    }
    testing::TempDir dir("prefs");
    buf.dump_jsonl(dir.str("p.jsonl"));
    PreferenceBuffer back;
    back.restore_jsonl(dir.str("p.jsonl"));
    const auto a = buf.snapshot(), b = back.snapshot();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].y0 == b[i].y0);
      CHECK(a[i].first.obs == b[i].first.obs);
      CHECK(a[i].second.actions == b[i].second.actions);
      CHECK(a[i].first.prior == b[i].first.prior);
      CHECK(a[i].second.true_reward == b[i].second.true_reward);
      CHECK(b[i].first.states[2].ee == a[i].first.states[2].ee);
      CHECK(*b[i].second.states[1].object == *a[i].second.states[1].object);
    }
    CHECK(b[1].is_equal());
    CHECK_THROWS_AS(back.restore_jsonl(dir.str("none.jsonl")), Error);
  }

  TEST_CASE("ensemble save and load round trip") {
    const RewardEnsemble ens = small_ensemble(3, 0.25, 42);
    testing::TempDir dir("ens");
    ens.save(dir.str("r.json"));
    const RewardEnsemble back = RewardEnsemble::load(dir.str("r.json"));
    CHECK(back.size() == 3);
    CHECK(back.lambda() == 0.25);
    for (int k = 0; k < 3; ++k) {
      CHECK(back.members()[static_cast<std::size_t>(k)].params() ==
            ens.members()[static_cast<std::size_t>(k)].params());
    }
    CHECK_THROWS_AS(RewardEnsemble::load(dir.str("none.json")), Error);
  }

  TEST_CASE("members start from different seeds") {
    const RewardEnsemble ens = small_ensemble(3, 0.0);
    CHECK(ens.members()[0].params() != ens.members()[1].params());
    CHECK_THROWS_AS(small_ensemble(0, 0.0), Error);
    CHECK_THROWS_AS(small_ensemble(1, -1.0), Error);
  }

  TEST_CASE("segment sampling needs completed data") {
    ReplayBuffer rb(1000, kObs, 2);
    Rng rng(0);
    CHECK_THROWS_AS(sample_segment_pair(rb, 5, rng), DeferQueries);
    for (int e = 0; e < 4; ++e) {
      for (int i = 0; i < 10; ++i) {
        Transition t;
        t.obs = t.next_obs = VectorX::Constant(kObs, e * 10 + i);
        t.episode = e;
        t.episode_end = i == 9;
        rb.add(t);
      }
    }
    const auto pairs = sample_segment_pairs(rb, 5, 7, SamplingStrategy::kUniform, nullptr, rng);
    CHECK(pairs.size() == 7);
    for (const auto& [a, b] : pairs) {
      CHECK(a.length() == 5);
      CHECK(b.length() == 5);
      // Windows never cross episodes.
      CHECK(a.obs(0, 4) - a.obs(0, 0) == 4.0);
    }
    CHECK(sample_segment_pairs(rb, 5, 0, SamplingStrategy::kUniform, nullptr, rng).empty());
  }

  TEST_CASE("disagreement sampling keeps the most contested pairs") {
    ReplayBuffer rb(1000, kObs, 2);
    Rng fill_rng(1);
    for (int e = 0; e < 6; ++e) {
      for (int i = 0; i < 10; ++i) {
        Transition t;
        t.obs = t.next_obs = VectorX::Constant(kObs, fill_rng.uniform(-2, 2));
        t.action = Vec2(fill_rng.uniform(-1, 1), fill_rng.uniform(-1, 1));
        t.episode = e;
        t.episode_end = i == 9;
        rb.add(t);
      }
    }
    const RewardEnsemble ens = small_ensemble(3, 0.0, 3);
    auto spread = [&](const SegmentPair& p) {
      const VectorX d = ens.member_outputs(p.first.network_inputs()).rowwise().sum() -
                        ens.member_outputs(p.second.network_inputs()).rowwise().sum();
      return std::sqrt((d.array() - d.mean()).square().mean());
    };
    Rng a(9), b(9);
    const auto chosen = sample_segment_pairs(rb, 4, 3, SamplingStrategy::kDisagreement, &ens, a);
    std::vector<double> all;
    for (int i = 0; i < 30; ++i) all.push_back(spread(sample_segment_pair(rb, 4, b)));
    std::sort(all.rbegin(), all.rend());
    REQUIRE(chosen.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(spread(chosen[static_cast<std::size_t>(i)]) == all[static_cast<std::size_t>(i)]);
  }

  TEST_CASE("sampling names round trip") {
    for (auto s : {SamplingStrategy::kUniform, SamplingStrategy::kDisagreement}) {
      CHECK(sampling_from_string(to_string(s)) == s);
    }
    CHECK_THROWS_AS(sampling_from_string("random"), Error);
  }

  TEST_CASE("residual forward checks dimensions") {
    const RewardEnsemble ens = small_ensemble(2, 0.0);
    CHECK_THROWS_AS(residual_forward(ens, VectorX::Zero(kObs + 1), Vec2::Zero(), 0.0), Error);
    const double r = residual_forward(ens, VectorX::Ones(kObs), Vec2(0.1, 0.2), 0.3);
    CHECK(std::abs(r) < 1.0);
    const VectorX x = network_input(VectorX::Ones(kObs), Vec2(0.1, 0.2), 0.3);
    CHECK(r == doctest::Approx(ens.member_outputs(x).mean()).epsilon(1e-15));
  }
}
