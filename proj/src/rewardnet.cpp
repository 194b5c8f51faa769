// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/rewardnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace prefres::reward {

using nlohmann::json;

// ---------------------------------------------------------------------------
// PreferenceBuffer

PreferenceBuffer::PreferenceBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) {
    throw Error("preference buffer: capacity must be positive");
  }
}

void PreferenceBuffer::push(PreferenceTriple triple) {
  if (triple.y0 < 0.0 || triple.y1 < 0.0 || std::abs(triple.y0 + triple.y1 - 1.0) > 1e-12) {
    throw Error("preference buffer: label must be non-negative and sum to one");
  }
  std::lock_guard lock(mutex_);
  if (items_.size() == capacity_) {
    items_.pop_front();
  }
  items_.push_back(std::move(triple));
  ++total_pushed_;
}

std::vector<PreferenceTriple> PreferenceBuffer::snapshot() const {
  std::lock_guard lock(mutex_);
  return {items_.begin(), items_.end()};
}

std::size_t PreferenceBuffer::size() const {
  std::lock_guard lock(mutex_);
  return items_.size();
}

std::uint64_t PreferenceBuffer::total_pushed() const {
  std::lock_guard lock(mutex_);
  return total_pushed_;
}

void PreferenceBuffer::dump_jsonl(const std::string& path) const {
  const auto items = snapshot();
  std::ofstream out(path);
  if (!out) {
    throw Error("preference buffer: cannot write " + path);
  }
  for (const auto& t : items) {
    json line;
    line["y"] = {t.y0, t.y1};
    line["segments"] = {segment_to_json(t.first), segment_to_json(t.second)};
    out << line.dump() << '\n';
  }
}

void PreferenceBuffer::restore_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("preference buffer: cannot read " + path);
  }
  std::string text;
  while (std::getline(in, text)) {
    if (text.empty()) continue;
    try {
      const json line = json::parse(text);
      PreferenceTriple t;
      t.first = segment_from_json(line.at("segments").at(0));
      t.second = segment_from_json(line.at("segments").at(1));
      t.y0 = line.at("y").at(0).get<double>();
      t.y1 = line.at("y").at(1).get<double>();
      push(std::move(t));
    } catch (const json::exception& e) {
      throw Error("preference buffer: bad line in " + path + ": " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------
// RewardEnsemble

RewardEnsemble::RewardEnsemble(int obs_dim, int action_dim, priors::PriorSpec prior,
                               EnsembleConfig config)
    : obs_dim_(obs_dim), action_dim_(action_dim), prior_(std::move(prior)),
      config_(std::move(config)) {
  if (config_.members < 1) {
    throw Error("reward ensemble: need at least one member");
  }
  if (config_.lambda < 0.0) {
    throw Error("reward ensemble: lambda must be non-negative");
  }
  std::vector<int> widths{input_dim()};
  widths.insert(widths.end(), config_.hidden.begin(), config_.hidden.end());
  widths.push_back(1);
  const Rng seeds(config_.seed);
  for (int k = 0; k < config_.members; ++k) {
    members_.push_back(
        nn::MlpD::init(widths, nn::Head::kTanh, seeds.split(static_cast<std::uint64_t>(k)).seed()));
    adam_.emplace_back(members_.back().num_params(), config_.learning_rate);
  }
}

MatrixX RewardEnsemble::member_outputs(const MatrixX& inputs) const {
  MatrixX out(size(), inputs.cols());
  for (int k = 0; k < size(); ++k) {
    out.row(k) = members_[static_cast<std::size_t>(k)].forward(inputs);
  }
  return out;
}

VectorX RewardEnsemble::residual(const MatrixX& inputs) const {
  return member_outputs(inputs).colwise().mean().transpose();
}

void RewardEnsemble::save(const std::string& path) const {
  json doc;
  doc["version"] = 1;
  doc["K"] = size();
  doc["lambda"] = config_.lambda;
  doc["prior"] = priors::to_string(prior_.id);
  doc["obs_dim"] = obs_dim_;
  doc["action_dim"] = action_dim_;
  doc["learning_rate"] = config_.learning_rate;
  doc["hidden"] = config_.hidden;
  doc["seed"] = config_.seed;
  doc["members"] = json::array();
  for (const auto& m : members_) doc["members"].push_back(nn::to_json(m));
  std::ofstream out(path);
  if (!out) {
    throw Error("reward ensemble: cannot write " + path);
  }
  out << doc.dump() << '\n';
}

RewardEnsemble RewardEnsemble::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("reward ensemble: cannot read " + path);
  }
  try {
    json doc;
    in >> doc;
    priors::PriorSpec prior;
    prior.id = priors::prior_id_from_string(doc.at("prior").get<std::string>());
    EnsembleConfig cfg;
    cfg.members = doc.at("K").get<int>();
    cfg.lambda = doc.at("lambda").get<double>();
    cfg.learning_rate = doc.at("learning_rate").get<double>();
    cfg.hidden = doc.at("hidden").get<std::vector<int>>();
    cfg.seed = doc.at("seed").get<std::uint64_t>();
    RewardEnsemble ens(doc.at("obs_dim").get<int>(), doc.at("action_dim").get<int>(), prior, cfg);
    for (int k = 0; k < cfg.members; ++k) {
      nn::MlpD m = nn::mlp_from_json(doc.at("members").at(static_cast<std::size_t>(k)));
      if (m.num_params() != ens.members_[static_cast<std::size_t>(k)].num_params()) {
        throw Error("reward ensemble: member shape mismatch in " + path);
      }
      ens.members_[static_cast<std::size_t>(k)] = std::move(m);
    }
    return ens;
  } catch (const json::exception& e) {
    throw Error("reward ensemble: malformed " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Rewards and preferences

VectorX network_input(const VectorX& obs, const Vec2& action, double r0) {
  VectorX x(obs.size() + action.size() + 1);
  x << obs, action, r0;
  return x;
}

double residual_forward(const RewardEnsemble& ens, const VectorX& obs, const Vec2& action,
                        double r0) {
  if (obs.size() != ens.obs_dim()) {
    throw Error("residual_forward: observation has " + std::to_string(obs.size()) +
                " entries, ensemble expects " + std::to_string(ens.obs_dim()));
  }
  return ens.residual(network_input(obs, action, r0))(0);
}

double combined_reward(const RewardEnsemble& ens, const env::EnvSpec& env,
                       const env::EnvState& state, const Vec2& action) {
  const double r0 = priors::prior_eval(ens.prior(), env, state, action);
  return r0 + residual_forward(ens, env::observe(env, state), action, r0);
}

VectorX segment_rewards(const RewardEnsemble& ens, const Segment& seg) {
  return seg.prior + ens.residual(seg.network_inputs());
}

double preference_probability(const RewardEnsemble& ens, const Segment& first,
                              const Segment& second) {
  if (first.length() != second.length()) {
    throw Error("preference_probability: segments differ in length");
  }
  const double diff = segment_rewards(ens, first).sum() - segment_rewards(ens, second).sum();
  return logistic(diff);
}

namespace {

double match_score(double predicted_diff, double y0, double y1) {
  if (predicted_diff == 0.0 || y0 == y1) {
    return 0.5;
  }
  return (predicted_diff > 0.0) == (y0 > y1) ? 1.0 : 0.0;
}

}  // namespace

LossResult reward_loss(const RewardEnsemble& ens,
                       const std::vector<const PreferenceTriple*>& batch) {
  if (batch.empty()) {
    throw Error("reward_loss: empty batch");
  }
  const auto n = static_cast<Eigen::Index>(batch.size());
  // Column layout: for each triple, its first segment then its second.
  std::vector<Eigen::Index> offset(batch.size() + 1, 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->first.length() != batch[i]->second.length()) {
      throw Error("reward_loss: segments of a triple differ in length");
    }
    offset[i + 1] = offset[i] + 2 * batch[i]->first.length();
  }
  const Eigen::Index steps = offset.back();
  MatrixX inputs(ens.input_dim(), steps);
  VectorX prior_diff(n);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = *batch[i];
    const Eigen::Index h = t.first.length();
    inputs.middleCols(offset[i], h) = t.first.network_inputs();
    inputs.middleCols(offset[i] + h, h) = t.second.network_inputs();
    prior_diff[static_cast<Eigen::Index>(i)] = t.first.prior.sum() - t.second.prior.sum();
  }

  LossResult result;
  const double lambda = ens.lambda();
  for (const auto& member : ens.members()) {
    nn::Tape<double> tape;
    const MatrixX out = member.forward(inputs, tape);
    MatrixX adjoint = MatrixX::Zero(1, steps);
    double loss = 0.0;
    double correct = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& t = *batch[i];
      const Eigen::Index h = t.first.length();
      const double d = prior_diff[static_cast<Eigen::Index>(i)] +
                       out.middleCols(offset[i], h).sum() -
                       out.middleCols(offset[i] + h, h).sum();
      // -[y0 log p + y1 log(1 - p)] with p = logistic(d).
      loss += t.y0 * softplus(-d) + t.y1 * softplus(d);
      const double g = (logistic(d) - t.y0) / static_cast<double>(n);
      adjoint.middleCols(offset[i], h).setConstant(g);
      adjoint.middleCols(offset[i] + h, h).setConstant(-g);
      correct += match_score(d, t.y0, t.y1);
    }
    loss /= static_cast<double>(n);
    if (lambda > 0.0) {
      loss += lambda * out.squaredNorm() / static_cast<double>(steps);
      adjoint += (2.0 * lambda / static_cast<double>(steps)) * out;
    }
    result.member_loss.push_back(loss);
    result.member_correct.push_back(correct);
    result.gradients.push_back(member.backward(tape, adjoint).params);
  }
  result.loss = std::accumulate(result.member_loss.begin(), result.member_loss.end(), 0.0) /
                static_cast<double>(result.member_loss.size());
  return result;
}

LossResult reward_loss(const RewardEnsemble& ens, const std::vector<PreferenceTriple>& batch) {
  std::vector<const PreferenceTriple*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& t : batch) ptrs.push_back(&t);
  return reward_loss(ens, ptrs);
}

TrainStats update_reward(RewardEnsemble& ens, const std::vector<PreferenceTriple>& data,
                         int epochs, int minibatch, Rng& rng, double early_stop_accuracy) {
  if (data.empty()) {
    throw Error("update_reward: preference buffer is empty");
  }
  if (minibatch < 1) {
    throw Error("update_reward: minibatch must be positive");
  }
  TrainStats stats;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const double members = static_cast<double>(ens.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double loss_sum = 0.0;
    double correct = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(minibatch)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(minibatch));
      std::vector<const PreferenceTriple*> batch;
      batch.reserve(end - begin);
      for (std::size_t j = begin; j < end; ++j) batch.push_back(&data[order[j]]);
      const LossResult lr = reward_loss(ens, batch);
      for (int k = 0; k < ens.size(); ++k) {
        const auto ku = static_cast<std::size_t>(k);
        nn::adam_step(ens.members()[ku], lr.gradients[ku], ens.optimizers()[ku]);
        correct += lr.member_correct[ku];
      }
      loss_sum += lr.loss * static_cast<double>(batch.size());
    }
    stats.final_loss = loss_sum / static_cast<double>(data.size());
    stats.train_accuracy = correct / (members * static_cast<double>(data.size()));
    stats.epochs_run = epoch + 1;
    if (stats.train_accuracy > early_stop_accuracy) {
      break;
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Query sampling and diagnostics

std::string to_string(SamplingStrategy s) {
  return s == SamplingStrategy::kUniform ? "uniform" : "disagreement";
}

SamplingStrategy sampling_from_string(const std::string& name) {
  if (name == "uniform") return SamplingStrategy::kUniform;
  if (name == "disagreement") return SamplingStrategy::kDisagreement;
  throw Error("unknown sampling strategy '" + name + "'");
}

SegmentPair sample_segment_pair(const ReplayBuffer& replay, int h, Rng& rng) {
  const std::uint64_t windows = replay.window_count(h);
  if (replay.completed_steps() < static_cast<std::size_t>(2 * h) || windows == 0) {
    throw DeferQueries("defer queries: replay holds " + std::to_string(replay.completed_steps()) +
                       " completed steps, need " + std::to_string(2 * h));
  }
  const std::uint64_t a = rng.below(windows);
  const std::uint64_t b = rng.below(windows);
  return {replay.window(h, a), replay.window(h, b)};
}

std::vector<SegmentPair> sample_segment_pairs(const ReplayBuffer& replay, int h, int count,
                                              SamplingStrategy strategy,
                                              const RewardEnsemble* ens, Rng& rng) {
  std::vector<SegmentPair> pairs;
  if (count <= 0) {
    return pairs;
  }
  if (strategy == SamplingStrategy::kUniform || ens == nullptr) {
    for (int i = 0; i < count; ++i) pairs.push_back(sample_segment_pair(replay, h, rng));
    return pairs;
  }
  std::vector<SegmentPair> candidates;
  for (int i = 0; i < 10 * count; ++i) candidates.push_back(sample_segment_pair(replay, h, rng));
  std::vector<double> spread(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& [a, b] = candidates[i];
    const VectorX diff = ens->member_outputs(a.network_inputs()).rowwise().sum() -
                         ens->member_outputs(b.network_inputs()).rowwise().sum();
    const double mean = diff.mean();
    spread[i] = std::sqrt((diff.array() - mean).square().mean());
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return spread[x] > spread[y]; });
  for (int i = 0; i < count; ++i) {
    pairs.push_back(std::move(candidates[order[static_cast<std::size_t>(i)]]));
  }
  return pairs;
}

double reward_accuracy(const RewardEnsemble& ens, const std::vector<SegmentPair>& pairs) {
  if (pairs.empty()) {
    throw Error("reward_accuracy: empty evaluation set");
  }
  double score = 0.0;
  for (const auto& [a, b] : pairs) {
    const double model = segment_rewards(ens, a).sum() - segment_rewards(ens, b).sum();
    const double truth = a.true_return() - b.true_return();
    if (model == 0.0 || truth == 0.0) {
      score += 0.5;
    } else if ((model > 0.0) == (truth > 0.0)) {
      score += 1.0;
    }
  }
  return score / static_cast<double>(pairs.size());
}

double residual_mean_abs(const RewardEnsemble& ens, const std::vector<SegmentPair>& pairs) {
  double total = 0.0;
  Eigen::Index count = 0;
  for (const auto& [a, b] : pairs) {
    total += ens.residual(a.network_inputs()).cwiseAbs().sum();
    total += ens.residual(b.network_inputs()).cwiseAbs().sum();
    count += a.length() + b.length();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json matrix_columns(const MatrixX& m) {
  json cols = json::array();
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    cols.push_back(std::vector<double>(m.col(j).data(), m.col(j).data() + m.rows()));
  }
  return cols;
}

MatrixX matrix_from_columns(const json& cols) {
  if (cols.empty()) return {};
  const auto rows = static_cast<Eigen::Index>(cols.at(0).size());
  MatrixX m(rows, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    const auto v = cols[j].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(v.size()) != rows) {
      throw Error("segment: ragged matrix");
    }
    m.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const VectorX>(v.data(), rows);
  }
  return m;
}

json vec(const VectorX& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

json segment_to_json(const Segment& seg) {
  json doc;
  doc["episode"] = seg.episode;
  doc["start"] = seg.start;
  doc["obs"] = matrix_columns(seg.obs);
  doc["actions"] = matrix_columns(seg.actions);
  doc["prior"] = vec(seg.prior);
  doc["true_reward"] = vec(seg.true_reward);
  json ee = json::array();
  json obj = json::array();
  bool has_object = !seg.states.empty();
  for (const auto& s : seg.states) {
    ee.push_back({s.ee.x(), s.ee.y()});
    if (s.object) {
      obj.push_back({s.object->x(), s.object->y()});
    } else {
      has_object = false;
    }
  }
  doc["positions"] = ee;
  doc["object_positions"] = has_object ? obj : json(nullptr);
  if (!seg.states.empty()) {
    doc["goal"] = {seg.states.front().goal.x(), seg.states.front().goal.y()};
  }
  return doc;
}

Segment segment_from_json(const json& doc) {
  Segment seg;
  seg.episode = doc.at("episode").get<std::int64_t>();
  seg.start = doc.at("start").get<int>();
  seg.obs = matrix_from_columns(doc.at("obs"));
  seg.actions = matrix_from_columns(doc.at("actions"));
  const auto prior = doc.at("prior").get<std::vector<double>>();
  const auto truth = doc.at("true_reward").get<std::vector<double>>();
  seg.prior = Eigen::Map<const VectorX>(prior.data(), static_cast<Eigen::Index>(prior.size()));
  seg.true_reward =
      Eigen::Map<const VectorX>(truth.data(), static_cast<Eigen::Index>(truth.size()));
  const auto& positions = doc.at("positions");
  const json& objects = doc.contains("object_positions") ? doc["object_positions"] : json(nullptr);
  Vec2 goal = Vec2::Zero();
  if (doc.contains("goal")) {
    goal = Vec2(doc["goal"].at(0).get<double>(), doc["goal"].at(1).get<double>());
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    env::EnvState s;
    s.ee = Vec2(positions[i].at(0).get<double>(), positions[i].at(1).get<double>());
    if (!objects.is_null()) {
      s.object = Vec2(objects.at(i).at(0).get<double>(), objects.at(i).at(1).get<double>());
    }
    s.goal = goal;
    seg.states.push_back(s);
  }
  return seg;
}

}  // namespace prefres::reward
