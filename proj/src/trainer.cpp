// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <type_traits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace prefres::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error("config: " + key + " expects a number, got '" + v + "'");
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error("config: " + key + " expects an integer, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error("config: " + key + " expects true or false, got '" + v + "'");
}

std::vector<int> parse_widths(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const std::int64_t w = parse_int(key, trim(part));
    if (w < 1) throw Error("config: " + key + " widths must be positive");
    out.push_back(static_cast<int>(w));
  }
  if (out.empty()) throw Error("config: " + key + " needs at least one width");
  return out;
}

std::string fmt_widths(const std::vector<int>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(w[i]);
  }
  return s;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field int_field(std::string key, T RunConfig::*member) {
  return {[member](const RunConfig& c) { return std::to_string(c.*member); },
          [key, member](RunConfig& c, const std::string& v) {
            const std::int64_t n = parse_int(key, v);
            if (std::is_unsigned_v<T> && n < 0) {
              throw Error("config: " + key + " must be non-negative");
            }
            c.*member = static_cast<T>(n);
          }};
}

Field double_field(std::string key, double RunConfig::*member) {
  return {[member](const RunConfig& c) { return fmt_double(c.*member); },
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_double(key, v); }};
}

Field bool_field(std::string key, bool RunConfig::*member) {
  return {[member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [key, member](RunConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

#define PREFRES_NESTED(name, expr, parse, show)                                       \
  Field {                                                                             \
    [](const RunConfig& c) { return show(c.expr); },                                  \
        [](RunConfig& c, const std::string& v) { c.expr = parse(name, v); }           \
  }

std::string show_int(std::int64_t v) { return std::to_string(v); }
std::string show_bool(bool v) { return v ? "true" : "false"; }
int parse_int32(const std::string& key, const std::string& v) {
  return static_cast<int>(parse_int(key, v));
}
std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long d = std::stoull(v, &pos);
    if (pos == v.size() && v.front() != '-') return d;
  } catch (const std::exception&) {
  }
  throw Error("config: " + key + " expects a non-negative integer, got '" + v + "'");
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["run_id"] = {[](const RunConfig& c) { return c.run_id; },
                   [](RunConfig& c, const std::string& v) { c.run_id = v; }};
    t["env"] = {[](const RunConfig& c) { return env::to_string(c.env); },
                [](RunConfig& c, const std::string& v) { c.env = env::env_id_from_string(v); }};
    t["prior"] = {[](const RunConfig& c) { return priors::to_string(c.prior.id); },
                  [](RunConfig& c, const std::string& v) {
                    c.prior.id = priors::prior_id_from_string(v);
                  }};
    t["k1"] = PREFRES_NESTED("k1", prior.k1, parse_double, fmt_double);
    t["k2"] = PREFRES_NESTED("k2", prior.k2, parse_double, fmt_double);
    t["k3"] = PREFRES_NESTED("k3", prior.k3, parse_double, fmt_double);
    t["k4"] = PREFRES_NESTED("k4", prior.k4, parse_double, fmt_double);
    t["region_inflate"] =
        PREFRES_NESTED("region_inflate", prior.region_inflate, parse_double, fmt_double);
    t["prior_checkpoint"] = {[](const RunConfig& c) { return c.prior.checkpoint_path; },
                             [](RunConfig& c, const std::string& v) {
                               c.prior.checkpoint_path = v;
                             }};
    t["teacher"] = {[](const RunConfig& c) { return teach::to_string(c.teacher.id); },
                    [](RunConfig& c, const std::string& v) {
                      c.teacher.id = teach::teacher_id_from_string(v);
                    }};
    t["epsilon"] = PREFRES_NESTED("epsilon", teacher.epsilon, parse_double, fmt_double);
    t["delta"] = PREFRES_NESTED("delta", teacher.delta, parse_double, fmt_double);
    t["skip_equal"] = PREFRES_NESTED("skip_equal", teacher.skip_equal, parse_bool, show_bool);
    t["query_timeout"] =
        PREFRES_NESTED("query_timeout", teacher.timeout_seconds, parse_double, fmt_double);
    t["reveal_rewards"] =
        PREFRES_NESTED("reveal_rewards", teacher.reveal_rewards, parse_bool, show_bool);
    t["segment_length"] = int_field("segment_length", &RunConfig::segment_length);
    t["feedback_every"] = int_field("feedback_every", &RunConfig::feedback_every);
    t["queries"] = int_field("queries", &RunConfig::queries_per_session);
    t["feedback_cap"] = int_field("feedback_cap", &RunConfig::feedback_cap);
    t["use_residual"] = bool_field("use_residual", &RunConfig::use_residual);
    t["oracle_reward"] = bool_field("oracle_reward", &RunConfig::oracle_reward);
    t["sampling"] = {[](const RunConfig& c) { return reward::to_string(c.sampling); },
                     [](RunConfig& c, const std::string& v) {
                       c.sampling = reward::sampling_from_string(v);
                     }};
    t["members"] = PREFRES_NESTED("members", ensemble.members, parse_int32, show_int);
    t["reward_hidden"] =
        PREFRES_NESTED("reward_hidden", ensemble.hidden, parse_widths, fmt_widths);
    t["reward_lr"] =
        PREFRES_NESTED("reward_lr", ensemble.learning_rate, parse_double, fmt_double);
    t["lambda"] = PREFRES_NESTED("lambda", ensemble.lambda, parse_double, fmt_double);
    t["reward_epochs"] = int_field("reward_epochs", &RunConfig::reward_epochs);
    t["reward_minibatch"] = int_field("reward_minibatch", &RunConfig::reward_minibatch);
    t["reward_early_stop"] = double_field("reward_early_stop", &RunConfig::reward_early_stop);
    t["preference_capacity"] = int_field("preference_capacity", &RunConfig::preference_capacity);
    t["steps"] = int_field("steps", &RunConfig::total_steps);
    t["seed_steps"] = int_field("seed_steps", &RunConfig::seed_steps);
    t["replay_capacity"] = int_field("replay_capacity", &RunConfig::replay_capacity);
    t["sac_hidden"] = PREFRES_NESTED("sac_hidden", agent.hidden, parse_widths, fmt_widths);
    t["batch_size"] = PREFRES_NESTED("batch_size", agent.batch_size, parse_int32, show_int);
    t["actor_lr"] = PREFRES_NESTED("actor_lr", agent.actor_lr, parse_double, fmt_double);
    t["critic_lr"] = PREFRES_NESTED("critic_lr", agent.critic_lr, parse_double, fmt_double);
    t["alpha_lr"] = PREFRES_NESTED("alpha_lr", agent.alpha_lr, parse_double, fmt_double);
    t["gamma"] = PREFRES_NESTED("gamma", agent.gamma, parse_double, fmt_double);
    t["tau"] = PREFRES_NESTED("tau", agent.tau, parse_double, fmt_double);
    t["target_update_every"] = PREFRES_NESTED("target_update_every", agent.target_update_every,
                                              parse_int32, show_int);
    t["actor_update_every"] = PREFRES_NESTED("actor_update_every", agent.actor_update_every,
                                             parse_int32, show_int);
    t["init_temperature"] =
        PREFRES_NESTED("init_temperature", agent.init_temperature, parse_double, fmt_double);
    t["target_entropy"] =
        PREFRES_NESTED("target_entropy", agent.target_entropy, parse_double, fmt_double);
    t["pretrain_steps"] = int_field("pretrain_steps", &RunConfig::pretrain_steps);
    t["eval_every"] = int_field("eval_every", &RunConfig::eval_every);
    t["eval_episodes"] = int_field("eval_episodes", &RunConfig::eval_episodes);
    t["accuracy_pairs"] = int_field("accuracy_pairs", &RunConfig::accuracy_pairs);
    t["human_wait_seconds"] = double_field("human_wait_seconds", &RunConfig::human_wait_seconds);
    t["human_max_pending"] = int_field("human_max_pending", &RunConfig::human_max_pending);
    t["seed"] = {[](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }};
    t["out"] = {[](const RunConfig& c) { return c.out; },
                [](RunConfig& c, const std::string& v) { c.out = v; }};
    t["save_checkpoints"] = bool_field("save_checkpoints", &RunConfig::save_checkpoints);
    t["quiet"] = bool_field("quiet", &RunConfig::quiet);
    return t;
  }();
  return table;
}

#undef PREFRES_NESTED

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  keys.push_back("preset");
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "preset") {
    apply_preset(*this, value);
    return;
  }
  const auto it = fields().find(key);
  if (it == fields().end()) {
    throw Error("config: unknown key '" + key + "'");
  }
  it->second.set(*this, value);
}

void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error("config line " + std::to_string(lineno) + ": expected key=value");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::apply_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("config: cannot read " + path);
  }
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str());
}

int RunConfig::effective_feedback_cap() const {
  if (feedback_cap > 0) return feedback_cap;
  if (feedback_every <= 0) return 0;
  const std::int64_t sessions = total_steps / feedback_every;
  return static_cast<int>(std::min<std::int64_t>(10000, sessions * queries_per_session));
}

std::string RunConfig::effective_run_id() const {
  if (!run_id.empty()) return run_id;
  return env::to_string(env) + "-" + priors::to_string(prior.id) + "-" +
         teach::to_string(teacher.id) + "-s" + std::to_string(seed);
}

void RunConfig::validate() const {
  const env::EnvSpec spec = env::EnvSpec::make(env);
  if (segment_length < 1) throw Error("config: segment_length must be positive");
  spec.validate(segment_length);
  prior.validate();
  teacher.validate();
  if (feedback_every < 1) throw Error("config: feedback_every must be positive");
  if (queries_per_session < 0) throw Error("config: queries must be non-negative");
  if (feedback_cap < 0) throw Error("config: feedback_cap must be non-negative");
  if (feedback_cap > 0 && queries_per_session > 0 &&
      static_cast<std::int64_t>(feedback_cap) * feedback_every >
          total_steps * queries_per_session) {
    throw Error("config: feedback_cap / queries * feedback_every exceeds the step budget");
  }
  if (total_steps < 0) throw Error("config: steps must be non-negative");
  if (seed_steps < 0) throw Error("config: seed_steps must be non-negative");
  if (replay_capacity < 1) throw Error("config: replay_capacity must be positive");
  if (eval_every < 1 || eval_episodes < 1) {
    throw Error("config: eval_every and eval_episodes must be positive");
  }
  if (accuracy_pairs < 0) throw Error("config: accuracy_pairs must be non-negative");
  if (reward_epochs < 0 || reward_minibatch < 1) {
    throw Error("config: reward_epochs must be non-negative and reward_minibatch positive");
  }
  if (ensemble.members < 1) throw Error("config: members must be positive");
  if (!(ensemble.lambda >= 0.0)) throw Error("config: lambda must be non-negative");
  if (!(ensemble.learning_rate > 0.0)) throw Error("config: reward_lr must be positive");
  if (preference_capacity < 1) throw Error("config: preference_capacity must be positive");
  if (pretrain_steps < 0) throw Error("config: pretrain_steps must be non-negative");
  if (!(human_wait_seconds >= 0.0)) throw Error("config: human_wait_seconds must be >= 0");
  if (agent.batch_size < 1) throw Error("config: batch_size must be positive");
  if (!(agent.gamma >= 0.0 && agent.gamma <= 1.0)) throw Error("config: gamma must lie in [0,1]");
  if (!(agent.tau > 0.0 && agent.tau <= 1.0)) throw Error("config: tau must lie in (0,1]");
  if (!(agent.init_temperature > 0.0)) throw Error("config: init_temperature must be positive");
  if (!(agent.actor_lr > 0.0 && agent.critic_lr > 0.0 && agent.alpha_lr > 0.0)) {
    throw Error("config: learning rates must be positive");
  }
  if (agent.target_update_every < 1 || agent.actor_update_every < 1) {
    throw Error("config: update periods must be positive");
  }
  if (!use_residual && queries_per_session > 0) {
    throw Error("config: use_residual=false requires queries=0");
  }
  if (oracle_reward && queries_per_session > 0) {
    throw Error("config: oracle_reward=true requires queries=0");
  }
  if (prior.id == priors::PriorId::kFileBacked && prior.checkpoint_path.empty()) {
    throw Error("config: file_backed prior needs prior_checkpoint");
  }
}

std::map<std::string, std::string> RunConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  for (const auto& [k, f] : fields()) {
    if (k == "out" || k == "quiet") continue;
    kv[k] = f.get(*this);
  }
  return kv;
}

std::string RunConfig::hash() const {
  std::string canon;
  for (const auto& [k, v] : to_kv()) canon += k + "=" + v + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a(canon));
  return buf;
}

json RunConfig::to_json() const {
  json doc;
  for (const auto& [k, v] : to_kv()) doc[k] = v;
  doc["out"] = out;
  doc["hash"] = hash();
  return doc;
}

// ---------------------------------------------------------------------------
// Presets

std::vector<std::string> preset_names() {
  return {"main",          "less-M25",       "less-M10",       "less-M5",
          "sparse-K10000", "sparse-K20000",  "opposite-prior", "zero-prior",
          "prior-only",    "stochastic-teacher", "mistaken-teacher"};
}

void apply_preset(RunConfig& cfg, const std::string& name) {
  if (name == "main") return;
  if (name == "less-M25" || name == "less-M10" || name == "less-M5") {
    cfg.queries_per_session = std::stoi(name.substr(6));
    cfg.feedback_every = 5000;
    return;
  }
  if (name == "sparse-K10000" || name == "sparse-K20000") {
    cfg.feedback_every = std::stoi(name.substr(8));
    return;
  }
  if (name == "opposite-prior") {
    cfg.prior.id = priors::PriorId::kOpposite;
    return;
  }
  if (name == "zero-prior") {
    cfg.prior.id = priors::PriorId::kZero;
    return;
  }
  if (name == "prior-only") {
    cfg.queries_per_session = 0;
    cfg.use_residual = false;
    return;
  }
  if (name == "stochastic-teacher") {
    cfg.teacher.id = teach::TeacherId::kStochastic;
    return;
  }
  if (name == "mistaken-teacher") {
    cfg.teacher.id = teach::TeacherId::kMistaken;
    cfg.teacher.epsilon = 0.1;
    return;
  }
  std::string list;
  for (const auto& n : preset_names()) list += (list.empty() ? "" : ", ") + n;
  throw Error("unknown preset '" + name + "' (available: " + list + ")");
}

RunConfig preset(const std::string& name) {
  RunConfig cfg;
  apply_preset(cfg, name);
  return cfg;
}

json RunStatus::to_json() const {
  return json{{"run_id", run_id},
              {"step", step},
              {"total_steps", total_steps},
              {"success_rate", success_rate},
              {"reward_accuracy", reward_accuracy},
              {"feedback_used", feedback_used},
              {"feedback_cap", feedback_cap},
              {"sessions", sessions},
              {"finished", finished},
              {"error", error}};
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

priors::PriorSpec loaded_prior(priors::PriorSpec p) {
  if (p.id == priors::PriorId::kFileBacked && !p.network) p.load();
  return p;
}

sac::SacConfig agent_config(const RunConfig& cfg, const Rng& root) {
  sac::SacConfig c = cfg.agent;
  c.seed = root.split("agent").seed();
  return c;
}

reward::EnsembleConfig ensemble_config(const RunConfig& cfg, const Rng& root) {
  reward::EnsembleConfig c = cfg.ensemble;
  c.seed = root.split("reward").seed();
  return c;
}

teach::TeacherSpec teacher_spec(const RunConfig& cfg, const Rng& root) {
  teach::TeacherSpec t = cfg.teacher;
  t.seed = root.split("teacher").seed();
  return t;
}

const RunConfig& checked(const RunConfig& cfg) {
  cfg.validate();
  return cfg;
}

// Keeps minibatch temporaries on the heap instead of fresh mmap pages.
void keep_heap_resident() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)once;
#endif
}

Vec2 random_action(Rng& rng) { return Vec2(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)); }

}  // namespace

Trainer::Trainer(RunConfig cfg)
    : cfg_((checked(cfg), std::move(cfg))),
      env_(env::EnvSpec::make(cfg_.env)),
      rng_(cfg_.seed),
      act_rng_(rng_.split("act")),
      sample_rng_(rng_.split("sample")),
      eval_rng_(rng_.split("eval")),
      replay_(cfg_.replay_capacity, env::observation_dim(env_), env::kActionDim),
      agent_(env::observation_dim(env_), env::kActionDim, agent_config(cfg_, rng_)),
      ensemble_(env::observation_dim(env_), env::kActionDim, loaded_prior(cfg_.prior),
                ensemble_config(cfg_, rng_)),
      prefs_(static_cast<std::size_t>(cfg_.preference_capacity)) {
  keep_heap_resident();
  const teach::TeacherSpec tspec = teacher_spec(cfg_, rng_);
  if (tspec.id == teach::TeacherId::kHuman) {
    human_ = std::make_unique<teach::HumanBridge>(cfg_.effective_run_id(), prefs_, tspec,
                                                  cfg_.human_max_pending);
  } else {
    synthetic_.emplace(tspec);
  }
  rng_ = rng_.split("env");
  status_.run_id = cfg_.effective_run_id();
  status_.total_steps = cfg_.total_steps;
  status_.feedback_cap = static_cast<std::size_t>(cfg_.effective_feedback_cap());
  reset_episode();
}

void Trainer::reset_episode() {
  state_ = env::env_reset(env_, rng_.next_u64());
  obs_ = env::observe(env_, state_);
}

double Trainer::estimated_reward(const VectorX& obs, const Vec2& action, double prior) const {
  if (!cfg_.use_residual) return prior;
  return prior + reward::residual_forward(ensemble_, obs, action, prior);
}

VectorX knn_entropy_reward(const MatrixX& points, const MatrixX& reference, int k) {
  if (k < 1) throw Error("knn_entropy_reward: k must be positive");
  if (points.rows() != reference.rows()) {
    throw Error("knn_entropy_reward: point and reference dimensions differ");
  }
  VectorX out = VectorX::Zero(points.cols());
  if (reference.cols() == 0) return out;
  const auto kk = std::min<Eigen::Index>(k, reference.cols());
  std::vector<double> d(static_cast<std::size_t>(reference.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    for (Eigen::Index j = 0; j < reference.cols(); ++j) {
      d[static_cast<std::size_t>(j)] = (reference.col(j) - points.col(i)).norm();
    }
    std::nth_element(d.begin(), d.begin() + (kk - 1), d.end());
    out[i] = std::log1p(d[static_cast<std::size_t>(kk - 1)]);
  }
  return out;
}

void Trainer::pretrain() {
  constexpr Eigen::Index kReference = 1024;
  for (int i = 0; i < cfg_.pretrain_steps; ++i) {
    const Vec2 a = i < cfg_.seed_steps ? random_action(act_rng_)
                                       : Vec2(sac::act(agent_, obs_, sac::ActMode::kStochastic,
                                                       act_rng_));
    const env::StepResult res = env::env_step(env_, state_, a);
    const VectorX next_obs = env::observe(env_, res.state);
    const auto n = static_cast<Eigen::Index>(replay_.size());
    const Eigen::Index m = std::min(n, kReference);
    MatrixX reference(replay_.obs_dim(), m);
    for (Eigen::Index j = 0; j < m; ++j) {
      reference.col(j) =
          replay_.next_obs().col(static_cast<Eigen::Index>(replay_.slot(
              static_cast<std::size_t>(n - m + j))));
    }
    Transition tr;
    tr.state = res.state;
    tr.action = a;
    tr.obs = obs_;
    tr.next_obs = next_obs;
    tr.true_reward = res.reward;
    tr.prior_reward = priors::prior_eval(ensemble_.prior(), env_, res.state, a);
    tr.estimated_reward = knn_entropy_reward(next_obs, reference, 5)[0];
    tr.episode_end = res.done;
    tr.success = res.success;
    tr.episode = episode_;
    replay_.add(tr);
    if (i >= cfg_.seed_steps && replay_.size() >= static_cast<std::size_t>(cfg_.agent.batch_size)) {
      sac::sac_update(agent_, replay_, cfg_.agent.batch_size, sample_rng_);
    }
    state_ = res.state;
    obs_ = next_obs;
    if (res.done) {
      ++episode_;
      reset_episode();
    }
  }
  if (cfg_.pretrain_steps > 0) {
    if (cfg_.oracle_reward) {
      replay_.estimated_rewards().head(static_cast<Eigen::Index>(replay_.size())) =
          replay_.true_rewards().head(static_cast<Eigen::Index>(replay_.size()));
    } else if (cfg_.use_residual) {
      sac::relabel_replay(replay_, ensemble_);
    } else {
      replay_.estimated_rewards().head(static_cast<Eigen::Index>(replay_.size())) =
          replay_.prior_rewards().head(static_cast<Eigen::Index>(replay_.size()));
    }
  }
}

std::size_t Trainer::collect_labels(std::vector<reward::SegmentPair>& pairs, std::size_t budget) {
  const std::uint64_t before = prefs_.total_pushed();
  if (synthetic_) {
    for (std::size_t i = 0; i < pairs.size() && i < budget; ++i) {
      const auto& [a, b] = pairs[i];
      const teach::Label y = synthetic_->label(a, b);
      if (y == teach::kEqual && cfg_.teacher.skip_equal) continue;
      prefs_.push(reward::PreferenceTriple{a, b, y.y0, y.y1});
    }
    return static_cast<std::size_t>(prefs_.total_pushed() - before);
  }
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < pairs.size() && i < budget; ++i) {
    const std::string id = status_.run_id + "-q" + std::to_string(query_counter_);
    try {
      human_->request(pairs[i].first, pairs[i].second, id, env_);
    } catch (const teach::Backpressure& e) {
      if (!cfg_.quiet) std::clog << "[trainer] " << e.what() << '\n';
      break;
    }
    ++query_counter_;
    ids.push_back(id);
  }
  if (cfg_.human_wait_seconds > 0.0 && !ids.empty()) {
    human_->wait_resolved(ids, cfg_.human_wait_seconds);
  }
  // Answers may arrive between sessions; everything new since the last
  // session is consumed now.
  return static_cast<std::size_t>(prefs_.total_pushed() - feedback_used_);
}

std::size_t Trainer::feedback_session() {
  if (!cfg_.use_residual || cfg_.oracle_reward || cfg_.queries_per_session == 0) return 0;
  const auto cap = static_cast<std::size_t>(cfg_.effective_feedback_cap());
  std::size_t outstanding = human_ ? human_->pending_count() : 0;
  const std::size_t room = cap > feedback_used_ + outstanding ? cap - feedback_used_ - outstanding : 0;
  const std::size_t budget = std::min(static_cast<std::size_t>(cfg_.queries_per_session), room);

  std::vector<reward::SegmentPair> pairs;
  if (budget > 0) {
    try {
      pairs = reward::sample_segment_pairs(replay_, cfg_.segment_length, static_cast<int>(budget),
                                           cfg_.sampling, &ensemble_, sample_rng_);
    } catch (const reward::DeferQueries& e) {
      if (!cfg_.quiet) std::clog << "[trainer] step " << t_ << ": " << e.what() << '\n';
      if (!human_) return 0;
    }
  }
  if (!synthetic_ && !human_) return 0;
  std::size_t stored = collect_labels(pairs, budget);
  if (stored == 0) return 0;

  feedback_used_ += stored;
  ++sessions_;
  const reward::TrainStats stats =
      reward::update_reward(ensemble_, prefs_.snapshot(), cfg_.reward_epochs,
                            cfg_.reward_minibatch, sample_rng_, cfg_.reward_early_stop);
  if (!std::isfinite(stats.final_loss)) {
    throw Error("reward update produced a non-finite loss at step " + std::to_string(t_));
  }
  last_loss_ = stats.final_loss;
  sac::relabel_replay(replay_, ensemble_);
  if (!cfg_.quiet) {
    std::clog << "[trainer] step " << t_ << ": session " << sessions_ << " stored " << stored
              << " (total " << feedback_used_ << "), reward loss " << stats.final_loss
              << ", train accuracy " << stats.train_accuracy << ", epochs " << stats.epochs_run
              << '\n';
  }
  {
    std::lock_guard lock(status_mutex_);
    status_.feedback_used = feedback_used_;
    status_.sessions = sessions_;
  }
  return stored;
}

MetricRow Trainer::evaluate() {
  MetricRow row;
  row.step = t_;
  double successes = 0.0;
  double returns = 0.0;
  for (int e = 0; e < cfg_.eval_episodes; ++e) {
    env::EnvState s = env::env_reset(env_, eval_rng_.split(static_cast<std::uint64_t>(e)).seed());
    double ret = 0.0;
    bool done = false;
    while (!done) {
      const Vec2 a(sac::act(agent_, env::observe(env_, s), sac::ActMode::kDeterministic, eval_rng_));
      const env::StepResult r = env::env_step(env_, s, a);
      ret += r.reward;
      s = r.state;
      done = r.done;
    }
    successes += s.success ? 1.0 : 0.0;
    returns += ret;
  }
  row.success_rate = successes / cfg_.eval_episodes;
  row.true_return = returns / cfg_.eval_episodes;

  row.reward_accuracy = std::numeric_limits<double>::quiet_NaN();
  row.residual_mean_abs = 0.0;
  if (cfg_.oracle_reward) {
    row.reward_accuracy = 1.0;
  } else if (cfg_.accuracy_pairs > 0) {
    Rng pair_rng = rng_.split("accuracy").split(static_cast<std::uint64_t>(t_));
    try {
      const auto pairs = reward::sample_segment_pairs(replay_, cfg_.segment_length,
                                                      cfg_.accuracy_pairs,
                                                      reward::SamplingStrategy::kUniform,
                                                      nullptr, pair_rng);
      if (cfg_.use_residual) {
        row.reward_accuracy = reward::reward_accuracy(ensemble_, pairs);
        row.residual_mean_abs = reward::residual_mean_abs(ensemble_, pairs);
      } else {
        double score = 0.0;
        for (const auto& [a, b] : pairs) {
          const double model = a.prior.sum() - b.prior.sum();
          const double truth = a.true_return() - b.true_return();
          if (model == 0.0 || truth == 0.0) {
            score += 0.5;
          } else if ((model > 0.0) == (truth > 0.0)) {
            score += 1.0;
          }
        }
        row.reward_accuracy = score / static_cast<double>(pairs.size());
      }
    } catch (const reward::DeferQueries&) {
    }
  }
  row.loss = last_loss_;
  return row;
}

void Trainer::write_metrics_header() const {
  if (cfg_.out.empty()) return;
  std::ofstream out(fs::path(cfg_.out) / "metrics.csv", std::ios::trunc);
  if (!out) throw Error("trainer: cannot write metrics.csv in " + cfg_.out);
  out << "step,success_rate,true_return,reward_accuracy,residual_mean_abs,loss\n";
}

void Trainer::append_metrics(const MetricRow& row) const {
  if (cfg_.out.empty()) return;
  std::ofstream out(fs::path(cfg_.out) / "metrics.csv", std::ios::app);
  out << row.step << ',' << fmt_double(row.success_rate) << ',' << fmt_double(row.true_return)
      << ',' << fmt_double(row.reward_accuracy) << ',' << fmt_double(row.residual_mean_abs) << ','
      << fmt_double(row.loss) << '\n';
}

void Trainer::step() {
  if (t_ > 0 && t_ % cfg_.feedback_every == 0) {
    feedback_session();
  }
  const Vec2 a = t_ < cfg_.seed_steps
                     ? random_action(act_rng_)
                     : Vec2(sac::act(agent_, obs_, sac::ActMode::kStochastic, act_rng_));
  const env::StepResult res = env::env_step(env_, state_, a);
  const VectorX next_obs = env::observe(env_, res.state);
  Transition tr;
  tr.state = res.state;
  tr.action = a;
  tr.obs = obs_;
  tr.next_obs = next_obs;
  tr.true_reward = res.reward;
  tr.prior_reward = priors::prior_eval(ensemble_.prior(), env_, res.state, a);
  tr.estimated_reward =
      cfg_.oracle_reward ? res.reward : estimated_reward(next_obs, a, tr.prior_reward);
  tr.terminal = false;
  tr.episode_end = res.done;
  tr.success = res.success;
  tr.episode = episode_;
  replay_.add(tr);

  if (t_ >= cfg_.seed_steps &&
      replay_.size() >= static_cast<std::size_t>(cfg_.agent.batch_size)) {
    const sac::Losses l = sac::sac_update(agent_, replay_, cfg_.agent.batch_size, sample_rng_);
    if (!std::isfinite(l.critic) || !std::isfinite(l.actor) || !std::isfinite(l.alpha)) {
      throw Error("agent update produced a non-finite loss at step " + std::to_string(t_));
    }
  }
  state_ = res.state;
  obs_ = next_obs;
  if (res.done) {
    ++episode_;
    reset_episode();
  }
  ++t_;

  const bool eval_now = t_ % cfg_.eval_every == 0 || t_ == cfg_.total_steps;
  if (eval_now) {
    const MetricRow row = evaluate();
    metrics_.push_back(row);
    append_metrics(row);
    if (!cfg_.quiet) {
      std::clog << "[trainer] " << status_.run_id << " step " << row.step << " success "
                << row.success_rate << " return " << row.true_return << " accuracy "
                << row.reward_accuracy << '\n';
    }
  }
  std::lock_guard lock(status_mutex_);
  status_.step = t_;
  if (eval_now) {
    status_.success_rate = metrics_.back().success_rate;
    status_.reward_accuracy = metrics_.back().reward_accuracy;
  }
}

void Trainer::write_checkpoints() const {
  if (cfg_.out.empty() || !cfg_.save_checkpoints) return;
  const fs::path dir = fs::path(cfg_.out) / "checkpoints";
  fs::create_directories(dir);
  agent_.save((dir / "agent.json").string(), t_);
  ensemble_.save((dir / "reward.json").string());
  prefs_.dump_jsonl((dir / "preferences.jsonl").string());
}

RunStatus Trainer::status() const {
  std::lock_guard lock(status_mutex_);
  return status_;
}

RunResult Trainer::run() {
  if (!cfg_.out.empty()) {
    fs::create_directories(cfg_.out);
    std::ofstream(fs::path(cfg_.out) / "config.json") << cfg_.to_json().dump(2) << '\n';
    write_metrics_header();
  }
  try {
    if (t_ == 0) pretrain();
    while (!done()) step();
    write_checkpoints();
  } catch (const std::exception& e) {
    {
      std::lock_guard lock(status_mutex_);
      status_.error = e.what();
      status_.finished = true;
    }
    if (!cfg_.out.empty()) {
      json dump{{"error", e.what()},
                {"step", t_},
                {"alpha", agent_.alpha()},
                {"feedback_used", feedback_used_},
                {"config_hash", cfg_.hash()},
                {"actor_finite", agent_.actor.all_finite()},
                {"critic1_finite", agent_.critic1.all_finite()},
                {"critic2_finite", agent_.critic2.all_finite()}};
      std::ofstream(fs::path(cfg_.out) / "diagnostic.json") << dump.dump(2) << '\n';
    }
    throw;
  }
  if (human_) human_->expire_all();
  {
    std::lock_guard lock(status_mutex_);
    status_.finished = true;
  }
  RunResult result;
  result.metrics = metrics_;
  result.config_hash = cfg_.hash();
  result.feedback_used = feedback_used_;
  result.sessions = sessions_;
  return result;
}

RunResult run_training(const RunConfig& cfg) {
  Trainer trainer(cfg);
  return trainer.run();
}

}  // namespace prefres::train
