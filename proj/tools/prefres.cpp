// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: train, serve, report, presets.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include "prefres/feedbackd.hpp"
#include "prefres/metrics.hpp"
#include "prefres/trainer.hpp"

namespace fs = std::filesystem;
using prefres::train::RunConfig;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted.store(true); }

struct ConfigFlags {
  std::string config_file;
  std::string preset;
  std::string env;
  std::string prior;
  std::string teacher;
  std::string seed;
  std::string steps;
  std::string out;
  std::vector<std::string> sets;
  bool verbose = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value configuration file");
    app->add_option("--preset", preset, "named configuration delta");
    app->add_option("--env", env, "reach, push, caravoid or buttontoy");
    app->add_option("--prior", prior, "prior reward name");
    app->add_option("--teacher", teacher, "oracle, stochastic, mistaken or human");
    app->add_option("--seed", seed, "root seed");
    app->add_option("--steps", steps, "environment steps");
    app->add_option("--out", out, "output directory");
    app->add_option("--set", sets, "extra key=value override (repeatable)");
    app->add_flag("-v,--verbose", verbose, "progress on stderr");
  }

  RunConfig build() const {
    RunConfig cfg;
    if (!config_file.empty()) cfg.apply_file(config_file);
    if (!preset.empty()) cfg.set("preset", preset);
    if (!env.empty()) cfg.set("env", env);
    if (!prior.empty()) cfg.set("prior", prior);
    if (!teacher.empty()) cfg.set("teacher", teacher);
    if (!seed.empty()) cfg.set("seed", seed);
    if (!steps.empty()) cfg.set("steps", steps);
    if (!out.empty()) cfg.set("out", out);
    for (const auto& kv : sets) cfg.apply_text(kv);
    if (verbose) cfg.quiet = false;
    cfg.validate();
    return cfg;
  }
};

void print_summary(const prefres::train::RunResult& r, const RunConfig& cfg) {
  std::cout << "run " << cfg.effective_run_id() << " hash " << r.config_hash << " sessions "
            << r.sessions << " feedback " << r.feedback_used << '\n';
  if (!r.metrics.empty()) {
    const auto& last = r.metrics.back();
    std::cout << "final step " << last.step << " success " << last.success_rate << " return "
              << last.true_return << " reward_accuracy " << last.reward_accuracy << '\n';
  }
}

int cmd_train(const ConfigFlags& flags) {
  const RunConfig cfg = flags.build();
  if (cfg.teacher.id == prefres::teach::TeacherId::kHuman) {
    std::cerr << "train: the human teacher needs the service; use `prefres serve`\n";
    return 2;
  }
  prefres::train::Trainer trainer(cfg);
  print_summary(trainer.run(), cfg);
  return 0;
}

int cmd_serve(const ConfigFlags& flags, const std::string& bind, double linger) {
  const RunConfig cfg = flags.build();
  prefres::train::Trainer trainer(cfg);
  prefres::feedbackd::Service service;
  service.add_run(trainer);
  service.start(prefres::feedbackd::parse_bind(bind));
  std::cout << "serving run " << cfg.effective_run_id() << " on port " << service.port()
            << std::endl;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!trainer.done()) {
      if (g_interrupted.load()) trainer.request_stop();
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  });
  int code = 0;
  try {
    print_summary(trainer.run(), cfg);
  } catch (const std::exception& e) {
    std::cerr << "serve: training failed: " << e.what() << '\n';
    code = 1;
  }
  watcher.join();
  const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(linger);
  while (!g_interrupted.load() && std::chrono::steady_clock::now() < until) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  service.stop();
  return code;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::map<std::string, prefres::metrics::SeriesBundle> groups;
  std::vector<std::string> order;
  for (const auto& dir : dirs) {
    std::ifstream in(fs::path(dir) / "config.json");
    if (!in) throw prefres::Error("report: " + dir + " has no config.json");
    nlohmann::json cfg;
    in >> cfg;
    std::string key;
    for (const auto& [k, v] : cfg.items()) {
      if (k == "seed" || k == "run_id" || k == "out" || k == "hash") continue;
      key += k + "=" + v.get<std::string>() + ";";
    }
    auto [it, fresh] = groups.try_emplace(key);
    auto& b = it->second;
    if (fresh) {
      order.push_back(key);
      b.env = cfg.at("env").get<std::string>();
      b.prior = cfg.at("prior").get<std::string>();
      b.teacher = cfg.at("teacher").get<std::string>();
      b.run_id = b.env + "-" + b.prior + "-" + b.teacher + "-" + std::to_string(order.size());
    }
    b.seeds.push_back(prefres::metrics::read_metrics_csv(
        (fs::path(dir) / "metrics.csv").string(), std::stoull(cfg.at("seed").get<std::string>())));
  }
  std::vector<prefres::metrics::SeriesBundle> bundles;
  for (const auto& k : order) bundles.push_back(groups.at(k));
  prefres::metrics::emit_report(bundles, out);
  std::cout << "wrote " << bundles.size() << " run group(s) to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prefres: preference-based reinforcement learning with residual rewards"};
  app.require_subcommand(1);

  ConfigFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "run one training job");
  train_flags.attach(train);

  ConfigFlags serve_flags;
  std::string bind = "127.0.0.1:8080";
  double linger = 0.0;
  CLI::App* serve = app.add_subcommand("serve", "train with the labeling service attached");
  serve_flags.attach(serve);
  serve->add_option("--bind", bind, "host:port to listen on");
  serve->add_option("--linger", linger, "seconds to keep serving after training ends");

  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  CLI::App* report = app.add_subcommand("report", "aggregate run directories");
  report->add_option("runs", run_dirs, "run output directories")->required();
  report->add_option("--out", report_out, "report directory");

  CLI::App* presets = app.add_subcommand("presets", "list named presets");
  CLI::App* keys = app.add_subcommand("keys", "list configuration keys");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(train_flags);
    if (*serve) return cmd_serve(serve_flags, bind, linger);
    if (*report) return cmd_report(run_dirs, report_out);
    if (*presets) {
      for (const auto& n : prefres::train::preset_names()) std::cout << n << '\n';
      return 0;
    }
    if (*keys) {
      const auto defaults = RunConfig().to_kv();
      for (const auto& k : prefres::train::config_keys()) {
        const auto it = defaults.find(k);
        std::cout << k << (it != defaults.end() ? " = " + it->second : "") << '\n';
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "prefres: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
