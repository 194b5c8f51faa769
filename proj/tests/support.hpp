// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the unit tests.

#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "prefres/common.hpp"
#include "prefres/replay.hpp"

namespace prefres::testing {

/// Central difference of a scalar function of a parameter vector.
inline VectorX numeric_gradient(const std::function<double(const VectorX&)>& f, VectorX x,
                                double h = 1e-5) {
  VectorX g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Largest |a - b| / max(|a|, |b|, floor) over entries.
inline double max_relative_error(const VectorX& a, const VectorX& b, double floor = 1e-7) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

/// Segment with random features and given per-step prior and true rewards.
inline Segment random_segment(int obs_dim, int h, Rng& rng, double prior_scale = 1.0) {
  Segment s;
  s.obs = MatrixX(obs_dim, h);
  s.actions = MatrixX(2, h);
  s.prior = VectorX(h);
  s.true_reward = VectorX(h);
  for (int t = 0; t < h; ++t) {
    for (int i = 0; i < obs_dim; ++i) s.obs(i, t) = rng.uniform(-1.0, 1.0);
    s.actions(0, t) = rng.uniform(-1.0, 1.0);
    s.actions(1, t) = rng.uniform(-1.0, 1.0);
    s.prior[t] = prior_scale * rng.uniform(-1.0, 1.0);
    s.true_reward[t] = rng.uniform(-1.0, 1.0);
  }
  return s;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("prefres-" + tag + "-" + std::to_string(Rng::mix(reinterpret_cast<std::uintptr_t>(this))));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& leaf = "") const { return (path_ / leaf).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace prefres::testing
