// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Robust aggregate statistics over seeds and report emission.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace prefres::metrics {

/// Linear interpolation between order statistics at rank p * (n - 1).
/// `sorted` must be ascending and nonempty.
double percentile(const std::vector<double>& sorted, double p);

/// Mean of the values inside the closed [25th, 75th] percentile band; plain
/// mean below four values.
double iqm(const std::vector<double>& values);

struct BoxStats {
  double mean = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  double whisker_lo = 0.0;
  double whisker_hi = 0.0;
};

/// Whiskers sit on the most extreme data within 1.5 IQR of the quartiles,
/// or on the quartile itself when that datum lies inside the box.
BoxStats box_stats(const std::vector<double>& values);

enum class Metric { kSuccess, kReturn };

std::string to_string(Metric m);

struct SeedSeries {
  std::uint64_t seed = 0;
  std::vector<std::int64_t> steps;
  std::vector<double> success;
  std::vector<double> true_return;

  const std::vector<double>& values(Metric m) const {
    return m == Metric::kSuccess ? success : true_return;
  }
};

struct SeriesBundle {
  std::string run_id;
  std::string env;
  std::string prior;
  std::string teacher;
  std::vector<SeedSeries> seeds;

  /// Throws unless there is at least one seed and all share one step grid.
  void validate() const;
  const std::vector<std::int64_t>& grid() const;
  /// Values of every seed at grid index `i`.
  std::vector<double> across_seeds(Metric m, std::size_t i) const;
};

/// Mean over evaluation steps of the across-seed IQM.
double averaged_iqm(const SeriesBundle& bundle, Metric m);
/// Across-seed IQM at the last evaluation step.
double final_iqm(const SeriesBundle& bundle, Metric m);
/// Across-seed median at every evaluation step.
std::vector<double> median_series(const SeriesBundle& bundle, Metric m);

/// First evaluation step at which the mean over seeds at or above the 25th
/// percentile reaches its maximum over the run.
std::int64_t first_max_step(const SeriesBundle& bundle, Metric m = Metric::kSuccess);

/// Reads a trainer metrics.csv.
SeedSeries read_metrics_csv(const std::string& path, std::uint64_t seed = 0);

/// Writes summary.csv, box.csv and one SVG chart per metric into `out_dir`.
void emit_report(const std::vector<SeriesBundle>& bundles, const std::string& out_dir);

/// Line chart of the across-seed IQM per bundle with the interquartile band
/// shaded.
std::string svg_chart(const std::vector<SeriesBundle>& bundles, Metric m);

}  // namespace prefres::metrics
