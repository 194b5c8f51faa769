// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

#include "prefres/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "prefres/common.hpp"

namespace prefres::metrics {

namespace fs = std::filesystem;

namespace {

std::vector<double> sorted_copy(const std::vector<double>& v, const char* who) {
  if (v.empty()) {
    throw Error(std::string(who) + ": empty input");
  }
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  return s;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) {
    throw Error("report: cannot write " + p.string());
  }
  return out;
}

}  // namespace

double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) {
    throw Error("percentile: empty input");
  }
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double iqm(const std::vector<double>& values) {
  const std::vector<double> s = sorted_copy(values, "iqm");
  if (s.size() < 4) return mean_of(s);
  const double lo = percentile(s, 0.25);
  const double hi = percentile(s, 0.75);
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : s) {
    if (v >= lo && v <= hi) {
      sum += v;
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

BoxStats box_stats(const std::vector<double>& values) {
  const std::vector<double> s = sorted_copy(values, "box_stats");
  BoxStats b;
  b.mean = mean_of(s);
  b.q25 = percentile(s, 0.25);
  b.q75 = percentile(s, 0.75);
  const double reach = 1.5 * (b.q75 - b.q25);
  b.whisker_lo = b.q25;
  b.whisker_hi = b.q75;
  for (double v : s) {
    if (v >= b.q25 - reach) {
      b.whisker_lo = std::min(v, b.q25);
      break;
    }
  }
  for (auto it = s.rbegin(); it != s.rend(); ++it) {
    if (*it <= b.q75 + reach) {
      b.whisker_hi = std::max(*it, b.q75);
      break;
    }
  }
  return b;
}

std::string to_string(Metric m) { return m == Metric::kSuccess ? "success_rate" : "true_return"; }

void SeriesBundle::validate() const {
  if (seeds.empty()) {
    throw Error("bundle " + run_id + ": no seeds");
  }
  for (const auto& s : seeds) {
    if (s.steps != seeds.front().steps) {
      throw Error("bundle " + run_id + ": seeds disagree on the evaluation grid");
    }
    if (s.success.size() != s.steps.size() || s.true_return.size() != s.steps.size()) {
      throw Error("bundle " + run_id + ": series length differs from its step grid");
    }
  }
  if (seeds.front().steps.empty()) {
    throw Error("bundle " + run_id + ": empty evaluation grid");
  }
}

const std::vector<std::int64_t>& SeriesBundle::grid() const { return seeds.front().steps; }

std::vector<double> SeriesBundle::across_seeds(Metric m, std::size_t i) const {
  std::vector<double> v;
  v.reserve(seeds.size());
  for (const auto& s : seeds) v.push_back(s.values(m)[i]);
  return v;
}

double averaged_iqm(const SeriesBundle& bundle, Metric m) {
  bundle.validate();
  const std::size_t n = bundle.grid().size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += iqm(bundle.across_seeds(m, i));
  return total / static_cast<double>(n);
}

double final_iqm(const SeriesBundle& bundle, Metric m) {
  bundle.validate();
  return iqm(bundle.across_seeds(m, bundle.grid().size() - 1));
}

std::vector<double> median_series(const SeriesBundle& bundle, Metric m) {
  bundle.validate();
  std::vector<double> out;
  for (std::size_t i = 0; i < bundle.grid().size(); ++i) {
    std::vector<double> v = bundle.across_seeds(m, i);
    std::sort(v.begin(), v.end());
    out.push_back(percentile(v, 0.5));
  }
  return out;
}

std::int64_t first_max_step(const SeriesBundle& bundle, Metric m) {
  bundle.validate();
  const auto& grid = bundle.grid();
  std::vector<double> top(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<double> v = bundle.across_seeds(m, i);
    std::sort(v.begin(), v.end());
    const double cut = percentile(v, 0.25);
    double sum = 0.0;
    std::size_t n = 0;
    for (double x : v) {
      if (x >= cut) {
        sum += x;
        ++n;
      }
    }
    top[i] = sum / static_cast<double>(n);
  }
  const auto best = std::max_element(top.begin(), top.end());
  return grid[static_cast<std::size_t>(best - top.begin())];
}

SeedSeries read_metrics_csv(const std::string& path, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) {
    throw Error("metrics: cannot read " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw Error("metrics: " + path + " is empty");
  }
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  const auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error("metrics: " + path + " lacks column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_step = col("step");
  const std::size_t c_success = col("success_rate");
  const std::size_t c_return = col("true_return");
  SeedSeries s;
  s.seed = seed;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < header.size()) {
      throw Error("metrics: short row in " + path);
    }
    s.steps.push_back(std::stoll(cells[c_step]));
    s.success.push_back(std::stod(cells[c_success]));
    s.true_return.push_back(std::stod(cells[c_return]));
  }
  return s;
}

std::string svg_chart(const std::vector<SeriesBundle>& bundles, Metric m) {
  constexpr double kW = 640, kH = 400, kL = 60, kR = 20, kT = 30, kB = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  double x_max = 1.0;
  double y_min = std::numeric_limits<double>::infinity();
  double y_max = -std::numeric_limits<double>::infinity();
  for (const auto& b : bundles) {
    b.validate();
    x_max = std::max(x_max, static_cast<double>(b.grid().back()));
    for (const auto& s : b.seeds) {
      for (double v : s.values(m)) {
        y_min = std::min(y_min, v);
        y_max = std::max(y_max, v);
      }
    }
  }
  if (!std::isfinite(y_min)) {
    y_min = 0.0;
    y_max = 1.0;
  }
  if (m == Metric::kSuccess) {
    y_min = 0.0;
    y_max = 1.0;
  }
  if (y_max - y_min < 1e-12) {
    y_min -= 0.5;
    y_max += 0.5;
  }
  const auto px = [&](double x) { return kL + (kW - kL - kR) * x / x_max; };
  const auto py = [&](double y) { return kH - kB - (kH - kT - kB) * (y - y_min) / (y_max - y_min); };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
      << "\" viewBox=\"0 0 " << kW << ' ' << kH << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\""
      << kH - kB << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 10
      << "\" text-anchor=\"middle\" font-size=\"12\">environment steps</text>\n"
      << "<text x=\"15\" y=\"" << kH / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 "
      << kH / 2 << ")\" text-anchor=\"middle\">" << to_string(m) << " (IQM)</text>\n"
      << "<text x=\"" << kL - 5 << "\" y=\"" << py(y_min) << "\" text-anchor=\"end\" font-size=\"10\">"
      << short_num(y_min) << "</text>\n"
      << "<text x=\"" << kL - 5 << "\" y=\"" << py(y_max) << "\" text-anchor=\"end\" font-size=\"10\">"
      << short_num(y_max) << "</text>\n"
      << "<text x=\"" << px(x_max) << "\" y=\"" << kH - kB + 15
      << "\" text-anchor=\"end\" font-size=\"10\">" << short_num(x_max) << "</text>\n";

  for (std::size_t k = 0; k < bundles.size(); ++k) {
    const auto& b = bundles[k];
    const char* color = kColors[k % 8];
    const auto& grid = b.grid();
    std::vector<double> lo, hi, mid;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      std::vector<double> v = b.across_seeds(m, i);
      std::sort(v.begin(), v.end());
      lo.push_back(percentile(v, 0.25));
      hi.push_back(percentile(v, 0.75));
      mid.push_back(iqm(v));
    }
    svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < grid.size(); ++i) {
      svg << px(static_cast<double>(grid[i])) << ',' << py(hi[i]) << ' ';
    }
    for (std::size_t i = grid.size(); i-- > 0;) {
      svg << px(static_cast<double>(grid[i])) << ',' << py(lo[i]) << ' ';
    }
    svg << "\"/>\n<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < grid.size(); ++i) {
      svg << px(static_cast<double>(grid[i])) << ',' << py(mid[i]) << ' ';
    }
    svg << "\"/>\n<text x=\"" << kL + 10 << "\" y=\"" << kT + 14 * static_cast<double>(k)
        << "\" fill=\"" << color << "\" font-size=\"11\">" << xml_escape(b.run_id) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_report(const std::vector<SeriesBundle>& bundles, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw Error("report: cannot create " + out_dir);
  }
  for (const auto& b : bundles) b.validate();

  auto summary = open_out(fs::path(out_dir) / "summary.csv");
  summary << "run_id,env,prior,teacher,seed_count,avg_iqm_success,final_iqm_success,"
             "avg_iqm_return,first_max_step\n";
  auto box = open_out(fs::path(out_dir) / "box.csv");
  box << "run_id,metric,mean,q25,q75,whisker_lo,whisker_hi\n";
  for (const auto& b : bundles) {
    summary << csv_field(b.run_id) << ',' << csv_field(b.env) << ',' << csv_field(b.prior) << ','
            << csv_field(b.teacher) << ',' << b.seeds.size() << ','
            << num(averaged_iqm(b, Metric::kSuccess)) << ','
            << num(final_iqm(b, Metric::kSuccess)) << ',' << num(averaged_iqm(b, Metric::kReturn))
            << ',' << first_max_step(b, Metric::kSuccess) << '\n';
    for (Metric m : {Metric::kSuccess, Metric::kReturn}) {
      const BoxStats s = box_stats(b.across_seeds(m, b.grid().size() - 1));
      box << csv_field(b.run_id) << ',' << to_string(m) << ',' << num(s.mean) << ','
          << num(s.q25) << ',' << num(s.q75) << ',' << num(s.whisker_lo) << ','
          << num(s.whisker_hi) << '\n';
    }
  }
  if (!bundles.empty()) {
    for (Metric m : {Metric::kSuccess, Metric::kReturn}) {
      open_out(fs::path(out_dir) / (to_string(m) + ".svg")) << svg_chart(bundles, m);
    }
  }
}

}  // namespace prefres::metrics
