#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "m3/trainer/trainer.hpp"

namespace m3::cli {

// Parses a metrics CSV written by the trainer. Throws ConfigError when the
// header differs from the trainer's or there are no data rows.
std::vector<trainer::MetricsRow> read_metrics_csv(const std::filesystem::path& path);

// Mean and sample standard deviation of one metric across runs, at the
// steps every run evaluated.
struct Series {
  std::string label;
  std::vector<std::int64_t> t;
  std::vector<double> mean;
  std::vector<double> stddev;  // all zero for a single run
  int runs = 0;
};

enum class Metric { EpisodeReward, EpisodeLength };

Series aggregate(const std::vector<std::vector<trainer::MetricsRow>>& runs, circuits::CircuitId circuit,
                 Metric metric, std::string label);

// Static SVG line chart; a shaded band of +-1 std is drawn for series over
// more than one run.
std::string render_svg(const std::string& title, const std::string& y_label, const std::vector<Series>& series);

// One figure per metric per circuit. Runs are grouped by the mode recorded
// in a manifest.json next to each CSV ("run" when absent). Returns the
// files written.
std::vector<std::filesystem::path> write_plots(const std::vector<std::filesystem::path>& csvs,
                                               const std::filesystem::path& out_dir);

}  // namespace m3::cli
