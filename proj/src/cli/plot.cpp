#include "m3/cli/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "m3/cli/config.hpp"

namespace m3::cli {

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <class T>
T number(const std::string& cell, const std::filesystem::path& path, int line) {
  T v{};
  const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || end != cell.data() + cell.size()) {
    throw ConfigError(path.string() + ":" + std::to_string(line) + ": bad number '" + cell + "'");
  }
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

// Roughly five round tick values covering [lo, hi].
std::vector<double> ticks(double lo, double hi) {
  const double span = hi - lo;
  const double raw = span / 5;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    step = m * mag;
    if (step >= raw) break;
  }
  std::vector<double> out;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) out.push_back(v);
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string group_of(const std::filesystem::path& csv) {
  const auto manifest = csv.parent_path() / "manifest.json";
  std::ifstream in(manifest);
  if (!in) return "run";
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("mode") || !j["mode"].is_string()) return "run";
  return j["mode"].get<std::string>();
}

}  // namespace

std::vector<trainer::MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + " is empty");
  if (line != trainer::kMetricsHeader) {
    throw ConfigError(path.string() + ": columns do not match the metrics schema (" +
                      std::string(trainer::kMetricsHeader) + ")");
  }
  std::vector<trainer::MetricsRow> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != 12) throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected 12 columns");
    trainer::MetricsRow r;
    r.t = number<std::int64_t>(cells[0], path, n);
    const auto id = circuits::parse_circuit(cells[1]);
    if (!id) throw ConfigError(path.string() + ":" + std::to_string(n) + ": unknown circuit '" + cells[1] + "'");
    r.eval.circuit = *id;
    r.eval.mean_ep_reward = number<double>(cells[2], path, n);
    r.eval.mean_ep_len = number<double>(cells[3], path, n);
    r.eval.success_rate = number<double>(cells[4], path, n);
    r.alpha = number<double>(cells[5], path, n);
    r.t_a = number<std::int64_t>(cells[6], path, n);
    r.r = number<std::int64_t>(cells[7], path, n);
    r.model_val_loss = number<double>(cells[8], path, n);
    r.actor_loss = number<double>(cells[9], path, n);
    r.critic_loss = number<double>(cells[10], path, n);
    r.temperature = number<double>(cells[11], path, n);
    rows.push_back(r);
  }
  if (rows.empty()) throw ConfigError(path.string() + " has no data rows");
  return rows;
}

Series aggregate(const std::vector<std::vector<trainer::MetricsRow>>& runs, circuits::CircuitId circuit,
                 Metric metric, std::string label) {
  Series s;
  s.label = std::move(label);
  s.runs = static_cast<int>(runs.size());
  std::vector<std::map<std::int64_t, double>> per_run;
  for (const auto& run : runs) {
    auto& m = per_run.emplace_back();
    for (const auto& r : run) {
      if (r.eval.circuit != circuit) continue;
      m[r.t] = metric == Metric::EpisodeReward ? r.eval.mean_ep_reward : r.eval.mean_ep_len;
    }
  }
  if (per_run.empty()) return s;
  for (const auto& [t, v0] : per_run.front()) {
    std::vector<double> vals{v0};
    for (std::size_t k = 1; k < per_run.size(); ++k) {
      const auto it = per_run[k].find(t);
      if (it == per_run[k].end()) break;
      vals.push_back(it->second);
    }
    if (vals.size() != per_run.size()) continue;
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    s.t.push_back(t);
    s.mean.push_back(mean);
    s.stddev.push_back(vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0);
  }
  return s;
}

std::string render_svg(const std::string& title, const std::string& y_label, const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x_lo = 0, x_hi = 1, y_lo = INFINITY, y_hi = -INFINITY;
  bool any = false;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.t.size(); ++i) {
      if (!std::isfinite(s.mean[i])) continue;
      x_hi = std::max(x_hi, static_cast<double>(s.t[i]));
      y_lo = std::min(y_lo, s.mean[i] - s.stddev[i]);
      y_hi = std::max(y_hi, s.mean[i] + s.stddev[i]);
      any = true;
    }
  }
  if (!any) y_lo = 0, y_hi = 1;
  if (y_hi - y_lo < 1e-9) y_lo -= 0.5, y_hi += 0.5;
  const double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;
  auto px = [&](double x) { return L + (x - x_lo) / (x_hi - x_lo) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y_lo) / (y_hi - y_lo) * (H - T - B); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(title) << "</text>\n";

  for (double v : ticks(x_lo, x_hi)) {
    svg << "<line x1=\"" << px(v) << "\" y1=\"" << T << "\" x2=\"" << px(v) << "\" y2=\"" << (H - B)
        << "\" stroke=\"#eee\"/>\n";
    svg << "<text x=\"" << px(v) << "\" y=\"" << (H - B + 16) << "\" text-anchor=\"middle\">" << fmt(v)
        << "</text>\n";
  }
  for (double v : ticks(y_lo, y_hi)) {
    svg << "<line x1=\"" << L << "\" y1=\"" << py(v) << "\" x2=\"" << (W - R) << "\" y2=\"" << py(v)
        << "\" stroke=\"#eee\"/>\n";
    svg << "<text x=\"" << (L - 6) << "\" y=\"" << (py(v) + 4) << "\" text-anchor=\"end\">" << fmt(v) << "</text>\n";
  }
  svg << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << (W - L - R) << "\" height=\"" << (H - T - B)
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  svg << "<text x=\"" << (L + (W - L - R) / 2) << "\" y=\"" << (H - 12) << "\" text-anchor=\"middle\">env step</text>\n";
  svg << "<text transform=\"translate(16," << (T + (H - T - B) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(y_label) << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    if (s.runs > 1 && !s.t.empty()) {
      svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
      for (std::size_t i = 0; i < s.t.size(); ++i) svg << px(s.t[i]) << ',' << py(s.mean[i] + s.stddev[i]) << ' ';
      for (std::size_t i = s.t.size(); i-- > 0;) svg << px(s.t[i]) << ',' << py(s.mean[i] - s.stddev[i]) << ' ';
      svg << "\"/>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.t.size(); ++i) svg << px(s.t[i]) << ',' << py(s.mean[i]) << ' ';
    svg << "\"/>\n";
    const double ly = T + 10 + 18 * static_cast<double>(k);
    svg << "<line x1=\"" << (W - R + 10) << "\" y1=\"" << ly << "\" x2=\"" << (W - R + 30) << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << (W - R + 36) << "\" y=\"" << (ly + 4) << "\">" << escape(s.label) << " (n=" << s.runs
        << ")</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<std::filesystem::path> write_plots(const std::vector<std::filesystem::path>& csvs,
                                               const std::filesystem::path& out_dir) {
  if (csvs.empty()) throw ConfigError("plot needs at least one metrics CSV");
  std::map<std::string, std::vector<std::vector<trainer::MetricsRow>>> groups;
  for (const auto& p : csvs) groups[group_of(p)].push_back(read_metrics_csv(p));

  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  const std::pair<Metric, std::string> metrics[] = {{Metric::EpisodeReward, "mean_ep_reward"},
                                                    {Metric::EpisodeLength, "mean_ep_len"}};
  for (auto id : circuits::kAllCircuits) {
    const std::string name(circuits::circuit_name(id));
    for (const auto& [metric, column] : metrics) {
      std::vector<Series> series;
      for (const auto& [label, runs] : groups) series.push_back(aggregate(runs, id, metric, label));
      const auto path = out_dir / (name + "_" + column + ".svg");
      std::ofstream out(path);
      out << render_svg(name + ": " + column, column, series);
      if (!out) throw std::runtime_error("cannot write " + path.string());
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace m3::cli
