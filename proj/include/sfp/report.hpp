#pragma once

// CSV emission/parsing for run outputs and static SVG plots built from those
// CSVs only (reports never recompute metrics).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sfp/orchestrator.hpp"

namespace sfp::report {

// ---------------------------------------------------------------------------
// CSV

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("csv: missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Csv read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty csv");
  csv.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto r = split_line(line);
    if (r.size() != csv.header.size()) throw FormatError(path + ": ragged row");
    csv.rows.push_back(std::move(r));
  }
  return csv;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path, std::ios::trunc) {
    if (!out_) throw Error("cannot write '" + path + "'");
    out_ << std::setprecision(17);
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
  }
  template <class... Cells>
  void row(const Cells&... cells) {
    std::size_t i = 0;
    ((out_ << (i++ ? "," : "") << cells), ...);
    out_ << "\n";
  }

 private:
  std::ofstream out_;
};

inline void write_losses(const std::string& path, const std::vector<LossRow>& rows) {
  CsvWriter w(path, {"stage", "epoch", "term", "value"});
  for (const auto& r : rows) w.row(r.stage, r.epoch, r.term, r.value);
}

inline void write_metrics(const std::string& path, const std::vector<MetricRow>& rows) {
  CsvWriter w(path, {"run_id", "split", "metric", "value"});
  for (const auto& r : rows) w.row(r.run_id, r.split, r.metric, r.value);
}

inline void write_candidates(const std::string& path, const std::vector<CandidateRow>& rows) {
  CsvWriter w(path, {"sample_id", "candidate_rank", "log_prob", "reward_raw", "reward_normalized", "selected_flag"});
  for (const auto& r : rows) w.row(r.sample, r.rank, r.log_prob, r.reward_raw, r.reward_normalized, r.selected ? 1 : 0);
}

inline void write_usage(const std::string& path, const std::vector<WorldModelEpoch>& history) {
  CsvWriter w(path, {"epoch", "code_id", "count"});
  for (std::size_t e = 0; e < history.size(); ++e)
    for (std::size_t k = 0; k < history[e].usage.size(); ++k) w.row(e, k, history[e].usage[k]);
}

inline void write_sweep(const std::string& dir, const SweepResult& r) {
  {
    CsvWriter w(dir + "/sweep.csv", {"axis_value", "seed", "arm", "metric", "value"});
    for (const auto& row : r.rows) w.row(row.axis_value, row.seed, row.arm, row.metric, row.value);
  }
  {
    CsvWriter w(dir + "/sweep_summary.csv", {"axis", "axis_value", "arm", "metric", "mean", "std", "n"});
    for (const auto& s : summarize(r)) w.row(r.axis, s.axis_value, s.arm, s.metric, s.mean, s.std, s.n);
  }
  CsvWriter w(dir + "/sweep_failures.csv", {"axis_value", "seed", "message"});
  for (const auto& f : r.failures) {
    std::string msg = f.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    w.row(f.axis_value, f.seed, msg);
  }
}

// ---------------------------------------------------------------------------
// SVG

struct Series {
  std::string label;
  std::vector<double> x, y;
};

struct Plot {
  std::string title, x_label, y_label;
  std::vector<Series> series;
  bool bars = false;
  std::vector<std::string> categories;  // bar plots: one group per category, one bar per series
};

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
  return colors[i % 7];
}

/// One <polyline class="series"> (or <g class="series"> of rects for bars) per series,
/// one <circle>/<rect class="point"> per point.
inline std::string render(const Plot& p) {
  const double W = 640, H = 400, L = 70, R = 150, Top = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : p.series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (p.bars) {
    x0 = -0.5;
    x1 = static_cast<double>(p.categories.size()) - 0.5;
    y0 = std::min(0.0, y0);
  }
  if (!(x1 > x0)) x0 -= 1, x1 += 1;
  if (!(y1 > y0)) y0 -= 1, y1 += 1;
  auto sx = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto sy = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - Top - B); };
  std::ostringstream o;
  o << std::setprecision(6);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape(p.title) << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << Top << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << escape(p.x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << (Top + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 " << (Top + H - B) / 2
    << ")\" text-anchor=\"middle\">" << escape(p.y_label) << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = y0 + (y1 - y0) * t / 4.0;
    o << "<text x=\"" << L - 6 << "\" y=\"" << sy(v) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << v << "</text>\n";
  }
  if (p.bars) {
    for (std::size_t c = 0; c < p.categories.size(); ++c)
      o << "<text x=\"" << sx(static_cast<double>(c)) << "\" y=\"" << H - B + 14
        << "\" text-anchor=\"middle\" font-size=\"10\">" << escape(p.categories[c]) << "</text>\n";
  } else {
    for (int t = 0; t <= 4; ++t) {
      const double v = x0 + (x1 - x0) * t / 4.0;
      o << "<text x=\"" << sx(v) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\" font-size=\"10\">" << v << "</text>\n";
    }
  }
  const double slot = p.series.empty() ? 1 : 0.8 / static_cast<double>(p.series.size());
  for (std::size_t i = 0; i < p.series.size(); ++i) {
    const auto& s = p.series[i];
    if (p.bars) {
      o << "<g class=\"series\" data-label=\"" << escape(s.label) << "\" fill=\"" << palette(i) << "\">\n";
      for (std::size_t k = 0; k < s.x.size(); ++k) {
        const double left = sx(s.x[k] - 0.4 + slot * static_cast<double>(i));
        const double right = sx(s.x[k] - 0.4 + slot * static_cast<double>(i + 1));
        const double top = std::min(sy(s.y[k]), sy(0.0)), h = std::abs(sy(s.y[k]) - sy(0.0));
        o << "<rect class=\"point\" x=\"" << left << "\" y=\"" << top << "\" width=\"" << right - left << "\" height=\"" << h
          << "\"/>\n";
      }
      o << "</g>\n";
    } else {
      o << "<polyline class=\"series\" data-label=\"" << escape(s.label) << "\" fill=\"none\" stroke=\"" << palette(i)
        << "\" points=\"";
      for (std::size_t k = 0; k < s.x.size(); ++k) o << (k ? " " : "") << sx(s.x[k]) << "," << sy(s.y[k]);
      o << "\"/>\n";
      for (std::size_t k = 0; k < s.x.size(); ++k)
        o << "<circle class=\"point\" cx=\"" << sx(s.x[k]) << "\" cy=\"" << sy(s.y[k]) << "\" r=\"2.5\" fill=\"" << palette(i)
          << "\"/>\n";
    }
    o << "<text x=\"" << W - R + 10 << "\" y=\"" << Top + 16 * static_cast<double>(i) + 10 << "\" font-size=\"11\" fill=\""
      << palette(i) << "\">" << escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline void write_svg(const std::string& path, const Plot& p) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out << render(p);
}

/// Loss curves: one series per (stage, term) found in a losses.csv.
inline Plot loss_plot(const Csv& csv, const std::string& title) {
  const auto cs = csv.column("stage"), ce = csv.column("epoch"), ct = csv.column("term"), cv = csv.column("value");
  std::map<std::string, Series> by;
  for (const auto& r : csv.rows) {
    if (r[ct] == "selected_reward") continue;
    auto& s = by[r[cs] + "/" + r[ct]];
    s.label = r[cs] + "/" + r[ct];
    s.x.push_back(std::stod(r[ce]));
    s.y.push_back(std::stod(r[cv]));
  }
  Plot p{title, "epoch", "loss", {}, false, {}};
  for (auto& [_, s] : by) p.series.push_back(std::move(s));
  return p;
}

/// Mean of `metric` against the axis, one series per arm, from sweep_summary.csv.
inline Plot sweep_plot(const Csv& csv, const std::string& metric) {
  const auto ca = csv.column("axis"), cx = csv.column("axis_value"), carm = csv.column("arm"), cm = csv.column("metric"),
             cmean = csv.column("mean");
  std::map<std::string, Series> by;
  std::string axis;
  for (const auto& r : csv.rows) {
    if (r[cm] != metric) continue;
    axis = r[ca];
    auto& s = by[r[carm]];
    s.label = r[carm];
    s.x.push_back(std::stod(r[cx]));
    s.y.push_back(std::stod(r[cmean]));
  }
  Plot p{metric + " vs " + axis, axis, metric, {}, false, {}};
  for (auto& [_, s] : by) p.series.push_back(std::move(s));
  return p;
}

/// Bars of every metric in a metrics.csv, one series per run id.
inline Plot metrics_plot(const Csv& csv, const std::string& split, const std::string& prefix) {
  const auto cr = csv.column("run_id"), cs = csv.column("split"), cm = csv.column("metric"), cv = csv.column("value");
  std::vector<std::string> cats;
  std::map<std::string, std::map<std::string, double>> vals;
  for (const auto& r : csv.rows) {
    if (r[cs] != split || r[cm].rfind(prefix, 0) != 0) continue;
    const auto m = r[cm].substr(prefix.size());
    if (std::find(cats.begin(), cats.end(), m) == cats.end()) cats.push_back(m);
    vals[r[cr]][m] = std::stod(r[cv]);
  }
  Plot p{split + " " + prefix + " metrics", "metric", "value", {}, true, cats};
  for (const auto& [run, m] : vals) {
    Series s{run, {}, {}};
    for (std::size_t c = 0; c < cats.size(); ++c)
      if (m.count(cats[c])) {
        s.x.push_back(static_cast<double>(c));
        s.y.push_back(m.at(cats[c]));
      }
    p.series.push_back(std::move(s));
  }
  return p;
}

}  // namespace sfp::report
