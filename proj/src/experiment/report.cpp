// SPDX-License-Identifier: Apache-2.0
#include "moemarket/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "moemarket/errors.hpp"

namespace moemarket {

ReportFormat parse_report_format(const std::string& s) {
  if (s == "text") return ReportFormat::Text;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "svg") return ReportFormat::Svg;
  throw ConfigError("unknown format '" + s + "' (expected text, csv or svg)");
}

namespace {

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

template <class T>
std::string opt(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>) {
    return fmt(*v);
  } else {
    return std::to_string(*v);
  }
}

template <class T>
std::string opt_text(const std::optional<T>& v) {
  const std::string s = opt(v);
  return s.empty() ? "n/a" : s;
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

std::string report_text(const RunArtifacts& run) {
  const RunSummary s = summarize(run);
  std::ostringstream o;
  o << "run " << s.name << "  mode " << s.mode << "  grace " << s.grace_steps << "  steps " << run.config.total_steps
    << (run.valid ? "" : "  INVALID: " + run.failure) << "\n\n";
  o << pad("phase", 7) << pad("domain", 16) << pad("steps", 14) << pad("replacements", 14) << "spawns\n";
  for (std::size_t i = 0; i < s.phases.size(); ++i) {
    const PhaseCounts& p = s.phases[i];
    o << pad(std::to_string(i + 1), 7) << pad(p.domain, 16)
      << pad(std::to_string(p.start) + "-" + std::to_string(p.end), 14) << pad(std::to_string(p.replacements), 14)
      << p.spawns << "\n";
  }
  o << "\ntotal replacements " << s.total_replacements << "\n";
  const RecoveryMetrics& r = s.recovery;
  o << "steady state " << opt_text(r.steady_state) << "  threshold " << opt_text(r.threshold) << "\n";
  o << "t_initial " << opt_text(r.t_initial) << "  t_return " << opt_text(r.t_return);
  if (r.return_shift_step) o << " (from step " << *r.return_shift_step << ")";
  o << "  speedup " << opt_text(r.speedup) << "\n";
  const auto shifts = shift_responses(run);
  if (!shifts.empty()) {
    o << "\n" << pad("shift", 8) << pad("to", 16) << pad("pre", 10) << pad("peak", 10) << pad("spike", 10)
      << "recovery\n";
    for (const ShiftResponse& sr : shifts) {
      const double spike = sr.pre_shift > 0.0 ? sr.peak / sr.pre_shift - 1.0 : 0.0;
      o << pad(std::to_string(sr.shift_step), 8) << pad(sr.to, 16) << pad(fmt(sr.pre_shift), 10)
        << pad(fmt(sr.peak), 10) << pad(fmt(100.0 * spike, "%+.1f%%"), 10) << opt_text(sr.recovery) << "\n";
    }
  }
  return o.str();
}

std::string report_csv(const RunArtifacts& run) {
  const auto phases = phase_event_counts(run.events, run.config.schedule, run.config.total_steps);
  std::ostringstream o;
  o << "phase,replacements,spawns\n";
  for (std::size_t i = 0; i < phases.size(); ++i) {
    o << (i + 1) << "," << phases[i].replacements << "," << phases[i].spawns << "\n";
  }
  return o.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string report_svg(const RunArtifacts& run) {
  constexpr double kW = 800, kH = 400, kL = 60, kR = 20, kT = 30, kB = 40;
  const double total = static_cast<double>(std::max<long>(run.config.total_steps, 1));
  double lo = 0.0, hi = 1.0;
  if (!run.loss.empty()) {
    lo = hi = run.loss.front().eval_loss;
    for (const LossPoint& p : run.loss) {
      lo = std::min(lo, p.eval_loss);
      hi = std::max(hi, p.eval_loss);
    }
    if (hi - lo < 1e-9) hi = lo + 1.0;
  }
  const auto x = [&](double step) { return kL + (kW - kL - kR) * step / total; };
  const auto y = [&](double v) { return kT + (kH - kT - kB) * (hi - v) / (hi - lo); };

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
    << " " << kH << "\">\n";
  o << "<title>" << xml_escape(run.config.name) << " eval loss</title>\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  o << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << kL - 5 << "\" y=\"" << y(hi) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(hi, "%.3f")
    << "</text>\n";
  o << "<text x=\"" << kL - 5 << "\" y=\"" << y(lo) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(lo, "%.3f")
    << "</text>\n";
  o << "<text x=\"" << kW - kR << "\" y=\"" << kH - kB + 15 << "\" text-anchor=\"end\" font-size=\"10\">"
    << run.config.total_steps << "</text>\n";

  for (const DomainShift& s : run.config.schedule.shifts()) {
    if (s.step >= run.config.total_steps) continue;
    o << "<line class=\"shift\" x1=\"" << fmt(x(s.step), "%.2f") << "\" y1=\"" << kT << "\" x2=\""
      << fmt(x(s.step), "%.2f") << "\" y2=\"" << kH - kB << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }

  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  const auto segs = schedule_segments(run.config.schedule, run.config.total_steps);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    o << "<polyline class=\"segment\" data-domain=\"" << xml_escape(segs[i].domain) << "\" fill=\"none\" stroke=\""
      << kColors[i % 5] << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (const LossPoint& p : run.loss) {
      if (p.step < segs[i].start || p.step >= segs[i].end) continue;
      o << (first ? "" : " ") << fmt(x(static_cast<double>(p.step)), "%.2f") << "," << fmt(y(p.eval_loss), "%.2f");
      first = false;
    }
    o << "\"/>\n";
  }

  for (const MarketEvent& e : run.events) {
    if (e.kind != EventKind::ExpertReplaced) continue;
    // Place the marker on the most recent eval point at or before the event.
    double v = run.loss.empty() ? lo : run.loss.front().eval_loss;
    for (const LossPoint& p : run.loss) {
      if (p.step > e.step) break;
      v = p.eval_loss;
    }
    o << "<circle class=\"replacement\" cx=\"" << fmt(x(static_cast<double>(e.step)), "%.2f") << "\" cy=\""
      << fmt(y(v), "%.2f") << "\" r=\"3\" fill=\"black\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string phase_list(const RunSummary& r, bool replacements) {
  std::string s;
  for (std::size_t i = 0; i < r.phases.size(); ++i) {
    if (i) s += ";";
    s += std::to_string(replacements ? r.phases[i].replacements : r.phases[i].spawns);
  }
  return s;
}

}  // namespace

std::string render_report(const RunArtifacts& run, ReportFormat format) {
  switch (format) {
    case ReportFormat::Text: return report_text(run);
    case ReportFormat::Csv: return report_csv(run);
    case ReportFormat::Svg: return report_svg(run);
  }
  throw ConfigError("unknown report format");
}

std::string render_comparison(const Comparison& cmp, ReportFormat format) {
  std::ostringstream o;
  if (format == ReportFormat::Csv) {
    o << "name,mode,grace,total_replacements,phase_replacements,phase_spawns,t_initial,t_return,speedup\n";
    for (const RunSummary& r : cmp.rows) {
      o << r.name << "," << r.mode << "," << r.grace_steps << "," << r.total_replacements << "," << phase_list(r, true)
        << "," << phase_list(r, false) << "," << opt(r.recovery.t_initial) << "," << opt(r.recovery.t_return) << ","
        << opt(r.recovery.speedup) << "\n";
    }
    return o.str();
  }
  if (format != ReportFormat::Text) throw ConfigError("compare supports text and csv formats only");
  if (!cmp.schedules_match) o << "warning: runs have different shift schedules; recovery columns blanked\n";
  o << pad("name", 16) << pad("mode", 6) << pad("grace", 7) << pad("replaced", 10) << pad("per-phase", 14)
    << pad("spawned", 14) << pad("t_initial", 11) << pad("t_return", 10) << "speedup\n";
  for (const RunSummary& r : cmp.rows) {
    o << pad(r.name, 16) << pad(r.mode, 6) << pad(std::to_string(r.grace_steps), 7)
      << pad(std::to_string(r.total_replacements), 10) << pad(phase_list(r, true), 14) << pad(phase_list(r, false), 14)
      << pad(opt(r.recovery.t_initial), 11) << pad(opt(r.recovery.t_return), 10) << opt(r.recovery.speedup) << "\n";
  }
  return o.str();
}

}  // namespace moemarket
