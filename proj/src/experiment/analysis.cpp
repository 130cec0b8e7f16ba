// SPDX-License-Identifier: Apache-2.0
#include "moemarket/analysis.hpp"

#include <algorithm>

#include "moemarket/errors.hpp"

namespace moemarket {

std::vector<double> smooth_loss(std::span<const double> values, std::size_t window) {
  if (window < 1) throw ConfigError("smoothing window must be >= 1");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t n = std::min(i + 1, window);
    double s = 0.0;
    for (std::size_t j = i + 1 - n; j <= i; ++j) s += values[j];
    out[i] = s / static_cast<double>(n);
  }
  return out;
}

std::optional<long> recovery_steps(std::span<const TracePoint> trace, long shift_step, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("recovery threshold must be positive");
  for (const TracePoint& p : trace) {
    if (p.step >= shift_step && p.value <= threshold) return p.step - shift_step;
  }
  return std::nullopt;
}

double speedup_ratio(double t_initial, double t_return) {
  if (!(t_initial > 0.0) || !(t_return > 0.0)) throw ConfigError("speedup needs positive recovery times");
  return t_initial / t_return;
}

std::vector<Segment> schedule_segments(const ShiftSchedule& schedule, long total_steps) {
  std::vector<Segment> out;
  Segment cur{schedule.initial(), 0, total_steps};
  for (const DomainShift& s : schedule.shifts()) {
    if (s.step >= total_steps) break;
    cur.end = s.step;
    out.push_back(cur);
    cur = Segment{s.domain, s.step, total_steps};
  }
  out.push_back(cur);
  return out;
}

std::vector<TracePoint> segment_trace(std::span<const LossPoint> loss, const Segment& seg, std::size_t window) {
  std::vector<long> steps;
  std::vector<double> values;
  for (const LossPoint& p : loss) {
    if (p.step >= seg.start && p.step < seg.end) {
      steps.push_back(p.step);
      values.push_back(p.eval_loss);
    }
  }
  const auto sm = smooth_loss(values, window);
  std::vector<TracePoint> out(steps.size());
  for (std::size_t i = 0; i < steps.size(); ++i) out[i] = {steps[i], sm[i]};
  return out;
}

std::vector<PhaseCounts> phase_event_counts(std::span<const MarketEvent> events, const ShiftSchedule& schedule,
                                            long total_steps) {
  std::vector<PhaseCounts> out;
  for (const Segment& s : schedule_segments(schedule, total_steps)) out.push_back({s.domain, s.start, s.end, 0, 0});
  for (const MarketEvent& e : events) {
    if (e.kind != EventKind::ExpertReplaced && e.kind != EventKind::ExpertSpawned) continue;
    for (PhaseCounts& p : out) {
      if (e.step >= p.start && (e.step < p.end || &p == &out.back())) {
        (e.kind == EventKind::ExpertReplaced ? p.replacements : p.spawns) += 1;
        break;
      }
    }
  }
  return out;
}

namespace {

std::optional<double> steady_state(std::span<const TracePoint> trace, std::size_t points) {
  if (trace.empty()) return std::nullopt;
  const std::size_t n = std::min(points, trace.size());
  double s = 0.0;
  for (std::size_t i = trace.size() - n; i < trace.size(); ++i) s += trace[i].value;
  return s / static_cast<double>(n);
}

}  // namespace

RecoveryMetrics recovery_metrics(const RunArtifacts& run) {
  const RunConfig& cfg = run.config;
  RecoveryMetrics m;
  const auto segs = schedule_segments(cfg.schedule, cfg.total_steps);
  if (segs.size() < 2) return m;
  const auto first = segment_trace(run.loss, segs[0], cfg.eval.smoothing_window);
  m.steady_state = steady_state(first, cfg.eval.steady_state_points);
  if (!m.steady_state) return m;
  m.threshold = *m.steady_state * cfg.eval.recovery_factor;
  m.t_initial = recovery_steps(first, 0, *m.threshold);
  for (std::size_t i = 1; i < segs.size(); ++i) {
    if (segs[i].domain != segs[0].domain) continue;
    m.return_shift_step = segs[i].start;
    const auto back = segment_trace(run.loss, segs[i], cfg.eval.smoothing_window);
    m.t_return = recovery_steps(back, segs[i].start, *m.threshold);
    break;
  }
  if (m.t_initial && m.t_return && *m.t_initial > 0 && *m.t_return > 0) {
    m.speedup = speedup_ratio(static_cast<double>(*m.t_initial), static_cast<double>(*m.t_return));
  }
  return m;
}

std::vector<ShiftResponse> shift_responses(const RunArtifacts& run, std::size_t peak_points) {
  const RunConfig& cfg = run.config;
  const auto segs = schedule_segments(cfg.schedule, cfg.total_steps);
  std::vector<std::vector<TracePoint>> traces;
  for (const Segment& s : segs) traces.push_back(segment_trace(run.loss, s, cfg.eval.smoothing_window));

  std::vector<ShiftResponse> out;
  for (std::size_t i = 1; i < segs.size(); ++i) {
    if (traces[i - 1].empty() || traces[i].empty()) continue;
    ShiftResponse r;
    r.shift_step = segs[i].start;
    r.from = segs[i - 1].domain;
    r.to = segs[i].domain;
    r.pre_shift = traces[i - 1].back().value;
    const std::size_t n = std::min(peak_points, traces[i].size());
    for (std::size_t j = 0; j < n; ++j) r.peak = std::max(r.peak, traces[i][j].value);
    // Steady state of the destination domain: its first segment's tail.
    std::size_t ref = i;
    for (std::size_t j = 0; j < segs.size(); ++j) {
      if (segs[j].domain == segs[i].domain) {
        ref = j;
        break;
      }
    }
    const auto ss = steady_state(traces[ref], cfg.eval.steady_state_points);
    r.threshold = ss.value_or(0.0) * cfg.eval.recovery_factor;
    if (r.threshold > 0.0) r.recovery = recovery_steps(traces[i], r.shift_step, r.threshold);
    out.push_back(r);
  }
  return out;
}

RunSummary summarize(const RunArtifacts& run) {
  RunSummary s;
  s.name = run.config.name;
  s.mode = to_string(run.config.market.fitness_mode);
  s.grace_steps = run.config.market.grace_steps;
  for (const MarketEvent& e : run.events) {
    if (e.kind == EventKind::ExpertReplaced) ++s.total_replacements;
  }
  s.phases = phase_event_counts(run.events, run.config.schedule, run.config.total_steps);
  s.recovery = recovery_metrics(run);
  s.shifts = run.config.schedule.shifts();
  return s;
}

Comparison compare_runs(std::vector<RunSummary> runs) {
  if (runs.size() < 2) throw ConfigError("comparison needs at least two runs");
  Comparison c;
  std::stable_sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) { return a.name < b.name; });
  const auto same = [](const std::vector<DomainShift>& a, const std::vector<DomainShift>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](const DomainShift& x, const DomainShift& y) {
             return x.step == y.step && x.domain == y.domain;
           });
  };
  for (const RunSummary& r : runs) {
    if (!same(r.shifts, runs.front().shifts)) c.schedules_match = false;
  }
  if (!c.schedules_match) {
    for (RunSummary& r : runs) r.recovery = RecoveryMetrics{};
  }
  c.rows = std::move(runs);
  return c;
}

}  // namespace moemarket
