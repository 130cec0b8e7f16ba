// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moemarket/experiment.hpp"

namespace moemarket {

struct TracePoint {
  long step = 0;
  double value = 0.0;
};

// Trailing moving average; the first points average over what is available.
std::vector<double> smooth_loss(std::span<const double> values, std::size_t window);

// Smallest (step - shift_step) over points with step >= shift_step and
// value <= threshold. Expects an already smoothed trace.
std::optional<long> recovery_steps(std::span<const TracePoint> trace, long shift_step, double threshold);

double speedup_ratio(double t_initial, double t_return);

// Contiguous stretch of the run spent on one domain.
struct Segment {
  std::string domain;
  long start = 0;
  long end = 0;  // exclusive
};

std::vector<Segment> schedule_segments(const ShiftSchedule& schedule, long total_steps);

// Eval-loss trace of one segment, smoothed within the segment only so that a
// shift never mixes two domains in one average.
std::vector<TracePoint> segment_trace(std::span<const LossPoint> loss, const Segment& seg, std::size_t window);

struct PhaseCounts {
  std::string domain;
  long start = 0;
  long end = 0;
  int replacements = 0;
  int spawns = 0;
};

std::vector<PhaseCounts> phase_event_counts(std::span<const MarketEvent> events, const ShiftSchedule& schedule,
                                            long total_steps);

struct RecoveryMetrics {
  std::optional<double> steady_state;
  std::optional<double> threshold;
  std::optional<long> t_initial;
  std::optional<long> t_return;
  std::optional<long> return_shift_step;
  std::optional<double> speedup;
};

// Threshold = recovery_factor x mean of the last steady_state_points smoothed
// eval points before the first shift. t_initial counts from step 0; t_return
// from the first later shift back to the initial domain.
RecoveryMetrics recovery_metrics(const RunArtifacts& run);

// Loss response at one shift, for the trajectory-shape check.
struct ShiftResponse {
  long shift_step = 0;
  std::string from, to;
  double pre_shift = 0.0;  // last smoothed point before the shift
  double peak = 0.0;       // max smoothed value over the first points after it
  double threshold = 0.0;  // recovery_factor x steady state of the destination domain
  std::optional<long> recovery;
};

std::vector<ShiftResponse> shift_responses(const RunArtifacts& run, std::size_t peak_points = 3);

struct RunSummary {
  std::string name;
  std::string mode;
  long grace_steps = 0;
  int total_replacements = 0;
  std::vector<PhaseCounts> phases;
  RecoveryMetrics recovery;
  std::vector<DomainShift> shifts;
};

RunSummary summarize(const RunArtifacts& run);

struct Comparison {
  std::vector<RunSummary> rows;  // sorted by name
  bool schedules_match = true;
};

// Blanks recovery columns when the runs' shift schedules differ.
Comparison compare_runs(std::vector<RunSummary> runs);

}  // namespace moemarket
