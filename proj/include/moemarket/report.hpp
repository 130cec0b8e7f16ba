// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "moemarket/analysis.hpp"

namespace moemarket {

enum class ReportFormat { Text, Csv, Svg };

ReportFormat parse_report_format(const std::string& s);

// All renderers are pure functions of the artifacts.
std::string render_report(const RunArtifacts& run, ReportFormat format);

// Svg is not a valid comparison format.
std::string render_comparison(const Comparison& cmp, ReportFormat format);

}  // namespace moemarket
