#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "zoneseg/volume.hpp"

namespace zoneseg {

/// Dice similarity coefficient 2|P∩G| / (|P|+|G|); both empty -> 1.
double dsc(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);

/// Mean absolute symmetric (surface) distance between the 6-neighborhood
/// boundaries of pred and gt, in mm (or voxel units with unit spacing).
/// Empty-set inputs have no defined value; callers use the optional.
std::optional<double> mad(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                          Shape3 shape, const Spacing& spacing);

struct TTestResult {
  double t_statistic = 0.0;
  double p_value = 1.0;
  int dof = 0;
  bool significant = false;
  bool degenerate = false;  // zero variance of differences
};

/// One-sided paired t-test, alternative mean(a - b) > 0.
TTestResult paired_t_test_one_sided(const std::vector<double>& scores_a,
                                    const std::vector<double>& scores_b, double alpha);

/// Upper-tail probability of Student's t distribution.
double t_upper_tail(double t, int dof);

struct ZoneScores {
  std::optional<double> dsc;
  std::optional<double> mad_mm;
};

struct Aggregate {
  double mean = 0.0;
  double sd = 0.0;  // sample sd; 0 when n < 2
  int n = 0;
  int absent = 0;  // cases excluded for this zone/metric
};

struct MetricsReport {
  // per_case[case_id][zone]
  std::map<std::string, std::array<ZoneScores, kNumZones>> per_case;
  std::array<Aggregate, kNumZones> dsc_aggregate;
  std::array<Aggregate, kNumZones> mad_aggregate;
  Aggregate zones_avg_dsc;  // mean across the four foreground zones
  Aggregate zones_avg_mad;
};

Aggregate aggregate(const std::vector<double>& values, int absent = 0);

struct EvalCase {
  std::string id;
  const LabelMap* prediction;
  const LabelMap* ground_truth;
};

MetricsReport build_report(const std::vector<EvalCase>& cases, const Spacing& spacing);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
/// Table-style rendering: one row per model/run label, DSC% and MAD per
/// foreground zone, Zones Avg. last.
std::string render_table(const MetricsReport& report, const std::string& row_label);

}  // namespace zoneseg
