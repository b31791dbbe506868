#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hybridwarp/volume.hpp"

namespace hw {

// 2|a n b| / (|a| + |b|); both masks empty counts as perfect agreement (1).
double dice(const Mask& a, const Mask& b);

// Warps seg_s by disp with nearest-neighbor interpolation, then Dice against
// seg_t. Callers evaluate both directions with the corresponding fields.
double consistency_pair(const Mask& seg_t, const Mask& seg_s, const DisplacementField& disp);

// Cohen's kappa over classes {0, 1}; returns 1 when chance agreement is 1
// (both masks constant and equal).
double kappa(const Mask& a, const Mask& b);

// Median of FA values inside the mask; even counts average the two middle
// order statistics.
double tract_median_fa(const Volume& fa, const Mask& mask);

// Scan-rescan error: 2 |fa1 - fa2| / |fa1 + fa2| * 100.
double repro_epsilon_percent(double fa1, double fa2);

// Mean Euclidean norm of the per-voxel displacement difference, in voxels,
// over the roi (or everywhere when roi is null).
double endpoint_error(const DisplacementField& est, const DisplacementField& gt,
                      const Mask* roi = nullptr);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    int64_t n = 0;
    bool degenerate = false;  // zero variance with nonzero mean difference
};

// Two-sided paired t-test with sample (n-1) standard deviation; the p-value
// comes from the regularized incomplete beta function.
TTestResult paired_t_test(std::span<const double> x, std::span<const double> y);

// Two-sided tail probability of Student's t with nu degrees of freedom.
double student_t_two_sided_p(double t, int64_t nu);

struct PairRecord {
    std::string pair_id;
    std::string subject_id;
    std::optional<double> dice_accuracy_s;
    std::optional<double> dice_accuracy_t;
    std::optional<double> consistency_fwd;
    std::optional<double> consistency_bwd;
    std::optional<double> kappa;
    std::optional<double> epsilon_percent;
    std::optional<double> endpoint_error;
};

struct ColumnStats {
    double mean = 0.0;
    double sd = 0.0;
    int64_t n = 0;
};

struct EvalReport {
    std::string version = "1";
    std::string mode;
    std::vector<PairRecord> records;
    // Per-column stats over the non-null record values; "consistency" pools
    // both directions.
    std::map<std::string, ColumnStats> aggregates;
};

EvalReport build_report(std::string mode, std::vector<PairRecord> records);

}  // namespace hw
