#include "hybridwarp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hybridwarp/nn_ops.hpp"

namespace hw {

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

// Regularized incomplete beta function I_x(a, b) via the Lentz continued
// fraction (converges for all needed arguments after the symmetry switch).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log(1.0 - x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double dice(const Mask& a, const Mask& b) {
    require_same_shape(a.shape, b.shape, "dice");
    int64_t na = 0, nb = 0, inter = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        na += a.data[i];
        nb += b.data[i];
        inter += a.data[i] & b.data[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double consistency_pair(const Mask& seg_t, const Mask& seg_s, const DisplacementField& disp) {
    require_same_shape(seg_t.shape, seg_s.shape, "consistency_pair");
    return dice(seg_t, warp_mask_nearest(seg_s, disp));
}

double kappa(const Mask& a, const Mask& b) {
    require_same_shape(a.shape, b.shape, "kappa");
    const int64_t n = a.numel();
    if (n == 0) throw ContractError("kappa requires a nonempty grid");
    int64_t agree = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        agree += a.data[i] == b.data[i];
        na += a.data[i];
        nb += b.data[i];
    }
    const double pa1 = static_cast<double>(na) / static_cast<double>(n);
    const double pb1 = static_cast<double>(nb) / static_cast<double>(n);
    const double po = static_cast<double>(agree) / static_cast<double>(n);
    const double pe = pa1 * pb1 + (1.0 - pa1) * (1.0 - pb1);
    if (pe == 1.0) return 1.0;
    return (po - pe) / (1.0 - pe);
}

double tract_median_fa(const Volume& fa, const Mask& mask) {
    if (!fa.shape.same_spatial(mask.shape))
        throw ShapeError("tract_median_fa: FA " + fa.shape.str() + " vs mask " + mask.shape.str());
    if (fa.shape.channels() != 1) throw ShapeError("tract_median_fa expects a 1-channel FA volume");
    std::vector<double> inside;
    for (size_t i = 0; i < mask.data.size(); ++i)
        if (mask.data[i]) inside.push_back(fa.data[i]);
    if (inside.empty()) throw EmptyRegionError("tract_median_fa: empty mask");
    std::sort(inside.begin(), inside.end());
    const size_t n = inside.size();
    if (n % 2 == 1) return inside[n / 2];
    return 0.5 * (inside[n / 2 - 1] + inside[n / 2]);
}

double repro_epsilon_percent(double fa1, double fa2) {
    const double denom = std::fabs(fa1 + fa2);
    if (denom == 0.0) throw NumericError("repro_epsilon: fa1 + fa2 must be nonzero");
    return 2.0 * std::fabs(fa1 - fa2) / denom * 100.0;
}

double endpoint_error(const DisplacementField& est, const DisplacementField& gt, const Mask* roi) {
    require_same_shape(est.shape, gt.shape, "endpoint_error");
    require_displacement(est);
    if (roi != nullptr && !roi->shape.same_spatial(est.shape))
        throw ShapeError("endpoint_error: roi shape mismatch");
    const int64_t m = est.shape.spatial_numel();
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t v = 0; v < m; ++v) {
        if (roi != nullptr && roi->data[static_cast<size_t>(v)] == 0) continue;
        const double dx = est.data[static_cast<size_t>(v)] - gt.data[static_cast<size_t>(v)];
        const double dy = est.data[static_cast<size_t>(m + v)] - gt.data[static_cast<size_t>(m + v)];
        const double dz = est.data[static_cast<size_t>(2 * m + v)] - gt.data[static_cast<size_t>(2 * m + v)];
        acc += std::sqrt(dx * dx + dy * dy + dz * dz);
        ++count;
    }
    if (count == 0) throw EmptyRegionError("endpoint_error: empty roi");
    return acc / static_cast<double>(count);
}

double student_t_two_sided_p(double t, int64_t nu) {
    if (nu < 1) throw ContractError("student_t_two_sided_p requires nu >= 1");
    const double dof = static_cast<double>(nu);
    return betai(0.5 * dof, 0.5, dof / (dof + t * t));
}

TTestResult paired_t_test(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ContractError("paired_t_test requires equal-length samples");
    const int64_t n = static_cast<int64_t>(x.size());
    if (n < 2) throw ContractError("paired_t_test requires n >= 2");

    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += x[static_cast<size_t>(i)] - y[static_cast<size_t>(i)];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = x[static_cast<size_t>(i)] - y[static_cast<size_t>(i)] - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));

    TTestResult r;
    r.n = n;
    if (sd == 0.0) {
        if (mean == 0.0) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.degenerate = true;
            r.t = mean > 0.0 ? std::numeric_limits<double>::infinity()
                             : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
        }
        return r;
    }
    r.t = mean * std::sqrt(static_cast<double>(n)) / sd;
    r.p = student_t_two_sided_p(r.t, n - 1);
    return r;
}

EvalReport build_report(std::string mode, std::vector<PairRecord> records) {
    if (records.empty()) throw ContractError("build_report requires at least one record");
    EvalReport report;
    report.mode = std::move(mode);
    report.records = std::move(records);

    auto stats = [](const std::vector<double>& v) {
        ColumnStats s;
        s.n = static_cast<int64_t>(v.size());
        if (v.empty()) return s;
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        s.mean = mean;
        s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        return s;
    };

    auto collect = [&](auto getter) {
        std::vector<double> v;
        for (const auto& r : report.records) {
            const auto val = getter(r);
            if (val.has_value()) v.push_back(*val);
        }
        return v;
    };

    std::map<std::string, ColumnStats> agg;
    agg["dice_accuracy_s"] = stats(collect([](const PairRecord& r) { return r.dice_accuracy_s; }));
    agg["dice_accuracy_t"] = stats(collect([](const PairRecord& r) { return r.dice_accuracy_t; }));
    agg["consistency_fwd"] = stats(collect([](const PairRecord& r) { return r.consistency_fwd; }));
    agg["consistency_bwd"] = stats(collect([](const PairRecord& r) { return r.consistency_bwd; }));
    agg["kappa"] = stats(collect([](const PairRecord& r) { return r.kappa; }));
    agg["epsilon_percent"] = stats(collect([](const PairRecord& r) { return r.epsilon_percent; }));
    agg["endpoint_error"] = stats(collect([](const PairRecord& r) { return r.endpoint_error; }));
    {
        std::vector<double> pooled;
        for (const auto& r : report.records) {
            if (r.consistency_fwd.has_value()) pooled.push_back(*r.consistency_fwd);
            if (r.consistency_bwd.has_value()) pooled.push_back(*r.consistency_bwd);
        }
        agg["consistency"] = stats(pooled);
    }
    for (auto it = agg.begin(); it != agg.end();) {
        if (it->second.n == 0)
            it = agg.erase(it);
        else
            ++it;
    }
    report.aggregates = std::move(agg);
    return report;
}

}  // namespace hw
