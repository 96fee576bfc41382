#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pointdg {

struct GradCheckRow {
    std::string name;
    double err = 0.0;
    double tol = 0.0;
    bool pass() const { return err < tol; }
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;
    double model_sweep_seconds = 0.0;
    double total_seconds = 0.0;
    bool all_pass() const {
        for (const auto& r : rows)
            if (!r.pass()) return false;
        return true;
    }
};

// Finite-difference verification of every primitive (tol 1e-6) plus a full
// forward+loss sweep over each model parameter on a tiny two-sample batch
// (tol 1e-4).
GradCheckReport run_gradient_suite(std::uint64_t seed);

struct ScanBenchRow {
    std::int64_t L = 0;
    double mean_ms = 0.0, std_ms = 0.0, median_ms = 0.0;
    double ratio_vs_half = 0.0;  // median(L) / median(L/2); 0 for the first row
};

// Forward selective-scan timing at model width over doubling lengths.
std::vector<ScanBenchRow> run_scan_bench(int reps);

}  // namespace pointdg
