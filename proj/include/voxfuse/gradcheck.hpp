#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace voxfuse {

struct GradCheckResult {
    std::string name;
    int coords = 0;        // coordinates compared against central differences
    double max_rel = 0.0;  // worst relative error, floored denominator
};

/// Central finite-difference checks over every trainable module: aux heads,
/// focal and composite losses, both encoders, the fusion stack, and a
/// sampled end-to-end pass through a rendered frame. Deterministic for a
/// seed. Each result's max_rel is expected below 1e-5.
std::vector<GradCheckResult> run_gradient_suite(uint64_t seed);

std::string gradcheck_report(const std::vector<GradCheckResult>& results);

double worst_of(const std::vector<GradCheckResult>& results);

}  // namespace voxfuse
