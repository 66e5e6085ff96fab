#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace acvtt {

struct GradCaseResult {
    std::string suite;  // "tensor", "mrnla" or "network"
    std::string name;
    double error = 0.0;
    double tolerance = 0.0;
    std::size_t coordinates = 0;

    bool passed() const { return error < tolerance; }
};

inline constexpr double kPrimitiveGradTolerance = 1e-4;
inline constexpr double kCompositeGradTolerance = 1e-3;

/// Finite-difference checks of every tensor primitive, the MRNLA block and
/// the end-to-end network on random inputs drawn from `seed`. `suites`
/// selects a subset by name (all when empty). `progress` sees each result
/// as it completes.
std::vector<GradCaseResult> run_gradient_suites(std::uint64_t seed, const std::vector<std::string>& suites = {},
                                                const std::function<void(const GradCaseResult&)>& progress = {});

}  // namespace acvtt
