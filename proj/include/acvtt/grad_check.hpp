#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "acvtt/tensor.hpp"

namespace acvtt {

/// Scalar-valued function of one tensor, evaluated inside the supplied graph.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;
/// Scalar-valued function of state captured by the closure.
using ScalarThunk = std::function<Tensor(Graph&)>;

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of `f` at `x` with central differences.
/// Error per coordinate is |a - c| / max(|a|, |c|, floor); the maximum is reported.
/// The floor keeps gradients below the finite-difference noise level (round-off
/// of the loss divided by 2 eps) from dominating the relative error.
/// `coordinates` restricts the probe to a subset of flat indices (all when empty).
/// eps must lie in [1e-6, 1e-3]; a non-scalar output raises ContractError.
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double eps,
                           const std::vector<std::size_t>& coordinates = {}, double floor = 1e-8);

/// Same check for a tensor that `f` reads through its closure (a model
/// parameter). The tensor is perturbed in place and restored afterwards.
GradCheckReport grad_check_parameter(const ScalarThunk& f, Tensor& parameter, double eps,
                                     const std::vector<std::size_t>& coordinates = {}, double floor = 1e-8);

}  // namespace acvtt
