#include "acvtt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "acvtt/errors.hpp"

namespace acvtt {
namespace {

void check_eps(double eps) {
    if (!(eps >= 1e-6 && eps <= 1e-3)) throw ParameterError("grad_check: eps must lie in [1e-6, 1e-3]");
}

double scalar_value(const Tensor& out) {
    if (out.numel() != 1) throw ContractError("grad_check: function output must be scalar");
    return out.item();
}

std::vector<std::size_t> probe_indices(const std::vector<std::size_t>& requested, std::size_t numel) {
    if (requested.empty()) {
        std::vector<std::size_t> all(numel);
        std::iota(all.begin(), all.end(), std::size_t{0});
        return all;
    }
    for (auto i : requested) {
        if (i >= numel) throw BoundsError("grad_check: coordinate out of range");
    }
    return requested;
}

void update(GradCheckReport& report, std::size_t index, double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    const double err = std::abs(analytic - numeric) / denom;
    ++report.coordinates;
    if (report.coordinates == 1 || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_index = index;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
    }
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, double eps, const std::vector<std::size_t>& coordinates,
                           double floor) {
    check_eps(eps);
    if (!(floor > 0.0)) throw ParameterError("grad_check: floor must be positive");
    Tensor leaf = x.detach(true);
    Graph tape;
    const Tensor out = f(tape, leaf);
    scalar_value(out);
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (out.requires_grad()) {
        tape.backward(out);
        if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    }

    GradCheckReport report;
    for (auto i : probe_indices(coordinates, leaf.numel())) {
        Tensor plus = x.detach();
        Tensor minus = x.detach();
        plus.mutable_values()[i] += eps;
        minus.mutable_values()[i] -= eps;
        Graph probe(false);
        const double fp = scalar_value(f(probe, plus));
        const double fm = scalar_value(f(probe, minus));
        update(report, i, analytic[i], (fp - fm) / (2.0 * eps), floor);
    }
    return report;
}

GradCheckReport grad_check_parameter(const ScalarThunk& f, Tensor& parameter, double eps,
                                     const std::vector<std::size_t>& coordinates, double floor) {
    check_eps(eps);
    if (!(floor > 0.0)) throw ParameterError("grad_check: floor must be positive");
    if (!parameter.requires_grad()) throw ContractError("grad_check_parameter: tensor does not require grad");
    parameter.zero_grad();
    Graph tape;
    const Tensor out = f(tape);
    scalar_value(out);
    std::vector<double> analytic(parameter.numel(), 0.0);
    if (out.requires_grad()) {
        tape.backward(out);
        if (parameter.has_grad()) std::copy(parameter.grad().begin(), parameter.grad().end(), analytic.begin());
    }
    parameter.zero_grad();

    GradCheckReport report;
    auto values = parameter.mutable_values();
    for (auto i : probe_indices(coordinates, parameter.numel())) {
        const double saved = values[i];
        Graph probe(false);
        values[i] = saved + eps;
        const double fp = scalar_value(f(probe));
        values[i] = saved - eps;
        const double fm = scalar_value(f(probe));
        values[i] = saved;
        update(report, i, analytic[i], (fp - fm) / (2.0 * eps), floor);
    }
    return report;
}

}  // namespace acvtt
