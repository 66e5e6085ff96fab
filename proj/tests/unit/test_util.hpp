#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "acvtt/rng.hpp"
#include "acvtt/tensor.hpp"

namespace acvtt::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
    Rng rng(seed);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

// Fixed random weights for reducing a tensor to a scalar, so gradient checks
// see a non-degenerate upstream gradient.
inline Tensor probe_weights(const Shape& shape, std::uint64_t seed) { return random_tensor(shape, seed, 0.5, 1.5); }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

}  // namespace acvtt::testing
