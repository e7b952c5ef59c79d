#pragma once

// Central finite differences over every parameter of an MlpParams. Used as
// the independent oracle for tape gradients: it only ever evaluates losses.

#include <cmath>
#include <functional>
#include <vector>

#include "cpqlab/numerics/mlp.hpp"

namespace cpqlab::oracle {

inline numerics::MlpGrads finite_difference(const numerics::MlpParams& params,
                                            const std::function<double(const numerics::MlpParams&)>& loss,
                                            double h = 1e-5) {
    numerics::MlpGrads g = numerics::zeros_like(params);
    numerics::MlpParams probe = params;
    const std::size_t n = params.parameter_count();
    for (std::size_t i = 0; i < n; ++i) {
        double& p = numerics::parameter_at(probe, i);
        const double saved = p;
        p = saved + h;
        const double up = loss(probe);
        p = saved - h;
        const double down = loss(probe);
        p = saved;
        numerics::parameter_at(g, i) = (up - down) / (2.0 * h);
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||, floor) over the flattened parameter vectors.
inline double relative_error(const numerics::MlpGrads& a, const numerics::MlpGrads& b,
                             double floor = 1e-8) {
    const auto fa = numerics::flatten(a);
    const auto fb = numerics::flatten(b);
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        diff += (fa[i] - fb[i]) * (fa[i] - fb[i]);
        na += fa[i] * fa[i];
        nb += fb[i] * fb[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace cpqlab::oracle
