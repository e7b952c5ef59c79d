#pragma once

#include <cmath>
#include <numbers>
#include <utility>

#include "cpqlab/numerics/tape.hpp"
#include "cpqlab/numerics/tensor.hpp"

namespace cpqlab::numerics {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// log(1 - tanh(u)^2), stable for large |u|.
inline double log_one_minus_tanh_sq(double u) {
    const double x = -2.0 * u;
    const double softplus = x > 30.0 ? x : std::log1p(std::exp(x));
    return 2.0 * (std::numbers::ln2 - u - softplus);
}

struct TanhGaussianSample {
    Tensor action;       // n x d, in (-1, 1)
    Tensor log_density;  // n x 1
};

/// action = tanh(mean + exp(log_std) * noise) with log_std clamped to
/// [kLogStdMin, kLogStdMax]; log-density includes the tanh Jacobian.
inline TanhGaussianSample tanh_gaussian_sample(const Tensor& mean, const Tensor& log_std,
                                               const Tensor& noise) {
    require_same_shape(mean, log_std, "tanh_gaussian_sample");
    require_same_shape(mean, noise, "tanh_gaussian_sample");
    TanhGaussianSample out{Tensor(mean.shape, 0.0), Tensor::matrix(mean.rows(), 1)};
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    for (std::size_t r = 0; r < mean.rows(); ++r) {
        double lp = 0.0;
        for (std::size_t c = 0; c < mean.cols(); ++c) {
            const double ls = std::clamp(log_std(r, c), kLogStdMin, kLogStdMax);
            const double eps = noise(r, c);
            const double u = mean(r, c) + std::exp(ls) * eps;
            out.action(r, c) = std::tanh(u);
            lp += -0.5 * eps * eps - ls - half_log_2pi - log_one_minus_tanh_sq(u);
        }
        out.log_density(r, 0) = lp;
    }
    return out;
}

/// Reparameterized sample on a tape: differentiable in mean and log_std.
inline Var tanh_gaussian_rsample(Var mean, Var log_std, const Tensor& noise) {
    Tape& t = *mean.tape();
    Var ls = clamp(log_std, kLogStdMin, kLogStdMax);
    Var u = add(mean, mul(exp(ls), t.constant(noise)));
    return tanh(u);
}

/// Deterministic head used for evaluation: tanh(mean).
inline Tensor tanh_mean_action(const Tensor& mean) {
    Tensor a = mean;
    for (double& v : a.data) v = std::tanh(v);
    return a;
}

}  // namespace cpqlab::numerics
