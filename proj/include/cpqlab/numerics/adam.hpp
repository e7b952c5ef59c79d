#pragma once

#include <cmath>

#include "cpqlab/numerics/mlp.hpp"

namespace cpqlab::numerics {

struct AdamState {
    MlpParams first_moment;
    MlpParams second_moment;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double learning_rate = 1e-3;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline AdamState make_adam(const MlpParams& params, double learning_rate) {
    AdamState s;
    s.first_moment = zeros_like(params);
    s.second_moment = zeros_like(params);
    s.learning_rate = learning_rate;
    return s;
}

/// One bias-corrected Adam step. Updates `params` and `state` in place.
inline void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state) {
    require_same_architecture(params, grads, "adam_step");
    require_same_architecture(params, state.first_moment, "adam_step");
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    const double lr = state.learning_rate;
    const double eps = state.epsilon;
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
            for (std::size_t k = 0; k < p.size(); ++k) {
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * g.data[k];
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * g.data[k] * g.data[k];
                const double mhat = m.data[k] / c1;
                const double vhat = v.data[k] / c2;
                p.data[k] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        };
        update(params.layers[i].weight, grads.layers[i].weight,
               state.first_moment.layers[i].weight, state.second_moment.layers[i].weight);
        update(params.layers[i].bias, grads.layers[i].bias, state.first_moment.layers[i].bias,
               state.second_moment.layers[i].bias);
    }
}

}  // namespace cpqlab::numerics
