#pragma once

// Tanh-Gaussian actor shared by CPQ and the baselines: an MLP mapping state
// features to [mean, log_std] of a Gaussian squashed through tanh.

#include <string>
#include <vector>

#include "cpqlab/cmdp.hpp"
#include "cpqlab/numerics/mlp.hpp"
#include "cpqlab/numerics/tanh_gaussian.hpp"

namespace cpqlab::actor {

using numerics::MlpParams;
using numerics::Rng;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

/// The output layer is scaled by `last_layer_scale`; the log-std head starts
/// at `init_log_std` (bias set, weights shrunk alike).
inline MlpParams make_actor(std::size_t state_dim, std::size_t action_dim,
                            const std::vector<std::size_t>& hidden, Rng& rng,
                            double last_layer_scale = 1.0, double init_log_std = 0.0) {
    std::vector<std::size_t> widths{state_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(2 * action_dim);
    MlpParams p = numerics::make_mlp(widths, rng, numerics::OutputTransform::identity, last_layer_scale);
    auto& last = p.layers.back();
    for (std::size_t j = action_dim; j < 2 * action_dim; ++j) last.bias.data[j] += init_log_std;
    return p;
}

inline std::size_t action_dim_of(const MlpParams& actor) { return actor.output_width() / 2; }

struct Head {
    Tensor mean;
    Tensor log_std;
};

inline Head forward(const MlpParams& actor, const Tensor& states) {
    const Tensor h = numerics::mlp_forward(actor, states);
    const std::size_t ad = action_dim_of(actor);
    Head out{Tensor::matrix(h.rows(), ad), Tensor::matrix(h.rows(), ad)};
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t j = 0; j < ad; ++j) {
            out.mean(r, j) = h(r, j);
            out.log_std(r, j) = h(r, ad + j);
        }
    return out;
}

/// tanh(mean + sigma * noise) per row; noise has one row per state.
inline Tensor sample(const MlpParams& actor, const Tensor& states, const Tensor& noise) {
    const Head h = forward(actor, states);
    return numerics::tanh_gaussian_sample(h.mean, h.log_std, noise).action;
}

inline Tensor mean_action(const MlpParams& actor, const Tensor& states) {
    return numerics::tanh_mean_action(forward(actor, states).mean);
}

inline Tensor standard_normal(std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.data) v = rng.normal();
    return t;
}

/// Differentiable reparameterized sample a_theta(s) on a tape.
inline Var rsample(const numerics::BoundMlp& net, Var states, std::size_t action_dim, const Tensor& noise) {
    Var h = net(states);
    return numerics::tanh_gaussian_rsample(numerics::slice_cols(h, 0, action_dim),
                                           numerics::slice_cols(h, action_dim, 2 * action_dim), noise);
}

/// Environment-facing policy. Deterministic mode acts with tanh(mean).
inline cmdp::Policy as_policy(const MlpParams& actor, const cmdp::Env& env, bool stochastic = false) {
    if (actor.input_width() != cmdp::feature_dim(env) || action_dim_of(actor) != cmdp::action_dim(env))
        throw DimensionError("actor does not match environment " + cmdp::env_id(env));
    return [actor, env, stochastic](const cmdp::EnvState& st, Rng& rng) {
        const Tensor s = Tensor::row(cmdp::state_features(env, st.obs));
        const Tensor a = stochastic ? sample(actor, s, standard_normal(1, action_dim_of(actor), rng))
                                    : mean_action(actor, s);
        return cmdp::decode_action(env, a.data);
    };
}

}  // namespace cpqlab::actor
