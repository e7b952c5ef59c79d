#pragma once

// Constrained MDP environments: an exactly solvable chain and a continuous
// point mass whose per-step cost is actuation magnitude.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "cpqlab/config.hpp"
#include "cpqlab/errors.hpp"
#include "cpqlab/numerics/rng.hpp"

namespace cpqlab::cmdp {

using numerics::Rng;

/// Explicit finite CMDP. Arrays are flat and row-major: P[(s*A + a)*S + s'],
/// reward/cost[s*A + a].
struct CmdpTabularSpec {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    std::vector<double> transition;
    std::vector<double> reward;
    std::vector<double> cost;
    double gamma = 0.9;
    std::vector<double> initial;
    double limit = 0.0;
    double reward_bound = 1.0;
    double cost_bound = 1.0;

    std::size_t sa(std::size_t s, std::size_t a) const { return s * n_actions + a; }
    double p(std::size_t s, std::size_t a, std::size_t s2) const {
        return transition[sa(s, a) * n_states + s2];
    }
    double& p(std::size_t s, std::size_t a, std::size_t s2) {
        return transition[sa(s, a) * n_states + s2];
    }
    double r(std::size_t s, std::size_t a) const { return reward[sa(s, a)]; }
    double c(std::size_t s, std::size_t a) const { return cost[sa(s, a)]; }

    /// Throws DomainError when an invariant does not hold.
    void validate() const {
        const std::size_t S = n_states, A = n_actions;
        if (S == 0 || A == 0) throw DomainError("tabular spec: empty state or action space");
        if (transition.size() != S * A * S || reward.size() != S * A || cost.size() != S * A ||
            initial.size() != S)
            throw DomainError("tabular spec: array sizes do not match n_states/n_actions");
        if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("tabular spec: gamma outside [0,1)");
        if (limit < 0.0) throw DomainError("tabular spec: negative limit");
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t a = 0; a < A; ++a) {
                double total = 0.0;
                for (std::size_t s2 = 0; s2 < S; ++s2) {
                    if (p(s, a, s2) < 0.0) throw DomainError("tabular spec: negative probability");
                    total += p(s, a, s2);
                }
                if (std::abs(total - 1.0) > 1e-12)
                    throw DomainError("tabular spec: P[" + std::to_string(s) + "][" +
                                      std::to_string(a) + "] sums to " + std::to_string(total));
                if (r(s, a) < 0.0 || r(s, a) > reward_bound)
                    throw DomainError("tabular spec: reward outside [0, R_bar]");
                if (c(s, a) < 0.0 || c(s, a) > cost_bound)
                    throw DomainError("tabular spec: cost outside [0, C_bar]");
            }
        double eta = 0.0;
        for (double v : initial) eta += v;
        if (std::abs(eta - 1.0) > 1e-12) throw DomainError("tabular spec: initial distribution");
    }
};

struct TabularEnv {
    std::string id;
    CmdpTabularSpec spec;
    std::vector<bool> terminal_states;  // entering one ends the episode
    int horizon = 50;
};

struct PointMassConfig {
    int horizon = 100;
    std::array<double, 2> goal{1.0, 1.0};
    double goal_radius = 0.1;
    double goal_bonus = 1.0;
    double distance_weight = 0.1;
    double damping = 0.99;
    double action_gain = 0.1;
    double dt = 0.1;
    double arena_lo = -1.0;
    double arena_hi = 2.0;
    double gamma = 0.995;
    double limit = 10.0;
};

struct PointMassEnv {
    std::string id = "pointmass";
    PointMassConfig cfg;
};

using Env = std::variant<TabularEnv, PointMassEnv>;

/// Generic environment state. Tabular: obs = {state index}. Point mass:
/// obs = {px, py, vx, vy}. `t` counts steps taken in the episode.
struct EnvState {
    std::vector<double> obs;
    int t = 0;

    friend bool operator==(const EnvState&, const EnvState&) = default;
};

/// View of the continuous state with named fields.
struct ContinuousEnvState {
    std::array<double, 2> position{0.0, 0.0};
    std::array<double, 2> velocity{0.0, 0.0};
    int step = 0;

    static ContinuousEnvState from(const EnvState& s) {
        return {{s.obs.at(0), s.obs.at(1)}, {s.obs.at(2), s.obs.at(3)}, s.t};
    }
    EnvState to_state() const {
        return {{position[0], position[1], velocity[0], velocity[1]}, step};
    }
};

struct StepOutcome {
    EnvState next;
    double reward = 0.0;
    double cost = 0.0;
    bool terminal = false;   // absorbing: no bootstrap past this transition
    bool truncated = false;  // horizon reached: episode ends, value continues
};

using Action = std::vector<double>;
using Policy = std::function<Action(const EnvState&, Rng&)>;

// ---- construction -------------------------------------------------------------

/// Six-state chain: 0..4 transient, 5 absorbing. Action 0 ("cautious") moves
/// right w.p. p_cautious at cost 0.1; action 1 ("risky") always moves right at
/// cost 1.0. Entering 5 pays 1.0, every other transient step pays 0.05; the
/// table stores the expected reward per (s,a).
inline TabularEnv make_chain6(const KeyValueConfig& cfg = {}) {
    const double p_cautious = cfg.get_double("chain6.p_cautious", 0.7);
    const double cost_cautious = cfg.get_double("chain6.cost_cautious", 0.1);
    const double cost_risky = cfg.get_double("chain6.cost_risky", 1.0);
    const double step_reward = cfg.get_double("chain6.step_reward", 0.05);
    const double goal_reward = cfg.get_double("chain6.goal_reward", 1.0);

    TabularEnv env;
    env.id = "chain6";
    env.horizon = static_cast<int>(cfg.get_int("chain6.horizon", 50));
    auto& sp = env.spec;
    sp.n_states = 6;
    sp.n_actions = 2;
    sp.transition.assign(6 * 2 * 6, 0.0);
    sp.reward.assign(12, 0.0);
    sp.cost.assign(12, 0.0);
    sp.gamma = cfg.get_double("chain6.gamma", 0.9);
    sp.limit = cfg.get_double("chain6.limit", 1.5);
    sp.initial.assign(6, 0.0);
    sp.initial[0] = 1.0;
    sp.reward_bound = std::max(goal_reward, step_reward);
    sp.cost_bound = std::max(cost_cautious, cost_risky);
    const double move[2] = {p_cautious, 1.0};
    const double costs[2] = {cost_cautious, cost_risky};
    for (std::size_t s = 0; s < 5; ++s)
        for (std::size_t a = 0; a < 2; ++a) {
            sp.p(s, a, s + 1) = move[a];
            sp.p(s, a, s) += 1.0 - move[a];
            const double enter_goal = (s == 4) ? move[a] : 0.0;
            sp.reward[sp.sa(s, a)] = enter_goal * goal_reward + (1.0 - enter_goal) * step_reward;
            sp.cost[sp.sa(s, a)] = costs[a];
        }
    for (std::size_t a = 0; a < 2; ++a) sp.p(5, a, 5) = 1.0;
    env.terminal_states.assign(6, false);
    env.terminal_states[5] = true;
    sp.validate();
    return env;
}

inline PointMassEnv make_pointmass(const KeyValueConfig& cfg = {}) {
    PointMassEnv env;
    auto& c = env.cfg;
    c.horizon = static_cast<int>(cfg.get_int("pointmass.horizon", c.horizon));
    c.goal = {cfg.get_double("pointmass.goal_x", c.goal[0]),
              cfg.get_double("pointmass.goal_y", c.goal[1])};
    c.goal_radius = cfg.get_double("pointmass.goal_radius", c.goal_radius);
    c.goal_bonus = cfg.get_double("pointmass.goal_bonus", c.goal_bonus);
    c.distance_weight = cfg.get_double("pointmass.distance_weight", c.distance_weight);
    c.damping = cfg.get_double("pointmass.damping", c.damping);
    c.action_gain = cfg.get_double("pointmass.action_gain", c.action_gain);
    c.dt = cfg.get_double("pointmass.dt", c.dt);
    c.arena_lo = cfg.get_double("pointmass.arena_lo", c.arena_lo);
    c.arena_hi = cfg.get_double("pointmass.arena_hi", c.arena_hi);
    c.gamma = cfg.get_double("pointmass.gamma", c.gamma);
    c.limit = cfg.get_double("pointmass.limit", c.limit);
    if (c.horizon < 1) throw DomainError("pointmass: horizon must be >= 1");
    if (!(c.arena_hi > c.arena_lo)) throw DomainError("pointmass: empty arena");
    return env;
}

/// Environment by id ("chain6" or "pointmass") with config overrides.
inline Env make_env(const std::string& id, const KeyValueConfig& cfg = {}) {
    if (id == "chain6") return make_chain6(cfg);
    if (id == "pointmass") return make_pointmass(cfg);
    throw DomainError("unknown environment id '" + id + "'");
}

// ---- queries --------------------------------------------------------------------

inline std::string env_id(const Env& env) {
    return std::visit([](const auto& e) { return e.id; }, env);
}

inline bool is_tabular(const Env& env) { return std::holds_alternative<TabularEnv>(env); }

inline int horizon(const Env& env) {
    return std::visit(
        [](const auto& e) {
            if constexpr (std::is_same_v<std::decay_t<decltype(e)>, TabularEnv>)
                return e.horizon;
            else
                return e.cfg.horizon;
        },
        env);
}

inline double default_gamma(const Env& env) {
    if (auto* t = std::get_if<TabularEnv>(&env)) return t->spec.gamma;
    return std::get<PointMassEnv>(env).cfg.gamma;
}

inline double default_limit(const Env& env) {
    if (auto* t = std::get_if<TabularEnv>(&env)) return t->spec.limit;
    return std::get<PointMassEnv>(env).cfg.limit;
}

/// Largest per-step cost.
inline double cost_bound(const Env& env) {
    if (auto* t = std::get_if<TabularEnv>(&env)) return t->spec.cost_bound;
    return 2.0;
}

/// Constant that makes every reward nonnegative: reward + shift >= 0.
/// Point mass: distance_weight times the arena diameter.
inline double reward_shift(const Env& env) {
    if (is_tabular(env)) return 0.0;
    const auto& c = std::get<PointMassEnv>(env).cfg;
    return c.distance_weight * std::sqrt(2.0) * (c.arena_hi - c.arena_lo);
}

inline double reward_upper_bound(const Env& env) {
    if (auto* t = std::get_if<TabularEnv>(&env)) return t->spec.reward_bound;
    return std::get<PointMassEnv>(env).cfg.goal_bonus;
}

/// Width of the network-facing state features.
inline std::size_t feature_dim(const Env& env) {
    if (auto* t = std::get_if<TabularEnv>(&env)) return t->spec.n_states;
    return 4;
}

/// Width of the network-facing action vector.
inline std::size_t action_dim(const Env& env) { return is_tabular(env) ? 1 : 2; }

/// Tabular: one-hot of the state index. Point mass: the raw observation.
inline std::vector<double> state_features(const Env& env, const std::vector<double>& obs) {
    if (auto* t = std::get_if<TabularEnv>(&env)) {
        std::vector<double> f(t->spec.n_states, 0.0);
        f.at(static_cast<std::size_t>(obs.at(0))) = 1.0;
        return f;
    }
    return obs;
}

/// Tabular actions map to bin centres of [-1, 1]; continuous actions pass through.
inline std::vector<double> action_features(const Env& env, const Action& a) {
    if (auto* t = std::get_if<TabularEnv>(&env)) {
        const double n = static_cast<double>(t->spec.n_actions);
        return {-1.0 + (2.0 * a.at(0) + 1.0) / n};
    }
    return a;
}

/// Inverse of action_features: a point of [-1,1]^d to an env action.
inline Action decode_action(const Env& env, const std::vector<double>& x) {
    if (auto* t = std::get_if<TabularEnv>(&env)) {
        const std::size_t n = t->spec.n_actions;
        auto bin = static_cast<long>(std::floor((x.at(0) + 1.0) / 2.0 * static_cast<double>(n)));
        bin = std::clamp(bin, 0L, static_cast<long>(n) - 1);
        return {static_cast<double>(bin)};
    }
    return {std::clamp(x.at(0), -1.0, 1.0), std::clamp(x.at(1), -1.0, 1.0)};
}

/// Exact model; only tabular environments have one.
inline const CmdpTabularSpec& tabular_spec(const Env& env) {
    if (auto* t = std::get_if<TabularEnv>(&env)) return t->spec;
    throw UnsupportedError("tabular_spec: environment '" + env_id(env) + "' is continuous");
}

// ---- dynamics -------------------------------------------------------------------

inline EnvState reset(const Env& env, Rng& rng) {
    if (auto* t = std::get_if<TabularEnv>(&env)) {
        const std::size_t s = rng.categorical(t->spec.initial);
        return {{static_cast<double>(s)}, 0};
    }
    return ContinuousEnvState{}.to_state();
}

inline StepOutcome step(const Env& env, const EnvState& state, const Action& action, Rng& rng) {
    if (auto* t = std::get_if<TabularEnv>(&env)) {
        const auto& sp = t->spec;
        if (action.size() != 1) throw DomainError("chain step: action must be a single index");
        const double av = action[0];
        if (!(av >= 0.0) || av != std::floor(av) || av >= static_cast<double>(sp.n_actions))
            throw DomainError("chain step: invalid action " + std::to_string(av));
        const auto s = static_cast<std::size_t>(state.obs.at(0));
        const auto a = static_cast<std::size_t>(av);
        std::vector<double> row(sp.n_states);
        for (std::size_t s2 = 0; s2 < sp.n_states; ++s2) row[s2] = sp.p(s, a, s2);
        const std::size_t next = rng.categorical(row);
        StepOutcome out;
        out.next = {{static_cast<double>(next)}, state.t + 1};
        out.reward = sp.r(s, a);
        out.cost = sp.c(s, a);
        out.terminal = t->terminal_states.at(next);
        out.truncated = !out.terminal && out.next.t >= t->horizon;
        return out;
    }
    const auto& c = std::get<PointMassEnv>(env).cfg;
    if (action.size() != 2) throw DomainError("pointmass step: action must have 2 components");
    for (double v : action)
        if (!(v >= -1.0 && v <= 1.0))
            throw DomainError("pointmass step: action component outside [-1,1]");
    ContinuousEnvState s = ContinuousEnvState::from(state);
    for (int i = 0; i < 2; ++i) {
        s.velocity[i] = c.damping * s.velocity[i] + c.action_gain * action[i];
        s.position[i] += c.dt * s.velocity[i];
        if (s.position[i] < c.arena_lo || s.position[i] > c.arena_hi) {
            s.position[i] = std::clamp(s.position[i], c.arena_lo, c.arena_hi);
            s.velocity[i] = 0.0;
        }
    }
    s.step += 1;
    const double dist = std::hypot(s.position[0] - c.goal[0], s.position[1] - c.goal[1]);
    StepOutcome out;
    out.next = s.to_state();
    out.reward = -c.distance_weight * dist + (dist < c.goal_radius ? c.goal_bonus : 0.0);
    out.cost = std::abs(action[0]) + std::abs(action[1]);
    out.terminal = dist < c.goal_radius;
    out.truncated = !out.terminal && s.step >= c.horizon;
    return out;
}

struct RolloutResult {
    double discounted_return = 0.0;
    double discounted_cost = 0.0;
    int steps = 0;
    bool reached_terminal = false;
};

/// One trajectory from reset; discounted sums of reward and cost.
inline RolloutResult discounted_rollout(const Env& env, const Policy& policy, double gamma,
                                        int max_steps, Rng& rng) {
    if (max_steps < 1) throw DomainError("discounted_rollout: horizon must be >= 1");
    RolloutResult res;
    EnvState s = reset(env, rng);
    double discount = 1.0;
    for (int t = 0; t < max_steps; ++t) {
        const Action a = policy(s, rng);
        const StepOutcome o = step(env, s, a, rng);
        res.discounted_return += discount * o.reward;
        res.discounted_cost += discount * o.cost;
        res.steps = t + 1;
        discount *= gamma;
        if (o.terminal) {
            res.reached_terminal = true;
            break;
        }
        if (o.truncated) break;
        s = o.next;
    }
    return res;
}

}  // namespace cpqlab::cmdp
