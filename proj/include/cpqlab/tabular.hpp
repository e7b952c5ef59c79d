#pragma once

// Exact computations on finite CMDPs: policy evaluation by linear solve, the
// penalized cost fixed point and its alpha bound, OOD action sets, an
// enumeration oracle for the optimal safe policy, and tabular CPQ.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cpqlab/cmdp.hpp"
#include "cpqlab/datagen.hpp"
#include "cpqlab/errors.hpp"

namespace cpqlab::tabular {

using cmdp::CmdpTabularSpec;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// S x A table of action probabilities. Policies have rows summing to 1;
/// ν and π_β may have all-zero rows (no mass / unvisited state).
struct ActionTable {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    std::vector<double> p;

    ActionTable() = default;
    ActionTable(std::size_t s, std::size_t a, double fill = 0.0) : n_states(s), n_actions(a), p(s * a, fill) {}

    double operator()(std::size_t s, std::size_t a) const { return p[s * n_actions + a]; }
    double& operator()(std::size_t s, std::size_t a) { return p[s * n_actions + a]; }

    friend bool operator==(const ActionTable&, const ActionTable&) = default;
};

using TabularPolicy = ActionTable;

inline TabularPolicy deterministic_policy(const std::vector<std::size_t>& actions, std::size_t n_actions) {
    TabularPolicy pi(actions.size(), n_actions);
    for (std::size_t s = 0; s < actions.size(); ++s) pi(s, actions.at(s)) = 1.0;
    return pi;
}

inline TabularPolicy uniform_policy(std::size_t n_states, std::size_t n_actions) {
    return TabularPolicy(n_states, n_actions, 1.0 / static_cast<double>(n_actions));
}

inline ActionTable from_behavior(const datagen::TabularBehaviorPolicy& pb) {
    ActionTable t(pb.n_states, pb.n_actions);
    t.p = pb.probs;
    return t;
}

inline void require_policy(const CmdpTabularSpec& spec, const TabularPolicy& pi, const char* op) {
    if (pi.n_states != spec.n_states || pi.n_actions != spec.n_actions || pi.p.size() != spec.n_states * spec.n_actions)
        throw DimensionError(std::string(op) + ": policy shape does not match the spec");
    for (std::size_t s = 0; s < pi.n_states; ++s) {
        double total = 0.0;
        for (std::size_t a = 0; a < pi.n_actions; ++a) {
            if (pi(s, a) < 0.0) throw DomainError(std::string(op) + ": negative policy probability");
            total += pi(s, a);
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw DomainError(std::string(op) + ": policy row " + std::to_string(s) + " sums to " + std::to_string(total));
    }
}

enum class Signal { reward, cost };

struct ExactQ {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    std::vector<double> q;
    Signal tag = Signal::reward;
    double residual = 0.0;  // sup-norm Bellman residual of the solve

    double operator()(std::size_t s, std::size_t a) const { return q[s * n_actions + a]; }
};

// ---- matrices over state-action pairs -------------------------------------------

/// P^π[(s,a),(s',a')] = P(s'|s,a) π(a'|s').
inline Matrix state_action_kernel(const CmdpTabularSpec& spec, const TabularPolicy& pi) {
    const std::size_t S = spec.n_states, A = spec.n_actions, n = S * A;
    Matrix m = Matrix::Zero(static_cast<long>(n), static_cast<long>(n));
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a)
            for (std::size_t s2 = 0; s2 < S; ++s2) {
                const double p = spec.p(s, a, s2);
                if (p == 0.0) continue;
                for (std::size_t a2 = 0; a2 < A; ++a2)
                    m(static_cast<long>(spec.sa(s, a)), static_cast<long>(spec.sa(s2, a2))) += p * pi(s2, a2);
            }
    return m;
}

inline Vector to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Vector>(v.data(), static_cast<long>(v.size()));
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

/// Solves (I - γK) x = b; NumericError if the system is singular or the
/// answer is not finite.
inline Vector solve_discounted(const Matrix& kernel, double gamma, const Vector& b) {
    const Matrix lhs = Matrix::Identity(kernel.rows(), kernel.cols()) - gamma * kernel;
    Eigen::FullPivLU<Matrix> lu(lhs);
    if (!lu.isInvertible()) throw NumericError("policy evaluation: singular system (I - gamma P)");
    Vector x = lu.solve(b);
    if (!x.allFinite()) throw NumericError("policy evaluation: non-finite solution");
    return x;
}

// ---- evaluation -----------------------------------------------------------------

/// Solves (I - γP^π) Q = r (or c).
inline ExactQ exact_policy_eval(const CmdpTabularSpec& spec, const TabularPolicy& pi, Signal signal) {
    require_policy(spec, pi, "exact_policy_eval");
    const Matrix K = state_action_kernel(spec, pi);
    const Vector b = to_vector(signal == Signal::reward ? spec.reward : spec.cost);
    const Vector q = solve_discounted(K, spec.gamma, b);
    ExactQ out{spec.n_states, spec.n_actions, to_std(q), signal, 0.0};
    out.residual = (q - (b + spec.gamma * K * q)).cwiseAbs().maxCoeff();
    return out;
}

/// V(s) = Σ_a π(a|s) Q(s,a).
inline std::vector<double> state_values(const ExactQ& q, const TabularPolicy& pi) {
    std::vector<double> v(q.n_states, 0.0);
    for (std::size_t s = 0; s < q.n_states; ++s)
        for (std::size_t a = 0; a < q.n_actions; ++a) v[s] += pi(s, a) * q(s, a);
    return v;
}

/// Σ_s η(s) V(s).
inline double initial_value(const CmdpTabularSpec& spec, const ExactQ& q, const TabularPolicy& pi) {
    const auto v = state_values(q, pi);
    double total = 0.0;
    for (std::size_t s = 0; s < spec.n_states; ++s) total += spec.initial[s] * v[s];
    return total;
}

struct PolicyValue {
    double reward = 0.0;  // R(π)
    double cost = 0.0;    // C(π)
};

inline PolicyValue evaluate(const CmdpTabularSpec& spec, const TabularPolicy& pi) {
    return {initial_value(spec, exact_policy_eval(spec, pi, Signal::reward), pi),
            initial_value(spec, exact_policy_eval(spec, pi, Signal::cost), pi)};
}

// ---- penalized cost fixed point ------------------------------------------------

/// ν/π_β on every pair (0 where ν = 0); SupportError-style DomainError when
/// ν > 0 but π_β = 0.
inline Vector penalty_ratio(const CmdpTabularSpec& spec, const ActionTable& behavior, const ActionTable& nu) {
    if (behavior.p.size() != spec.n_states * spec.n_actions || nu.p.size() != behavior.p.size())
        throw DimensionError("penalty_ratio: table shapes do not match the spec");
    Vector x = Vector::Zero(static_cast<long>(nu.p.size()));
    for (std::size_t i = 0; i < nu.p.size(); ++i) {
        if (nu.p[i] <= 0.0) continue;
        if (behavior.p[i] <= 0.0)
            throw DomainError("support violation: nu > 0 where pi_beta = 0 at (s,a) = (" +
                              std::to_string(i / spec.n_actions) + "," + std::to_string(i % spec.n_actions) + ")");
        x[static_cast<long>(i)] = nu.p[i] / behavior.p[i];
    }
    return x;
}

struct PenalizedFixedPoint {
    ExactQ q;                                // closed form
    std::vector<std::vector<double>> iterates;  // Q^0 = 0, Q^1, ... (only if requested)
};

/// Q̂_c = Q_c^π + (α/2)(I - γP^π)^{-1}(ν/π_β). With `iterations` > 0 also runs
/// Q^{k+1} = c + γP^π Q^k + (α/2) ν/π_β from Q^0 = 0.
inline PenalizedFixedPoint penalized_cost_fixed_point(const CmdpTabularSpec& spec, const TabularPolicy& pi,
                                                      const ActionTable& behavior, const ActionTable& nu,
                                                      double alpha, std::size_t iterations = 0) {
    require_policy(spec, pi, "penalized_cost_fixed_point");
    if (alpha < 0.0) throw DomainError("penalized_cost_fixed_point: alpha must be >= 0");
    const Vector bonus = 0.5 * alpha * penalty_ratio(spec, behavior, nu);
    const Matrix K = state_action_kernel(spec, pi);
    const Vector c = to_vector(spec.cost);
    const Vector q = solve_discounted(K, spec.gamma, c + bonus);
    PenalizedFixedPoint out;
    out.q = {spec.n_states, spec.n_actions, to_std(q), Signal::cost,
             (q - (c + spec.gamma * K * q + bonus)).cwiseAbs().maxCoeff()};
    if (iterations > 0) {
        out.iterates.reserve(iterations + 1);
        Vector x = Vector::Zero(q.size());
        out.iterates.push_back(to_std(x));
        for (std::size_t k = 0; k < iterations; ++k) {
            x = c + spec.gamma * K * x + bonus;
            out.iterates.push_back(to_std(x));
        }
    }
    return out;
}

// ---- OOD action sets ----------------------------------------------------------------

struct OodActionSet {
    double epsilon = 0.0;
    std::size_t n_actions = 0;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (s, a), sorted
    std::vector<bool> member;                               // S*A mask

    bool contains(std::size_t s, std::size_t a) const { return member.at(s * n_actions + a); }
    bool empty() const { return pairs.empty(); }
};

/// Pairs with ν > 0 and π_β/ν ≤ ε.
inline OodActionSet ood_action_set(const ActionTable& behavior, const ActionTable& nu, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw DomainError("ood_action_set: epsilon must lie in (0,1)");
    if (behavior.p.size() != nu.p.size()) throw DimensionError("ood_action_set: table shapes differ");
    OodActionSet set{epsilon, nu.n_actions, {}, std::vector<bool>(nu.p.size(), false)};
    for (std::size_t s = 0; s < nu.n_states; ++s)
        for (std::size_t a = 0; a < nu.n_actions; ++a)
            if (nu(s, a) > 0.0 && behavior(s, a) / nu(s, a) <= epsilon) {
                set.pairs.emplace_back(s, a);
                set.member[s * nu.n_actions + a] = true;
            }
    return set;
}

/// Default ν: at each visited state, uniform over the largest group of
/// supported actions (π_β > 0, taken in increasing π_β) whose members all pass
/// the ratio test π_β·k ≤ ε. States with no such group get no mass.
inline ActionTable default_nu(const ActionTable& behavior, double epsilon) {
    ActionTable nu(behavior.n_states, behavior.n_actions);
    for (std::size_t s = 0; s < behavior.n_states; ++s) {
        std::vector<std::size_t> order;
        for (std::size_t a = 0; a < behavior.n_actions; ++a)
            if (behavior(s, a) > 0.0) order.push_back(a);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t x, std::size_t y) { return behavior(s, x) < behavior(s, y); });
        std::size_t k = 0;
        for (std::size_t j = 1; j <= order.size(); ++j) {
            bool ok = true;
            for (std::size_t i = 0; i < j; ++i) ok = ok && behavior(s, order[i]) * static_cast<double>(j) <= epsilon;
            if (ok) k = j;
        }
        for (std::size_t i = 0; i < k; ++i) nu(s, order[i]) = 1.0 / static_cast<double>(k);
    }
    return nu;
}

struct AlphaBound {
    double alpha_theorem = 0.0;  // 2ε·max_{s,a}(l - Q_c^π)(s,a)·[(I - γP^π)1](s,a), clipped at 0
    double alpha_minimal = 0.0;  // smallest α with Q̂_c ≥ l on all of A_ε
    bool empty_set = false;
    bool theorem_dominates = true;  // α_theorem ≥ α_minimal
    OodActionSet set;
};

inline AlphaBound alpha_bound(const CmdpTabularSpec& spec, const TabularPolicy& pi, const ActionTable& behavior,
                              const ActionTable& nu, double limit, double epsilon) {
    AlphaBound out;
    out.set = ood_action_set(behavior, nu, epsilon);
    if (out.set.empty()) {
        out.empty_set = true;
        return out;
    }
    const ExactQ qc = exact_policy_eval(spec, pi, Signal::cost);
    const Matrix K = state_action_kernel(spec, pi);
    const Vector row_mass = (Matrix::Identity(K.rows(), K.cols()) - spec.gamma * K) * Vector::Ones(K.rows());
    double theorem = 0.0;
    for (std::size_t i = 0; i < qc.q.size(); ++i)
        theorem = std::max(theorem, 2.0 * epsilon * (limit - qc.q[i]) * row_mass[static_cast<long>(i)]);
    const Vector spread = solve_discounted(K, spec.gamma, penalty_ratio(spec, behavior, nu));
    double minimal = 0.0;
    for (auto [s, a] : out.set.pairs) {
        const long i = static_cast<long>(spec.sa(s, a));
        minimal = std::max(minimal, 2.0 * (limit - qc(s, a)) / spread[i]);
    }
    out.alpha_theorem = theorem;
    out.alpha_minimal = minimal;
    out.theorem_dominates = theorem >= minimal;
    return out;
}

// ---- optimal safe policy oracle ----------------------------------------------------

struct OptimalSafePolicy {
    bool feasible = false;
    // π* as a trajectory-level mixture: follow `primary` w.p. weight, else `secondary`.
    std::vector<std::size_t> primary;
    std::vector<std::size_t> secondary;
    double weight = 1.0;
    double value = 0.0;  // V_r* = R(π*)
    double cost = 0.0;   // C(π*)
    double best_deterministic_value = 0.0;
    std::size_t policies_enumerated = 0;
};

inline OptimalSafePolicy optimal_safe_policy(const CmdpTabularSpec& spec, double limit,
                                             std::size_t cap = 1'000'000) {
    const std::size_t S = spec.n_states, A = spec.n_actions;
    double count = 1.0;
    for (std::size_t s = 0; s < S; ++s) count *= static_cast<double>(A);
    if (count > static_cast<double>(cap))
        throw UnsupportedError("optimal_safe_policy: " + std::to_string(A) + "^" + std::to_string(S) +
                               " deterministic policies exceed the cap of " + std::to_string(cap));
    struct Entry {
        std::vector<std::size_t> actions;
        PolicyValue v;
    };
    std::vector<Entry> all;
    std::vector<std::size_t> actions(S, 0);
    for (;;) {
        all.push_back({actions, evaluate(spec, deterministic_policy(actions, A))});
        std::size_t i = 0;
        while (i < S && ++actions[i] == A) actions[i++] = 0;
        if (i == S) break;
    }
    OptimalSafePolicy out;
    out.policies_enumerated = all.size();
    const Entry* best = nullptr;
    for (const auto& e : all)
        if (e.v.cost <= limit && (!best || e.v.reward > best->v.reward)) best = &e;
    if (!best) return out;
    out.feasible = true;
    out.primary = out.secondary = best->actions;
    out.value = out.best_deterministic_value = best->v.reward;
    out.cost = best->v.cost;

    // Pareto frontier (lower cost, higher reward), then the best pair mixture on the boundary.
    std::vector<const Entry*> order;
    for (const auto& e : all) order.push_back(&e);
    std::sort(order.begin(), order.end(), [](const Entry* x, const Entry* y) {
        return x->v.cost != y->v.cost ? x->v.cost < y->v.cost : x->v.reward > y->v.reward;
    });
    std::vector<const Entry*> frontier;
    for (const Entry* e : order)
        if (frontier.empty() || e->v.reward > frontier.back()->v.reward) frontier.push_back(e);
    for (const Entry* f : frontier) {
        if (f->v.cost > limit) continue;
        for (const Entry* u : frontier) {
            if (u->v.cost <= limit || u->v.reward <= f->v.reward) continue;
            const double w = (limit - f->v.cost) / (u->v.cost - f->v.cost);  // weight on u
            const double value = f->v.reward + w * (u->v.reward - f->v.reward);
            if (value > out.value) {
                out.value = value;
                out.cost = f->v.cost + w * (u->v.cost - f->v.cost);
                out.primary = u->actions;
                out.secondary = f->actions;
                out.weight = w;
            }
        }
    }
    return out;
}

// ---- tabular CPQ ----------------------------------------------------------------------

/// Count-based model of a tabular dataset. Unseen pairs carry no transitions.
struct EmpiricalModel {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    std::vector<double> transition;  // P̂(s'|s,a) over non-terminal successors only
    std::vector<double> reward;
    std::vector<double> cost;
    std::vector<std::size_t> counts;  // per (s,a)
    std::vector<double> state_freq;   // μ^β(s): dataset state frequencies
    std::vector<double> pair_freq;    // μ^β(s)π_β(a|s)

    bool seen(std::size_t s, std::size_t a) const { return counts[s * n_actions + a] > 0; }
};

inline EmpiricalModel empirical_model(const CmdpTabularSpec& spec, const datagen::OfflineDataset& ds) {
    const std::size_t S = spec.n_states, A = spec.n_actions;
    EmpiricalModel m{S, A, std::vector<double>(S * A * S, 0.0), std::vector<double>(S * A, 0.0),
                     std::vector<double>(S * A, 0.0), std::vector<std::size_t>(S * A, 0),
                     std::vector<double>(S, 0.0), std::vector<double>(S * A, 0.0)};
    for (const auto& x : ds.samples) {
        const auto s = static_cast<std::size_t>(x.s.at(0)), a = static_cast<std::size_t>(x.a.at(0));
        const auto s2 = static_cast<std::size_t>(x.s2.at(0));
        const std::size_t i = s * A + a;
        ++m.counts[i];
        m.reward[i] += x.r;
        m.cost[i] += x.c;
        if (!x.terminal) m.transition[i * S + s2] += 1.0;
    }
    const double n = static_cast<double>(ds.size());
    for (std::size_t i = 0; i < S * A; ++i) {
        if (m.counts[i] == 0) continue;
        const double k = static_cast<double>(m.counts[i]);
        m.reward[i] /= k;
        m.cost[i] /= k;
        for (std::size_t s2 = 0; s2 < S; ++s2) m.transition[i * S + s2] /= k;
        m.pair_freq[i] = k / n;
        m.state_freq[i / A] += k / n;
    }
    return m;
}

struct TabularCpqConfig {
    double limit = 1.5;
    double epsilon = 0.1;
    double alpha = -1.0;       // < 0: per-iteration α pushing A_ε to l_c
    double lc_factor = 1.5;
    std::size_t max_iterations = 200;
};

struct TheoremTwoReport {
    double v_star = 0.0;        // V_r* from the enumeration oracle (initial distribution)
    double v_hat_r = 0.0;       // Σ_s η(s) Σ_a π(a|s) Q̂_r(s,a)
    double v_hat_c = 0.0;       // same for Q̂_c
    std::vector<double> v_hat_c_states;  // per dataset state (NaN elsewhere)
    double max_dataset_v_hat_c = 0.0;
    double delta = 0.0;         // max over iterations of the μ^β-weighted squared residual
    double g = 0.0;             // min μ^β(s) over non-terminal states π visits
    double G = 0.0;
    double bound = 0.0;
    double gap = 0.0;           // |V_r* - V̂_r|
    bool part1_holds = false;   // V̂_c(s) ≤ l + 1e-6 on dataset states
    bool part2_holds = false;   // gap ≤ bound
};

struct TabularCpqResult {
    TabularPolicy policy;
    std::vector<double> q_r;
    std::vector<double> q_c;
    std::vector<double> alphas;  // α used per iteration
    ActionTable nu;
    std::vector<std::size_t> fallback_states;  // states with no open gate
    std::size_t iterations = 0;
    bool converged = false;
    TheoremTwoReport report;
};

namespace detail {

/// SA-space kernel of the empirical model; optional per-pair successor weights.
inline Matrix empirical_kernel(const EmpiricalModel& m, const TabularPolicy& pi, const std::vector<double>* gate) {
    const std::size_t S = m.n_states, A = m.n_actions, n = S * A;
    Matrix k = Matrix::Zero(static_cast<long>(n), static_cast<long>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s2 = 0; s2 < S; ++s2) {
            const double p = m.transition[i * S + s2];
            if (p == 0.0) continue;
            for (std::size_t a2 = 0; a2 < A; ++a2) {
                const std::size_t j = s2 * A + a2;
                k(static_cast<long>(i), static_cast<long>(j)) += p * pi(s2, a2) * (gate ? (*gate)[j] : 1.0);
            }
        }
    return k;
}

/// Same with the true kernel; terminal successors contribute nothing.
inline Matrix true_kernel(const CmdpTabularSpec& spec, const std::vector<bool>& terminal, const TabularPolicy& pi,
                          const std::vector<double>* gate) {
    const std::size_t S = spec.n_states, A = spec.n_actions, n = S * A;
    Matrix k = Matrix::Zero(static_cast<long>(n), static_cast<long>(n));
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a)
            for (std::size_t s2 = 0; s2 < S; ++s2) {
                const double p = spec.p(s, a, s2);
                if (p == 0.0 || terminal[s2]) continue;
                for (std::size_t a2 = 0; a2 < A; ++a2) {
                    const std::size_t j = s2 * A + a2;
                    k(static_cast<long>(spec.sa(s, a)), static_cast<long>(j)) += p * pi(s2, a2) * (gate ? (*gate)[j] : 1.0);
                }
            }
    return k;
}

}  // namespace detail

/// Policy iteration on the empirical model with the penalized cost critic and
/// the gated reward backup:
///   Q̂_c = ĉ + γP̂^π Q̂_c + (α/2) ν/π_β,
///   Q̂_r = r̂ + γP̂ [π · 1(Q̂_c ≤ l) · Q̂_r],
///   π(s) = argmax over open-gate actions of Q̂_r(s,·).
/// Unseen pairs are pessimistic: Q̂_c = C̄/(1-γ) (gate closed unless l is that
/// large) and Q̂_r = 0.
inline TabularCpqResult tabular_cpq(const cmdp::TabularEnv& env, const datagen::OfflineDataset& ds,
                                    const TabularCpqConfig& cfg) {
    const auto& spec = env.spec;
    const std::size_t S = spec.n_states, A = spec.n_actions, n = S * A;
    const double gamma = spec.gamma;
    if (ds.empty()) throw DomainError("tabular_cpq: empty dataset");
    const EmpiricalModel model = empirical_model(spec, ds);
    const auto pb = datagen::empirical_behavior_policy(ds);
    const ActionTable behavior = from_behavior(pb);

    TabularCpqResult res;
    res.nu = default_nu(behavior, cfg.epsilon);
    const Vector ratio = penalty_ratio(spec, behavior, res.nu);
    const auto ood = ood_action_set(behavior, res.nu, cfg.epsilon);
    const double pessimistic_cost = spec.cost_bound / (1.0 - gamma);

    Vector r_hat = to_vector(model.reward), c_hat = to_vector(model.cost);
    for (std::size_t i = 0; i < n; ++i)
        if (model.counts[i] == 0) c_hat[static_cast<long>(i)] = pessimistic_cost;

    // start from the most frequent dataset action (ties → lowest index)
    std::vector<std::size_t> actions(S, 0);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 1; a < A; ++a)
            if (model.counts[s * A + a] > model.counts[s * A + actions[s]]) actions[s] = a;

    std::vector<double> gate(n, 1.0);
    Vector q_r, q_c;
    std::vector<std::vector<std::size_t>> history{actions};
    double delta = 0.0;

    auto weighted_sq = [&](const Vector& resid) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += model.pair_freq[i] * resid[static_cast<long>(i)] * resid[static_cast<long>(i)];
        return total;
    };

    for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
        const TabularPolicy pi = deterministic_policy(actions, A);
        const Matrix k_plain = detail::empirical_kernel(model, pi, nullptr);

        double alpha = cfg.alpha;
        if (alpha < 0.0) {
            // smallest α lifting every A_ε pair to l_c under the current π
            alpha = 0.0;
            if (!ood.empty()) {
                const Vector base = solve_discounted(k_plain, gamma, c_hat);
                const Vector spread = solve_discounted(k_plain, gamma, ratio);
                for (auto [s, a] : ood.pairs) {
                    const long i = static_cast<long>(s * A + a);
                    alpha = std::max(alpha, 2.0 * (cfg.lc_factor * cfg.limit - base[i]) / spread[i]);
                }
            }
        }
        res.alphas.push_back(alpha);
        q_c = solve_discounted(k_plain, gamma, c_hat + 0.5 * alpha * ratio);
        for (std::size_t i = 0; i < n; ++i) {
            if (model.counts[i] == 0) q_c[static_cast<long>(i)] = pessimistic_cost;
            gate[i] = q_c[static_cast<long>(i)] <= cfg.limit ? 1.0 : 0.0;
        }
        const Matrix k_gated = detail::empirical_kernel(model, pi, &gate);
        q_r = solve_discounted(k_gated, gamma, r_hat);

        // approximation error against the true operators at this iterate
        {
            const Matrix t_gated = detail::true_kernel(spec, env.terminal_states, pi, &gate);
            const Matrix t_plain = detail::true_kernel(spec, env.terminal_states, pi, nullptr);
            const Vector r_true = to_vector(spec.reward);
            const Vector e_r = q_r - (r_true + gamma * t_gated * q_r);
            const Vector q_eval = solve_discounted(k_plain, gamma, r_hat);
            const Vector e_eval = q_eval - (r_true + gamma * t_plain * q_eval);
            delta = std::max({delta, weighted_sq(e_r), weighted_sq(e_eval)});
        }

        std::vector<std::size_t> next(S);
        for (std::size_t s = 0; s < S; ++s) {
            std::optional<std::size_t> best;
            for (std::size_t a = 0; a < A; ++a) {
                const std::size_t i = s * A + a;
                if (gate[i] == 0.0) continue;
                if (!best || q_r[static_cast<long>(i)] > q_r[static_cast<long>(s * A + *best)] + 1e-12) best = a;
            }
            if (!best) {
                std::size_t m = 0;
                for (std::size_t a = 1; a < A; ++a)
                    if (q_c[static_cast<long>(s * A + a)] < q_c[static_cast<long>(s * A + m)]) m = a;
                best = m;
            }
            // keep the current action on ties so the iteration settles
            const std::size_t cur = s * A + actions[s];
            if (gate[cur] == 1.0 && q_r[static_cast<long>(cur)] >= q_r[static_cast<long>(s * A + *best)] - 1e-12)
                best = actions[s];
            next[s] = *best;
        }
        res.iterations = it + 1;
        if (next == actions) {
            res.converged = true;
            break;
        }
        if (std::find(history.begin(), history.end(), next) != history.end()) break;  // cycle
        history.push_back(next);
        actions = next;
    }

    res.policy = deterministic_policy(actions, A);
    res.q_r = to_std(q_r);
    res.q_c = to_std(q_c);
    for (std::size_t s = 0; s < S; ++s) {
        if (!pb.visited[s]) continue;
        bool open = false;
        for (std::size_t a = 0; a < A; ++a) open = open || gate[s * A + a] == 1.0;
        if (!open) res.fallback_states.push_back(s);
    }

    // Theorem 2 diagnostics
    auto& rep = res.report;
    const auto opt = optimal_safe_policy(spec, cfg.limit);
    rep.v_star = opt.value;
    rep.v_hat_c_states.assign(S, std::numeric_limits<double>::quiet_NaN());
    rep.part1_holds = true;
    for (std::size_t s = 0; s < S; ++s) {
        const double vr = q_r[static_cast<long>(s * A + actions[s])];
        const double vc = q_c[static_cast<long>(s * A + actions[s])];
        rep.v_hat_r += spec.initial[s] * vr;
        rep.v_hat_c += spec.initial[s] * vc;
        if (!pb.visited[s]) continue;
        rep.v_hat_c_states[s] = vc;
        rep.max_dataset_v_hat_c = std::max(rep.max_dataset_v_hat_c, vc);
        rep.part1_holds = rep.part1_holds && vc <= cfg.limit + 1e-6;
    }
    // states the final policy reaches (terminal absorbing states excluded)
    const Matrix k_true = detail::true_kernel(spec, env.terminal_states, res.policy, nullptr);
    Vector occ = Vector::Zero(static_cast<long>(n));
    for (std::size_t s = 0; s < S; ++s) occ[static_cast<long>(s * A + actions[s])] = spec.initial[s];
    occ = solve_discounted(k_true.transpose(), gamma, occ);
    rep.g = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < S; ++s) {
        if (env.terminal_states[s]) continue;
        double mass = 0.0;
        for (std::size_t a = 0; a < A; ++a) mass += occ[static_cast<long>(s * A + a)];
        if (mass > 1e-15) rep.g = std::min(rep.g, model.state_freq[s]);
    }
    rep.delta = delta;
    rep.G = std::sqrt((1.0 - gamma) / gamma) + std::sqrt(cfg.epsilon / rep.g);
    rep.bound = 4.0 * gamma / std::pow(1.0 - gamma, 3) * rep.G * std::sqrt(delta);
    rep.gap = std::abs(rep.v_star - rep.v_hat_r);
    rep.part2_holds = rep.gap <= rep.bound;
    return res;
}

}  // namespace cpqlab::tabular
