#pragma once

// Exact checks of the penalized cost critic and of tabular CPQ. Shared by the
// `verify-theorems` command and the acceptance suite.

#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "cpqlab/cmdp.hpp"
#include "cpqlab/config.hpp"
#include "cpqlab/datagen.hpp"
#include "cpqlab/tabular.hpp"

namespace cpqlab::verify {

struct TheoremSetup {
    std::string env_id = "chain6";
    double epsilon = 0.1;
    double limit = 1.5;
    double alpha = -1.0;  // < 0: alpha_minimal for the penalty checks, automatic in tabular CPQ
    std::uint64_t seed = 9;
    std::size_t dataset_size = 100000;
    // A 50/50 chain dataset leaves no pair with ratio <= 0.1, so the penalty
    // checks use a mostly-safe dataset. Tabular CPQ uses the even mix.
    double penalty_mix_ratio = 0.95;
    double cpq_mix_ratio = 0.5;
    std::size_t iterations = 10000;

    void validate() const {
        if (!(epsilon > 0.0 && epsilon < 1.0)) throw DomainError("verify: epsilon must lie in (0,1)");
        if (!(limit > 0.0)) throw DomainError("verify: limit must be > 0");
        if (dataset_size == 0) throw DomainError("verify: dataset size must be > 0");
        if (iterations == 0) throw DomainError("verify: iterations must be > 0");
    }
};

inline TheoremSetup theorem_setup_from(const KeyValueConfig& kv, TheoremSetup s = {}) {
    s.env_id = kv.get_string("env", s.env_id);
    s.epsilon = kv.get_double("epsilon", s.epsilon);
    s.limit = kv.get_double("limit", s.limit);
    s.alpha = kv.get_double("alpha", s.alpha);
    s.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long>(s.seed)));
    s.dataset_size = static_cast<std::size_t>(kv.get_int("dataset.size", static_cast<long>(s.dataset_size)));
    s.penalty_mix_ratio = kv.get_double("verify.penalty_mix_ratio", s.penalty_mix_ratio);
    s.cpq_mix_ratio = kv.get_double("verify.cpq_mix_ratio", s.cpq_mix_ratio);
    s.iterations = static_cast<std::size_t>(kv.get_int("verify.iterations", static_cast<long>(s.iterations)));
    s.validate();
    return s;
}

struct PenaltyCheck {
    double alpha_minimal = 0.0;
    double alpha_theorem = 0.0;
    bool theorem_dominates = false;
    double alpha_used = 0.0;
    std::size_t ood_pairs = 0;
    double min_q_at_alpha = 0.0;     // min over A_eps of the penalized Q_c at alpha_used
    double min_q_below_alpha = 0.0;  // same at 0.99 alpha_minimal
    bool lifted = false;             // min_q_at_alpha >= l - 1e-8
    bool necessary = false;          // min_q_below_alpha < l; vacuous when alpha_minimal = 0
    double sufficiency_seconds = 0.0;
    // recursion vs closed form at alpha_used
    double sup_error = 0.0;
    bool monotone = true;  // nondecreasing where nu > 0
    double recursion_seconds = 0.0;

    bool sufficiency_pass() const { return ood_pairs > 0 && lifted && necessary; }
    bool recursion_pass() const { return sup_error <= 1e-6 && monotone; }
};

/// Always-cautious policy (action 0 everywhere), behavior from the dataset, default nu.
inline PenaltyCheck check_penalty(const TheoremSetup& st) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const auto env = cmdp::make_env(st.env_id);
    const auto& sp = cmdp::tabular_spec(env);
    const auto ds = datagen::generate_dataset(env, st.penalty_mix_ratio, st.dataset_size, st.seed);
    const auto pb = tabular::from_behavior(datagen::empirical_behavior_policy(ds));
    const auto nu = tabular::default_nu(pb, st.epsilon);
    const auto pi = tabular::deterministic_policy(std::vector<std::size_t>(sp.n_states, 0), sp.n_actions);
    const auto b = tabular::alpha_bound(sp, pi, pb, nu, st.limit, st.epsilon);

    PenaltyCheck out;
    out.alpha_minimal = b.alpha_minimal;
    out.alpha_theorem = b.alpha_theorem;
    out.theorem_dominates = b.theorem_dominates;
    out.alpha_used = st.alpha < 0.0 ? b.alpha_minimal : st.alpha;
    out.ood_pairs = b.set.pairs.size();
    auto lowest = [&](const tabular::ExactQ& q) {
        double m = std::numeric_limits<double>::infinity();
        for (auto [s, a] : b.set.pairs) m = std::min(m, q(s, a));
        return m;
    };
    out.min_q_at_alpha = lowest(tabular::penalized_cost_fixed_point(sp, pi, pb, nu, out.alpha_used).q);
    out.min_q_below_alpha = lowest(tabular::penalized_cost_fixed_point(sp, pi, pb, nu, 0.99 * b.alpha_minimal).q);
    out.lifted = out.min_q_at_alpha >= st.limit - 1e-8;
    out.necessary = b.alpha_minimal == 0.0 || out.min_q_below_alpha < st.limit;
    const auto t1 = clock::now();
    out.sufficiency_seconds = std::chrono::duration<double>(t1 - t0).count();

    const auto fp = tabular::penalized_cost_fixed_point(sp, pi, pb, nu, out.alpha_used, st.iterations);
    for (std::size_t i = 0; i < fp.q.q.size(); ++i)
        out.sup_error = std::max(out.sup_error, std::abs(fp.iterates.back()[i] - fp.q.q[i]));
    for (std::size_t k = 1; k < fp.iterates.size(); ++k)
        for (std::size_t i = 0; i < nu.p.size(); ++i)
            if (nu.p[i] > 0.0 && fp.iterates[k][i] < fp.iterates[k - 1][i]) out.monotone = false;
    // the recursion timing includes the shared setup
    out.recursion_seconds = std::chrono::duration<double>(clock::now() - t1).count() + out.sufficiency_seconds;
    return out;
}

struct TabularCpqCheck {
    tabular::TabularCpqResult result;
    tabular::PolicyValue value;  // exact R, C of the learned policy
    double limit = 0.0;
    bool part1() const { return result.report.part1_holds; }
    bool part2() const { return result.report.part2_holds; }
    double looseness() const {
        return result.report.gap > 0.0 ? result.report.bound / result.report.gap
                                       : std::numeric_limits<double>::infinity();
    }
};

inline datagen::OfflineDataset cpq_dataset(const TheoremSetup& st) {
    return datagen::generate_dataset(cmdp::make_env(st.env_id), st.cpq_mix_ratio, st.dataset_size, st.seed);
}

inline TabularCpqCheck check_tabular_cpq(const TheoremSetup& st, const datagen::OfflineDataset& ds) {
    const auto env = cmdp::make_env(st.env_id);
    tabular::TabularCpqConfig cfg;
    cfg.limit = st.limit;
    cfg.epsilon = st.epsilon;
    cfg.alpha = st.alpha;
    const auto& tenv = std::get<cmdp::TabularEnv>(env);
    TabularCpqCheck out{tabular::tabular_cpq(tenv, ds, cfg), {}, st.limit};
    out.value = tabular::evaluate(tenv.spec, out.result.policy);
    return out;
}

struct TheoremReport {
    TheoremSetup setup;
    PenaltyCheck penalty;
    TabularCpqCheck cpq;
    bool all_hold() const {
        return penalty.sufficiency_pass() && penalty.recursion_pass() && cpq.part1() && cpq.part2();
    }
};

inline TheoremReport verify_theorems(const TheoremSetup& st) {
    st.validate();
    const auto env = cmdp::make_env(st.env_id);
    if (!cmdp::is_tabular(env)) throw UnsupportedError("verify: environment '" + st.env_id + "' is not tabular");
    TheoremReport r{st, check_penalty(st), {}};
    r.cpq = check_tabular_cpq(st, cpq_dataset(st));
    return r;
}

/// `check,quantity,value` rows.
inline void write_report_csv(std::ostream& os, const TheoremReport& r) {
    const auto& p = r.penalty;
    const auto& t = r.cpq.result.report;
    auto row = [&](const char* check, const char* key, double v) {
        os << check << ',' << key << ',' << KeyValueConfig::format_double(v) << '\n';
    };
    os << "check,quantity,value\n";
    row("sufficiency", "alpha_minimal", p.alpha_minimal);
    row("sufficiency", "alpha_theorem", p.alpha_theorem);
    row("sufficiency", "theorem_dominates", p.theorem_dominates);
    row("sufficiency", "alpha_used", p.alpha_used);
    row("sufficiency", "ood_pairs", static_cast<double>(p.ood_pairs));
    row("sufficiency", "min_q_at_alpha", p.min_q_at_alpha);
    row("sufficiency", "min_q_below_minimal", p.min_q_below_alpha);
    row("sufficiency", "holds", p.sufficiency_pass());
    row("recursion", "iterations", static_cast<double>(r.setup.iterations));
    row("recursion", "sup_error", p.sup_error);
    row("recursion", "monotone", p.monotone);
    row("recursion", "holds", p.recursion_pass());
    row("cost_bound", "max_v_hat_c", t.max_dataset_v_hat_c);
    row("cost_bound", "limit", r.setup.limit);
    row("cost_bound", "holds", r.cpq.part1());
    row("value_gap", "v_star", t.v_star);
    row("value_gap", "v_hat_r", t.v_hat_r);
    row("value_gap", "gap", t.gap);
    row("value_gap", "delta", t.delta);
    row("value_gap", "bound", t.bound);
    row("value_gap", "looseness", r.cpq.looseness());
    row("value_gap", "holds", r.cpq.part2());
    row("policy", "exact_return", r.cpq.value.reward);
    row("policy", "exact_cost", r.cpq.value.cost);
    row("policy", "iterations", static_cast<double>(r.cpq.result.iterations));
}

inline void write_summary(std::ostream& os, const TheoremReport& r) {
    const auto& p = r.penalty;
    const auto& t = r.cpq.result.report;
    auto verdict = [](bool ok) { return ok ? "holds" : "FAILS"; };
    os << "env " << r.setup.env_id << ", eps " << r.setup.epsilon << ", l " << r.setup.limit << ", seed "
       << r.setup.seed << "\n";
    os << "  penalty lift:   " << verdict(p.sufficiency_pass()) << " (alpha_minimal " << p.alpha_minimal
       << ", literal alpha " << p.alpha_theorem << (p.theorem_dominates ? " dominates" : " does not dominate")
       << ", " << p.ood_pairs << " OOD pairs, min Q " << p.min_q_at_alpha << ")\n";
    os << "  recursion:      " << verdict(p.recursion_pass()) << " (sup error " << p.sup_error << ", "
       << (p.monotone ? "monotone" : "not monotone") << ")\n";
    os << "  cost bound:     " << verdict(r.cpq.part1()) << " (max V_c " << t.max_dataset_v_hat_c << ")\n";
    os << "  value gap:      " << verdict(r.cpq.part2()) << " (gap " << t.gap << " <= bound " << t.bound
       << ", looseness " << r.cpq.looseness() << "x)\n";
}

}  // namespace cpqlab::verify
