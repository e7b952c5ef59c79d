#pragma once

// Comparison methods: behavior cloning on safe-tagged data, and a naive
// offline actor-critic with two Lagrange multipliers (expected cost and an
// MMD divergence to the data).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "cpqlab/actor.hpp"
#include "cpqlab/config.hpp"
#include "cpqlab/cpq.hpp"
#include "cpqlab/datagen.hpp"
#include "cpqlab/io/records.hpp"
#include "cpqlab/tabular.hpp"

namespace cpqlab::baselines {

using datagen::Batch;
using numerics::AdamState;
using numerics::BoundMlp;
using numerics::MlpGrads;
using numerics::MlpParams;
using numerics::Rng;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

// ---- BC-Safe ------------------------------------------------------------------------

struct BcConfig {
    std::vector<std::size_t> hidden{300, 300};
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t steps = 20000;
    std::size_t log_interval = 100;
};

inline BcConfig bc_config_from(const KeyValueConfig& cfg, BcConfig c = {}) {
    c.hidden = cpq::parse_widths(cfg, "bc.hidden", c.hidden);
    c.learning_rate = cfg.get_double("bc.learning_rate", c.learning_rate);
    c.batch_size = static_cast<std::size_t>(cfg.get_int("bc.batch_size", static_cast<long>(c.batch_size)));
    c.steps = static_cast<std::size_t>(cfg.get_int("bc.steps", static_cast<long>(c.steps)));
    c.log_interval = static_cast<std::size_t>(cfg.get_int("bc.log_interval", static_cast<long>(c.log_interval)));
    if (!(c.learning_rate > 0.0) || c.batch_size < 1 || c.log_interval < 1) throw DomainError("bc: invalid config");
    return c;
}

struct BcPolicy {
    MlpParams actor;
    std::vector<std::pair<std::size_t, double>> trace;  // (step, loss)
};

/// Actions are kept strictly inside (-1, 1) before atanh.
inline constexpr double kActionClip = 1.0 - 1e-6;

/// Negative log-likelihood of tanh-Gaussian actions, computed in the
/// pre-squash space u = atanh(a) and dropping terms constant in the
/// parameters: mean over rows of sum_j ½((u - mu)/sigma)^2 + log sigma.
inline Var bc_loss_on_tape(Tape& tape, const BoundMlp& net, const Tensor& states, const Tensor& actions) {
    const std::size_t ad = actions.cols();
    Tensor u = actions;
    for (double& v : u.data) v = std::atanh(std::clamp(v, -kActionClip, kActionClip));
    Var h = net(tape.constant(states));
    Var mu = numerics::slice_cols(h, 0, ad);
    Var log_std = numerics::clamp(numerics::slice_cols(h, ad, 2 * ad), numerics::kLogStdMin, numerics::kLogStdMax);
    Var z = numerics::mul(numerics::sub(tape.constant(u), mu), numerics::exp(numerics::scale(log_std, -1.0)));
    Var per = numerics::add(numerics::scale(numerics::square(z), 0.5), log_std);
    return numerics::scale(numerics::sum(per), 1.0 / static_cast<double>(states.rows()));
}

inline double bc_loss(const MlpParams& actor, const Tensor& states, const Tensor& actions) {
    Tape tape;
    BoundMlp net(tape, actor, false);
    return bc_loss_on_tape(tape, net, states, actions).item();
}

inline std::pair<double, MlpGrads> bc_gradients(const MlpParams& actor, const Tensor& states, const Tensor& actions) {
    return numerics::compute_gradients(
        actor, [&](Tape& tape, const BoundMlp& net) { return bc_loss_on_tape(tape, net, states, actions); });
}

/// Called with the dataset indices of every batch (instrumentation).
using BatchObserver = std::function<void(const std::vector<std::size_t>&)>;

/// Maximum likelihood on the safe-tagged (s, a) pairs only.
inline BcPolicy bc_safe_train(const datagen::TrainingArrays& data, const BcConfig& cfg, std::uint64_t seed,
                              const BatchObserver& observer = {},
                              const std::function<void(std::size_t, const MlpParams&, double)>& hook = {}) {
    std::vector<std::size_t> safe;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data.source[i] == datagen::SourceTag::safe) safe.push_back(i);
    if (safe.empty()) throw DomainError("bc_safe_train: dataset has no safe-tagged samples");
    Rng rng(seed);
    Rng init = rng.split();
    BcPolicy out{actor::make_actor(data.s.cols(), data.a.cols(), cfg.hidden, init), {}};
    auto opt = numerics::make_adam(out.actor, cfg.learning_rate);
    const std::size_t batch = std::min(cfg.batch_size, safe.size());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto idx = datagen::batch_indices(safe.size(), batch, rng);
        for (auto& i : idx) i = safe[i];
        if (observer) observer(idx);
        const Tensor s = numerics::select_rows(data.s, idx), a = numerics::select_rows(data.a, idx);
        double loss = 0.0;
        MlpGrads g;
        try {
            std::tie(loss, g) = bc_gradients(out.actor, s, a);
        } catch (const NumericError& e) {
            throw TrainingError(step, std::string("bc: ") + e.what());
        }
        if (!std::isfinite(loss)) throw TrainingError(step, "bc: non-finite loss");
        numerics::adam_step(out.actor, g, opt);
        if (step % cfg.log_interval == 0 || step + 1 == cfg.steps) out.trace.emplace_back(step, loss);
        if (hook) hook(step + 1, out.actor, loss);
    }
    return out;
}

// ---- MMD ------------------------------------------------------------------------------

/// Median of the pairwise squared distances between distinct rows of the
/// pooled sample; the kernel is exp(-d^2 / (2 h^2)) with h^2 = median / 2,
/// floored so identical samples keep a usable width.
inline double median_bandwidth_sq(const Tensor& x, const Tensor& y) {
    if (x.cols() != y.cols()) throw DimensionError("mmd: samples have different widths");
    const Tensor pooled = numerics::vcat(x, y);
    std::vector<double> d;
    for (std::size_t i = 0; i < pooled.rows(); ++i)
        for (std::size_t j = i + 1; j < pooled.rows(); ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < pooled.cols(); ++c) {
                const double t = pooled(i, c) - pooled(j, c);
                s += t * t;
            }
            d.push_back(s);
        }
    if (d.empty()) return 1.0;
    std::nth_element(d.begin(), d.begin() + static_cast<long>(d.size() / 2), d.end());
    return std::max(d[d.size() / 2] / 2.0, 1e-6);
}

namespace detail {
inline Var kernel_mean(Var a, Var b, double h2) {
    return numerics::mean(numerics::exp(numerics::scale(numerics::pairwise_sq_dist(a, b), -0.5 / h2)));
}
}  // namespace detail

/// Biased (V-statistic) squared MMD with a Gaussian kernel of squared width h2.
inline Var mmd_sq_on_tape(Var x, Var y, double h2) {
    return numerics::sub(numerics::add(detail::kernel_mean(x, x, h2), detail::kernel_mean(y, y, h2)),
                         numerics::scale(detail::kernel_mean(x, y, h2), 2.0));
}

inline double mmd_sq(const Tensor& x, const Tensor& y, double h2) {
    Tape tape;
    return mmd_sq_on_tape(tape.constant(x), tape.constant(y), h2).item();
}

inline double mmd_sq(const Tensor& x, const Tensor& y) { return mmd_sq(x, y, median_bandwidth_sq(x, y)); }

// ---- naive dual actor-critic ------------------------------------------------------

struct NaiveConfig {
    double gamma = 0.995;
    std::size_t batch_size = 256;
    double critic_lr = 1e-3;
    double actor_lr = 1e-5;
    double tau = 0.005;
    double limit = 10.0;
    double xi = 0.05;
    double lambda_lr = 1e-3;
    double lambda1_init = 0.0;
    double lambda2_init = 0.0;
    double lambda_max = 1e6;
    bool fixed_lambdas = false;
    std::size_t steps = 50000;
    std::vector<std::size_t> actor_hidden{300, 300};
    std::vector<std::size_t> critic_hidden{400, 400};
    double actor_init_scale = 1.0;
    double actor_init_log_std = 0.0;
    std::size_t log_interval = 100;

    void validate() const {
        if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("naive: gamma must lie in [0,1)");
        if (!(critic_lr > 0.0 && actor_lr > 0.0 && lambda_lr > 0.0)) throw DomainError("naive: learning rates must be > 0");
        if (!(lambda1_init >= 0.0 && lambda2_init >= 0.0)) throw DomainError("naive: multipliers must start >= 0");
        if (!(xi >= 0.0)) throw DomainError("naive: xi must be >= 0");
        if (batch_size < 1 || log_interval < 1) throw DomainError("naive: invalid batch size or log interval");
    }
};

inline NaiveConfig naive_config_from(const KeyValueConfig& cfg, NaiveConfig c = {}) {
    c.gamma = cfg.get_double("naive.gamma", c.gamma);
    c.batch_size = static_cast<std::size_t>(cfg.get_int("naive.batch_size", static_cast<long>(c.batch_size)));
    c.critic_lr = cfg.get_double("naive.critic_lr", c.critic_lr);
    c.actor_lr = cfg.get_double("naive.actor_lr", c.actor_lr);
    c.tau = cfg.get_double("naive.tau", c.tau);
    c.limit = cfg.get_double("naive.limit", c.limit);
    c.xi = cfg.get_double("naive.xi", c.xi);
    c.lambda_lr = cfg.get_double("naive.lambda_lr", c.lambda_lr);
    c.lambda1_init = cfg.get_double("naive.lambda1_init", c.lambda1_init);
    c.lambda2_init = cfg.get_double("naive.lambda2_init", c.lambda2_init);
    c.lambda_max = cfg.get_double("naive.lambda_max", c.lambda_max);
    c.fixed_lambdas = cfg.get_bool("naive.fixed_lambdas", c.fixed_lambdas);
    c.steps = static_cast<std::size_t>(cfg.get_int("naive.steps", static_cast<long>(c.steps)));
    c.actor_hidden = cpq::parse_widths(cfg, "naive.actor_hidden", c.actor_hidden);
    c.critic_hidden = cpq::parse_widths(cfg, "naive.critic_hidden", c.critic_hidden);
    c.actor_init_scale = cfg.get_double("naive.actor_init_scale", c.actor_init_scale);
    c.actor_init_log_std = cfg.get_double("naive.actor_init_log_std", c.actor_init_log_std);
    c.log_interval = static_cast<std::size_t>(cfg.get_int("naive.log_interval", static_cast<long>(c.log_interval)));
    c.validate();
    return c;
}

struct NaiveDualAgent {
    MlpParams qr, qr_target, qc, qc_target, actor;
    AdamState qr_opt, qc_opt, actor_opt;
    double lambda1 = 0.0;  // expected cost <= limit
    double lambda2 = 0.0;  // MMD <= xi
    double xi = 0.05;
    double limit = 10.0;
    double gamma = 0.995;
    double tau = 0.005;
    double terminal_value = 0.0;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;

    friend bool operator==(const NaiveDualAgent&, const NaiveDualAgent&) = default;
};

inline NaiveDualAgent make_naive_agent(std::size_t sd, std::size_t ad, const NaiveConfig& cfg, Rng& rng) {
    cfg.validate();
    NaiveDualAgent a;
    a.state_dim = sd;
    a.action_dim = ad;
    a.qr = cpq::make_critic(sd, ad, cfg.critic_hidden, rng);
    a.qc = cpq::make_critic(sd, ad, cfg.critic_hidden, rng);
    a.actor = actor::make_actor(sd, ad, cfg.actor_hidden, rng, cfg.actor_init_scale, cfg.actor_init_log_std);
    a.qr_target = a.qr;
    a.qc_target = a.qc;
    a.qr_opt = numerics::make_adam(a.qr, cfg.critic_lr);
    a.qc_opt = numerics::make_adam(a.qc, cfg.critic_lr);
    a.actor_opt = numerics::make_adam(a.actor, cfg.actor_lr);
    a.lambda1 = cfg.lambda1_init;
    a.lambda2 = cfg.lambda2_init;
    a.xi = cfg.xi;
    a.limit = cfg.limit;
    a.gamma = cfg.gamma;
    a.tau = cfg.tau;
    return a;
}

/// Plain empirical backup signal + gamma * Q_target(s', a'); at true terminals
/// the bootstrap is `terminal_value`.
inline Tensor td_targets(const MlpParams& q_target, const Tensor& signal, const Batch& b, const Tensor& next_actions,
                         double gamma, double terminal_value) {
    const auto qn = cpq::critic_values(q_target, b.s2, next_actions);
    Tensor y = signal;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += gamma * (b.done.data[i] > 0.5 ? terminal_value : qn[i]);
    return y;
}

struct NaiveActorVars {
    Var total;
    Var qr_mean;
    Var qc_mean;
    Var mmd;
};

/// -mean Q_r(s, a_theta) + lambda1 mean Q_c(s, a_theta) + lambda2 MMD^2 between
/// {(s, a_theta(s))} and {(s, a_data)} over the batch.
inline NaiveActorVars naive_actor_loss_on_tape(Tape& tape, const BoundMlp& net, const NaiveDualAgent& ag,
                                               const Tensor& states, const Tensor& data_actions, const Tensor& noise,
                                               double h2) {
    Var s = tape.constant(states);
    Var a = actor::rsample(net, s, ag.action_dim, noise);
    Var sa = numerics::concat_cols(s, a);
    BoundMlp qr(tape, ag.qr, false), qc(tape, ag.qc, false);
    NaiveActorVars v;
    v.qr_mean = numerics::mean(qr(sa));
    v.qc_mean = numerics::mean(qc(sa));
    v.mmd = mmd_sq_on_tape(sa, tape.constant(numerics::hcat(states, data_actions)), h2);
    v.total = numerics::add(numerics::sub(numerics::scale(v.qc_mean, ag.lambda1), v.qr_mean),
                            numerics::scale(v.mmd, ag.lambda2));
    return v;
}

struct NaiveActorLoss {
    double total = 0.0;
    double qr_mean = 0.0;
    double qc_mean = 0.0;
    double mmd = 0.0;
};

/// Kernel width for the actor's MMD term: median heuristic on the policy's
/// mean actions and the data at the batch states (held fixed for the step).
inline double naive_bandwidth(const NaiveDualAgent& ag, const Tensor& states, const Tensor& data_actions) {
    return median_bandwidth_sq(numerics::hcat(states, actor::mean_action(ag.actor, states)),
                               numerics::hcat(states, data_actions));
}

inline NaiveActorLoss naive_actor_loss(const NaiveDualAgent& ag, const Tensor& states, const Tensor& data_actions,
                                       const Tensor& noise, double h2) {
    Tape tape;
    BoundMlp net(tape, ag.actor, false);
    auto v = naive_actor_loss_on_tape(tape, net, ag, states, data_actions, noise, h2);
    return {v.total.item(), v.qr_mean.item(), v.qc_mean.item(), v.mmd.item()};
}

inline std::pair<NaiveActorLoss, MlpGrads> naive_actor_gradients(const NaiveDualAgent& ag, const Tensor& states,
                                                                 const Tensor& data_actions, const Tensor& noise,
                                                                 double h2) {
    Tape tape;
    BoundMlp net(tape, ag.actor, true);
    auto v = naive_actor_loss_on_tape(tape, net, ag, states, data_actions, noise, h2);
    tape.backward(v.total);
    return {{v.total.item(), v.qr_mean.item(), v.qc_mean.item(), v.mmd.item()}, net.grads()};
}

struct NaiveStepMetrics {
    std::size_t step = 0;
    double reward_loss = 0.0;
    double cost_loss = 0.0;
    double actor_loss = 0.0;
    double qc_policy = 0.0;
    double mmd = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
};

inline const std::vector<std::string>& naive_metric_columns() {
    static const std::vector<std::string> cols{"step", "reward_loss", "cost_loss", "actor_loss",
                                               "qc_policy", "mmd", "lambda1", "lambda2"};
    return cols;
}

inline std::vector<double> naive_metric_values(const NaiveStepMetrics& m) {
    return {static_cast<double>(m.step), m.reward_loss, m.cost_loss, m.actor_loss, m.qc_policy, m.mmd, m.lambda1,
            m.lambda2};
}

struct NaiveTrainResult {
    NaiveDualAgent agent;
    std::vector<NaiveStepMetrics> trace;
};

inline NaiveStepMetrics naive_step(NaiveDualAgent& ag, const Batch& b, const NaiveConfig& cfg, Rng& rng) {
    NaiveStepMetrics m;
    const Tensor a2 = actor::sample(ag.actor, b.s2, actor::standard_normal(b.size(), ag.action_dim, rng));
    const Tensor yr = td_targets(ag.qr_target, b.r, b, a2, ag.gamma, ag.terminal_value);
    const Tensor yc = td_targets(ag.qc_target, b.c, b, a2, ag.gamma, 0.0);
    auto [lr, gr] = cpq::reward_critic_gradients(ag.qr, b, yr);
    auto [lc, gc] = cpq::reward_critic_gradients(ag.qc, b, yc);
    numerics::adam_step(ag.qr, gr, ag.qr_opt);
    numerics::adam_step(ag.qc, gc, ag.qc_opt);
    m.reward_loss = lr;
    m.cost_loss = lc;

    const double h2 = naive_bandwidth(ag, b.s, b.a);
    auto [al, ga] = naive_actor_gradients(ag, b.s, b.a, actor::standard_normal(b.size(), ag.action_dim, rng), h2);
    numerics::adam_step(ag.actor, ga, ag.actor_opt);
    m.actor_loss = al.total;
    m.qc_policy = al.qc_mean;
    m.mmd = al.mmd;
    if (!cfg.fixed_lambdas) {
        ag.lambda1 = std::clamp(ag.lambda1 + cfg.lambda_lr * (al.qc_mean - ag.limit), 0.0, cfg.lambda_max);
        ag.lambda2 = std::clamp(ag.lambda2 + cfg.lambda_lr * (al.mmd - ag.xi), 0.0, cfg.lambda_max);
    }
    m.lambda1 = ag.lambda1;
    m.lambda2 = ag.lambda2;
    ag.qr_target = numerics::soft_update(ag.qr_target, ag.qr, ag.tau);
    ag.qc_target = numerics::soft_update(ag.qc_target, ag.qc, ag.tau);
    return m;
}

inline NaiveTrainResult naive_dual_train(const datagen::TrainingArrays& data, const NaiveConfig& cfg,
                                         std::uint64_t seed, double reward_shift = 0.0,
                                         const std::function<void(std::size_t, const NaiveDualAgent&, const NaiveStepMetrics&)>& hook = {}) {
    cfg.validate();
    if (data.size() == 0) throw DomainError("naive_dual_train: empty dataset");
    Rng rng(seed);
    Rng init = rng.split();
    NaiveTrainResult res{make_naive_agent(data.s.cols(), data.a.cols(), cfg, init), {}};
    auto& ag = res.agent;
    ag.terminal_value = reward_shift / (1.0 - cfg.gamma);
    const std::size_t batch = std::min(cfg.batch_size, data.size());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        NaiveStepMetrics m;
        try {
            m = naive_step(ag, datagen::gather(data, datagen::batch_indices(data.size(), batch, rng)), cfg, rng);
        } catch (const NumericError& e) {
            throw TrainingError(step, std::string("naive: ") + e.what());
        }
        m.step = step;
        for (double v : naive_metric_values(m))
            if (!std::isfinite(v)) throw TrainingError(step, "naive: non-finite training metric");
        if (step % cfg.log_interval == 0 || step + 1 == cfg.steps) res.trace.push_back(m);
        if (hook) hook(step + 1, ag, m);
    }
    return res;
}

// ---- tabular read-out -------------------------------------------------------------

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Exact action distribution an actor induces on a tabular environment:
/// the probability that the (1-d) squashed action lands in each bin, or the
/// bin of tanh(mean) for the deterministic head.
inline tabular::ActionTable tabular_policy_from_actor(const MlpParams& actor, const cmdp::Env& env,
                                                      bool stochastic = false) {
    const auto& spec = cmdp::tabular_spec(env);
    if (cmdp::action_dim(env) != 1) throw UnsupportedError("tabular_policy_from_actor: needs a 1-d action");
    const std::size_t S = spec.n_states, A = spec.n_actions;
    tabular::ActionTable pi(S, A, 0.0);
    for (std::size_t s = 0; s < S; ++s) {
        const auto head = actor::forward(actor, Tensor::row(cmdp::state_features(env, {static_cast<double>(s)})));
        const double mu = head.mean.data[0];
        const double sigma = std::exp(std::clamp(head.log_std.data[0], numerics::kLogStdMin, numerics::kLogStdMax));
        if (!stochastic) {
            pi.p[s * A + static_cast<std::size_t>(cmdp::decode_action(env, {std::tanh(mu)})[0])] = 1.0;
            continue;
        }
        // bin a covers tanh(u) in [-1 + 2a/A, -1 + 2(a+1)/A)
        double prev = 0.0;
        for (std::size_t a = 0; a < A; ++a) {
            const double edge = -1.0 + 2.0 * static_cast<double>(a + 1) / static_cast<double>(A);
            const double cdf = a + 1 == A ? 1.0 : standard_normal_cdf((std::atanh(edge) - mu) / sigma);
            pi.p[s * A + a] = cdf - prev;
            prev = cdf;
        }
    }
    return pi;
}

// ---- persistence --------------------------------------------------------------------

inline void save_actor(const MlpParams& actor, const std::string& kind, const std::string& path) {
    io::RecordWriter w(path);
    w.write({{"type", kind}, {"version", 1}});
    w.write({{"type", "network"}, {"name", "actor"}, {"params", io::mlp_to_json(actor)}});
    w.finish();
}

inline MlpParams load_actor(const std::string& kind, const std::string& path) {
    const auto rec = io::read_records(path, kind, 1);
    if (rec.size() != 2) throw LoadError(rec.size(), "expected header plus one network record");
    return io::at_record(1, [&] { return io::mlp_from_json(rec[1].at("params")); });
}

inline void save_naive_agent(const NaiveDualAgent& ag, const std::string& path) {
    io::RecordWriter w(path);
    w.write({{"type", "naive_agent"},
             {"version", 1},
             {"state_dim", ag.state_dim},
             {"action_dim", ag.action_dim},
             {"lambda1", ag.lambda1},
             {"lambda2", ag.lambda2},
             {"xi", ag.xi},
             {"limit", io::encode_double(ag.limit)},
             {"gamma", ag.gamma},
             {"tau", ag.tau},
             {"terminal_value", ag.terminal_value}});
    const std::pair<const char*, const MlpParams*> nets[] = {
        {"qr", &ag.qr}, {"qr_target", &ag.qr_target}, {"qc", &ag.qc}, {"qc_target", &ag.qc_target}, {"actor", &ag.actor}};
    for (const auto& [name, p] : nets) w.write({{"type", "network"}, {"name", name}, {"params", io::mlp_to_json(*p)}});
    w.finish();
}

}  // namespace cpqlab::baselines
