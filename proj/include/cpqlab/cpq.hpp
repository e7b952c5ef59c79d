#pragma once

// Constraints Penalized Q-learning: a cost critic pushed up on OOD actions
// with an auto-tuned multiplier, reward backups gated by the cost critic, two
// reward critics with a min target, and gated policy improvement.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cpqlab/actor.hpp"
#include "cpqlab/config.hpp"
#include "cpqlab/datagen.hpp"
#include "cpqlab/io/records.hpp"
#include "cpqlab/numerics/adam.hpp"
#include "cpqlab/numerics/mlp.hpp"
#include "cpqlab/ood.hpp"

namespace cpqlab::cpq {

using datagen::Batch;
using numerics::AdamState;
using numerics::BoundMlp;
using numerics::MlpGrads;
using numerics::MlpParams;
using numerics::Rng;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

struct CpqConfig {
    double gamma = 0.995;
    std::size_t batch_size = 256;
    double critic_lr = 1e-3;
    double actor_lr = 1e-5;
    double tau = 0.005;
    std::size_t policy_samples = 10;  // n, candidate actions per state for the OOD set
    double alpha_lr = 1e-3;
    double alpha_init = 0.0;
    double alpha_max = 1e6;
    double limit = 10.0;
    double lc_factor = 1.5;
    std::optional<double> lc;  // overrides lc_factor * limit
    std::size_t target_samples = 1;
    std::size_t steps = 50000;
    std::vector<std::size_t> actor_hidden{300, 300};
    std::vector<std::size_t> critic_hidden{400, 400};
    double actor_init_scale = 1.0;
    double actor_init_log_std = 0.0;
    double ood_percentile = 75.0;
    std::optional<double> ood_threshold;  // otherwise calibrated on the dataset
    bool clip_value_targets = true;       // clamp bootstraps to [min(0,r)/(1-g), max(0,r)/(1-g)]
    std::size_t log_interval = 100;

    double cost_penalty_target() const { return lc ? *lc : lc_factor * limit; }

    void validate() const {
        if (!(gamma >= 0.0 && gamma < 1.0)) throw DomainError("cpq: gamma must lie in [0,1)");
        if (!(critic_lr > 0.0 && actor_lr > 0.0 && alpha_lr > 0.0))
            throw DomainError("cpq: learning rates must be > 0");
        if (!(tau >= 0.0 && tau <= 1.0)) throw DomainError("cpq: tau must lie in [0,1]");
        if (policy_samples < 1 || target_samples < 1) throw DomainError("cpq: sample counts must be >= 1");
        if (batch_size < 1) throw DomainError("cpq: batch size must be >= 1");
        if (!(alpha_init >= 0.0 && alpha_max >= alpha_init)) throw DomainError("cpq: need 0 <= alpha_init <= alpha_max");
        if (std::isnan(limit)) throw DomainError("cpq: limit is NaN");
        if (log_interval < 1) throw DomainError("cpq: log_interval must be >= 1");
    }
};

inline std::vector<std::size_t> parse_widths(const KeyValueConfig& cfg, const std::string& key,
                                             std::vector<std::size_t> fallback) {
    if (!cfg.has(key)) return fallback;
    std::vector<std::size_t> out;
    for (double v : cfg.get_doubles(key, {})) {
        if (!(v >= 1.0) || v != std::floor(v)) throw DomainError("config key '" + key + "': widths must be positive integers");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

/// Keys under `cpq.`; anything absent keeps the value in `base`.
inline CpqConfig cpq_config_from(const KeyValueConfig& cfg, CpqConfig c = {}) {
    c.gamma = cfg.get_double("cpq.gamma", c.gamma);
    c.batch_size = static_cast<std::size_t>(cfg.get_int("cpq.batch_size", static_cast<long>(c.batch_size)));
    c.critic_lr = cfg.get_double("cpq.critic_lr", c.critic_lr);
    c.actor_lr = cfg.get_double("cpq.actor_lr", c.actor_lr);
    c.tau = cfg.get_double("cpq.tau", c.tau);
    c.policy_samples = static_cast<std::size_t>(cfg.get_int("cpq.policy_samples", static_cast<long>(c.policy_samples)));
    c.alpha_lr = cfg.get_double("cpq.alpha_lr", c.alpha_lr);
    c.alpha_init = cfg.get_double("cpq.alpha_init", c.alpha_init);
    c.alpha_max = cfg.get_double("cpq.alpha_max", c.alpha_max);
    c.limit = cfg.get_double("cpq.limit", c.limit);
    c.lc_factor = cfg.get_double("cpq.lc_factor", c.lc_factor);
    if (cfg.has("cpq.lc")) c.lc = cfg.get_double("cpq.lc", 0.0);
    c.target_samples = static_cast<std::size_t>(cfg.get_int("cpq.target_samples", static_cast<long>(c.target_samples)));
    c.steps = static_cast<std::size_t>(cfg.get_int("cpq.steps", static_cast<long>(c.steps)));
    c.actor_hidden = parse_widths(cfg, "cpq.actor_hidden", c.actor_hidden);
    c.critic_hidden = parse_widths(cfg, "cpq.critic_hidden", c.critic_hidden);
    c.actor_init_scale = cfg.get_double("cpq.actor_init_scale", c.actor_init_scale);
    c.actor_init_log_std = cfg.get_double("cpq.actor_init_log_std", c.actor_init_log_std);
    c.ood_percentile = cfg.get_double("cpq.ood_percentile", c.ood_percentile);
    if (cfg.has("cpq.ood_threshold")) c.ood_threshold = cfg.get_double("cpq.ood_threshold", 0.0);
    c.clip_value_targets = cfg.get_bool("cpq.clip_value_targets", c.clip_value_targets);
    c.log_interval = static_cast<std::size_t>(cfg.get_int("cpq.log_interval", static_cast<long>(c.log_interval)));
    c.validate();
    return c;
}

struct CpqAgent {
    MlpParams qr1, qr2, qr1_target, qr2_target;
    MlpParams qc, qc_target;
    MlpParams actor;
    AdamState qr1_opt, qr2_opt, qc_opt, actor_opt;
    double alpha = 0.0;
    double limit = 10.0;
    double lc = 15.0;
    double gamma = 0.995;
    double tau = 0.005;
    // Reward-critic value credited at a true terminal. With rewards shifted by
    // b so gated-out backups (0) are pessimistic, the absorbing state keeps
    // earning b: b / (1 - gamma).
    double terminal_value = 0.0;
    // Target-network outputs are clamped to these value ranges before use.
    // Every policy's true value lies inside, so the fixed points are unchanged.
    double qr_lo = -std::numeric_limits<double>::infinity();
    double qr_hi = std::numeric_limits<double>::infinity();
    double qc_lo = -std::numeric_limits<double>::infinity();
    double qc_hi = std::numeric_limits<double>::infinity();
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;

    friend bool operator==(const CpqAgent&, const CpqAgent&) = default;
};

inline MlpParams make_critic(std::size_t sd, std::size_t ad, const std::vector<std::size_t>& hidden, Rng& rng) {
    std::vector<std::size_t> widths{sd + ad};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(1);
    return numerics::make_mlp(widths, rng);
}

inline CpqAgent make_agent(std::size_t sd, std::size_t ad, const CpqConfig& cfg, Rng& rng) {
    cfg.validate();
    CpqAgent a;
    a.state_dim = sd;
    a.action_dim = ad;
    a.qr1 = make_critic(sd, ad, cfg.critic_hidden, rng);
    a.qr2 = make_critic(sd, ad, cfg.critic_hidden, rng);
    a.qc = make_critic(sd, ad, cfg.critic_hidden, rng);
    a.actor = actor::make_actor(sd, ad, cfg.actor_hidden, rng, cfg.actor_init_scale, cfg.actor_init_log_std);
    a.qr1_target = a.qr1;
    a.qr2_target = a.qr2;
    a.qc_target = a.qc;
    a.qr1_opt = numerics::make_adam(a.qr1, cfg.critic_lr);
    a.qr2_opt = numerics::make_adam(a.qr2, cfg.critic_lr);
    a.qc_opt = numerics::make_adam(a.qc, cfg.critic_lr);
    a.actor_opt = numerics::make_adam(a.actor, cfg.actor_lr);
    a.alpha = cfg.alpha_init;
    a.limit = cfg.limit;
    a.lc = cfg.cost_penalty_target();
    a.gamma = cfg.gamma;
    a.tau = cfg.tau;
    return a;
}

/// Critic values Q(s, a) as an n-vector.
inline std::vector<double> critic_values(const MlpParams& q, const Tensor& s, const Tensor& a) {
    return numerics::mlp_forward(q, numerics::hcat(s, a)).data;
}

// ---- OOD actions ------------------------------------------------------------------

/// The nu actions of one step, flattened. weights make sum(w * Q_c) the mean
/// over nonempty states of the per-state mean.
struct NuActions {
    Tensor states;
    Tensor actions;
    Tensor weights;
    std::size_t nonempty_states = 0;
    std::size_t candidates = 0;

    std::size_t size() const { return states.rank() == 2 ? states.rows() : 0; }
    bool empty() const { return size() == 0; }
};

/// Group rows of `candidate_actions` (state i owns rows [i*n, (i+1)*n)) by the
/// boolean mask into a NuActions set.
inline NuActions collect_nu(const Tensor& states, const Tensor& candidate_actions, std::size_t n,
                            const std::vector<bool>& selected) {
    if (candidate_actions.rows() != states.rows() * n || selected.size() != candidate_actions.rows())
        throw DimensionError("collect_nu: candidate rows must be states x n");
    std::vector<std::size_t> state_idx, action_idx;
    std::vector<std::size_t> per_state(states.rows(), 0);
    for (std::size_t i = 0; i < selected.size(); ++i)
        if (selected[i]) {
            state_idx.push_back(i / n);
            action_idx.push_back(i);
            ++per_state[i / n];
        }
    NuActions nu;
    nu.candidates = selected.size();
    for (std::size_t c : per_state) nu.nonempty_states += c > 0;
    nu.states = numerics::select_rows(states, state_idx);
    nu.actions = numerics::select_rows(candidate_actions, action_idx);
    nu.weights = Tensor::matrix(state_idx.size(), 1);
    for (std::size_t i = 0; i < state_idx.size(); ++i)
        nu.weights.data[i] = 1.0 / (static_cast<double>(per_state[state_idx[i]]) * static_cast<double>(nu.nonempty_states));
    return nu;
}

/// Sample n actions from the policy at each state and keep those the CVAE
/// flags as OOD (latent KL >= d).
inline NuActions select_nu(const ood::CvaeModel& vae, const MlpParams& actor, const Tensor& states, std::size_t n,
                           double d, Rng& rng) {
    const Tensor rep = numerics::repeat_rows(states, n);
    const Tensor cand = actor::sample(actor, rep, actor::standard_normal(rep.rows(), actor::action_dim_of(actor), rng));
    const auto scores = ood::kl_scores(vae, rep, cand);
    std::vector<bool> pick(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) pick[i] = scores[i] >= d;
    return collect_nu(states, cand, n, pick);
}

// ---- cost critic ----------------------------------------------------------------

/// c + gamma * Q_c_target(s', a'), bootstrap zeroed at terminals.
inline Tensor cost_targets(const CpqAgent& ag, const Batch& b, const Tensor& next_actions) {
    if (next_actions.rows() != b.size()) throw DimensionError("cost_targets: one next action per transition");
    const auto qn = critic_values(ag.qc_target, b.s2, next_actions);
    Tensor y = b.c;
    for (std::size_t i = 0; i < y.size(); ++i)
        y.data[i] += ag.gamma * (1.0 - b.done.data[i]) * std::clamp(qn[i], ag.qc_lo, ag.qc_hi);
    return y;
}

struct CostLossVars {
    Var total;
    Var bellman;
    Var nu_mean;  // only meaningful when nu is nonempty
    bool has_penalty = false;
};

inline CostLossVars cost_loss_on_tape(Tape& tape, const BoundMlp& qc, const Batch& b, const Tensor& targets,
                                      const NuActions& nu, double alpha) {
    if (targets.rows() != b.size() || targets.cols() != 1) throw DimensionError("cost loss: targets must be N x 1");
    Var q = qc(tape.constant(numerics::hcat(b.s, b.a)));
    CostLossVars v;
    v.bellman = numerics::mean(numerics::square(numerics::sub(q, tape.constant(targets))));
    v.total = v.bellman;
    if (!nu.empty()) {
        Var qn = qc(tape.constant(numerics::hcat(nu.states, nu.actions)));
        v.nu_mean = numerics::sum(numerics::mul(qn, tape.constant(nu.weights)));
        v.has_penalty = true;
        if (alpha != 0.0) v.total = numerics::sub(v.bellman, numerics::scale(v.nu_mean, alpha));
    }
    return v;
}

struct CostLoss {
    double total = 0.0;
    double bellman = 0.0;
    double nu_mean = 0.0;
    bool has_penalty = false;
};

/// Bellman MSE of Q_c minus alpha times its mean over the nu actions.
inline CostLoss cost_critic_loss(const CpqAgent& ag, const Batch& b, const Tensor& targets, const NuActions& nu,
                                 double alpha) {
    Tape tape;
    BoundMlp qc(tape, ag.qc, false);
    auto v = cost_loss_on_tape(tape, qc, b, targets, nu, alpha);
    return {v.total.item(), v.bellman.item(), v.has_penalty ? v.nu_mean.item() : 0.0, v.has_penalty};
}

inline std::pair<CostLoss, MlpGrads> cost_critic_gradients(const CpqAgent& ag, const Batch& b, const Tensor& targets,
                                                           const NuActions& nu, double alpha) {
    Tape tape;
    BoundMlp qc(tape, ag.qc, true);
    auto v = cost_loss_on_tape(tape, qc, b, targets, nu, alpha);
    tape.backward(v.total);
    return {{v.total.item(), v.bellman.item(), v.has_penalty ? v.nu_mean.item() : 0.0, v.has_penalty}, qc.grads()};
}

/// Projected dual ascent: alpha grows while the OOD cost estimate is below l_c.
inline double alpha_update(double alpha, double lc, double nu_mean, double alpha_lr,
                           double alpha_max = std::numeric_limits<double>::infinity()) {
    if (!(alpha >= 0.0)) throw DomainError("alpha_update: alpha must be >= 0");
    return std::clamp(alpha + alpha_lr * (lc - nu_mean), 0.0, alpha_max);
}

// ---- reward critics -------------------------------------------------------------

/// r + gamma * mean_k 1[Q_c_target(s',a'_k) <= l] * min(Q_r1_target, Q_r2_target)(s',a'_k).
/// next_actions holds k rows per transition (row i*k + j). At a true terminal
/// the bootstrap is replaced by the agent's terminal_value.
inline Tensor cp_bellman_target(const CpqAgent& ag, const Batch& b, const Tensor& next_actions, std::size_t k = 1,
                                bool single_critic = false) {
    if (k < 1 || next_actions.rows() != b.size() * k) throw DimensionError("cp_bellman_target: need k next actions per transition");
    const Tensor s2 = k == 1 ? b.s2 : numerics::repeat_rows(b.s2, k);
    const auto q1 = critic_values(ag.qr1_target, s2, next_actions);
    const auto q2 = single_critic ? q1 : critic_values(ag.qr2_target, s2, next_actions);
    const auto qc = critic_values(ag.qc_target, s2, next_actions);
    Tensor y = b.r;
    for (std::size_t i = 0; i < b.size(); ++i) {
        double v = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t r = i * k + j;
            if (std::clamp(qc[r], ag.qc_lo, ag.qc_hi) <= ag.limit)
                v += std::clamp(std::min(q1[r], q2[r]), ag.qr_lo, ag.qr_hi);
        }
        v /= static_cast<double>(k);
        y.data[i] += ag.gamma * (b.done.data[i] > 0.5 ? ag.terminal_value : v);
    }
    return y;
}

inline Tensor cp_bellman_target(const CpqAgent& ag, const Batch& b, std::size_t k, Rng& rng) {
    const Tensor s2 = k == 1 ? b.s2 : numerics::repeat_rows(b.s2, k);
    return cp_bellman_target(ag, b, actor::sample(ag.actor, s2, actor::standard_normal(s2.rows(), ag.action_dim, rng)), k);
}

inline Var reward_loss_on_tape(Tape& tape, const BoundMlp& q, const Batch& b, const Tensor& targets) {
    if (targets.rows() != b.size() || targets.cols() != 1) throw DimensionError("reward loss: targets must be N x 1");
    Var v = q(tape.constant(numerics::hcat(b.s, b.a)));
    return numerics::mean(numerics::square(numerics::sub(v, tape.constant(targets))));
}

/// MSE of one reward critic against shared targets.
inline double reward_critic_loss(const MlpParams& critic, const Batch& b, const Tensor& targets) {
    Tape tape;
    BoundMlp q(tape, critic, false);
    return reward_loss_on_tape(tape, q, b, targets).item();
}

inline std::pair<double, MlpGrads> reward_critic_gradients(const MlpParams& critic, const Batch& b,
                                                            const Tensor& targets) {
    return numerics::compute_gradients(critic, [&](Tape& tape, const BoundMlp& q) {
        return reward_loss_on_tape(tape, q, b, targets);
    });
}

// ---- actor ----------------------------------------------------------------------

struct PolicyLoss {
    double loss = 0.0;
    double gate_fraction = 0.0;  // share of sampled actions with Q_c <= l
};

/// -mean g * min(Q_r1, Q_r2)(s, a_theta), g = 1[Q_c(s, a_theta) <= l] from the
/// live cost critic, held constant.
inline Var policy_loss_on_tape(Tape& tape, const BoundMlp& actor_net, const CpqAgent& ag, const Tensor& states,
                               const Tensor& noise, double* gate_fraction = nullptr) {
    Var s = tape.constant(states);
    Var a = actor::rsample(actor_net, s, ag.action_dim, noise);
    Var sa = numerics::concat_cols(s, a);
    BoundMlp q1(tape, ag.qr1, false), q2(tape, ag.qr2, false);
    Var q = numerics::minimum(q1(sa), q2(sa));
    const auto qc = critic_values(ag.qc, states, a.value());
    Tensor gate = Tensor::matrix(states.rows(), 1);
    std::size_t open = 0;
    for (std::size_t i = 0; i < qc.size(); ++i)
        if (qc[i] <= ag.limit) {
            gate.data[i] = 1.0;
            ++open;
        }
    if (gate_fraction) *gate_fraction = static_cast<double>(open) / static_cast<double>(states.rows());
    return numerics::scale(numerics::mean(numerics::mul(q, tape.constant(gate))), -1.0);
}

inline PolicyLoss policy_loss(const CpqAgent& ag, const Tensor& states, const Tensor& noise) {
    Tape tape;
    BoundMlp net(tape, ag.actor, false);
    PolicyLoss out;
    out.loss = policy_loss_on_tape(tape, net, ag, states, noise, &out.gate_fraction).item();
    return out;
}

inline PolicyLoss policy_loss(const CpqAgent& ag, const Tensor& states, Rng& rng) {
    return policy_loss(ag, states, actor::standard_normal(states.rows(), ag.action_dim, rng));
}

inline std::pair<PolicyLoss, MlpGrads> policy_gradients(const CpqAgent& ag, const Tensor& states, const Tensor& noise) {
    Tape tape;
    BoundMlp net(tape, ag.actor, true);
    PolicyLoss out;
    Var loss = policy_loss_on_tape(tape, net, ag, states, noise, &out.gate_fraction);
    tape.backward(loss);
    out.loss = loss.item();
    return {out, net.grads()};
}

// ---- training loop --------------------------------------------------------------

struct StepMetrics {
    std::size_t step = 0;
    double cost_loss = 0.0;
    double cost_bellman = 0.0;
    double reward_loss1 = 0.0;
    double reward_loss2 = 0.0;
    double actor_loss = 0.0;
    double alpha = 0.0;
    double nu_qc_mean = 0.0;   // 0 when no OOD action was selected
    double nu_fraction = 0.0;  // selected / candidates
    double data_gate_fraction = 0.0;
    double policy_gate_fraction = 0.0;
};

inline const std::vector<std::string>& metric_columns() {
    static const std::vector<std::string> cols{"step", "cost_loss", "cost_bellman", "reward_loss1", "reward_loss2",
                                               "actor_loss", "alpha", "nu_qc_mean", "nu_fraction",
                                               "data_gate_fraction", "policy_gate_fraction"};
    return cols;
}

inline std::vector<double> metric_values(const StepMetrics& m) {
    return {static_cast<double>(m.step), m.cost_loss, m.cost_bellman, m.reward_loss1, m.reward_loss2, m.actor_loss,
            m.alpha, m.nu_qc_mean, m.nu_fraction, m.data_gate_fraction, m.policy_gate_fraction};
}

struct CpqTrainResult {
    CpqAgent agent;
    std::vector<StepMetrics> trace;  // every log_interval steps and the last step
    double ood_threshold = 0.0;
    std::vector<std::string> warnings;
};

/// Training aborted on a non-finite quantity; carries the trace so far.
class CpqDivergence : public TrainingError {
public:
    CpqDivergence(std::size_t step, const std::string& what, std::vector<StepMetrics> trace)
        : TrainingError(step, what), trace_(std::move(trace)) {}
    const std::vector<StepMetrics>& trace() const { return trace_; }

private:
    std::vector<StepMetrics> trace_;
};

/// One CPQ update on a sampled batch. Returns the step's metrics.
inline StepMetrics cpq_step(CpqAgent& ag, const Batch& b, const ood::CvaeModel& vae, double d, const CpqConfig& cfg,
                            Rng& rng) {
    StepMetrics m;
    // OOD actions and cost critic
    const NuActions nu = select_nu(vae, ag.actor, b.s, cfg.policy_samples, d, rng);
    const Tensor a2 = actor::sample(ag.actor, b.s2, actor::standard_normal(b.size(), ag.action_dim, rng));
    const Tensor yc = cost_targets(ag, b, a2);
    auto [closs, gqc] = cost_critic_gradients(ag, b, yc, nu, ag.alpha);
    m.cost_loss = closs.total;
    m.cost_bellman = closs.bellman;
    m.nu_fraction = static_cast<double>(nu.size()) / static_cast<double>(nu.candidates);
    {
        const auto q = critic_values(ag.qc, b.s, b.a);
        m.data_gate_fraction =
            static_cast<double>(std::count_if(q.begin(), q.end(), [&](double v) { return v <= ag.limit; })) /
            static_cast<double>(q.size());
    }
    numerics::adam_step(ag.qc, gqc, ag.qc_opt);
    if (closs.has_penalty) {
        m.nu_qc_mean = closs.nu_mean;
        ag.alpha = alpha_update(ag.alpha, ag.lc, closs.nu_mean, cfg.alpha_lr, cfg.alpha_max);
    }
    m.alpha = ag.alpha;

    // reward critics
    const Tensor yr = cp_bellman_target(ag, b, cfg.target_samples, rng);
    auto [l1, g1] = reward_critic_gradients(ag.qr1, b, yr);
    auto [l2, g2] = reward_critic_gradients(ag.qr2, b, yr);
    numerics::adam_step(ag.qr1, g1, ag.qr1_opt);
    numerics::adam_step(ag.qr2, g2, ag.qr2_opt);
    m.reward_loss1 = l1;
    m.reward_loss2 = l2;

    // actor
    auto [pl, ga] = policy_gradients(ag, b.s, actor::standard_normal(b.size(), ag.action_dim, rng));
    numerics::adam_step(ag.actor, ga, ag.actor_opt);
    m.actor_loss = pl.loss;
    m.policy_gate_fraction = pl.gate_fraction;

    ag.qr1_target = numerics::soft_update(ag.qr1_target, ag.qr1, ag.tau);
    ag.qr2_target = numerics::soft_update(ag.qr2_target, ag.qr2, ag.tau);
    ag.qc_target = numerics::soft_update(ag.qc_target, ag.qc, ag.tau);
    return m;
}

/// Called after every update with the number of completed steps.
using StepHook = std::function<void(std::size_t, const CpqAgent&, const StepMetrics&)>;

/// Policy-training phase. `data` comes from datagen::encode_dataset, so
/// rewards already carry `reward_shift`.
inline CpqTrainResult cpq_train(const datagen::TrainingArrays& data, const ood::CvaeModel& vae, const CpqConfig& cfg,
                                std::uint64_t seed, double reward_shift = 0.0, const StepHook& hook = {}) {
    cfg.validate();
    if (data.size() == 0) throw DomainError("cpq_train: empty dataset");
    if (vae.state_dim != data.s.cols() || vae.action_dim != data.a.cols())
        throw DimensionError("cpq_train: CVAE dimensions do not match the dataset");
    Rng rng(seed);
    Rng init = rng.split();
    CpqTrainResult res;
    res.agent = make_agent(data.s.cols(), data.a.cols(), cfg, init);
    auto& ag = res.agent;
    ag.terminal_value = reward_shift / (1.0 - cfg.gamma);
    if (cfg.clip_value_targets) {
        const auto [rlo, rhi] = std::minmax_element(data.r.data.begin(), data.r.data.end());
        const auto [clo, chi] = std::minmax_element(data.c.data.begin(), data.c.data.end());
        const double h = 1.0 / (1.0 - cfg.gamma);
        ag.qr_lo = std::min(0.0, *rlo) * h;
        ag.qr_hi = std::max({0.0, *rhi, reward_shift}) * h;
        ag.qc_lo = std::min(0.0, *clo) * h;
        ag.qc_hi = std::max(0.0, *chi) * h;
    }
    res.ood_threshold = cfg.ood_threshold ? *cfg.ood_threshold : ood::calibrate_threshold(vae, data.s, data.a, cfg.ood_percentile);
    const std::size_t batch = std::min(cfg.batch_size, data.size());
    std::size_t closed_steps = 0, first_closed = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        StepMetrics m;
        try {
            const Batch b = datagen::gather(data, datagen::batch_indices(data.size(), batch, rng));
            m = cpq_step(ag, b, vae, res.ood_threshold, cfg, rng);
        } catch (const NumericError& e) {
            throw CpqDivergence(step, std::string("cpq: ") + e.what(), res.trace);
        }
        m.step = step;
        for (double v : metric_values(m))
            if (!std::isfinite(v)) throw CpqDivergence(step, "cpq: non-finite training metric", res.trace);
        if (m.data_gate_fraction == 0.0 && closed_steps++ == 0) first_closed = step;
        if (step % cfg.log_interval == 0 || step + 1 == cfg.steps) res.trace.push_back(m);
        if (hook) hook(step + 1, ag, m);
    }
    if (closed_steps > 0)
        res.warnings.push_back("gate closed on every dataset pair in " + std::to_string(closed_steps) +
                               " batches (first at step " + std::to_string(first_closed) + ")");
    return res;
}

// ---- persistence ----------------------------------------------------------------

inline constexpr int kAgentVersion = 1;

inline void save_agent(const CpqAgent& ag, const std::string& path) {
    io::RecordWriter w(path);
    w.write({{"type", "cpq_agent"},
             {"version", kAgentVersion},
             {"state_dim", ag.state_dim},
             {"action_dim", ag.action_dim},
             {"alpha", io::encode_double(ag.alpha)},
             {"limit", io::encode_double(ag.limit)},
             {"lc", io::encode_double(ag.lc)},
             {"gamma", ag.gamma},
             {"tau", ag.tau},
             {"terminal_value", ag.terminal_value},
             {"value_bounds", {io::encode_double(ag.qr_lo), io::encode_double(ag.qr_hi), io::encode_double(ag.qc_lo),
                               io::encode_double(ag.qc_hi)}}});
    const std::pair<const char*, const MlpParams*> nets[] = {
        {"qr1", &ag.qr1}, {"qr2", &ag.qr2}, {"qr1_target", &ag.qr1_target}, {"qr2_target", &ag.qr2_target},
        {"qc", &ag.qc},   {"qc_target", &ag.qc_target}, {"actor", &ag.actor}};
    for (const auto& [name, p] : nets) w.write({{"type", "network"}, {"name", name}, {"params", io::mlp_to_json(*p)}});
    w.finish();
}

/// Networks and multiplier; optimizer moments start fresh.
inline CpqAgent load_agent(const std::string& path, double critic_lr = 1e-3, double actor_lr = 1e-5) {
    const auto rec = io::read_records(path, "cpq_agent", kAgentVersion);
    if (rec.size() != 8) throw LoadError(rec.size(), "expected header plus seven network records");
    CpqAgent ag;
    io::at_record(0, [&] {
        const auto& h = rec[0];
        ag.state_dim = h.at("state_dim").get<std::size_t>();
        ag.action_dim = h.at("action_dim").get<std::size_t>();
        ag.alpha = io::decode_double(h.at("alpha"));
        ag.limit = io::decode_double(h.at("limit"));
        ag.lc = io::decode_double(h.at("lc"));
        ag.gamma = h.at("gamma").get<double>();
        ag.tau = h.at("tau").get<double>();
        ag.terminal_value = h.at("terminal_value").get<double>();
        const auto& vb = h.at("value_bounds");
        ag.qr_lo = io::decode_double(vb.at(0));
        ag.qr_hi = io::decode_double(vb.at(1));
        ag.qc_lo = io::decode_double(vb.at(2));
        ag.qc_hi = io::decode_double(vb.at(3));
    });
    MlpParams* nets[] = {&ag.qr1, &ag.qr2, &ag.qr1_target, &ag.qr2_target, &ag.qc, &ag.qc_target, &ag.actor};
    const char* names[] = {"qr1", "qr2", "qr1_target", "qr2_target", "qc", "qc_target", "actor"};
    for (std::size_t i = 0; i < 7; ++i)
        *nets[i] = io::at_record(i + 1, [&] {
            if (rec[i + 1].at("name").get<std::string>() != names[i])
                throw LoadError(i + 1, std::string("expected network ") + names[i]);
            return io::mlp_from_json(rec[i + 1].at("params"));
        });
    for (std::size_t i = 0; i < 6; ++i)
        if (nets[i]->input_width() != ag.state_dim + ag.action_dim || nets[i]->output_width() != 1)
            throw LoadError(i + 1, std::string(names[i]) + " shape does not match the header");
    if (ag.actor.input_width() != ag.state_dim || ag.actor.output_width() != 2 * ag.action_dim)
        throw LoadError(7, "actor shape does not match the header");
    ag.qr1_opt = numerics::make_adam(ag.qr1, critic_lr);
    ag.qr2_opt = numerics::make_adam(ag.qr2, critic_lr);
    ag.qc_opt = numerics::make_adam(ag.qc, critic_lr);
    ag.actor_opt = numerics::make_adam(ag.actor, actor_lr);
    return ag;
}

}  // namespace cpqlab::cpq
