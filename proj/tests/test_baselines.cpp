#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cpqlab/baselines.hpp"
#include "support/gradcheck.hpp"

using namespace cpqlab;
using namespace cpqlab::baselines;
using numerics::Tensor;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1, double hi = 1) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

BcConfig small_bc(std::size_t steps) {
    BcConfig c;
    c.hidden = {64, 64};
    c.steps = steps;
    c.batch_size = 128;
    return c;
}

NaiveConfig small_naive(std::size_t steps) {
    NaiveConfig c;
    c.actor_hidden = {16, 16};
    c.critic_hidden = {16, 16};
    c.batch_size = 64;
    c.steps = steps;
    c.log_interval = 1;
    return c;
}

double rollout_cost(const cmdp::Env& env, const cmdp::Policy& pi, int episodes) {
    Rng rng(99);
    double c = 0;
    for (int e = 0; e < episodes; ++e)
        c += cmdp::discounted_rollout(env, pi, cmdp::default_gamma(env), cmdp::horizon(env), rng).discounted_cost;
    return c / episodes;
}

}  // namespace

// ---- BC-Safe ------------------------------------------------------------------------

TEST(BcSafe, ClonesDeterministicController) {
    const auto env = cmdp::make_env("pointmass");
    const auto ds = datagen::generate_dataset(env, 1.0, 5000, 3);
    const auto data = datagen::encode_dataset(ds, env);
    const auto bc = bc_safe_train(data, small_bc(4000), 1);
    const Tensor pred = actor::mean_action(bc.actor, data.s);
    double mse = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += (pred.data[i] - data.a.data[i]) * (pred.data[i] - data.a.data[i]);
    mse /= static_cast<double>(data.size());
    EXPECT_LE(mse, 1e-3);
    for (double v : pred.data) EXPECT_LT(std::abs(v), 1.0);
}

TEST(BcSafe, NeverSeesUnsafeSamples) {
    const auto env = cmdp::make_env("chain6");
    const auto data = datagen::encode_dataset(datagen::generate_dataset(env, 0.5, 4000, 2), env);
    std::size_t seen = 0, unsafe = 0;
    bc_safe_train(data, small_bc(50), 4, [&](const std::vector<std::size_t>& idx) {
        for (auto i : idx) {
            ++seen;
            unsafe += data.source[i] == datagen::SourceTag::unsafe;
        }
    });
    EXPECT_EQ(seen, 50u * 128u);
    EXPECT_EQ(unsafe, 0u);
}

TEST(BcSafe, DeterministicAndRejectsUnsafeOnlyData) {
    const auto env = cmdp::make_env("chain6");
    const auto data = datagen::encode_dataset(datagen::generate_dataset(env, 0.5, 2000, 2), env);
    EXPECT_EQ(bc_safe_train(data, small_bc(20), 5).actor, bc_safe_train(data, small_bc(20), 5).actor);
    const auto unsafe = datagen::encode_dataset(datagen::generate_dataset(env, 0.0, 500, 2), env);
    EXPECT_THROW(bc_safe_train(unsafe, small_bc(20), 5), DomainError);
}

TEST(BcSafe, CostsNoMoreThanUnsafeController) {
    const auto env = cmdp::make_env("pointmass");
    const auto data = datagen::encode_dataset(datagen::generate_dataset(env, 0.5, 20000, 6, {0.1, ""}), env);
    const auto bc = bc_safe_train(data, small_bc(2000), 7);
    const double c_bc = rollout_cost(env, actor::as_policy(bc.actor, env), 5);
    const double c_unsafe = rollout_cost(env, datagen::scripted_policy(env, datagen::SourceTag::unsafe), 5);
    EXPECT_LE(c_bc, c_unsafe);
}

TEST(BcSafe, LossMatchesIndependentLikelihood) {
    Rng rng(8);
    auto net = actor::make_actor(3, 2, {8}, rng);
    const Tensor s = random_matrix(6, 3, rng), a = random_matrix(6, 2, rng, -0.99, 0.99);
    const auto h = actor::forward(net, s);
    double expect = 0;
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            const double ls = std::clamp(h.log_std(i, j), numerics::kLogStdMin, numerics::kLogStdMax);
            const double z = (std::atanh(a(i, j)) - h.mean(i, j)) / std::exp(ls);
            expect += (0.5 * z * z + ls) / 6.0;
        }
    EXPECT_NEAR(bc_loss(net, s, a), expect, 1e-12);
}

// ---- MMD ------------------------------------------------------------------------------

TEST(Mmd, SymmetricAndZeroOnIdenticalSamples) {
    Rng rng(9);
    const Tensor x = random_matrix(20, 3, rng), y = random_matrix(15, 3, rng, 0, 2);
    EXPECT_NEAR(mmd_sq(x, y), mmd_sq(y, x), 1e-14);
    EXPECT_NEAR(mmd_sq(x, x), 0.0, 1e-14);
    EXPECT_GT(mmd_sq(x, y), 0.0);
    EXPECT_EQ(median_bandwidth_sq(x, y), median_bandwidth_sq(y, x));
}

TEST(Mmd, MatchesDirectKernelSums) {
    Rng rng(10);
    const Tensor x = random_matrix(4, 2, rng), y = random_matrix(5, 2, rng);
    const double h2 = 0.7;
    auto k = [&](const Tensor& p, std::size_t i, const Tensor& q, std::size_t j) {
        double d = 0;
        for (std::size_t c = 0; c < 2; ++c) d += (p(i, c) - q(j, c)) * (p(i, c) - q(j, c));
        return std::exp(-d / (2 * h2));
    };
    double kxx = 0, kyy = 0, kxy = 0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) kxx += k(x, i, x, j) / 16;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) kyy += k(y, i, y, j) / 25;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) kxy += k(x, i, y, j) / 20;
    EXPECT_NEAR(mmd_sq(x, y, h2), kxx + kyy - 2 * kxy, 1e-13);
}

TEST(Mmd, MedianHeuristic) {
    // pooled rows 0, 1, 3 on a line: squared distances 1, 9, 4 -> median 4
    const Tensor x(std::vector<std::size_t>{2, 1}, std::vector<double>{0, 1});
    const Tensor y(std::vector<std::size_t>{1, 1}, std::vector<double>{3});
    EXPECT_EQ(median_bandwidth_sq(x, y), 2.0);
}

// ---- naive dual ---------------------------------------------------------------------

TEST(NaiveDual, ZeroMultipliersReduceToActorCritic) {
    Rng rng(11);
    auto ag = make_naive_agent(3, 2, small_naive(0), rng);
    const Tensor s = random_matrix(12, 3, rng), a = random_matrix(12, 2, rng, -0.9, 0.9);
    const Tensor noise = actor::standard_normal(12, 2, rng);
    const auto l = naive_actor_loss(ag, s, a, noise, 1.0);
    const auto q = cpq::critic_values(ag.qr, s, actor::sample(ag.actor, s, noise));
    double expect = 0;
    for (double v : q) expect -= v / 12.0;
    EXPECT_NEAR(l.total, expect, 1e-12);
    ag.lambda1 = 0.5;
    ag.lambda2 = 3.0;
    const auto l2 = naive_actor_loss(ag, s, a, noise, 1.0);
    EXPECT_NEAR(l2.total, -l2.qr_mean + 0.5 * l2.qc_mean + 3.0 * l2.mmd, 1e-12);
}

TEST(NaiveDual, GradientsMatchFiniteDifferences) {
    Rng rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        auto ag = make_naive_agent(3, 2, small_naive(0), rng);
        ag.lambda1 = rng.uniform(0, 2);
        ag.lambda2 = rng.uniform(0, 5);
        const Tensor s = random_matrix(8, 3, rng), a = random_matrix(8, 2, rng, -0.9, 0.9);
        const Tensor noise = actor::standard_normal(8, 2, rng);
        const double h2 = naive_bandwidth(ag, s, a);
        auto [l, g] = naive_actor_gradients(ag, s, a, noise, h2);
        auto fd = oracle::finite_difference(ag.actor, [&](const MlpParams& p) {
            auto x = ag;
            x.actor = p;
            return naive_actor_loss(x, s, a, noise, h2).total;
        });
        EXPECT_LE(oracle::relative_error(g, fd), 1e-4);

        auto [bl, bg] = bc_gradients(ag.actor, s, a);
        auto bfd = oracle::finite_difference(ag.actor, [&](const MlpParams& p) { return bc_loss(p, s, a); });
        EXPECT_LE(oracle::relative_error(bg, bfd), 1e-4);
    }
}

TEST(NaiveDual, MultipliersStayNonnegativeAndDeterministic) {
    const auto env = cmdp::make_env("chain6");
    const auto data = datagen::encode_dataset(datagen::generate_dataset(env, 0.5, 4000, 2), env);
    auto cfg = small_naive(200);
    cfg.limit = 0.5;
    cfg.lambda_lr = 0.05;
    auto a = naive_dual_train(data, cfg, 3), b = naive_dual_train(data, cfg, 3);
    EXPECT_EQ(a.agent, b.agent);
    ASSERT_EQ(a.trace.size(), 200u);
    for (const auto& m : a.trace) {
        EXPECT_GE(m.lambda1, 0.0);
        EXPECT_GE(m.lambda2, 0.0);
        EXPECT_TRUE(std::isfinite(m.lambda1) && std::isfinite(m.lambda2));
    }
    EXPECT_GT(a.trace.back().lambda1, 0.0);
}

TEST(NaiveDual, FixedMultipliersDoNotMove) {
    const auto env = cmdp::make_env("chain6");
    const auto data = datagen::encode_dataset(datagen::generate_dataset(env, 0.5, 2000, 2), env);
    auto cfg = small_naive(30);
    cfg.fixed_lambdas = true;
    cfg.lambda1_init = 0.25;
    cfg.lambda2_init = 2.0;
    for (const auto& m : naive_dual_train(data, cfg, 3).trace) {
        EXPECT_EQ(m.lambda1, 0.25);
        EXPECT_EQ(m.lambda2, 2.0);
    }
}

TEST(NaiveDual, MmdShrinksWithDivergenceWeight) {
    const auto env = cmdp::make_env("pointmass");
    const auto ds = datagen::generate_dataset(env, 1.0, 10000, 4, {0.05, ""});
    const auto data = datagen::encode_dataset(ds, env);
    Rng pick(5);
    const auto eval = datagen::gather(data, datagen::batch_indices(data.size(), 512, pick));
    double prev = std::numeric_limits<double>::infinity();
    for (double lambda2 : {0.0, 10.0, 100.0, 1000.0}) {
        auto cfg = small_naive(1500);
        cfg.actor_lr = 1e-3;
        cfg.fixed_lambdas = true;
        cfg.lambda2_init = lambda2;
        cfg.log_interval = 1500;
        const auto res = naive_dual_train(data, cfg, 6, ds.meta.reward_shift);
        const Tensor mine = actor::mean_action(res.agent.actor, eval.s);
        const double d = mmd_sq(numerics::hcat(eval.s, mine), numerics::hcat(eval.s, eval.a));
        EXPECT_LT(d, prev) << "lambda2 " << lambda2;
        prev = d;
    }
}

TEST(NaiveDual, DivergenceRaisesTrainingError) {
    const auto env = cmdp::make_env("chain6");
    const auto data = datagen::encode_dataset(datagen::generate_dataset(env, 0.5, 2000, 2), env);
    auto cfg = small_naive(50);
    cfg.critic_lr = 1e150;
    EXPECT_THROW(naive_dual_train(data, cfg, 1), TrainingError);
}

// ---- tabular read-out -----------------------------------------------------------------

TEST(TabularReadout, DeterministicAndStochasticBins) {
    const auto env = cmdp::make_env("chain6");
    Rng rng(13);
    auto net = actor::make_actor(6, 1, {8}, rng);
    const auto det = tabular_policy_from_actor(net, env, false);
    const auto sto = tabular_policy_from_actor(net, env, true);
    for (std::size_t s = 0; s < 6; ++s) {
        const auto h = actor::forward(net, Tensor::row(cmdp::state_features(env, {static_cast<double>(s)})));
        const double p0 = standard_normal_cdf(-h.mean.item() / std::exp(h.log_std.item()));
        EXPECT_NEAR(sto(s, 0), p0, 1e-12);
        EXPECT_NEAR(sto(s, 0) + sto(s, 1), 1.0, 1e-12);
        EXPECT_EQ(det(s, h.mean.item() < 0 ? 0 : 1), 1.0);
    }
    EXPECT_THROW(tabular_policy_from_actor(net, cmdp::make_env("pointmass")), UnsupportedError);
}

TEST(Persistence, ActorRoundTrip) {
    Rng rng(14);
    auto net = actor::make_actor(4, 2, {5, 5}, rng);
    const auto path = (std::filesystem::temp_directory_path() / "cpqlab_test_actor.jsonl").string();
    save_actor(net, "bc_safe", path);
    EXPECT_EQ(load_actor("bc_safe", path), net);
    EXPECT_THROW(load_actor("naive", path), LoadError);
    std::filesystem::remove(path);
}
