#include <gtest/gtest.h>

#include <cmath>

#include "cpqlab/cmdp.hpp"

using namespace cpqlab;
using namespace cpqlab::cmdp;

namespace {

TabularEnv uniform_start_chain() {
    TabularEnv env = make_chain6();
    env.spec.initial.assign(6, 1.0 / 6.0);
    return env;
}

}  // namespace

TEST(Reset, TabularPointMassOnZero) {
    Env env = make_chain6();
    Rng rng(1);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(reset(env, rng).obs, std::vector<double>{0.0});
}

TEST(Reset, ContinuousFixedStart) {
    Env env = make_pointmass();
    Rng rng(1);
    auto s = ContinuousEnvState::from(reset(env, rng));
    EXPECT_EQ(s.position, (std::array<double, 2>{0.0, 0.0}));
    EXPECT_EQ(s.velocity, (std::array<double, 2>{0.0, 0.0}));
    EXPECT_EQ(s.step, 0);
}

TEST(Reset, UniformInitialFrequencies) {
    Env env = uniform_start_chain();
    Rng rng(7);
    const int n = 100000;
    std::vector<int> counts(6, 0);
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(reset(env, rng).obs[0])];
    const double p = 1.0 / 6.0, sigma = std::sqrt(n * p * (1 - p));
    for (int c : counts) EXPECT_LE(std::abs(c - n * p), 3 * sigma);
}

TEST(Step, ZeroActionFromOrigin) {
    Env env = make_pointmass();
    Rng rng(0);
    auto o = step(env, reset(env, rng), {0.0, 0.0}, rng);
    auto s = ContinuousEnvState::from(o.next);
    EXPECT_EQ(s.position, (std::array<double, 2>{0.0, 0.0}));
    EXPECT_EQ(s.velocity, (std::array<double, 2>{0.0, 0.0}));
    EXPECT_EQ(o.cost, 0.0);
    EXPECT_EQ(s.step, 1);
    EXPECT_NEAR(o.reward, -0.1 * std::sqrt(2.0), 1e-15);
}

TEST(Step, FullActuationCostsTwo) {
    Env env = make_pointmass();
    Rng rng(0);
    auto o = step(env, reset(env, rng), {1.0, 1.0}, rng);
    EXPECT_EQ(o.cost, 2.0);
    auto s = ContinuousEnvState::from(o.next);
    EXPECT_DOUBLE_EQ(s.velocity[0], 0.1);
    EXPECT_DOUBLE_EQ(s.position[0], 0.01);
}

TEST(Step, ContinuousDynamicsFormula) {
    Env env = make_pointmass();
    Rng rng(0);
    ContinuousEnvState s{{0.3, -0.2}, {0.5, -0.1}, 4};
    auto o = step(env, s.to_state(), {-0.5, 0.25}, rng);
    auto n = ContinuousEnvState::from(o.next);
    const double vx = 0.99 * 0.5 + 0.1 * -0.5, vy = 0.99 * -0.1 + 0.1 * 0.25;
    EXPECT_DOUBLE_EQ(n.velocity[0], vx);
    EXPECT_DOUBLE_EQ(n.velocity[1], vy);
    EXPECT_DOUBLE_EQ(n.position[0], 0.3 + 0.1 * vx);
    EXPECT_DOUBLE_EQ(n.position[1], -0.2 + 0.1 * vy);
    EXPECT_EQ(o.cost, 0.75);
}

TEST(Step, GoalIsTerminalWithBonus) {
    Env env = make_pointmass();
    Rng rng(0);
    ContinuousEnvState s{{1.0, 1.0}, {0.0, 0.0}, 10};
    auto o = step(env, s.to_state(), {0.0, 0.0}, rng);
    EXPECT_TRUE(o.terminal);
    EXPECT_FALSE(o.truncated);
    EXPECT_DOUBLE_EQ(o.reward, 1.0);
}

TEST(Step, HorizonTruncates) {
    Env env = make_pointmass();
    Rng rng(0);
    ContinuousEnvState s{{0.0, 0.0}, {0.0, 0.0}, 99};
    auto o = step(env, s.to_state(), {0.0, 0.0}, rng);
    EXPECT_FALSE(o.terminal);
    EXPECT_TRUE(o.truncated);
}

TEST(Step, ArenaWallStopsMotion) {
    Env env = make_pointmass();
    Rng rng(0);
    ContinuousEnvState s{{-0.99, 0.0}, {-0.5, 0.0}, 0};
    auto n = ContinuousEnvState::from(step(env, s.to_state(), {-1.0, 0.0}, rng).next);
    EXPECT_EQ(n.position[0], -1.0);
    EXPECT_EQ(n.velocity[0], 0.0);
}

TEST(Step, InvalidActionsRejected) {
    Env pm = make_pointmass();
    Env ch = make_chain6();
    Rng rng(0);
    EXPECT_THROW(step(pm, reset(pm, rng), {1.5, 0.0}, rng), DomainError);
    EXPECT_THROW(step(pm, reset(pm, rng), {0.0}, rng), DomainError);
    EXPECT_THROW(step(ch, reset(ch, rng), {2.0}, rng), DomainError);
    EXPECT_THROW(step(ch, reset(ch, rng), {0.5}, rng), DomainError);
    EXPECT_THROW(step(ch, reset(ch, rng), {-1.0}, rng), DomainError);
}

TEST(Step, OneHotTransitionIsCertain) {
    TabularEnv env = make_chain6();
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        auto o = step(Env(env), EnvState{{2.0}, 0}, {1.0}, rng);
        EXPECT_EQ(o.next.obs[0], 3.0);
        EXPECT_EQ(o.cost, 1.0);
    }
}

TEST(Step, SideEffectFreeAndDeterministic) {
    Env env = make_chain6();
    Rng a(11), b(11);
    EnvState s{{1.0}, 3};
    const EnvState copy = s;
    for (int i = 0; i < 50; ++i) {
        auto oa = step(env, s, {0.0}, a);
        auto ob = step(env, s, {0.0}, b);
        EXPECT_EQ(oa.next, ob.next);
    }
    EXPECT_EQ(s, copy);
}

TEST(Step, ContinuousBounds) {
    Env env = make_pointmass();
    Rng rng(5);
    EnvState s = reset(env, rng);
    const double floor = -reward_shift(env);
    for (int i = 0; i < 5000; ++i) {
        Action a{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        auto o = step(env, s, a, rng);
        EXPECT_GE(o.cost, 0.0);
        EXPECT_LE(o.cost, 2.0);
        EXPECT_GE(o.reward, floor);
        s = (o.terminal || o.truncated) ? reset(env, rng) : o.next;
    }
}

TEST(Rollout, ZeroRewardGivesZeroReturn) {
    TabularEnv env = make_chain6();
    env.spec.reward.assign(12, 0.0);
    Rng rng(0);
    Policy p = [](const EnvState&, Rng&) { return Action{0.0}; };
    auto r = discounted_rollout(Env(env), p, 0.9, 50, rng);
    EXPECT_EQ(r.discounted_return, 0.0);
}

TEST(Rollout, GammaZeroIsFirstReward) {
    Env env = make_chain6();
    Rng rng(0);
    Policy p = [](const EnvState&, Rng&) { return Action{1.0}; };
    auto r = discounted_rollout(env, p, 0.0, 50, rng);
    EXPECT_EQ(r.discounted_return, tabular_spec(env).r(0, 1));
    EXPECT_EQ(r.discounted_cost, 1.0);
}

TEST(Rollout, RiskyChainReachesGoalInFiveSteps) {
    Env env = make_chain6();
    Rng rng(0);
    Policy p = [](const EnvState&, Rng&) { return Action{1.0}; };
    auto r = discounted_rollout(env, p, 0.9, 50, rng);
    EXPECT_EQ(r.steps, 5);
    EXPECT_TRUE(r.reached_terminal);
    EXPECT_THROW(discounted_rollout(env, p, 0.9, 0, rng), DomainError);
}

TEST(TabularSpec, Chain6Shape) {
    Env env = make_chain6();
    const auto& sp = tabular_spec(env);
    EXPECT_EQ(sp.n_states, 6u);
    EXPECT_EQ(sp.n_actions, 2u);
    for (std::size_t s = 0; s < 6; ++s)
        for (std::size_t a = 0; a < 2; ++a) {
            double total = 0;
            for (std::size_t s2 = 0; s2 < 6; ++s2) total += sp.p(s, a, s2);
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    EXPECT_NO_THROW(sp.validate());
}

TEST(TabularSpec, ContinuousUnsupported) {
    Env env = make_pointmass();
    EXPECT_THROW(tabular_spec(env), UnsupportedError);
}

TEST(TabularSpec, ValidationCatchesBadRows) {
    auto sp = make_chain6().spec;
    sp.p(0, 0, 0) += 1e-9;
    EXPECT_THROW(sp.validate(), DomainError);
}

TEST(TabularSpec, SimulatorReproducesKernel) {
    Env env = uniform_start_chain();
    const auto& sp = tabular_spec(env);
    Rng rng(42);
    std::vector<long> visits(12, 0), trans(72, 0);
    EnvState s = reset(env, rng);
    for (long i = 0; i < 1000000; ++i) {
        const std::size_t a = rng.index(2);
        auto o = step(env, s, {static_cast<double>(a)}, rng);
        const auto si = static_cast<std::size_t>(s.obs[0]);
        const auto ni = static_cast<std::size_t>(o.next.obs[0]);
        ++visits[sp.sa(si, a)];
        ++trans[sp.sa(si, a) * 6 + ni];
        s = (o.terminal || o.truncated) ? reset(env, rng) : o.next;
    }
    for (std::size_t s0 = 0; s0 < 5; ++s0)
        for (std::size_t a = 0; a < 2; ++a) {
            const double n = static_cast<double>(visits[sp.sa(s0, a)]);
            ASSERT_GT(n, 1000);
            for (std::size_t s2 = 0; s2 < 6; ++s2) {
                const double p = sp.p(s0, a, s2);
                const double sigma = std::sqrt(n * p * (1 - p));
                EXPECT_LE(std::abs(trans[sp.sa(s0, a) * 6 + s2] - n * p), 3 * sigma + 1e-9)
                    << s0 << "," << a << "->" << s2;
            }
        }
}

TEST(MakeEnv, OverridesAndUnknownId) {
    auto cfg = KeyValueConfig::parse_string("pointmass.horizon = 20\nchain6.p_cautious = 0.5\n");
    EXPECT_EQ(horizon(make_env("pointmass", cfg)), 20);
    EXPECT_DOUBLE_EQ(tabular_spec(make_env("chain6", cfg)).p(0, 0, 1), 0.5);
    EXPECT_THROW(make_env("hopper"), DomainError);
}

TEST(Features, TabularEncodeDecode) {
    Env env = make_chain6();
    EXPECT_EQ(state_features(env, {2.0}), (std::vector<double>{0, 0, 1, 0, 0, 0}));
    for (double a : {0.0, 1.0}) EXPECT_EQ(decode_action(env, action_features(env, {a})), Action{a});
    EXPECT_EQ(decode_action(env, {-0.99}), Action{0.0});
    EXPECT_EQ(decode_action(env, {0.99}), Action{1.0});
}
