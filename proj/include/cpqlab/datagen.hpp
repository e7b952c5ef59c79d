#pragma once

// Scripted behavior policies, mixed offline datasets, the count-based
// behavior policy and the dataset file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cpqlab/cmdp.hpp"
#include "cpqlab/config.hpp"
#include "cpqlab/io/records.hpp"
#include "cpqlab/numerics/tensor.hpp"

namespace cpqlab::datagen {

using cmdp::Action;
using cmdp::Env;
using cmdp::EnvState;
using cmdp::Policy;
using numerics::Rng;
using numerics::Tensor;

enum class SourceTag { safe, unsafe };

inline std::string to_string(SourceTag t) { return t == SourceTag::safe ? "safe" : "unsafe"; }

inline SourceTag parse_source(const std::string& s) {
    if (s == "safe") return SourceTag::safe;
    if (s == "unsafe") return SourceTag::unsafe;
    throw DomainError("unknown policy kind '" + s + "' (expected safe or unsafe)");
}

struct TransitionSample {
    std::vector<double> s;
    std::vector<double> a;
    std::vector<double> s2;
    double r = 0.0;
    double c = 0.0;
    bool terminal = false;
    bool truncated = false;
    SourceTag source = SourceTag::safe;
    std::int64_t episode = 0;

    friend bool operator==(const TransitionSample&, const TransitionSample&) = default;
};

inline constexpr int kDatasetVersion = 1;

struct DatasetMetadata {
    std::string env_id;
    std::string env_config;  // KeyValueConfig text used to build the env
    double gamma = 0.0;
    double limit = 0.0;
    double mix_ratio = 0.5;
    double behavior_noise = 0.0;
    double reward_shift = 0.0;  // r + reward_shift >= 0 for every sample
    std::size_t n_safe = 0;
    std::size_t n_unsafe = 0;
    std::size_t n_episodes = 0;
    std::uint64_t seed = 0;
    int version = kDatasetVersion;

    friend bool operator==(const DatasetMetadata&, const DatasetMetadata&) = default;
};

struct OfflineDataset {
    DatasetMetadata meta;
    std::vector<TransitionSample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }

    friend bool operator==(const OfflineDataset&, const OfflineDataset&) = default;
};

/// Environment the dataset was generated from.
inline Env dataset_env(const OfflineDataset& ds) {
    return cmdp::make_env(ds.meta.env_id, KeyValueConfig::parse_string(ds.meta.env_config));
}

// ---- behavior policies --------------------------------------------------------

/// Point mass: safe a = clip(0.3(goal-p) - 0.4v, ±0.3), unsafe a = clip(1.5(goal-p) - 0.6v, ±1).
/// Optional Gaussian `noise` (std) is added before the clip. Chain: safe
/// always takes action 0 (cautious), unsafe always action 1 (risky).
inline Policy scripted_policy(const Env& env, SourceTag kind, double noise = 0.0) {
    if (noise < 0.0) throw DomainError("scripted_policy: negative noise");
    if (cmdp::is_tabular(env)) {
        const double a = kind == SourceTag::safe ? 0.0 : 1.0;
        return [a](const EnvState&, Rng&) { return Action{a}; };
    }
    const auto cfg = std::get<cmdp::PointMassEnv>(env).cfg;
    const bool safe = kind == SourceTag::safe;
    const double kp = safe ? 0.3 : 1.5, kd = safe ? 0.4 : 0.6, bound = safe ? 0.3 : 1.0;
    return [cfg, kp, kd, bound, noise](const EnvState& st, Rng& rng) {
        const auto s = cmdp::ContinuousEnvState::from(st);
        Action a(2);
        for (int i = 0; i < 2; ++i) {
            double u = kp * (cfg.goal[i] - s.position[i]) - kd * s.velocity[i];
            if (noise > 0.0) u += rng.normal(0.0, noise);
            a[i] = std::clamp(u, -bound, bound);
        }
        return a;
    };
}

inline Policy scripted_policy(const Env& env, const std::string& kind, double noise = 0.0) {
    return scripted_policy(env, parse_source(kind), noise);
}

// ---- generation ---------------------------------------------------------------

/// Seeds for episode `episode` of a dataset generated with `seed`: one stream
/// for the policy, one for the environment, so an episode can be re-stepped
/// from its recorded actions alone.
struct EpisodeStreams {
    Rng policy;
    Rng env;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline EpisodeStreams episode_streams(std::uint64_t seed, std::int64_t episode) {
    const std::uint64_t base = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(episode)));
    return {Rng(splitmix64(base + 1)), Rng(splitmix64(base + 2))};
}

struct GenerationOptions {
    double behavior_noise = 0.0;
    std::string env_config;  // recorded in metadata
};

/// Whole episodes, alternating safe/unsafe, until each source has at least
/// its budget (round(mix_ratio * n) safe, the rest unsafe).
inline OfflineDataset generate_dataset(const Env& env, double mix_ratio, std::size_t n,
                                       std::uint64_t seed, const GenerationOptions& opt = {}) {
    if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0))
        throw DomainError("generate_dataset: mix_ratio outside [0,1]");
    if (n < 1) throw DomainError("generate_dataset: n must be >= 1");
    OfflineDataset ds;
    auto& m = ds.meta;
    m.env_id = cmdp::env_id(env);
    m.env_config = opt.env_config;
    m.gamma = cmdp::default_gamma(env);
    m.limit = cmdp::default_limit(env);
    m.mix_ratio = mix_ratio;
    m.behavior_noise = opt.behavior_noise;
    m.reward_shift = cmdp::reward_shift(env);
    m.seed = seed;

    const auto budget_safe = static_cast<std::size_t>(std::llround(mix_ratio * static_cast<double>(n)));
    const std::size_t budget[2] = {budget_safe, n - budget_safe};
    std::size_t have[2] = {0, 0};
    const Policy policies[2] = {scripted_policy(env, SourceTag::safe, opt.behavior_noise),
                                scripted_policy(env, SourceTag::unsafe, opt.behavior_noise)};
    const int max_steps = cmdp::horizon(env);
    std::int64_t episode = 0;
    int turn = 0;
    while (have[0] < budget[0] || have[1] < budget[1]) {
        if (have[turn] >= budget[turn]) turn = 1 - turn;
        auto streams = episode_streams(seed, episode);
        EnvState s = cmdp::reset(env, streams.env);
        for (int t = 0; t < max_steps; ++t) {
            Action a = policies[turn](s, streams.policy);
            auto o = cmdp::step(env, s, a, streams.env);
            ds.samples.push_back({s.obs, a, o.next.obs, o.reward, o.cost, o.terminal, o.truncated,
                                  turn == 0 ? SourceTag::safe : SourceTag::unsafe, episode});
            ++have[turn];
            if (o.terminal || o.truncated) break;
            s = o.next;
        }
        ++episode;
        turn = 1 - turn;
    }
    m.n_safe = have[0];
    m.n_unsafe = have[1];
    m.n_episodes = static_cast<std::size_t>(episode);
    return ds;
}

// ---- behavior policy -----------------------------------------------------------

struct TabularBehaviorPolicy {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    std::vector<double> probs;          // S*A, zero rows for unvisited states
    std::vector<std::size_t> counts;    // S*A
    std::vector<std::size_t> visits;    // S
    std::vector<bool> visited;          // S

    double operator()(std::size_t s, std::size_t a) const { return probs[s * n_actions + a]; }
};

inline TabularBehaviorPolicy empirical_behavior_policy(const OfflineDataset& ds) {
    const Env env = dataset_env(ds);
    if (!cmdp::is_tabular(env))
        throw UnsupportedError("empirical_behavior_policy: dataset env '" + ds.meta.env_id +
                               "' is continuous");
    const auto& sp = cmdp::tabular_spec(env);
    TabularBehaviorPolicy pb;
    pb.n_states = sp.n_states;
    pb.n_actions = sp.n_actions;
    pb.counts.assign(sp.n_states * sp.n_actions, 0);
    pb.visits.assign(sp.n_states, 0);
    for (const auto& x : ds.samples) {
        const auto s = static_cast<std::size_t>(x.s.at(0));
        const auto a = static_cast<std::size_t>(x.a.at(0));
        ++pb.counts.at(s * sp.n_actions + a);
        ++pb.visits[s];
    }
    pb.probs.assign(pb.counts.size(), 0.0);
    pb.visited.assign(sp.n_states, false);
    for (std::size_t s = 0; s < sp.n_states; ++s) {
        if (pb.visits[s] == 0) continue;
        pb.visited[s] = true;
        for (std::size_t a = 0; a < sp.n_actions; ++a)
            pb.probs[s * sp.n_actions + a] = static_cast<double>(pb.counts[s * sp.n_actions + a]) /
                                             static_cast<double>(pb.visits[s]);
    }
    return pb;
}

// ---- sampling ---------------------------------------------------------------------

inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size,
                                              Rng& rng) {
    if (dataset_size == 0) throw DomainError("batch_sample: empty dataset");
    if (batch_size > dataset_size) throw DomainError("batch_sample: batch larger than dataset");
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = rng.index(dataset_size);
    return idx;
}

/// Uniform with replacement.
inline std::vector<TransitionSample> batch_sample(const OfflineDataset& ds, std::size_t batch_size,
                                                  Rng& rng) {
    std::vector<TransitionSample> out;
    for (std::size_t i : batch_indices(ds.size(), batch_size, rng)) out.push_back(ds.samples[i]);
    return out;
}

/// Network-facing view of a dataset: features encoded once, rows gathered per batch.
struct TrainingArrays {
    Tensor s;        // N x feature_dim
    Tensor a;        // N x action_dim (encoded)
    Tensor s2;       // N x feature_dim
    Tensor r;        // N x 1, shifted by the dataset's reward_shift
    Tensor c;        // N x 1
    Tensor done;     // N x 1, 1 at true terminals
    std::vector<SourceTag> source;

    std::size_t size() const { return source.size(); }
};

inline TrainingArrays encode_dataset(const OfflineDataset& ds, const Env& env) {
    const std::size_t n = ds.size(), fd = cmdp::feature_dim(env), ad = cmdp::action_dim(env);
    TrainingArrays t{Tensor::matrix(n, fd), Tensor::matrix(n, ad), Tensor::matrix(n, fd),
                     Tensor::matrix(n, 1),  Tensor::matrix(n, 1),  Tensor::matrix(n, 1),
                     {}};
    t.source.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& x = ds.samples[i];
        const auto fs = cmdp::state_features(env, x.s);
        const auto fs2 = cmdp::state_features(env, x.s2);
        const auto fa = cmdp::action_features(env, x.a);
        std::copy(fs.begin(), fs.end(), t.s.data.begin() + static_cast<long>(i * fd));
        std::copy(fs2.begin(), fs2.end(), t.s2.data.begin() + static_cast<long>(i * fd));
        std::copy(fa.begin(), fa.end(), t.a.data.begin() + static_cast<long>(i * ad));
        t.r.data[i] = x.r + ds.meta.reward_shift;
        t.c.data[i] = x.c;
        t.done.data[i] = x.terminal ? 1.0 : 0.0;
        t.source.push_back(x.source);
    }
    return t;
}

struct Batch {
    Tensor s, a, s2, r, c, done;
    std::size_t size() const { return r.rows(); }
};

inline Batch gather(const TrainingArrays& t, const std::vector<std::size_t>& idx) {
    return {numerics::select_rows(t.s, idx),  numerics::select_rows(t.a, idx),
            numerics::select_rows(t.s2, idx), numerics::select_rows(t.r, idx),
            numerics::select_rows(t.c, idx),  numerics::select_rows(t.done, idx)};
}

// ---- persistence --------------------------------------------------------------------

inline void save_dataset(const OfflineDataset& ds, const std::string& path) {
    using io::json;
    io::RecordWriter w(path);
    const auto& m = ds.meta;
    w.write({{"type", "dataset"},
             {"version", m.version},
             {"env", m.env_id},
             {"env_config", m.env_config},
             {"gamma", m.gamma},
             {"limit", io::encode_double(m.limit)},
             {"mix_ratio", m.mix_ratio},
             {"behavior_noise", m.behavior_noise},
             {"reward_shift", m.reward_shift},
             {"n_safe", m.n_safe},
             {"n_unsafe", m.n_unsafe},
             {"n_episodes", m.n_episodes},
             {"seed", m.seed},
             {"count", ds.size()}});
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& x = ds.samples[i];
        w.write({{"type", "sample"},
                 {"s", x.s},
                 {"a", x.a},
                 {"s2", x.s2},
                 {"r", x.r},
                 {"c", x.c},
                 {"terminal", x.terminal},
                 {"truncated", x.truncated},
                 {"source", to_string(x.source)},
                 {"episode", x.episode}});
    }
    w.finish();
}

inline OfflineDataset load_dataset(const std::string& path) {
    const auto records = io::read_records(path, "dataset", kDatasetVersion);
    OfflineDataset ds;
    std::size_t count = 0;
    io::at_record(0, [&] {
        const auto& h = records[0];
        auto& m = ds.meta;
        m.env_id = h.at("env").get<std::string>();
        m.env_config = h.at("env_config").get<std::string>();
        m.gamma = h.at("gamma").get<double>();
        m.limit = io::decode_double(h.at("limit"));
        m.mix_ratio = h.at("mix_ratio").get<double>();
        m.behavior_noise = h.at("behavior_noise").get<double>();
        m.reward_shift = h.at("reward_shift").get<double>();
        m.n_safe = h.at("n_safe").get<std::size_t>();
        m.n_unsafe = h.at("n_unsafe").get<std::size_t>();
        m.n_episodes = h.at("n_episodes").get<std::size_t>();
        m.seed = h.at("seed").get<std::uint64_t>();
        m.version = h.at("version").get<int>();
        count = h.at("count").get<std::size_t>();
    });
    if (records.size() - 1 != count)
        throw LoadError(records.size(), "header declares " + std::to_string(count) +
                                            " samples, file has " +
                                            std::to_string(records.size() - 1));
    ds.samples.reserve(count);
    std::size_t n_safe = 0;
    for (std::size_t i = 1; i < records.size(); ++i) {
        io::at_record(i, [&] {
            const auto& j = records[i];
            if (j.at("type") != "sample") throw LoadError(i, "expected a sample record");
            TransitionSample x;
            x.s = j.at("s").get<std::vector<double>>();
            x.a = j.at("a").get<std::vector<double>>();
            x.s2 = j.at("s2").get<std::vector<double>>();
            x.r = j.at("r").get<double>();
            x.c = j.at("c").get<double>();
            x.terminal = j.at("terminal").get<bool>();
            x.truncated = j.at("truncated").get<bool>();
            x.source = parse_source(j.at("source").get<std::string>());
            x.episode = j.at("episode").get<std::int64_t>();
            n_safe += x.source == SourceTag::safe;
            ds.samples.push_back(std::move(x));
        });
    }
    if (n_safe != ds.meta.n_safe || count - n_safe != ds.meta.n_unsafe)
        throw LoadError(0, "per-source sizes in header do not match the samples");
    return ds;
}

}  // namespace cpqlab::datagen
