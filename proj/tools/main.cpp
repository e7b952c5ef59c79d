// cpqlab command line: dataset generation, model training, theorem checks and
// experiment runs. Every subcommand reads an optional key = value config file
// (--config) plus --set key=value overrides; dedicated flags win over both.
//
// Exit codes: 0 success, 1 library error, 2 usage error, 3 a checked
// invariant did not hold.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cpqlab/baselines.hpp"
#include "cpqlab/cpq.hpp"
#include "cpqlab/datagen.hpp"
#include "cpqlab/harness.hpp"
#include "cpqlab/ood.hpp"
#include "cpqlab/verify.hpp"

using namespace cpqlab;
namespace fs = std::filesystem;
using numerics::MlpParams;
using numerics::Rng;

namespace {

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInvariant = 3;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", o.overrides, "override a config key (key=value), repeatable");
}

KeyValueConfig load_config(const CommonOpts& o) {
    KeyValueConfig kv = o.config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(o.config_path);
    for (const auto& s : o.overrides) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw DomainError("--set expects key=value, got '" + s + "'");
        kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return kv;
}

template <class T>
void put(KeyValueConfig& kv, const std::string& key, const std::optional<T>& v) {
    if (!v) return;
    if constexpr (std::is_same_v<T, std::string>)
        kv.set(key, *v);
    else if constexpr (std::is_floating_point_v<T>)
        kv.set(key, static_cast<double>(*v));
    else
        kv.set(key, std::to_string(*v));
}

/// Rows start with the 0-based step index; written as steps completed.
std::string trace_csv(const std::vector<std::string>& head, const std::vector<std::vector<double>>& rows) {
    std::string out = harness::csv_line(head);
    for (auto r : rows) {
        r.front() += 1.0;
        std::vector<std::string> cells;
        for (double v : r) {
            if (!std::isfinite(v)) throw NumericError("non-finite value in metrics");
            cells.push_back(harness::fmt(v));
        }
        out += harness::csv_line(cells);
    }
    return out;
}

fs::path output_dir(const std::string& dir) {
    const fs::path p = harness::resolve_output(dir);
    fs::create_directories(p);
    return p;
}

fs::path output_file(const std::string& file) {
    const fs::path p = harness::resolve_output(file);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
}

void print_eval(const harness::EvalReport& r) {
    std::cout << "final evaluation: return " << r.return_mean << " +- " << r.return_std << ", cost " << r.cost_mean
              << " +- " << r.cost_std << " (limit " << r.limit << (r.violation ? ", violated" : "") << ")\n";
}

harness::EvalReport evaluate_final(const cmdp::Env& env, const MlpParams& actor, const KeyValueConfig& kv,
                                   std::uint64_t seed, double limit) {
    const auto episodes = static_cast<std::size_t>(kv.get_int("eval.episodes", 10));
    Rng rng(seed * 1000003u);
    auto rep = harness::evaluate_policy(env, actor::as_policy(actor, env, kv.get_bool("eval.stochastic", false)),
                                        episodes, cmdp::default_gamma(env), rng, limit);
    rep.seed = seed;
    return rep;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cpqlab: constraints penalized Q-learning for offline safe RL"};
    app.require_subcommand(1);

    // gen-data
    CommonOpts gen_common;
    std::optional<std::string> gen_env;
    std::optional<long> gen_size;
    std::optional<double> gen_mix, gen_noise;
    std::optional<long> gen_seed;
    std::string gen_out = "dataset.jsonl";
    auto* gen = app.add_subcommand("gen-data", "generate a mixed offline dataset");
    add_common(gen, gen_common);
    gen->add_option("--env", gen_env, "environment id (chain6, pointmass)");
    gen->add_option("--size", gen_size, "number of transitions");
    gen->add_option("--mix", gen_mix, "fraction of transitions from the safe controller");
    gen->add_option("--noise", gen_noise, "Gaussian behavior noise std (continuous envs)");
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--out", gen_out, "output path (relative paths go under the output root)");

    // train-vae
    CommonOpts vae_common;
    std::string vae_data, vae_out = "vae.jsonl";
    std::uint64_t vae_seed = 0;
    auto* vae = app.add_subcommand("train-vae", "fit the CVAE used for OOD action detection");
    add_common(vae, vae_common);
    vae->add_option("--data", vae_data, "dataset path")->required();
    vae->add_option("--seed", vae_seed, "training seed");
    vae->add_option("--out", vae_out, "output model path");

    // train-cpq / train-bc-safe / train-naive
    CommonOpts tr_common;
    std::string tr_data, tr_vae, tr_out = "train";
    std::uint64_t tr_seed = 0;
    std::optional<double> tr_limit;
    auto add_train = [&](const char* name, const char* help) {
        auto* s = app.add_subcommand(name, help);
        add_common(s, tr_common);
        s->add_option("--data", tr_data, "dataset path")->required();
        s->add_option("--seed", tr_seed, "training seed");
        s->add_option("--out", tr_out, "output directory");
        return s;
    };
    auto* tcpq = add_train("train-cpq", "train CPQ; writes checkpoint.jsonl and metrics.csv");
    tcpq->add_option("--vae", tr_vae, "CVAE model path")->required();
    tcpq->add_option("--limit", tr_limit, "cost limit (default: the dataset's)");
    auto* tbc = add_train("train-bc-safe", "behavior cloning on the safe samples");
    auto* tnaive = add_train("train-naive", "naive dual actor-critic with an MMD constraint");
    tnaive->add_option("--limit", tr_limit, "cost limit (default: the dataset's)");

    // verify-theorems
    CommonOpts ver_common;
    std::optional<std::string> ver_env;
    std::optional<double> ver_eps, ver_alpha, ver_limit;
    std::optional<long> ver_seed;
    std::string ver_out;
    auto* ver = app.add_subcommand("verify-theorems", "exact checks of the penalty and tabular CPQ guarantees");
    add_common(ver, ver_common);
    ver->add_option("--env", ver_env, "tabular environment id");
    ver->add_option("--epsilon", ver_eps, "OOD ratio threshold");
    ver->add_option("--alpha", ver_alpha, "penalty weight (negative: the minimal lifting value)");
    ver->add_option("--limit", ver_limit, "cost limit");
    ver->add_option("--seed", ver_seed, "dataset seed");
    ver->add_option("--out", ver_out, "also write the CSV report to this path");

    // run / sweep
    CommonOpts run_common;
    auto* run = app.add_subcommand("run", "full experiment: data, training per seed, curves and summary");
    add_common(run, run_common);
    run->get_option("--config")->required();
    CommonOpts sweep_common;
    std::vector<double> sweep_limits;
    auto* sweep = app.add_subcommand("sweep", "run one experiment per cost limit on a shared dataset");
    add_common(sweep, sweep_common);
    sweep->get_option("--config")->required();
    sweep->add_option("--limits", sweep_limits, "cost limits")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitUsage;
    }

    try {
        if (*gen) {
            auto kv = load_config(gen_common);
            put(kv, "env", gen_env);
            put(kv, "dataset.size", gen_size);
            put(kv, "dataset.mix_ratio", gen_mix);
            put(kv, "dataset.noise", gen_noise);
            put(kv, "dataset.seed", gen_seed);
            const auto cfg = harness::experiment_config_from(kv);
            const auto env = cmdp::make_env(cfg.env_id, kv);
            datagen::GenerationOptions opt{cfg.behavior_noise, kv.to_string()};
            const auto ds = datagen::generate_dataset(env, cfg.mix_ratio, cfg.dataset_size, cfg.dataset_seed, opt);
            const auto path = output_file(gen_out);
            datagen::save_dataset(ds, path.string());
            std::cout << "wrote " << ds.size() << " transitions (" << ds.meta.n_safe << " safe, " << ds.meta.n_unsafe
                      << " unsafe, " << ds.meta.n_episodes << " episodes) to " << path.string() << "\n";
            return 0;
        }

        if (*vae) {
            const auto kv = load_config(vae_common);
            const auto ds = datagen::load_dataset(vae_data);
            const auto arrays = datagen::encode_dataset(ds, datagen::dataset_env(ds));
            const auto res = ood::train_cvae(arrays, ood::cvae_config_from(kv), vae_seed);
            const auto path = output_file(vae_out);
            ood::save_cvae(res.model, path.string());
            const auto every = static_cast<std::size_t>(kv.get_int("vae.log_interval", 100));
            std::vector<std::vector<double>> rows;
            for (std::size_t i = 0; i < res.trace.size(); ++i)
                if ((i + 1) % every == 0 || i + 1 == res.trace.size())
                    rows.push_back({static_cast<double>(i), res.trace[i].total, res.trace[i].reconstruction,
                                    res.trace[i].kl});
            harness::write_text(path.string() + ".metrics.csv",
                                trace_csv({"step", "loss", "reconstruction", "kl"}, rows));
            if (!res.trace.empty())
                std::cout << "final ELBO loss " << res.trace.back().total << " (kl " << res.trace.back().kl << ")\n";
            std::cout << "wrote " << path.string() << "\n";
            return 0;
        }

        if (*tcpq || *tbc || *tnaive) {
            const auto kv = load_config(tr_common);
            const auto ds = datagen::load_dataset(tr_data);
            const auto env = datagen::dataset_env(ds);
            const auto arrays = datagen::encode_dataset(ds, env);
            const double limit = tr_limit ? *tr_limit : kv.get_double("limit", ds.meta.limit);
            const auto dir = output_dir(tr_out);
            const std::string ckpt = (dir / "checkpoint.jsonl").string();
            harness::EvalReport rep;
            if (*tcpq) {
                auto c = cpq::cpq_config_from(kv);
                c.limit = limit;
                c.gamma = ds.meta.gamma;
                const auto res = cpq::cpq_train(arrays, ood::load_cvae(tr_vae), c, tr_seed, ds.meta.reward_shift);
                cpq::save_agent(res.agent, ckpt);
                std::vector<std::vector<double>> rows;
                for (const auto& m : res.trace) rows.push_back(cpq::metric_values(m));
                harness::write_text(dir / "metrics.csv", trace_csv(cpq::metric_columns(), rows));
                for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
                rep = evaluate_final(env, res.agent.actor, kv, tr_seed, limit);
            } else if (*tbc) {
                const auto res = baselines::bc_safe_train(arrays, baselines::bc_config_from(kv), tr_seed);
                baselines::save_actor(res.actor, "bc_safe", ckpt);
                std::vector<std::vector<double>> rows;
                for (auto [step, loss] : res.trace) rows.push_back({static_cast<double>(step), loss});
                harness::write_text(dir / "metrics.csv", trace_csv({"step", "bc_loss"}, rows));
                rep = evaluate_final(env, res.actor, kv, tr_seed, limit);
            } else {
                auto c = baselines::naive_config_from(kv);
                c.limit = limit;
                c.gamma = ds.meta.gamma;
                const auto res = baselines::naive_dual_train(arrays, c, tr_seed, ds.meta.reward_shift);
                baselines::save_naive_agent(res.agent, ckpt);
                std::vector<std::vector<double>> rows;
                for (const auto& m : res.trace) rows.push_back(baselines::naive_metric_values(m));
                harness::write_text(dir / "metrics.csv", trace_csv(baselines::naive_metric_columns(), rows));
                rep = evaluate_final(env, res.agent.actor, kv, tr_seed, limit);
            }
            print_eval(rep);
            std::cout << "wrote " << dir.string() << "\n";
            return 0;
        }

        if (*ver) {
            auto kv = load_config(ver_common);
            put(kv, "env", ver_env);
            put(kv, "epsilon", ver_eps);
            put(kv, "alpha", ver_alpha);
            put(kv, "limit", ver_limit);
            put(kv, "seed", ver_seed);
            const auto report = verify::verify_theorems(verify::theorem_setup_from(kv));
            verify::write_report_csv(std::cout, report);
            if (!ver_out.empty()) {
                std::ostringstream csv;
                verify::write_report_csv(csv, report);
                harness::write_text(output_file(ver_out), csv.str());
            }
            verify::write_summary(std::cerr, report);
            return report.all_hold() ? 0 : kExitInvariant;
        }

        if (*run) {
            const auto res = harness::run_experiment(harness::experiment_config_from(load_config(run_common)));
            std::cout << "final mean return " << res.final_return_mean << ", cost " << res.final_cost_mean
                      << " (limit " << res.limit << (res.violation ? ", violated" : "") << ")\n"
                      << "wrote " << res.dir.string() << "\n";
            return 0;
        }

        if (*sweep) {
            const auto kv = load_config(sweep_common);
            if (sweep_limits.empty()) sweep_limits = kv.get_doubles("sweep.limits", {});
            const auto rows = harness::sweep_limits(harness::experiment_config_from(kv), sweep_limits);
            for (const auto& r : rows)
                std::cout << "limit " << r.limit << ": return " << r.result.final_return_mean << ", cost "
                          << r.result.final_cost_mean << (r.result.violation ? " (violated)" : "") << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return 0;
}
