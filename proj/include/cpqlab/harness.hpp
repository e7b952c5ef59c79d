#pragma once

// Experiment driver: seeded training runs with periodic evaluation, limit
// sweeps, and CSV / SVG reporting. Everything a run writes lives under its
// output directory.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cpqlab/baselines.hpp"
#include "cpqlab/cmdp.hpp"
#include "cpqlab/config.hpp"
#include "cpqlab/cpq.hpp"
#include "cpqlab/datagen.hpp"
#include "cpqlab/ood.hpp"
#include "cpqlab/tabular.hpp"

namespace cpqlab::harness {

namespace fs = std::filesystem;
using numerics::Rng;

enum class Algorithm { cpq, bc_safe, naive, tabular_cpq };

inline std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::cpq: return "cpq";
        case Algorithm::bc_safe: return "bc-safe";
        case Algorithm::naive: return "naive";
        case Algorithm::tabular_cpq: return "tabular-cpq";
    }
    return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
    for (Algorithm a : {Algorithm::cpq, Algorithm::bc_safe, Algorithm::naive, Algorithm::tabular_cpq})
        if (to_string(a) == s) return a;
    throw DomainError("unknown algorithm '" + s + "' (expected cpq, bc-safe, naive or tabular-cpq)");
}

/// Environment variable that relocates relative output directories.
inline constexpr const char* kOutputRootVar = "CPQ_OUTPUT_ROOT";

inline fs::path output_root() {
    const char* v = std::getenv(kOutputRootVar);
    return v && *v ? fs::path(v) : fs::path("runs");
}

/// Relative paths resolve under the output root; absolute paths are kept.
inline fs::path resolve_output(const std::string& dir) {
    const fs::path p(dir);
    return p.is_absolute() ? p : output_root() / p;
}

// Desk-scale reference sizes, recorded alongside every run.
inline constexpr double kReferenceTrainSteps = 500000;
inline constexpr double kReferenceDatasetSize = 2000000;

struct ExperimentConfig {
    std::string env_id = "pointmass";
    std::string dataset_path;  // empty: generate
    std::size_t dataset_size = 200000;
    double mix_ratio = 0.5;
    double behavior_noise = 0.1;
    std::uint64_t dataset_seed = 0;
    std::string vae_path;  // empty: train
    std::uint64_t vae_seed = 0;
    Algorithm algorithm = Algorithm::cpq;
    double limit = 10.0;
    std::size_t eval_interval = 5000;
    std::size_t eval_episodes = 10;
    bool eval_stochastic = false;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::string output_dir = "experiment";
    KeyValueConfig raw;  // every key, including env and algorithm sections

    void validate() const {
        if (eval_episodes < 1) throw DomainError("experiment: eval.episodes must be >= 1");
        if (eval_interval < 1) throw DomainError("experiment: eval.interval must be >= 1");
        if (seeds.empty()) throw DomainError("experiment: seeds must be nonempty");
        if (output_dir.empty()) throw DomainError("experiment: output_dir must be set");
        if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) throw DomainError("experiment: dataset.mix_ratio outside [0,1]");
        if (dataset_path.empty() && dataset_size < 1) throw DomainError("experiment: dataset.size must be >= 1");
    }
};

inline std::vector<std::uint64_t> parse_seeds(const KeyValueConfig& cfg, const std::string& key,
                                              std::vector<std::uint64_t> fallback) {
    if (!cfg.has(key)) return fallback;
    std::vector<std::uint64_t> out;
    for (double v : cfg.get_doubles(key, {})) {
        if (!(v >= 0.0) || v != std::floor(v)) throw DomainError(key + ": seeds must be nonnegative integers");
        out.push_back(static_cast<std::uint64_t>(v));
    }
    return out;
}

inline ExperimentConfig experiment_config_from(const KeyValueConfig& cfg) {
    ExperimentConfig c;
    c.raw = cfg;
    c.env_id = cfg.get_string("env", c.env_id);
    const cmdp::Env env = cmdp::make_env(c.env_id, cfg);
    c.dataset_path = cfg.get_string("dataset.path", "");
    c.dataset_size = static_cast<std::size_t>(cfg.get_int("dataset.size", static_cast<long>(c.dataset_size)));
    c.mix_ratio = cfg.get_double("dataset.mix_ratio", c.mix_ratio);
    c.behavior_noise = cfg.get_double("dataset.noise", cmdp::is_tabular(env) ? 0.0 : c.behavior_noise);
    c.dataset_seed = static_cast<std::uint64_t>(cfg.get_int("dataset.seed", 0));
    c.vae_path = cfg.get_string("vae.path", "");
    c.vae_seed = static_cast<std::uint64_t>(cfg.get_int("vae.seed", 0));
    c.algorithm = parse_algorithm(cfg.get_string("algorithm", "cpq"));
    c.limit = cfg.get_double("limit", cmdp::default_limit(env));
    c.eval_interval = static_cast<std::size_t>(cfg.get_int("eval.interval", static_cast<long>(c.eval_interval)));
    c.eval_episodes = static_cast<std::size_t>(cfg.get_int("eval.episodes", static_cast<long>(c.eval_episodes)));
    c.eval_stochastic = cfg.get_bool("eval.stochastic", false);
    c.seeds = parse_seeds(cfg, "seeds", c.seeds);
    c.output_dir = cfg.get_string("output_dir", c.output_dir);
    c.validate();
    return c;
}

// ---- evaluation -----------------------------------------------------------------------

struct EvalReport {
    std::size_t step = 0;
    std::uint64_t seed = 0;
    double return_mean = 0.0;
    double return_std = 0.0;
    double cost_mean = 0.0;
    double cost_std = 0.0;
    double limit = 0.0;
    bool violation = false;  // cost_mean > limit
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

/// Fresh rollouts of `policy`; population standard deviations.
inline EvalReport evaluate_policy(const cmdp::Env& env, const cmdp::Policy& policy, std::size_t episodes,
                                  double gamma, Rng& rng, double limit = std::numeric_limits<double>::infinity()) {
    if (episodes < 1) throw DomainError("evaluate_policy: episodes must be >= 1");
    std::vector<double> r, c;
    for (std::size_t e = 0; e < episodes; ++e) {
        const auto out = cmdp::discounted_rollout(env, policy, gamma, cmdp::horizon(env), rng);
        r.push_back(out.discounted_return);
        c.push_back(out.discounted_cost);
    }
    EvalReport rep;
    std::tie(rep.return_mean, rep.return_std) = mean_std(r);
    std::tie(rep.cost_mean, rep.cost_std) = mean_std(c);
    rep.limit = limit;
    rep.violation = rep.cost_mean > limit;
    return rep;
}

/// Samples a tabular policy row.
inline cmdp::Policy tabular_policy(const tabular::TabularPolicy& pi) {
    return [pi](const cmdp::EnvState& s, Rng& rng) {
        const auto st = static_cast<std::size_t>(s.obs.at(0));
        std::vector<double> row(pi.p.begin() + static_cast<std::ptrdiff_t>(st * pi.n_actions),
                                pi.p.begin() + static_cast<std::ptrdiff_t>((st + 1) * pi.n_actions));
        return cmdp::Action{static_cast<double>(rng.categorical(row))};
    };
}

// ---- formatting -----------------------------------------------------------------------

/// Shortest round-trip text for a double (byte-stable across runs).
inline std::string fmt(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
}

inline std::string csv_line(const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
    return s + "\n";
}

/// Learning curve: return and cost polylines plus a dashed line at the limit.
inline std::string learning_curve_svg(const std::vector<double>& steps, const std::vector<double>& returns,
                                      const std::vector<double>& costs, double limit, const std::string& title) {
    const double W = 640, H = 400, L = 60, R = 20, T = 30, B = 40;
    double x0 = 0, x1 = 1, y0 = limit, y1 = limit;
    if (!steps.empty()) {
        x0 = *std::min_element(steps.begin(), steps.end());
        x1 = *std::max_element(steps.begin(), steps.end());
    }
    for (const auto* v : {&returns, &costs})
        for (double y : *v) {
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto X = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto Y = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
    auto poly = [&](const std::vector<double>& ys, const char* cls, const char* color) {
        std::string pts;
        for (std::size_t i = 0; i < ys.size(); ++i) pts += (i ? " " : "") + fmt(X(steps[i])) + "," + fmt(Y(ys[i]));
        return std::string("<polyline class=\"") + cls + "\" fill=\"none\" stroke=\"" + color +
               "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    };
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    o << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
      << "\" fill=\"none\" stroke=\"#999\"/>\n";
    o << "<text x=\"" << L << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
    o << "<text x=\"" << L << "\" y=\"" << H - 10 << "\" font-size=\"11\">step " << fmt(x0) << " .. " << fmt(x1)
      << "</text>\n";
    o << "<text x=\"" << W - R - 220 << "\" y=\"" << H - 10 << "\" font-size=\"11\">y " << fmt(y0) << " .. "
      << fmt(y1) << "</text>\n";
    o << poly(returns, "return", "#1f77b4");
    o << poly(costs, "cost", "#d62728");
    o << "<line class=\"limit\" x1=\"" << fmt(L) << "\" y1=\"" << fmt(Y(limit)) << "\" x2=\"" << fmt(W - R)
      << "\" y2=\"" << fmt(Y(limit)) << "\" stroke=\"black\" stroke-dasharray=\"6,4\"/>\n";
    o << "<text x=\"" << W - R - 120 << "\" y=\"" << T + 15 << "\" font-size=\"11\" fill=\"#1f77b4\">return</text>\n";
    o << "<text x=\"" << W - R - 60 << "\" y=\"" << T + 15 << "\" font-size=\"11\" fill=\"#d62728\">cost</text>\n";
    o << "</svg>\n";
    return o.str();
}

// ---- artifacts shared by the seeds of a run ---------------------------------------

struct Artifacts {
    cmdp::Env env;
    datagen::OfflineDataset dataset;
    datagen::TrainingArrays arrays;
    std::optional<ood::CvaeModel> vae;
};

/// Loads or generates the dataset and, for CPQ, the CVAE. Generated files are
/// written inside `dir`.
inline Artifacts prepare_artifacts(const ExperimentConfig& cfg, const fs::path& dir) {
    Artifacts a{cmdp::make_env(cfg.env_id, cfg.raw), {}, {}, std::nullopt};
    if (!cfg.dataset_path.empty()) {
        a.dataset = datagen::load_dataset(cfg.dataset_path);
        if (a.dataset.meta.env_id != cfg.env_id)
            throw DomainError("dataset " + cfg.dataset_path + " was generated for " + a.dataset.meta.env_id);
    } else {
        datagen::GenerationOptions opt{cfg.behavior_noise, cfg.raw.to_string()};
        a.dataset = datagen::generate_dataset(a.env, cfg.mix_ratio, cfg.dataset_size, cfg.dataset_seed, opt);
        datagen::save_dataset(a.dataset, (dir / "dataset.jsonl").string());
    }
    a.arrays = datagen::encode_dataset(a.dataset, a.env);
    if (cfg.algorithm == Algorithm::cpq) {
        if (!cfg.vae_path.empty()) {
            a.vae = ood::load_cvae(cfg.vae_path);
        } else {
            a.vae = ood::train_cvae(a.arrays, ood::cvae_config_from(cfg.raw), cfg.vae_seed).model;
            ood::save_cvae(*a.vae, (dir / "vae.jsonl").string());
        }
    }
    return a;
}

// ---- one seed -------------------------------------------------------------------------

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<EvalReport> curve;
    std::vector<std::string> warnings;
    const EvalReport& final_report() const { return curve.back(); }
};

namespace detail {

struct CurveWriter {
    const ExperimentConfig& cfg;
    const cmdp::Env& env;
    std::uint64_t seed;
    std::vector<std::string> metric_names;
    std::string csv;
    SeedResult result;

    CurveWriter(const ExperimentConfig& c, const cmdp::Env& e, std::uint64_t s, std::vector<std::string> names)
        : cfg(c), env(e), seed(s), metric_names(std::move(names)) {
        std::vector<std::string> head{"step", "return_mean", "return_std", "cost_mean", "cost_std", "violation"};
        head.insert(head.end(), metric_names.begin(), metric_names.end());
        csv = csv_line(head);
        result.seed = s;
    }

    bool due(std::size_t step, std::size_t total) const { return step % cfg.eval_interval == 0 || step == total; }

    void record(std::size_t step, const cmdp::Policy& policy, const std::vector<double>& metrics) {
        // evaluation episodes draw from their own stream, independent of training
        Rng rng(seed * 1000003u + step);
        EvalReport rep = evaluate_policy(env, policy, cfg.eval_episodes, cmdp::default_gamma(env), rng, cfg.limit);
        rep.step = step;
        rep.seed = seed;
        std::vector<std::string> row{std::to_string(step), fmt(rep.return_mean), fmt(rep.return_std),
                                     fmt(rep.cost_mean),   fmt(rep.cost_std),    rep.violation ? "1" : "0"};
        for (double v : metrics) {
            if (!std::isfinite(v)) throw TrainingError(step, "non-finite metric in report");
            row.push_back(fmt(v));
        }
        csv += csv_line(row);
        result.curve.push_back(rep);
    }
};

template <class V>
std::vector<double> drop_first(const V& v) {
    return std::vector<double>(v.begin() + 1, v.end());
}

inline std::vector<std::string> drop_first_name(const std::vector<std::string>& v) {
    return std::vector<std::string>(v.begin() + 1, v.end());
}

}  // namespace detail

/// Trains one seed, evaluating every `eval_interval` steps and at the end.
/// Writes metrics.csv and checkpoint.jsonl into `dir`.
inline SeedResult run_seed(const ExperimentConfig& cfg, const Artifacts& art, std::uint64_t seed, const fs::path& dir) {
    fs::create_directories(dir);
    const double shift = art.dataset.meta.reward_shift;
    const bool sto = cfg.eval_stochastic;
    SeedResult out;
    try {
        switch (cfg.algorithm) {
            case Algorithm::cpq: {
                auto c = cpq::cpq_config_from(cfg.raw);
                c.limit = cfg.limit;
                c.gamma = cmdp::default_gamma(art.env);
                detail::CurveWriter w(cfg, art.env, seed, detail::drop_first_name(cpq::metric_columns()));
                auto res = cpq::cpq_train(art.arrays, *art.vae, c, seed, shift,
                                          [&](std::size_t step, const cpq::CpqAgent& ag, const cpq::StepMetrics& m) {
                                              if (w.due(step, c.steps))
                                                  w.record(step, actor::as_policy(ag.actor, art.env, sto),
                                                           detail::drop_first(cpq::metric_values(m)));
                                          });
                cpq::save_agent(res.agent, (dir / "checkpoint.jsonl").string());
                write_text(dir / "metrics.csv", w.csv);
                out = std::move(w.result);
                out.warnings = res.warnings;
                break;
            }
            case Algorithm::bc_safe: {
                const auto c = baselines::bc_config_from(cfg.raw);
                detail::CurveWriter w(cfg, art.env, seed, {"bc_loss"});
                auto res = baselines::bc_safe_train(
                    art.arrays, c, seed, {}, [&](std::size_t step, const numerics::MlpParams& actor, double loss) {
                        if (w.due(step, c.steps)) w.record(step, actor::as_policy(actor, art.env, sto), {loss});
                    });
                baselines::save_actor(res.actor, "bc_safe", (dir / "checkpoint.jsonl").string());
                write_text(dir / "metrics.csv", w.csv);
                out = std::move(w.result);
                break;
            }
            case Algorithm::naive: {
                auto c = baselines::naive_config_from(cfg.raw);
                c.limit = cfg.limit;
                c.gamma = cmdp::default_gamma(art.env);
                detail::CurveWriter w(cfg, art.env, seed, detail::drop_first_name(baselines::naive_metric_columns()));
                auto res = baselines::naive_dual_train(
                    art.arrays, c, seed, shift,
                    [&](std::size_t step, const baselines::NaiveDualAgent& ag, const baselines::NaiveStepMetrics& m) {
                        if (w.due(step, c.steps))
                            w.record(step, actor::as_policy(ag.actor, art.env, sto),
                                     detail::drop_first(baselines::naive_metric_values(m)));
                    });
                baselines::save_naive_agent(res.agent, (dir / "checkpoint.jsonl").string());
                write_text(dir / "metrics.csv", w.csv);
                out = std::move(w.result);
                break;
            }
            case Algorithm::tabular_cpq: {
                const auto* tenv = std::get_if<cmdp::TabularEnv>(&art.env);
                if (!tenv) throw UnsupportedError("tabular-cpq needs a tabular environment");
                tabular::TabularCpqConfig c;
                c.limit = cfg.limit;
                c.epsilon = cfg.raw.get_double("tabular.epsilon", c.epsilon);
                c.alpha = cfg.raw.get_double("tabular.alpha", c.alpha);
                c.lc_factor = cfg.raw.get_double("tabular.lc_factor", c.lc_factor);
                c.max_iterations =
                    static_cast<std::size_t>(cfg.raw.get_int("tabular.max_iterations", static_cast<long>(c.max_iterations)));
                const auto res = tabular::tabular_cpq(*tenv, art.dataset, c);
                const auto exact = tabular::evaluate(tenv->spec, res.policy);
                detail::CurveWriter w(cfg, art.env, seed, {"iterations", "exact_return", "exact_cost"});
                w.record(res.iterations, tabular_policy(res.policy),
                         {static_cast<double>(res.iterations), exact.reward, exact.cost});
                io::RecordWriter ck((dir / "checkpoint.jsonl").string());
                ck.write({{"type", "tabular_policy"},
                          {"version", 1},
                          {"n_states", res.policy.n_states},
                          {"n_actions", res.policy.n_actions}});
                ck.write({{"type", "table"}, {"p", res.policy.p}});
                ck.finish();
                write_text(dir / "metrics.csv", w.csv);
                out = std::move(w.result);
                break;
            }
        }
    } catch (const Error& e) {
        throw Error("run " + cfg.output_dir + " seed " + std::to_string(seed) + ": " + e.what());
    }
    return out;
}

// ---- experiments ----------------------------------------------------------------------

struct ExperimentResult {
    fs::path dir;
    std::vector<SeedResult> seeds;  // sorted by seed
    double final_return_mean = 0.0;
    double final_cost_mean = 0.0;
    double limit = 0.0;
    bool violation = false;  // final_cost_mean > limit
};

namespace detail {

inline ExperimentResult run_with(const ExperimentConfig& cfg, const Artifacts& art, const fs::path& dir) {
    ExperimentResult res;
    res.dir = dir;
    res.limit = cfg.limit;
    auto seeds = cfg.seeds;
    std::sort(seeds.begin(), seeds.end());
    for (auto s : seeds) res.seeds.push_back(run_seed(cfg, art, s, dir / ("seed_" + std::to_string(s))));

    // seed-averaged curve over the shared evaluation steps
    const std::size_t n = std::min_element(res.seeds.begin(), res.seeds.end(), [](const auto& a, const auto& b) {
                              return a.curve.size() < b.curve.size();
                          })->curve.size();
    std::vector<double> steps, rets, costs;
    std::string csv = csv_line({"step", "return_mean", "cost_mean", "violation"});
    for (std::size_t i = 0; i < n; ++i) {
        double r = 0, c = 0;
        for (const auto& sr : res.seeds) {
            r += sr.curve[i].return_mean / static_cast<double>(res.seeds.size());
            c += sr.curve[i].cost_mean / static_cast<double>(res.seeds.size());
        }
        steps.push_back(static_cast<double>(res.seeds.front().curve[i].step));
        rets.push_back(r);
        costs.push_back(c);
        csv += csv_line({std::to_string(res.seeds.front().curve[i].step), fmt(r), fmt(c), c > cfg.limit ? "1" : "0"});
    }
    res.final_return_mean = rets.back();
    res.final_cost_mean = costs.back();
    res.violation = res.final_cost_mean > cfg.limit;
    write_text(dir / "curve.csv", csv);
    write_text(dir / "curve.svg", learning_curve_svg(steps, rets, costs, cfg.limit,
                                                     to_string(cfg.algorithm) + " on " + cfg.env_id +
                                                         ", l = " + fmt(cfg.limit)));

    std::string summary = csv_line({"seed", "return_mean", "return_std", "cost_mean", "cost_std", "violation"});
    for (const auto& sr : res.seeds) {
        const auto& f = sr.final_report();
        summary += csv_line({std::to_string(sr.seed), fmt(f.return_mean), fmt(f.return_std), fmt(f.cost_mean),
                             fmt(f.cost_std), f.violation ? "1" : "0"});
    }
    write_text(dir / "summary.csv", summary);

    std::size_t steps_trained = 0;
    if (cfg.algorithm == Algorithm::cpq) steps_trained = cpq::cpq_config_from(cfg.raw).steps;
    if (cfg.algorithm == Algorithm::bc_safe) steps_trained = baselines::bc_config_from(cfg.raw).steps;
    if (cfg.algorithm == Algorithm::naive) steps_trained = baselines::naive_config_from(cfg.raw).steps;
    std::string meta;
    meta += "algorithm = " + to_string(cfg.algorithm) + "\n";
    meta += "dataset_size = " + std::to_string(art.dataset.size()) + "\n";
    meta += "dataset_scale = " + fmt(static_cast<double>(art.dataset.size()) / kReferenceDatasetSize) + "\n";
    meta += "train_steps = " + std::to_string(steps_trained) + "\n";
    meta += "train_step_scale = " + fmt(static_cast<double>(steps_trained) / kReferenceTrainSteps) + "\n";
    for (const auto& sr : res.seeds)
        for (const auto& w : sr.warnings) meta += "warning.seed_" + std::to_string(sr.seed) + " = " + w + "\n";
    write_text(dir / "run_meta.txt", meta);
    return res;
}

}  // namespace detail

/// Full run: artifacts, every seed, curve.csv / curve.svg / summary.csv, and
/// the effective config.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path dir = resolve_output(cfg.output_dir);
    fs::create_directories(dir);
    write_text(dir / "config.txt", cfg.raw.to_string());
    const Artifacts art = prepare_artifacts(cfg, dir);
    return detail::run_with(cfg, art, dir);
}

struct LimitReport {
    double limit = 0.0;
    ExperimentResult result;
};

/// One run per limit on a shared dataset (and CVAE), rows sorted by limit.
/// Each limit writes to <output_dir>/limit_<l>; sweep.csv tabulates cost vs limit.
inline std::vector<LimitReport> sweep_limits(const ExperimentConfig& cfg, std::vector<double> limits) {
    cfg.validate();
    if (limits.empty()) throw DomainError("sweep_limits: limits must be nonempty");
    std::sort(limits.begin(), limits.end());
    const fs::path dir = resolve_output(cfg.output_dir);
    fs::create_directories(dir);
    write_text(dir / "config.txt", cfg.raw.to_string());
    const Artifacts art = prepare_artifacts(cfg, dir);
    std::vector<LimitReport> out;
    std::string csv = csv_line({"limit", "return_mean", "cost_mean", "cost_over_limit", "violation"});
    for (double l : limits) {
        ExperimentConfig c = cfg;
        c.limit = l;
        c.raw.set("limit", l);
        const fs::path sub = dir / ("limit_" + fmt(l));
        fs::create_directories(sub);
        write_text(sub / "config.txt", c.raw.to_string());
        LimitReport rep{l, detail::run_with(c, art, sub)};
        csv += csv_line({fmt(l), fmt(rep.result.final_return_mean), fmt(rep.result.final_cost_mean),
                         fmt(rep.result.final_cost_mean / l), rep.result.violation ? "1" : "0"});
        out.push_back(std::move(rep));
    }
    write_text(dir / "sweep.csv", csv);
    return out;
}

}  // namespace cpqlab::harness
