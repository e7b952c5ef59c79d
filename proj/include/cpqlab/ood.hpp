#pragma once

// Conditional VAE behavior model and the latent-KL out-of-distribution test.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cpqlab/config.hpp"
#include "cpqlab/datagen.hpp"
#include "cpqlab/io/records.hpp"
#include "cpqlab/numerics/adam.hpp"
#include "cpqlab/numerics/mlp.hpp"
#include "cpqlab/numerics/tanh_gaussian.hpp"

namespace cpqlab::ood {

using numerics::MlpParams;
using numerics::Rng;
using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

/// Latent log-std range used by the encoder.
inline constexpr double kLatentLogStdMin = numerics::kLogStdMin;
inline constexpr double kLatentLogStdMax = numerics::kLogStdMax;

struct CvaeModel {
    MlpParams encoder;  // [s, a] -> [mu_z, log_sigma_z]
    MlpParams decoder;  // [s, z] -> tanh(action)
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::size_t latent_dim = 0;
    double beta = 1.5;
    double decoder_std = 0.05;  // fixed std of the Gaussian decoder p(a|s,z)

    double recon_weight() const { return 0.5 / (decoder_std * decoder_std); }

    friend bool operator==(const CvaeModel&, const CvaeModel&) = default;
};

struct CvaeConfig {
    std::size_t hidden = 128;
    std::size_t hidden_layers = 2;
    std::size_t latent_dim = 0;  // 0: twice the action dimension
    double beta = 1.5;
    double decoder_std = 0.05;
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t steps = 20000;
};

struct OodConfig {
    std::size_t n_samples = 10;
    double threshold = 0.0;
    double percentile = 75.0;
    double epsilon = 0.1;  // reporting only
};

/// Reads the `vae.*` keys.
inline CvaeConfig cvae_config_from(const KeyValueConfig& cfg, CvaeConfig c = {}) {
    auto count = [&](const char* key, std::size_t fallback) {
        const long v = cfg.get_int(key, static_cast<long>(fallback));
        if (v < 0) throw DomainError(std::string(key) + " must be >= 0");
        return static_cast<std::size_t>(v);
    };
    c.hidden = count("vae.hidden", c.hidden);
    c.hidden_layers = count("vae.hidden_layers", c.hidden_layers);
    c.latent_dim = count("vae.latent_dim", c.latent_dim);
    c.beta = cfg.get_double("vae.beta", c.beta);
    c.decoder_std = cfg.get_double("vae.decoder_std", c.decoder_std);
    c.learning_rate = cfg.get_double("vae.learning_rate", c.learning_rate);
    c.batch_size = count("vae.batch_size", c.batch_size);
    c.steps = count("vae.steps", c.steps);
    if (c.hidden < 1 || c.batch_size < 1 || !(c.decoder_std > 0.0) || !(c.learning_rate > 0.0) || !(c.beta >= 0.0))
        throw DomainError("vae: invalid config");
    return c;
}

inline CvaeModel make_cvae(std::size_t state_dim, std::size_t action_dim, const CvaeConfig& cfg, Rng& rng) {
    if (state_dim == 0 || action_dim == 0) throw DimensionError("make_cvae: empty state or action");
    if (!(cfg.beta > 0.0)) throw DomainError("make_cvae: beta must be > 0");
    CvaeModel m;
    m.state_dim = state_dim;
    m.action_dim = action_dim;
    m.latent_dim = cfg.latent_dim ? cfg.latent_dim : 2 * action_dim;
    m.beta = cfg.beta;
    if (!(cfg.decoder_std > 0.0)) throw DomainError("make_cvae: decoder_std must be > 0");
    m.decoder_std = cfg.decoder_std;
    std::vector<std::size_t> enc{state_dim + action_dim}, dec{state_dim + m.latent_dim};
    for (std::size_t i = 0; i < cfg.hidden_layers; ++i) {
        enc.push_back(cfg.hidden);
        dec.push_back(cfg.hidden);
    }
    enc.push_back(2 * m.latent_dim);
    dec.push_back(action_dim);
    m.encoder = numerics::make_mlp(enc, rng);
    m.decoder = numerics::make_mlp(dec, rng, numerics::OutputTransform::tanh_squash);
    return m;
}

struct ElboVars {
    Var total;
    Var reconstruction;
    Var kl;
};

/// Negative ELBO on a tape: the Gaussian decoder's log-likelihood up to a
/// constant, ||a - dec(s, mu + sigma*noise)||^2 / (2 decoder_std^2), plus beta
/// times the closed-form KL(q(z|s,a) || N(0, I)); both averaged over rows.
inline ElboVars cvae_elbo_on_tape(Tape& tape, const numerics::BoundMlp& enc, const numerics::BoundMlp& dec,
                                  const CvaeModel& m, const Tensor& s, const Tensor& a, const Tensor& noise) {
    if (noise.rank() != 2 || noise.rows() != s.rows() || noise.cols() != m.latent_dim)
        throw DimensionError("cvae_elbo_loss: noise must be " + std::to_string(s.rows()) + " x " +
                             std::to_string(m.latent_dim));
    Var sv = tape.constant(s), av = tape.constant(a);
    Var h = enc(numerics::concat_cols(sv, av));
    Var mu = numerics::slice_cols(h, 0, m.latent_dim);
    Var log_sigma = numerics::clamp(numerics::slice_cols(h, m.latent_dim, 2 * m.latent_dim), kLatentLogStdMin,
                                    kLatentLogStdMax);
    Var sigma = numerics::exp(log_sigma);
    Var z = numerics::add(mu, numerics::mul(sigma, tape.constant(noise)));
    Var recon_a = dec(numerics::concat_cols(sv, z));
    Var recon = numerics::scale(numerics::sum(numerics::square(numerics::sub(recon_a, av))),
                                m.recon_weight() / static_cast<double>(s.rows()));
    // ½ Σ (μ² + σ² − 1 − log σ²)
    Var kl_terms = numerics::sub(numerics::add(numerics::square(mu), numerics::square(sigma)),
                                 numerics::add_scalar(numerics::scale(log_sigma, 2.0), 1.0));
    Var kl = numerics::scale(numerics::sum(kl_terms), 0.5 / static_cast<double>(s.rows()));
    return {numerics::add(recon, numerics::scale(kl, m.beta)), recon, kl};
}

struct ElboLoss {
    double total = 0.0;
    double reconstruction = 0.0;
    double kl = 0.0;
};

inline ElboLoss cvae_elbo_loss(const CvaeModel& m, const Tensor& s, const Tensor& a, const Tensor& noise) {
    Tape tape;
    numerics::BoundMlp enc(tape, m.encoder, false), dec(tape, m.decoder, false);
    auto v = cvae_elbo_on_tape(tape, enc, dec, m, s, a, noise);
    return {v.total.item(), v.reconstruction.item(), v.kl.item()};
}

struct CvaeGradients {
    ElboLoss loss;
    numerics::MlpGrads encoder;
    numerics::MlpGrads decoder;
};

inline CvaeGradients cvae_gradients(const CvaeModel& m, const Tensor& s, const Tensor& a, const Tensor& noise) {
    Tape tape;
    numerics::BoundMlp enc(tape, m.encoder, true), dec(tape, m.decoder, true);
    auto v = cvae_elbo_on_tape(tape, enc, dec, m, s, a, noise);
    tape.backward(v.total);
    return {{v.total.item(), v.reconstruction.item(), v.kl.item()}, enc.grads(), dec.grads()};
}

/// Per-row KL(q(z|s,a) || N(0,I)) in closed form. Deterministic.
inline std::vector<double> kl_scores(const CvaeModel& m, const Tensor& s, const Tensor& a) {
    if (s.rows() != a.rows()) throw DimensionError("kl_score: state and action row counts differ");
    const Tensor h = numerics::mlp_forward(m.encoder, numerics::hcat(s, a));
    std::vector<double> out(s.rows(), 0.0);
    for (std::size_t r = 0; r < s.rows(); ++r) {
        double kl = 0.0;
        for (std::size_t j = 0; j < m.latent_dim; ++j) {
            const double mu = h(r, j);
            const double ls = std::clamp(h(r, m.latent_dim + j), kLatentLogStdMin, kLatentLogStdMax);
            kl += mu * mu + std::exp(2.0 * ls) - 1.0 - 2.0 * ls;
        }
        out[r] = std::max(0.0, 0.5 * kl);
    }
    return out;
}

inline double kl_score(const CvaeModel& m, const std::vector<double>& s, const std::vector<double>& a) {
    return kl_scores(m, Tensor::row(s), Tensor::row(a)).front();
}

struct CvaeTrainResult {
    CvaeModel model;
    std::vector<ElboLoss> trace;
};

/// M Adam steps on minibatch ELBO over dataset (s,a) pairs.
inline CvaeTrainResult train_cvae(const datagen::TrainingArrays& data, const CvaeConfig& cfg, std::uint64_t seed) {
    if (data.size() == 0) throw DomainError("train_cvae: empty dataset");
    Rng rng(seed);
    Rng init = rng.split();
    CvaeTrainResult res{make_cvae(data.s.cols(), data.a.cols(), cfg, init), {}};
    auto& m = res.model;
    auto enc_opt = numerics::make_adam(m.encoder, cfg.learning_rate);
    auto dec_opt = numerics::make_adam(m.decoder, cfg.learning_rate);
    const std::size_t batch = std::min(cfg.batch_size, data.size());
    res.trace.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto idx = datagen::batch_indices(data.size(), batch, rng);
        const Tensor s = numerics::select_rows(data.s, idx), a = numerics::select_rows(data.a, idx);
        Tensor noise = Tensor::matrix(batch, m.latent_dim);
        for (double& v : noise.data) v = rng.normal();
        CvaeGradients g;
        try {
            g = cvae_gradients(m, s, a, noise);
        } catch (const NumericError& e) {
            throw TrainingError(step, std::string("cvae: ") + e.what());
        }
        if (!std::isfinite(g.loss.total)) throw TrainingError(step, "cvae: non-finite ELBO");
        numerics::adam_step(m.encoder, g.encoder, enc_opt);
        numerics::adam_step(m.decoder, g.decoder, dec_opt);
        res.trace.push_back(g.loss);
    }
    return res;
}

/// Nearest-rank percentile of the KL scores of every dataset pair.
inline double percentile_nearest_rank(std::vector<double> values, double percentile) {
    if (values.empty()) throw DomainError("calibrate_threshold: no scores");
    if (!(percentile > 0.0 && percentile <= 100.0)) throw DomainError("calibrate_threshold: percentile outside (0,100]");
    std::sort(values.begin(), values.end());
    auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(values.size())));
    rank = std::clamp<std::size_t>(rank, 1, values.size());
    return values[rank - 1];
}

inline double calibrate_threshold(const CvaeModel& m, const Tensor& s, const Tensor& a, double percentile) {
    return percentile_nearest_rank(kl_scores(m, s, a), percentile);
}

/// Indices (order preserved) of candidate actions with score ≥ d at state s.
inline std::vector<std::size_t> select_ood_actions(const CvaeModel& m, const std::vector<double>& s,
                                                   const Tensor& candidates, double d) {
    if (candidates.rows() == 0) throw DomainError("select_ood_actions: no candidates");
    const Tensor states = numerics::repeat_rows(Tensor::row(s), candidates.rows());
    const auto scores = kl_scores(m, states, candidates);
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (scores[i] >= d) picked.push_back(i);
    return picked;
}

/// Probability that a random positive outscores a random negative (ties count ½).
inline double roc_auc(const std::vector<double>& negatives, const std::vector<double>& positives) {
    if (negatives.empty() || positives.empty()) throw DomainError("roc_auc: empty class");
    std::vector<std::pair<double, int>> all;
    for (double v : negatives) all.emplace_back(v, 0);
    for (double v : positives) all.emplace_back(v, 1);
    std::sort(all.begin(), all.end());
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (all[k].second == 1) rank_sum += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(positives.size()), nn = static_cast<double>(negatives.size());
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// ---- persistence --------------------------------------------------------------------

inline constexpr int kCvaeVersion = 1;

inline void save_cvae(const CvaeModel& m, const std::string& path) {
    io::RecordWriter w(path);
    w.write({{"type", "cvae"},
             {"version", kCvaeVersion},
             {"state_dim", m.state_dim},
             {"action_dim", m.action_dim},
             {"latent_dim", m.latent_dim},
             {"beta", m.beta},
             {"decoder_std", m.decoder_std}});
    w.write({{"type", "network"}, {"name", "encoder"}, {"params", io::mlp_to_json(m.encoder)}});
    w.write({{"type", "network"}, {"name", "decoder"}, {"params", io::mlp_to_json(m.decoder)}});
    w.finish();
}

inline CvaeModel load_cvae(const std::string& path) {
    const auto rec = io::read_records(path, "cvae", kCvaeVersion);
    if (rec.size() != 3) throw LoadError(rec.size(), "expected header plus two network records");
    CvaeModel m;
    io::at_record(0, [&] {
        m.state_dim = rec[0].at("state_dim").get<std::size_t>();
        m.action_dim = rec[0].at("action_dim").get<std::size_t>();
        m.latent_dim = rec[0].at("latent_dim").get<std::size_t>();
        m.beta = rec[0].at("beta").get<double>();
        m.decoder_std = rec[0].at("decoder_std").get<double>();
    });
    m.encoder = io::at_record(1, [&] { return io::mlp_from_json(rec[1].at("params")); });
    m.decoder = io::at_record(2, [&] { return io::mlp_from_json(rec[2].at("params")); });
    if (m.encoder.input_width() != m.state_dim + m.action_dim || m.encoder.output_width() != 2 * m.latent_dim)
        throw LoadError(1, "encoder shape does not match the header");
    if (m.decoder.input_width() != m.state_dim + m.latent_dim || m.decoder.output_width() != m.action_dim)
        throw LoadError(2, "decoder shape does not match the header");
    return m;
}

}  // namespace cpqlab::ood
