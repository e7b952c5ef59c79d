#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cpqlab/numerics/linalg.hpp"
#include "cpqlab/numerics/rng.hpp"
#include "cpqlab/numerics/tape.hpp"
#include "cpqlab/numerics/tensor.hpp"

namespace cpqlab::numerics {

enum class OutputTransform { identity, tanh_squash };

struct DenseLayer {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Fully connected network: ReLU after every hidden layer, optional tanh on the output.
struct MlpParams {
    std::vector<DenseLayer> layers;
    OutputTransform output = OutputTransform::identity;

    std::size_t input_width() const { return layers.front().weight.rows(); }
    std::size_t output_width() const { return layers.back().weight.cols(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

/// Gradient (or any parameter-shaped quantity) for an MlpParams.
using MlpGrads = MlpParams;

/// widths = {in, hidden..., out}. Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases likewise; the last layer is scaled by `last_layer_scale`.
inline MlpParams make_mlp(const std::vector<std::size_t>& widths, Rng& rng,
                          OutputTransform output = OutputTransform::identity,
                          double last_layer_scale = 1.0) {
    if (widths.size() < 2) throw DimensionError("make_mlp: need at least input and output widths");
    MlpParams p;
    p.output = output;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(widths[i]));
        const double s = (i + 2 == widths.size()) ? last_layer_scale : 1.0;
        DenseLayer layer{Tensor::matrix(widths[i], widths[i + 1]), Tensor::matrix(1, widths[i + 1])};
        for (double& w : layer.weight.data) w = s * rng.uniform(-bound, bound);
        for (double& b : layer.bias.data) b = s * rng.uniform(-bound, bound);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

/// Same architecture, every parameter zero.
inline MlpParams zeros_like(const MlpParams& p) {
    MlpParams z = p;
    for (auto& l : z.layers) {
        std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0);
        std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0);
    }
    return z;
}

inline void require_same_architecture(const MlpParams& a, const MlpParams& b, const char* op) {
    if (a.layers.size() != b.layers.size())
        throw DimensionError(std::string(op) + ": layer counts differ");
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        require_same_shape(a.layers[i].weight, b.layers[i].weight, op);
        require_same_shape(a.layers[i].bias, b.layers[i].bias, op);
    }
}

/// Apply f(param_value&, other_value) to every scalar pair.
template <class F>
void zip_params(MlpParams& a, const MlpParams& b, F&& f) {
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        auto& la = a.layers[i];
        const auto& lb = b.layers[i];
        for (std::size_t k = 0; k < la.weight.size(); ++k) f(la.weight.data[k], lb.weight.data[k]);
        for (std::size_t k = 0; k < la.bias.size(); ++k) f(la.bias.data[k], lb.bias.data[k]);
    }
}

/// Batched forward pass; rows of `input` are independent samples.
inline Tensor mlp_forward(const MlpParams& params, const Tensor& input) {
    if (params.layers.empty()) throw DimensionError("mlp_forward: empty network");
    if (input.rank() != 2 || input.cols() != params.input_width())
        throw DimensionError("mlp_forward: input shape " + shape_string(input.shape) +
                             " but network expects width " +
                             std::to_string(params.input_width()));
    Tensor h = input;
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        const auto& layer = params.layers[i];
        Tensor z = matmul(h, layer.weight);
        auto zm = as_matrix(z);
        zm.rowwise() += as_matrix(layer.bias).row(0);
        if (i + 1 < params.layers.size()) {
            zm = zm.cwiseMax(0.0);
        } else if (params.output == OutputTransform::tanh_squash) {
            zm = zm.array().tanh().matrix();
        }
        h = std::move(z);
    }
    return h;
}

/// An MlpParams placed on a tape. Parameters become variables (trainable) or
/// constants (network used only as a differentiable function of its input).
class BoundMlp {
public:
    BoundMlp(Tape& tape, const MlpParams& params, bool trainable) : params_(&params) {
        for (const auto& l : params.layers) {
            weights_.push_back(trainable ? tape.variable(l.weight) : tape.constant(l.weight));
            biases_.push_back(trainable ? tape.variable(l.bias) : tape.constant(l.bias));
        }
    }

    Var operator()(Var input) const {
        if (input.value().rank() != 2 || input.value().cols() != params_->input_width())
            throw DimensionError("mlp: input shape " + shape_string(input.value().shape) +
                                 " but network expects width " +
                                 std::to_string(params_->input_width()));
        Var h = input;
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            h = affine(h, weights_[i], biases_[i]);
            if (i + 1 < weights_.size())
                h = relu(h);
            else if (params_->output == OutputTransform::tanh_squash)
                h = tanh(h);
        }
        return h;
    }

    /// Gradients collected by the tape's last backward().
    MlpGrads grads() const {
        MlpGrads g = zeros_like(*params_);
        Tape& tape = *weights_.front().tape();
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            g.layers[i].weight = tape.grad(weights_[i]);
            g.layers[i].bias = tape.grad(biases_[i]);
        }
        return g;
    }

    Var weight(std::size_t layer) const { return weights_.at(layer); }
    Var bias(std::size_t layer) const { return biases_.at(layer); }

private:
    const MlpParams* params_;
    std::vector<Var> weights_;
    std::vector<Var> biases_;
};

/// Gradient of a scalar loss with respect to every parameter of `params`.
/// `loss_fn(Tape&, const BoundMlp&) -> Var` builds the loss from the bound
/// network using tape ops only.
template <class LossFn>
std::pair<double, MlpGrads> compute_gradients(const MlpParams& params, LossFn&& loss_fn) {
    Tape tape;
    BoundMlp net(tape, params, true);
    Var loss = loss_fn(tape, net);
    tape.backward(loss);
    return {loss.item(), net.grads()};
}

/// target' = rate * source + (1 - rate) * target.
inline MlpParams soft_update(const MlpParams& target, const MlpParams& source, double rate) {
    if (!(rate >= 0.0 && rate <= 1.0))
        throw DomainError("soft_update: rate must lie in [0,1], got " + std::to_string(rate));
    require_same_architecture(target, source, "soft_update");
    MlpParams out = target;
    zip_params(out, source, [rate](double& t, double s) { t = rate * s + (1.0 - rate) * t; });
    return out;
}

inline bool all_finite(const MlpParams& p) {
    for (const auto& l : p.layers)
        if (!l.weight.all_finite() || !l.bias.all_finite()) return false;
    return true;
}

/// Flatten every parameter in layer order (weights then bias per layer).
inline std::vector<double> flatten(const MlpParams& p) {
    std::vector<double> out;
    out.reserve(p.parameter_count());
    for (const auto& l : p.layers) {
        out.insert(out.end(), l.weight.data.begin(), l.weight.data.end());
        out.insert(out.end(), l.bias.data.begin(), l.bias.data.end());
    }
    return out;
}

inline double& parameter_at(MlpParams& p, std::size_t flat_index) {
    for (auto& l : p.layers) {
        if (flat_index < l.weight.size()) return l.weight.data[flat_index];
        flat_index -= l.weight.size();
        if (flat_index < l.bias.size()) return l.bias.data[flat_index];
        flat_index -= l.bias.size();
    }
    throw DimensionError("parameter_at: index out of range");
}

inline double parameter_at(const MlpParams& p, std::size_t flat_index) {
    return parameter_at(const_cast<MlpParams&>(p), flat_index);
}

}  // namespace cpqlab::numerics
