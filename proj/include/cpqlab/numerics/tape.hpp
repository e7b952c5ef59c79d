#pragma once

// Reverse-mode gradients over a fixed vocabulary of tensor ops.
//
// A Tape records each op's output together with a closure that pushes the
// output gradient back to its inputs. Every loss in the library is written
// with these ops only; there is no general graph machinery beyond that.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cpqlab/numerics/linalg.hpp"
#include "cpqlab/numerics/tensor.hpp"

namespace cpqlab::numerics {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as its tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    double item() const { return value().item(); }
    bool requires_grad() const;
    std::size_t id() const { return id_; }
    Tape* tape() const { return tape_; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

    /// Leaf that never receives a gradient.
    Var constant(Tensor value) { return push("constant", std::move(value), false, {}); }

    /// Leaf whose gradient is collected by backward().
    Var variable(Tensor value) { return push("variable", std::move(value), true, {}); }

    const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

    /// Gradient of the last backward() target with respect to `v`; zeros if
    /// nothing flowed into it.
    Tensor grad(Var v) const {
        const Node& n = nodes_.at(v.id());
        if (n.grad.data.empty()) return Tensor(n.value.shape, 0.0);
        return n.grad;
    }

    /// Back-propagate from a 1x1 loss node.
    void backward(Var loss) {
        Node& root = nodes_.at(loss.id());
        if (root.value.size() != 1) throw DimensionError("backward: loss must be a scalar");
        for (auto& n : nodes_) n.grad = Tensor();
        root.grad = Tensor(root.value.shape, 1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.data.empty() || !n.backward) continue;
            Tensor g = std::move(n.grad);  // interior grads are not kept
            n.backward(*this, g);
        }
    }

    std::size_t size() const { return nodes_.size(); }

    // -- used by op implementations ------------------------------------------

    Var push(const char* op, Tensor value, bool requires_grad, Backward backward) {
        if (!value.all_finite())
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(backward), op});
        return Var(this, nodes_.size() - 1);
    }

    void accumulate(Var v, Tensor g) {
        Node& n = nodes_[v.id()];
        if (!n.requires_grad) return;
        if (n.grad.data.empty()) {
            n.grad = std::move(g);
            return;
        }
        for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad;
        Backward backward;
        const char* op;
    };
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (a.tape() != b.tape()) throw DimensionError("operands live on different tapes");
    return *a.tape();
}

template <class Fwd, class Deriv>
Var unary(const char* op, Var x, Fwd fwd, Deriv deriv) {
    Tape& t = *x.tape();
    const Tensor& in = x.value();
    Tensor out(in.shape, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = fwd(in.data[i]);
    if (!x.requires_grad()) return t.push(op, std::move(out), false, {});
    Tensor saved_out = out;
    return t.push(op, std::move(out), true,
                  [x, deriv, saved_out = std::move(saved_out)](Tape& tp, const Tensor& g) {
                      const Tensor& in = x.value();
                      Tensor gi(in.shape, 0.0);
                      for (std::size_t i = 0; i < in.size(); ++i)
                          gi.data[i] = g.data[i] * deriv(in.data[i], saved_out.data[i]);
                      tp.accumulate(x, std::move(gi));
                  });
}

}  // namespace detail

// ---- linear -----------------------------------------------------------------

/// x (n x k) * w (k x m) + b (1 x m), bias broadcast over rows.
inline Var affine(Var x, Var w, Var b) {
    Tape& t = detail::same_tape(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.cols() != wv.rows())
        throw DimensionError("affine: input width " + std::to_string(xv.cols()) +
                             " does not match weight rows " + std::to_string(wv.rows()));
    if (bv.rows() != 1 || bv.cols() != wv.cols())
        throw DimensionError("affine: bias shape " + shape_string(bv.shape));
    Tensor out = matmul(xv, wv);
    {
        auto o = as_matrix(out);
        o.rowwise() += as_matrix(bv).row(0);
    }
    const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
    return t.push("affine", std::move(out), rg, [x, w, b](Tape& tp, const Tensor& g) {
        if (x.requires_grad()) tp.accumulate(x, matmul(g, w.value(), false, true));
        if (w.requires_grad()) tp.accumulate(w, matmul(x.value(), g, true, false));
        if (b.requires_grad()) {
            Tensor gb = Tensor::matrix(1, g.cols());
            as_matrix(gb).row(0) = as_matrix(g).colwise().sum();
            tp.accumulate(b, std::move(gb));
        }
    });
}

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    Tensor out = matmul(a.value(), b.value());
    const bool rg = a.requires_grad() || b.requires_grad();
    return t.push("matmul", std::move(out), rg, [a, b](Tape& tp, const Tensor& g) {
        if (a.requires_grad()) tp.accumulate(a, matmul(g, b.value(), false, true));
        if (b.requires_grad()) tp.accumulate(b, matmul(a.value(), g, true, false));
    });
}

// ---- elementwise binary -------------------------------------------------------

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
    return t.push("add", std::move(out), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                      tp.accumulate(a, g);
                      tp.accumulate(b, g);
                  });
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
    return t.push("sub", std::move(out), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                      tp.accumulate(a, g);
                      if (b.requires_grad()) {
                          Tensor gb = g;
                          for (double& v : gb.data) v = -v;
                          tp.accumulate(b, std::move(gb));
                      }
                  });
}

inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
    return t.push("mul", std::move(out), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                      if (a.requires_grad()) {
                          Tensor ga = g;
                          for (std::size_t i = 0; i < ga.size(); ++i)
                              ga.data[i] *= b.value().data[i];
                          tp.accumulate(a, std::move(ga));
                      }
                      if (b.requires_grad()) {
                          Tensor gb = g;
                          for (std::size_t i = 0; i < gb.size(); ++i)
                              gb.data[i] *= a.value().data[i];
                          tp.accumulate(b, std::move(gb));
                      }
                  });
}

/// Elementwise min; on ties the gradient goes to `a`.
inline Var minimum(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    require_same_shape(a.value(), b.value(), "minimum");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = std::min(a.value().data[i], b.value().data[i]);
    return t.push("minimum", std::move(out), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                      Tensor ga(g.shape, 0.0), gb(g.shape, 0.0);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                          if (a.value().data[i] <= b.value().data[i])
                              ga.data[i] = g.data[i];
                          else
                              gb.data[i] = g.data[i];
                      }
                      tp.accumulate(a, std::move(ga));
                      tp.accumulate(b, std::move(gb));
                  });
}

// ---- elementwise unary --------------------------------------------------------

inline Var scale(Var x, double c) {
    return detail::unary(
        "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var x, double c) {
    return detail::unary(
        "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var relu(Var x) {
    return detail::unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var x) {
    return detail::unary(
        "tanh", x, [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var x) {
    return detail::unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
    return detail::unary(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var square(Var x) {
    return detail::unary(
        "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// Clamp to [lo, hi]; zero gradient outside the interval.
inline Var clamp(Var x, double lo, double hi) {
    return detail::unary(
        "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ---------------------------------------------------------------

inline Var sum(Var x) {
    Tape& t = *x.tape();
    double s = 0.0;
    for (double v : x.value().data) s += v;
    return t.push("sum", Tensor::scalar(s), x.requires_grad(), [x](Tape& tp, const Tensor& g) {
        tp.accumulate(x, Tensor(x.value().shape, g.item()));
    });
}

inline Var mean(Var x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// n x d -> n x 1
inline Var row_sum(Var x) {
    Tape& t = *x.tape();
    const Tensor& v = x.value();
    Tensor out = Tensor::matrix(v.rows(), 1);
    as_matrix(out).col(0) = as_matrix(v).rowwise().sum();
    return t.push("row_sum", std::move(out), x.requires_grad(), [x](Tape& tp, const Tensor& g) {
        const Tensor& v = x.value();
        Tensor gi(v.shape, 0.0);
        for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) gi(r, c) = g(r, 0);
        tp.accumulate(x, std::move(gi));
    });
}

// ---- shape ----------------------------------------------------------------------

inline Var concat_cols(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    Tensor out = hcat(a.value(), b.value());
    return t.push("concat_cols", std::move(out), a.requires_grad() || b.requires_grad(),
                  [a, b](Tape& tp, const Tensor& g) {
                      const std::size_t ca = a.value().cols();
                      const std::size_t cb = b.value().cols();
                      Tensor ga = Tensor::matrix(g.rows(), ca), gb = Tensor::matrix(g.rows(), cb);
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                          for (std::size_t c = 0; c < ca; ++c) ga(r, c) = g(r, c);
                          for (std::size_t c = 0; c < cb; ++c) gb(r, c) = g(r, ca + c);
                      }
                      tp.accumulate(a, std::move(ga));
                      tp.accumulate(b, std::move(gb));
                  });
}

/// Columns [begin, end).
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    Tape& t = *x.tape();
    const Tensor& v = x.value();
    if (begin > end || end > v.cols()) throw DimensionError("slice_cols: range out of bounds");
    Tensor out = Tensor::matrix(v.rows(), end - begin);
    for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = v(r, c);
    return t.push("slice_cols", std::move(out), x.requires_grad(),
                  [x, begin, end](Tape& tp, const Tensor& g) {
                      Tensor gi(x.value().shape, 0.0);
                      for (std::size_t r = 0; r < g.rows(); ++r)
                          for (std::size_t c = begin; c < end; ++c) gi(r, c) = g(r, c - begin);
                      tp.accumulate(x, std::move(gi));
                  });
}

/// D(i,j) = ||x_i - y_j||^2 for x (n x d), y (m x d).
inline Var pairwise_sq_dist(Var x, Var y) {
    Tape& t = detail::same_tape(x, y);
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    if (xv.cols() != yv.cols()) throw DimensionError("pairwise_sq_dist: feature widths differ");
    Tensor out = Tensor::matrix(xv.rows(), yv.rows());
    {
        auto xm = as_matrix(xv);
        auto ym = as_matrix(yv);
        auto o = as_matrix(out);
        Eigen::VectorXd xn = xm.rowwise().squaredNorm();
        Eigen::VectorXd yn = ym.rowwise().squaredNorm();
        o.noalias() = -2.0 * xm * ym.transpose();
        o.colwise() += xn;
        o.rowwise() += yn.transpose();
        o = o.cwiseMax(0.0);
    }
    return t.push("pairwise_sq_dist", std::move(out), x.requires_grad() || y.requires_grad(),
                  [x, y](Tape& tp, const Tensor& g) {
                      auto gm = as_matrix(g);
                      auto xm = as_matrix(x.value());
                      auto ym = as_matrix(y.value());
                      if (x.requires_grad()) {
                          Tensor gx(x.value().shape, 0.0);
                          Eigen::VectorXd rs = gm.rowwise().sum();
                          as_matrix(gx) = 2.0 * (rs.asDiagonal() * xm - gm * ym);
                          tp.accumulate(x, std::move(gx));
                      }
                      if (y.requires_grad()) {
                          Tensor gy(y.value().shape, 0.0);
                          Eigen::VectorXd cs = gm.colwise().sum().transpose();
                          as_matrix(gy) = 2.0 * (cs.asDiagonal() * ym - gm.transpose() * xm);
                          tp.accumulate(y, std::move(gy));
                      }
                  });
}

}  // namespace cpqlab::numerics
