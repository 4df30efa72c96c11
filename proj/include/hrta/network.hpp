#pragma once

// Bias-free shallow networks with the homotopy activation and NTK scaling:
//   depth 2: phi(x) = m^{-1/2} sum_k a_k sigma_s(omega_k . x)
//   depth 3: phi(x) = m2^{-1/2} a . sigma_s(m1^{-1/2} W2 sigma_s(Omega x))

#include <cmath>
#include <cstdint>
#include <optional>
#include <type_traits>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

#include "hrta/activation.hpp"
#include "hrta/rng.hpp"

namespace hrta {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct NetworkParams {
    using Vector = VectorX<Scalar>;
    using Matrix = MatrixX<Scalar>;

    Vector a;                       // outer weights, length m (depth 2) or m2 (depth 3)
    Matrix omega;                   // first layer, m1 x d; row k is omega_k
    std::optional<Matrix> hidden2;  // second layer, m2 x m1; present iff depth 3

    [[nodiscard]] int depth() const { return hidden2 ? 3 : 2; }
    [[nodiscard]] Eigen::Index width() const { return omega.rows(); }
    [[nodiscard]] Eigen::Index dim() const { return omega.cols(); }
    [[nodiscard]] Eigen::Index output_width() const { return a.size(); }
    [[nodiscard]] Eigen::Index parameter_count() const {
        return a.size() + omega.size() + (hidden2 ? hidden2->size() : 0);
    }

    void validate() const {
        if (omega.rows() < 1 || omega.cols() < 1) throw std::invalid_argument("network needs m >= 1 and d >= 1");
        if (hidden2) {
            if (hidden2->cols() != omega.rows() || hidden2->rows() != a.size())
                throw std::invalid_argument("depth-3 layer shapes are inconsistent");
        } else if (a.size() != omega.rows()) {
            throw std::invalid_argument("outer weight count must equal the number of neurons");
        }
        if (!a.allFinite() || !omega.allFinite() || (hidden2 && !hidden2->allFinite()))
            throw std::domain_error("network parameters must be finite");
    }
};

/// Gradient of a risk with respect to NetworkParams; same block layout.
template <typename Scalar>
struct GradientBundle {
    VectorX<Scalar> d_a;
    MatrixX<Scalar> d_omega;
    std::optional<MatrixX<Scalar>> d_hidden2;

    static GradientBundle zeros_like(const NetworkParams<Scalar>& p) {
        GradientBundle g;
        g.d_a = VectorX<Scalar>::Zero(p.a.size());
        g.d_omega = MatrixX<Scalar>::Zero(p.omega.rows(), p.omega.cols());
        if (p.hidden2) g.d_hidden2 = MatrixX<Scalar>::Zero(p.hidden2->rows(), p.hidden2->cols());
        return g;
    }
};

template <typename Scalar>
struct BasicSampleSet {
    MatrixX<Scalar> X;                       // n x d, rows in [0, 1]^d
    VectorX<Scalar> y;                       // n
    // n x k target gradients for the leading k <= d inputs (Sobolev labels);
    // trailing inputs, such as an appended constant, carry no gradient label
    std::optional<MatrixX<Scalar>> grad_y;

    [[nodiscard]] Eigen::Index size() const { return X.rows(); }
    [[nodiscard]] Eigen::Index dim() const { return X.cols(); }

    void validate() const {
        if (X.rows() < 1 || X.cols() < 1) throw std::invalid_argument("sample set needs n >= 1 and d >= 1");
        if (y.size() != X.rows()) throw std::invalid_argument("label count does not match sample count");
        if ((X.array() < Scalar(0)).any() || (X.array() > Scalar(1)).any())
            throw std::invalid_argument("sample inputs must lie in [0, 1]^d");
        if (grad_y && (grad_y->rows() != X.rows() || grad_y->cols() < 1 || grad_y->cols() > X.cols()))
            throw std::invalid_argument("gradient labels must be n x k with 1 <= k <= d");
    }
};

using Network = NetworkParams<double>;
using Gradient = GradientBundle<double>;
using SampleSet = BasicSampleSet<double>;

enum class LossKind { Value, Sobolev };

// ---------------------------------------------------------------------------
// Initialization

/// Every entry i.i.d. N(0, 1). Draw order: omega row by row, then hidden2 row
/// by row (depth 3), then a.
template <typename Scalar = double>
NetworkParams<Scalar> init_params(Eigen::Index m, Eigen::Index d, int depth, std::uint64_t seed,
                                  Eigen::Index m2 = 0) {
    if (m < 1 || d < 1) throw std::invalid_argument("init_params needs m >= 1 and d >= 1");
    if (depth != 2 && depth != 3) throw std::invalid_argument("depth must be 2 or 3");
    Rng rng(seed);
    NetworkParams<Scalar> p;
    p.omega = rng.normal_matrix<Scalar>(m, d);
    Eigen::Index out = m;
    if (depth == 3) {
        out = m2 > 0 ? m2 : m;
        p.hidden2 = rng.normal_matrix<Scalar>(out, m);
    }
    p.a = rng.normal_vector<Scalar>(out);
    return p;
}

// ---------------------------------------------------------------------------
// Flat views, used by the optimizers. Order: a, omega (column-major), hidden2.

namespace detail {

template <typename Scalar>
VectorX<Scalar> pack(const VectorX<Scalar>& a, const MatrixX<Scalar>& omega, const std::optional<MatrixX<Scalar>>& h2) {
    const Eigen::Index total = a.size() + omega.size() + (h2 ? h2->size() : 0);
    VectorX<Scalar> flat(total);
    flat.head(a.size()) = a;
    flat.segment(a.size(), omega.size()) = Eigen::Map<const VectorX<Scalar>>(omega.data(), omega.size());
    if (h2) flat.tail(h2->size()) = Eigen::Map<const VectorX<Scalar>>(h2->data(), h2->size());
    return flat;
}

}  // namespace detail

template <typename Scalar>
VectorX<Scalar> flatten(const NetworkParams<Scalar>& p) {
    return detail::pack(p.a, p.omega, p.hidden2);
}

template <typename Scalar>
VectorX<Scalar> flatten(const GradientBundle<Scalar>& g) {
    return detail::pack(g.d_a, g.d_omega, g.d_hidden2);
}

template <typename Scalar>
void assign_flat(NetworkParams<Scalar>& p, const VectorX<Scalar>& flat) {
    if (flat.size() != p.parameter_count()) throw std::invalid_argument("flat parameter vector has the wrong size");
    p.a = flat.head(p.a.size());
    Eigen::Map<VectorX<Scalar>>(p.omega.data(), p.omega.size()) = flat.segment(p.a.size(), p.omega.size());
    if (p.hidden2) Eigen::Map<VectorX<Scalar>>(p.hidden2->data(), p.hidden2->size()) = flat.tail(p.hidden2->size());
}

// ---------------------------------------------------------------------------
// Evaluation

namespace detail {

template <typename Scalar>
void require_input_dim(const NetworkParams<Scalar>& p, Eigen::Index d) {
    if (d != p.dim()) {
        throw std::invalid_argument("input dimension " + std::to_string(d) + " does not match network dimension " +
                                    std::to_string(p.dim()));
    }
}

/// Forward activations for a batch, kept for backpropagation.
template <typename Scalar>
struct ForwardCache {
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    Array z1, h1, dh1;  // n x m1
    Array z2, h2, dh2;  // n x m2 (depth 3 only)
    VectorX<Scalar> output;
};

template <typename Scalar>
ForwardCache<Scalar> forward_batch(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                                   const MatrixX<std::type_identity_t<Scalar>>& X, bool want_derivatives) {
    require_input_dim(p, X.cols());
    ForwardCache<Scalar> c;
    c.z1 = (X * p.omega.transpose()).array();
    c.h1 = activate(kind, s, c.z1);
    if (want_derivatives) c.dh1 = activate_derivative(kind, s, c.z1);
    if (!p.hidden2) {
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(p.width()));
        c.output = scale * (c.h1.matrix() * p.a);
        return c;
    }
    const Scalar scale1 = Scalar(1) / std::sqrt(static_cast<Scalar>(p.width()));
    const Scalar scale2 = Scalar(1) / std::sqrt(static_cast<Scalar>(p.output_width()));
    c.z2 = scale1 * (c.h1.matrix() * p.hidden2->transpose()).array();
    c.h2 = activate(kind, s, c.z2);
    if (want_derivatives) c.dh2 = activate_derivative(kind, s, c.z2);
    c.output = scale2 * (c.h2.matrix() * p.a);
    return c;
}

// Neurons are processed in column blocks so the n x block activations stay in
// cache; this is several times faster than materializing n x m arrays.
inline constexpr Eigen::Index kNeuronBlock = 64;

template <typename Scalar>
struct ShallowOutputs {
    VectorX<Scalar> output;    // n
    MatrixX<Scalar> grad_phi;  // n x k, empty unless gradient labels are used
};

// Pass 1 for depth 2: outputs and, with label_dims > 0, the leading input gradients.
template <typename Scalar>
ShallowOutputs<Scalar> shallow_outputs(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                                       const MatrixX<Scalar>& X, Eigen::Index label_dims) {
    const Eigen::Index n = X.rows();
    const Eigen::Index m = p.width();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(m));
    ShallowOutputs<Scalar> out;
    out.output = VectorX<Scalar>::Zero(n);
    if (label_dims > 0) out.grad_phi = MatrixX<Scalar>::Zero(n, label_dims);
    MatrixX<Scalar> Z;
    for (Eigen::Index k0 = 0; k0 < m; k0 += kNeuronBlock) {
        const Eigen::Index b = std::min(kNeuronBlock, m - k0);
        const auto omega_b = p.omega.middleRows(k0, b);
        const auto a_b = p.a.segment(k0, b);
        Z.noalias() = X * omega_b.transpose();
        out.output.noalias() += activate(kind, s, Z.array()).matrix() * a_b;
        if (label_dims > 0) {
            const MatrixX<Scalar> D = (activate_derivative(kind, s, Z.array()).rowwise() * a_b.transpose().array()).matrix();
            out.grad_phi.noalias() += D * omega_b.leftCols(label_dims);
        }
    }
    out.output *= scale;
    out.grad_phi *= scale;
    return out;
}

}  // namespace detail

/// Single-point evaluation with a fixed summation order (k ascending), so the
/// result is reproducible bit for bit.
template <typename Scalar>
Scalar forward(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
               const Eigen::Ref<const VectorX<std::type_identity_t<Scalar>>>& x) {
    detail::require_input_dim(p, x.size());
    const Eigen::Index m = p.width();
    const Eigen::Index d = p.dim();
    VectorX<Scalar> h1(m);
    for (Eigen::Index k = 0; k < m; ++k) {
        Scalar z = 0;
        for (Eigen::Index j = 0; j < d; ++j) z += p.omega(k, j) * x(j);
        h1(k) = activate(kind, s, z);
    }
    if (!p.hidden2) {
        Scalar sum = 0;
        for (Eigen::Index k = 0; k < m; ++k) sum += p.a(k) * h1(k);
        return sum / std::sqrt(static_cast<Scalar>(m));
    }
    const Eigen::Index m2 = p.output_width();
    const Scalar scale1 = Scalar(1) / std::sqrt(static_cast<Scalar>(m));
    Scalar sum = 0;
    for (Eigen::Index l = 0; l < m2; ++l) {
        Scalar z = 0;
        for (Eigen::Index k = 0; k < m; ++k) z += (*p.hidden2)(l, k) * h1(k);
        sum += p.a(l) * activate(kind, s, scale1 * z);
    }
    return sum / std::sqrt(static_cast<Scalar>(m2));
}

/// Batched predictions for the rows of X.
template <typename Scalar>
VectorX<Scalar> predict(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                        const MatrixX<std::type_identity_t<Scalar>>& X) {
    if (!p.hidden2) return detail::shallow_outputs<Scalar>(p, s, kind, X, 0).output;
    return detail::forward_batch(p, s, kind, X, false).output;
}

/// Input gradients for every row of X (n x d).
template <typename Scalar>
MatrixX<Scalar> input_gradients(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                                const MatrixX<std::type_identity_t<Scalar>>& X) {
    const auto c = detail::forward_batch(p, s, kind, X, true);
    const Scalar scale1 = Scalar(1) / std::sqrt(static_cast<Scalar>(p.width()));
    if (!p.hidden2) {
        // (1/sqrt m) sum_k a_k sigma'(z_ik) omega_k
        return scale1 * ((c.dh1.rowwise() * p.a.transpose().array()).matrix() * p.omega);
    }
    const Scalar scale2 = Scalar(1) / std::sqrt(static_cast<Scalar>(p.output_width()));
    const auto back2 = (c.dh2.rowwise() * (scale2 * p.a.transpose().array())).matrix();  // n x m2
    const auto back1 = ((scale1 * back2 * (*p.hidden2)).array() * c.dh1).matrix();         // n x m1
    return back1 * p.omega;
}

/// grad_x phi(x).
template <typename Scalar>
VectorX<Scalar> grad_input(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                           const Eigen::Ref<const VectorX<std::type_identity_t<Scalar>>>& x) {
    detail::require_input_dim(p, x.size());
    MatrixX<Scalar> X = x.transpose();
    return input_gradients(p, s, kind, X).row(0).transpose();
}

// ---------------------------------------------------------------------------
// Risk and parameter gradient

template <typename Scalar>
struct RiskAndGradient {
    Scalar risk;
    GradientBundle<Scalar> gradient;
};

namespace detail {

template <typename Scalar>
void require_compatible(const NetworkParams<Scalar>& p, const BasicSampleSet<Scalar>& data, LossKind loss) {
    require_input_dim(p, data.dim());
    if (data.y.size() != data.size()) throw std::invalid_argument("label count does not match sample count");
    if (loss == LossKind::Sobolev) {
        if (!data.grad_y) throw std::invalid_argument("Sobolev loss requires gradient labels");
        if (data.grad_y->rows() != data.size() || data.grad_y->cols() < 1 || data.grad_y->cols() > data.dim())
            throw std::invalid_argument("gradient labels must be n x k with 1 <= k <= d");
        if (p.hidden2) throw std::invalid_argument("Sobolev loss is only implemented for depth-2 networks");
    }
}

}  // namespace detail

/// R(theta) = (1/2n) sum_i [ (phi(x_i) - y_i)^2 + |grad phi(x_i) - grad_y_i|^2 (Sobolev only) ],
/// with the gradient dR/dtheta. Residuals are signed, phi - y.
template <typename Scalar>
RiskAndGradient<Scalar> risk_and_gradient(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                                          const BasicSampleSet<Scalar>& data, LossKind loss = LossKind::Value) {
    detail::require_compatible(p, data, loss);
    const auto n = static_cast<Scalar>(data.size());
    const auto& X = data.X;
    const Scalar scale1 = Scalar(1) / std::sqrt(static_cast<Scalar>(p.width()));

    if (!p.hidden2) {
        const bool sobolev = loss == LossKind::Sobolev;
        const Eigen::Index label_dims = sobolev ? data.grad_y->cols() : 0;
        const auto pass1 = detail::shallow_outputs(p, s, kind, X, label_dims);
        const VectorX<Scalar> e = pass1.output - data.y;
        RiskAndGradient<Scalar> out{e.squaredNorm() / (Scalar(2) * n), GradientBundle<Scalar>{}};
        MatrixX<Scalar> r;
        if (sobolev) {
            r = pass1.grad_phi - *data.grad_y;
            out.risk += r.squaredNorm() / (Scalar(2) * n);
        }

        auto& g = out.gradient;
        const Eigen::Index m = p.width();
        g.d_a.resize(m);
        g.d_omega.resize(m, p.dim());
        const Scalar coef = scale1 / n;
        MatrixX<Scalar> Z, proj, inner;
        for (Eigen::Index k0 = 0; k0 < m; k0 += detail::kNeuronBlock) {
            const Eigen::Index b = std::min(detail::kNeuronBlock, m - k0);
            const auto omega_b = p.omega.middleRows(k0, b);
            Z.noalias() = X * omega_b.transpose();
            const auto D = activate_derivative(kind, s, Z.array());
            auto d_a = g.d_a.segment(k0, b);
            d_a.noalias() = activate(kind, s, Z.array()).matrix().transpose() * e;
            inner.noalias() = (D.colwise() * e.array()).matrix().transpose() * X;  // b x d
            if (sobolev) {
                proj.noalias() = r * omega_b.leftCols(label_dims).transpose();  // n x b, r_i . omega_k
                d_a.noalias() += (D * proj.array()).colwise().sum().transpose().matrix();
                inner.noalias() += (activate_second_derivative(kind, s, Z.array()) * proj.array()).matrix().transpose() * X;
                inner.leftCols(label_dims).noalias() += D.matrix().transpose() * r;
            }
            d_a *= coef;
            g.d_omega.middleRows(k0, b).noalias() = coef * (p.a.segment(k0, b).asDiagonal() * inner);
        }
        return out;
    }

    // depth 3: plain backpropagation of the value loss
    const auto c = detail::forward_batch(p, s, kind, X, true);
    const VectorX<Scalar> e = c.output - data.y;
    RiskAndGradient<Scalar> out{e.squaredNorm() / (Scalar(2) * n), GradientBundle<Scalar>{}};
    auto& g = out.gradient;
    const Scalar scale2 = Scalar(1) / std::sqrt(static_cast<Scalar>(p.output_width()));
    const VectorX<Scalar> delta_out = e / n;
    g.d_a = scale2 * (c.h2.matrix().transpose() * delta_out);
    const MatrixX<Scalar> dz2 = ((delta_out * (scale2 * p.a.transpose())).array() * c.dh2).matrix();  // n x m2
    g.d_hidden2 = scale1 * (dz2.transpose() * c.h1.matrix());
    const MatrixX<Scalar> dz1 = ((scale1 * dz2 * (*p.hidden2)).array() * c.dh1).matrix();  // n x m1
    g.d_omega = dz1.transpose() * X;
    return out;
}

template <typename Scalar>
Scalar empirical_risk(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                      const BasicSampleSet<Scalar>& data, LossKind loss = LossKind::Value) {
    detail::require_compatible(p, data, loss);
    const auto n = static_cast<Scalar>(data.size());
    if (loss == LossKind::Value) {
        const VectorX<Scalar> e = predict(p, s, kind, data.X) - data.y;
        return e.squaredNorm() / (Scalar(2) * n);
    }
    const auto pass1 = detail::shallow_outputs(p, s, kind, data.X, data.grad_y->cols());
    return ((pass1.output - data.y).squaredNorm() + (pass1.grad_phi - *data.grad_y).squaredNorm()) / (Scalar(2) * n);
}

template <typename Scalar>
GradientBundle<Scalar> grad_params(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                                   const BasicSampleSet<Scalar>& data, LossKind loss = LossKind::Value) {
    return risk_and_gradient(p, s, kind, data, loss).gradient;
}

// ---------------------------------------------------------------------------
// Pure-ReLU rewrite

/// Width-2m ReLU network with the same outputs as the sigma_s network:
/// neuron k keeps omega_k with outer weight sqrt(2) a_k, neuron m + k uses
/// -omega_k with outer weight -(1 - s) sqrt(2) a_k. The sqrt(2) absorbs the
/// change of normalization from 1/sqrt(m) to 1/sqrt(2m).
template <typename Scalar>
NetworkParams<Scalar> rewrite_as_relu(const NetworkParams<Scalar>& p, HomotopyParam s,
                                      ActivationKind kind = ActivationKind::PiecewiseLinear) {
    if (p.hidden2) throw std::invalid_argument("ReLU rewrite is only defined for depth-2 networks");
    const auto coeffs = relu_decomposition(kind, s);
    const Eigen::Index m = p.width();
    const Scalar root2 = std::sqrt(Scalar(2));
    NetworkParams<Scalar> q;
    q.a.resize(2 * m);
    q.omega.resize(2 * m, p.dim());
    q.a.head(m) = (root2 * static_cast<Scalar>(coeffs.pos_coeff)) * p.a;
    q.a.tail(m) = (root2 * static_cast<Scalar>(coeffs.neg_coeff)) * p.a;
    q.omega.topRows(m) = p.omega;
    q.omega.bottomRows(m) = -p.omega;
    return q;
}

}  // namespace hrta
