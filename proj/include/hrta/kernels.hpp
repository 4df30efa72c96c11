#pragma once

// Gradient-descent kernels of the two-layer homotopy network.
//
//   k_a(x, x') = E_omega   sigma_s(omega.x) sigma_s(omega.x')
//   k_w(x, x') = E_{a,omega} a^2 sigma_s'(omega.x) sigma_s'(omega.x') x.x'
//
// with omega ~ N(0, I_d), a ~ N(0, 1). Three routes are provided: the
// finite-width Gram matrices of a concrete network, a Monte Carlo estimate,
// and an exact arc-cosine closed form (piecewise-linear activation only).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <type_traits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include <Eigen/Core>

#include "hrta/activation.hpp"
#include "hrta/network.hpp"
#include "hrta/rng.hpp"
#include "hrta/symmetric_eigen.hpp"

namespace hrta {

enum class KernelSource { FiniteWidth, MonteCarlo, ClosedForm };

std::string_view to_string(KernelSource source);
KernelSource kernel_source_from_string(std::string_view name);

/// Which of the two kernels: outer weights [a] or inner weights [omega].
enum class KernelComponent { Outer, Inner };

template <typename Scalar>
struct GramPair {
    MatrixX<Scalar> Ka;
    MatrixX<Scalar> Kw;
    KernelSource provenance = KernelSource::ClosedForm;
    double s = 1.0;
    std::optional<MatrixX<Scalar>> Ka_stderr;  // Monte Carlo only
    std::optional<MatrixX<Scalar>> Kw_stderr;

    [[nodiscard]] Eigen::Index n() const { return Ka.rows(); }
    [[nodiscard]] MatrixX<Scalar> total() const { return Ka + Kw; }
    [[nodiscard]] const MatrixX<Scalar>& component(KernelComponent c) const {
        return c == KernelComponent::Outer ? Ka : Kw;
    }
};

/// Kernel evaluated at sign-flipped arguments:
/// H_ij = k(-x_i, x_j), M_ij = k(x_i, -x_j), T_ij = k(-x_i, -x_j).
template <typename Scalar>
struct AuxMatrices {
    MatrixX<Scalar> Ha, Ma, Ta;
    MatrixX<Scalar> Hw, Mw, Tw;
    double s = 1.0;
    KernelSource source = KernelSource::ClosedForm;

    [[nodiscard]] const MatrixX<Scalar>& H(KernelComponent c) const { return c == KernelComponent::Outer ? Ha : Hw; }
    [[nodiscard]] const MatrixX<Scalar>& M(KernelComponent c) const { return c == KernelComponent::Outer ? Ma : Mw; }
    [[nodiscard]] const MatrixX<Scalar>& T(KernelComponent c) const { return c == KernelComponent::Outer ? Ta : Tw; }
};

template <typename Scalar>
struct SpectrumReport {
    Scalar lambda_a = 0;
    Scalar lambda_w = 0;
    Scalar lambda_sum = 0;
    enum class Method { Jacobi, ShiftedPowerIteration } method = Method::Jacobi;
    int iterations = 0;
    Scalar residual = 0;  // worst of the two extreme-pair residuals
};

namespace detail {

template <typename Matrix>
void mirror_upper(Matrix& K) {
    K.template triangularView<Eigen::StrictlyLower>() = K.transpose();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Finite width

/// G_a = (1/m) S S^T and G_w = ((1/m) D diag(a^2) D^T) o (X X^T) for a depth-2
/// network, where S, D hold sigma_s and sigma_s' of the pre-activations.
template <typename Scalar>
GramPair<Scalar> gram_finite(const NetworkParams<Scalar>& p, HomotopyParam s, ActivationKind kind,
                             const MatrixX<std::type_identity_t<Scalar>>& X) {
    if (p.hidden2) throw std::invalid_argument("Gram matrices are only defined for depth-2 networks");
    detail::require_input_dim(p, X.cols());
    const auto m = static_cast<Scalar>(p.width());
    const MatrixX<Scalar> Z = X * p.omega.transpose();  // n x m
    const MatrixX<Scalar> S = activate(kind, s, Z.array()).matrix();
    const MatrixX<Scalar> D = activate_derivative(kind, s, Z.array()).matrix();
    const MatrixX<Scalar> Da = D * p.a.asDiagonal();

    GramPair<Scalar> g;
    g.provenance = KernelSource::FiniteWidth;
    g.s = s.value();
    g.Ka.noalias() = S * S.transpose() / m;
    g.Kw = ((Da * Da.transpose() / m).array() * (X * X.transpose()).array()).matrix();
    detail::mirror_upper(g.Ka);
    detail::mirror_upper(g.Kw);
    return g;
}

// ---------------------------------------------------------------------------
// Closed form

namespace detail {

/// Angle between u and v via Kahan's formula, accurate near 0 and pi.
template <typename Scalar>
Scalar stable_angle(const Eigen::Ref<const VectorX<Scalar>>& u, const Eigen::Ref<const VectorX<Scalar>>& v,
                    Scalar nu, Scalar nv) {
    const Scalar diff = (nv * u - nu * v).norm();
    const Scalar sum = (nv * u + nu * v).norm();
    const Scalar theta = Scalar(2) * std::atan2(diff, sum);
    return std::clamp(theta, Scalar(0), static_cast<Scalar>(std::numbers::pi));
}

/// E[relu(w.u) relu(w.v)] for unit-free angle theta, times |u||v|.
template <typename Scalar>
Scalar arccos_order1(Scalar nu, Scalar nv, Scalar theta) {
    constexpr Scalar pi = std::numbers::pi_v<Scalar>;
    return nu * nv * (std::sin(theta) + (pi - theta) * std::cos(theta)) / (Scalar(2) * pi);
}

/// E[1{w.u > 0} 1{w.v > 0}].
template <typename Scalar>
Scalar arccos_order0(Scalar theta) {
    constexpr Scalar pi = std::numbers::pi_v<Scalar>;
    return (pi - theta) / (Scalar(2) * pi);
}

}  // namespace detail

/// Exact kernels between the rows of X1 and X2 at homotopy parameter s, via
/// sigma_s(z) = relu(z) - (1 - s) relu(-z). Both kernels expand over the four
/// sign combinations (+-u, +-v); coefficients are {1, -c, -c, c^2} for k_a and
/// {1, c, c, c^2} for the derivative factor of k_w, with c = 1 - s.
template <typename Scalar = double>
std::pair<MatrixX<Scalar>, MatrixX<Scalar>> kernel_closed_cross(const MatrixX<std::type_identity_t<Scalar>>& X1, const MatrixX<std::type_identity_t<Scalar>>& X2,
                                                                HomotopyParam s) {
    if (X1.cols() != X2.cols()) throw std::invalid_argument("kernel inputs must share a dimension");
    const Eigen::Index n1 = X1.rows();
    const Eigen::Index n2 = X2.rows();
    const VectorX<Scalar> norms1 = X1.rowwise().norm();
    const VectorX<Scalar> norms2 = X2.rowwise().norm();
    if ((norms1.array() == Scalar(0)).any() || (norms2.array() == Scalar(0)).any())
        throw std::invalid_argument("closed-form kernel is undefined for a zero input row");

    constexpr Scalar pi = std::numbers::pi_v<Scalar>;
    const auto c = static_cast<Scalar>(s.negative_slope());
    MatrixX<Scalar> Ka(n1, n2);
    MatrixX<Scalar> Kw(n1, n2);
    for (Eigen::Index j = 0; j < n2; ++j) {
        const VectorX<Scalar> v = X2.row(j).transpose();
        for (Eigen::Index i = 0; i < n1; ++i) {
            const VectorX<Scalar> u = X1.row(i).transpose();
            const Scalar nu = norms1(i);
            const Scalar nv = norms2(j);
            const Scalar theta = detail::stable_angle<Scalar>(u, v, nu, nv);
            const Scalar flipped = pi - theta;  // angle of (u, -v) and of (-u, v)
            // (+u, +v), (+u, -v), (-u, +v), (-u, -v)
            Ka(i, j) = detail::arccos_order1(nu, nv, theta) - c * detail::arccos_order1(nu, nv, flipped) -
                       c * detail::arccos_order1(nu, nv, flipped) + c * c * detail::arccos_order1(nu, nv, theta);
            const Scalar deriv = detail::arccos_order0(theta) + c * detail::arccos_order0(flipped) +
                                 c * detail::arccos_order0(flipped) + c * c * detail::arccos_order0(theta);
            Kw(i, j) = deriv * u.dot(v);
        }
    }
    return {std::move(Ka), std::move(Kw)};
}

template <typename Scalar = double>
GramPair<Scalar> kernel_closed(const MatrixX<std::type_identity_t<Scalar>>& X, HomotopyParam s) {
    auto [Ka, Kw] = kernel_closed_cross<Scalar>(X, X, s);
    detail::mirror_upper(Ka);
    detail::mirror_upper(Kw);
    GramPair<Scalar> g;
    g.Ka = std::move(Ka);
    g.Kw = std::move(Kw);
    g.provenance = KernelSource::ClosedForm;
    g.s = s.value();
    return g;
}

// ---------------------------------------------------------------------------
// Monte Carlo

template <typename Scalar>
struct CrossKernelEstimate {
    MatrixX<Scalar> Ka, Kw;
    MatrixX<Scalar> Ka_stderr, Kw_stderr;
};

/// Monte Carlo kernels between the rows of X1 and X2. Draw r consumes d
/// normals for omega_r followed by one for a_r.
template <typename Scalar = double>
CrossKernelEstimate<Scalar> kernel_mc_cross(const MatrixX<std::type_identity_t<Scalar>>& X1, const MatrixX<std::type_identity_t<Scalar>>& X2, HomotopyParam s,
                                            ActivationKind kind, std::int64_t n_mc, std::uint64_t seed) {
    if (n_mc < 2) throw std::invalid_argument("Monte Carlo kernel needs at least two draws");
    if (X1.cols() != X2.cols()) throw std::invalid_argument("kernel inputs must share a dimension");
    const Eigen::Index d = X1.cols();
    const Eigen::Index n1 = X1.rows();
    const Eigen::Index n2 = X2.rows();
    constexpr std::int64_t kBatch = 4096;

    Rng rng(seed);
    MatrixX<Scalar> sum_a = MatrixX<Scalar>::Zero(n1, n2), sq_a = MatrixX<Scalar>::Zero(n1, n2);
    MatrixX<Scalar> sum_w = MatrixX<Scalar>::Zero(n1, n2), sq_w = MatrixX<Scalar>::Zero(n1, n2);
    MatrixX<Scalar> W;
    VectorX<Scalar> a2;
    for (std::int64_t done = 0; done < n_mc;) {
        const auto batch = static_cast<Eigen::Index>(std::min(kBatch, n_mc - done));
        W.resize(batch, d);
        a2.resize(batch);
        for (Eigen::Index r = 0; r < batch; ++r) {
            for (Eigen::Index j = 0; j < d; ++j) W(r, j) = static_cast<Scalar>(rng.normal());
            const auto a = static_cast<Scalar>(rng.normal());
            a2(r) = a * a;
        }
        const auto Z1 = (W * X1.transpose()).array().eval();
        const auto Z2 = (W * X2.transpose()).array().eval();
        const MatrixX<Scalar> S1 = activate(kind, s, Z1).matrix();
        const MatrixX<Scalar> S2 = activate(kind, s, Z2).matrix();
        const MatrixX<Scalar> D1 = (activate_derivative(kind, s, Z1).colwise() * a2.array()).matrix();
        const MatrixX<Scalar> D2 = activate_derivative(kind, s, Z2).matrix();
        sum_a.noalias() += S1.transpose() * S2;
        sq_a.noalias() += S1.cwiseAbs2().transpose() * S2.cwiseAbs2();
        sum_w.noalias() += D1.transpose() * D2;
        sq_w.noalias() += D1.cwiseAbs2().transpose() * D2.cwiseAbs2();
        done += batch;
    }

    const auto N = static_cast<Scalar>(n_mc);
    auto finish = [N](const MatrixX<Scalar>& sum, const MatrixX<Scalar>& sq, MatrixX<Scalar>& mean,
                      MatrixX<Scalar>& stderr_out) {
        mean = sum / N;
        const auto var = ((sq.array() - N * mean.array().square()) / (N - Scalar(1))).max(Scalar(0));
        stderr_out = (var / N).sqrt().matrix();
    };
    CrossKernelEstimate<Scalar> out;
    finish(sum_a, sq_a, out.Ka, out.Ka_stderr);
    finish(sum_w, sq_w, out.Kw, out.Kw_stderr);
    const auto dots = (X1 * X2.transpose()).array();
    out.Kw = (out.Kw.array() * dots).matrix();
    out.Kw_stderr = (out.Kw_stderr.array() * dots.abs()).matrix();
    return out;
}

template <typename Scalar = double>
GramPair<Scalar> kernel_mc(const MatrixX<std::type_identity_t<Scalar>>& X, HomotopyParam s, ActivationKind kind, std::int64_t n_mc,
                           std::uint64_t seed) {
    auto est = kernel_mc_cross<Scalar>(X, X, s, kind, n_mc, seed);
    GramPair<Scalar> g;
    g.Ka = std::move(est.Ka);
    g.Kw = std::move(est.Kw);
    g.Ka_stderr = std::move(est.Ka_stderr);
    g.Kw_stderr = std::move(est.Kw_stderr);
    for (auto* K : {&g.Ka, &g.Kw, &*g.Ka_stderr, &*g.Kw_stderr}) detail::mirror_upper(*K);
    g.provenance = KernelSource::MonteCarlo;
    g.s = s.value();
    return g;
}

// ---------------------------------------------------------------------------
// Sign-flipped auxiliary matrices

template <typename Scalar = double>
AuxMatrices<Scalar> aux_matrices(const MatrixX<std::type_identity_t<Scalar>>& X, HomotopyParam s, KernelSource source,
                                 std::int64_t n_mc = 100000, std::uint64_t seed = 0,
                                 ActivationKind kind = ActivationKind::PiecewiseLinear) {
    const MatrixX<Scalar> neg = -X;
    AuxMatrices<Scalar> aux;
    aux.s = s.value();
    aux.source = source;
    auto fill = [&](const MatrixX<Scalar>& A, const MatrixX<Scalar>& B, MatrixX<Scalar>& Ka, MatrixX<Scalar>& Kw) {
        if (source == KernelSource::ClosedForm) {
            if (kind != ActivationKind::PiecewiseLinear)
                throw std::invalid_argument("closed-form kernels exist only for the piecewise-linear activation");
            std::tie(Ka, Kw) = kernel_closed_cross<Scalar>(A, B, s);
        } else if (source == KernelSource::MonteCarlo) {
            auto est = kernel_mc_cross<Scalar>(A, B, s, kind, n_mc, seed);
            Ka = std::move(est.Ka);
            Kw = std::move(est.Kw);
        } else {
            throw std::invalid_argument("auxiliary matrices need a Monte Carlo or closed-form source");
        }
    };
    fill(neg, X, aux.Ha, aux.Hw);
    fill(X, neg, aux.Ma, aux.Mw);
    fill(neg, neg, aux.Ta, aux.Tw);
    return aux;
}

// ---------------------------------------------------------------------------
// Spectra

template <typename Scalar>
SpectrumReport<Scalar> min_eigs(const GramPair<Scalar>& pair, Scalar symmetry_tol = Scalar(1e-10)) {
    if (asymmetry(pair.Ka) > symmetry_tol || asymmetry(pair.Kw) > symmetry_tol)
        throw std::invalid_argument("min_eigs requires symmetric Gram matrices");
    const auto ea = smallest_eigenpair(pair.Ka);
    const auto ew = smallest_eigenpair(pair.Kw);
    SpectrumReport<Scalar> r;
    r.lambda_a = ea.value;
    r.lambda_w = ew.value;
    r.lambda_sum = ea.value + ew.value;
    r.method = pair.n() > 512 ? SpectrumReport<Scalar>::Method::ShiftedPowerIteration
                              : SpectrumReport<Scalar>::Method::Jacobi;
    r.iterations = std::max(ea.iterations, ew.iterations);
    r.residual = std::max(ea.residual, ew.residual);
    return r;
}

/// {"lambda_a", "lambda_w", "lambda_sum", "s", "provenance", "n", "method", "iterations", "residual"}
std::string spectrum_json(const SpectrumReport<double>& report, double s, KernelSource provenance, Eigen::Index n);

// ---------------------------------------------------------------------------
// Kernel recursion in s

enum class RecursionBranch { SelfReferenced, ReluReferenced };

/// Propagates a kernel matrix from s_p to s_next using sign-flipped auxiliary
/// matrices. With c = 1 - s, every kernel here has the form
///   K_s = P - c (M + H) + c^2 T
/// in terms of the pure-ReLU matrices (P, M, H, T).
///
/// ReluReferenced (aux_s == 1): K_next = K_p + D (M + H) + D (D - 2 c_p) T,
/// D = s_next - s_p. Valid for every s_p.
///
/// SelfReferenced (aux_s == s_p): the pure-ReLU matrices are recovered from
/// (K_p, M_p + H_p, T_p) by inverting a 2 x 2 system with determinant
/// (1 - c_p^2)^2, which is singular at s_p = 0 and s_p = 2.
template <typename Scalar>
MatrixX<Scalar> kernel_step(const MatrixX<Scalar>& K_p, const MatrixX<Scalar>& H, const MatrixX<Scalar>& M,
                            const MatrixX<Scalar>& T, double aux_s, double s_p, double s_next) {
    const HomotopyParam from(s_p);
    const HomotopyParam to(s_next);
    if (s_next < s_p) throw std::invalid_argument("kernel_step expects s_next >= s_p");
    const auto c = static_cast<Scalar>(from.negative_slope());
    const auto c_next = static_cast<Scalar>(to.negative_slope());
    const auto delta = static_cast<Scalar>(s_next - s_p);

    if (aux_s == 1.0) {
        return K_p + delta * (M + H) + (delta * (delta - Scalar(2) * c)) * T;
    }
    if (aux_s != s_p) {
        throw std::invalid_argument("auxiliary matrices must be taken at s_p or at s = 1");
    }
    const Scalar kappa = Scalar(1) - c * c;  // s_p (2 - s_p)
    if (std::abs(kappa) < Scalar(1e-8)) {
        throw std::domain_error("self-referenced kernel recursion is singular at s_p = " + std::to_string(s_p));
    }
    const MatrixX<Scalar> sum_kt = K_p + T;
    const MatrixX<Scalar> sum_mh = M + H;
    const Scalar det = kappa * kappa;
    const MatrixX<Scalar> pt_sum = ((Scalar(1) + c * c) * sum_kt + Scalar(2) * c * sum_mh) / det;  // P + T (ReLU)
    const MatrixX<Scalar> mh_relu = (Scalar(2) * c * sum_kt + (Scalar(1) + c * c) * sum_mh) / det;  // M + H (ReLU)
    const MatrixX<Scalar> pt_diff = (K_p - T) / kappa;                                              // P - T (ReLU)
    return Scalar(0.5) * (pt_sum + pt_diff) - c_next * mh_relu + (c_next * c_next * Scalar(0.5)) * (pt_sum - pt_diff);
}

template <typename Scalar>
MatrixX<Scalar> kernel_step(const GramPair<Scalar>& at_s_p, const AuxMatrices<Scalar>& aux, KernelComponent which,
                            double s_next) {
    return kernel_step<Scalar>(at_s_p.component(which), aux.H(which), aux.M(which), aux.T(which), aux.s, at_s_p.s,
                               s_next);
}

[[nodiscard]] inline RecursionBranch recursion_branch(double aux_s) {
    return aux_s == 1.0 ? RecursionBranch::ReluReferenced : RecursionBranch::SelfReferenced;
}

// ---------------------------------------------------------------------------
// Dataset screening

/// First pair (i, j) whose rows are parallel or antiparallel within
/// angular_tol radians, if any.
template <typename Scalar = double>
std::optional<std::pair<Eigen::Index, Eigen::Index>> find_parallel_pair(const MatrixX<std::type_identity_t<Scalar>>& X,
                                                                        double angular_tol = 1e-8) {
    const VectorX<Scalar> norms = X.rowwise().norm();
    constexpr Scalar pi = std::numbers::pi_v<Scalar>;
    for (Eigen::Index j = 0; j < X.rows(); ++j) {
        for (Eigen::Index i = 0; i < j; ++i) {
            if (norms(i) == Scalar(0) || norms(j) == Scalar(0)) return std::pair{i, j};
            const Scalar theta =
                detail::stable_angle<Scalar>(X.row(i).transpose(), X.row(j).transpose(), norms(i), norms(j));
            if (theta < angular_tol || pi - theta < angular_tol) return std::pair{i, j};
        }
    }
    return std::nullopt;
}

template <typename Scalar = double>
void require_non_parallel(const MatrixX<std::type_identity_t<Scalar>>& X, double angular_tol = 1e-8) {
    if (auto pair = find_parallel_pair(X, angular_tol)) {
        throw std::invalid_argument("samples " + std::to_string(pair->first) + " and " +
                                    std::to_string(pair->second) + " are (anti)parallel");
    }
}

}  // namespace hrta
