#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace hrta {

template <typename Scalar>
struct SymmetricEigenResult {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> values;                 // ascending
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> vectors;   // column i pairs with values(i)
    int sweeps = 0;
};

template <typename Scalar>
struct EigenPair {
    Scalar value = 0;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> vector;
    int iterations = 0;
    Scalar residual = 0;  // |A v - value v|_2 with |v|_2 = 1
};

/// Largest absolute asymmetry max_ij |A_ij - A_ji|.
template <typename Derived>
typename Derived::Scalar asymmetry(const Eigen::MatrixBase<Derived>& A) {
    return (A - A.transpose()).cwiseAbs().maxCoeff();
}

/// Cyclic Jacobi eigensolver for dense symmetric matrices. Stops when the
/// off-diagonal Frobenius norm falls below tol * |A|_F.
template <typename Scalar>
SymmetricEigenResult<Scalar> jacobi_eigen(Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> A,
                                          Scalar tol = std::numeric_limits<Scalar>::epsilon(), int max_sweeps = 100) {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    if (A.rows() != A.cols()) throw std::invalid_argument("jacobi_eigen needs a square matrix");
    const Eigen::Index n = A.rows();
    Matrix V = Matrix::Identity(n, n);
    const Scalar scale = A.norm();
    int sweep = 0;

    auto off_norm = [&] {
        Scalar acc = 0;
        for (Eigen::Index q = 1; q < n; ++q)
            for (Eigen::Index p = 0; p < q; ++p) acc += A(p, q) * A(p, q);
        return std::sqrt(Scalar(2) * acc);
    };

    while (sweep < max_sweeps && off_norm() > tol * scale) {
        ++sweep;
        for (Eigen::Index p = 0; p + 1 < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                const Scalar apq = A(p, q);
                if (apq == Scalar(0)) continue;
                // Rotation zeroing A(p, q), Golub & Van Loan sym.schur2.
                const Scalar tau = (A(q, q) - A(p, p)) / (Scalar(2) * apq);
                const Scalar t = (tau >= 0 ? Scalar(1) : Scalar(-1)) / (std::abs(tau) + std::sqrt(Scalar(1) + tau * tau));
                const Scalar c = Scalar(1) / std::sqrt(Scalar(1) + t * t);
                const Scalar s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const Scalar akp = A(k, p);
                    const Scalar akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const Scalar apk = A(p, k);
                    const Scalar aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const Scalar vkp = V(k, p);
                    const Scalar vkq = V(k, q);
                    V(k, p) = c * vkp - s * vkq;
                    V(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return A(i, i) < A(j, j); });

    SymmetricEigenResult<Scalar> result;
    result.values.resize(n);
    result.vectors.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        result.values(i) = A(order[i], order[i]);
        result.vectors.col(i) = V.col(order[i]);
    }
    result.sweeps = sweep;
    return result;
}

/// Smallest eigenpair by power iteration on (mu I - A), where mu is a
/// Gershgorin upper bound on the spectrum.
template <typename Scalar>
EigenPair<Scalar> min_eigenpair_power(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& A,
                                      Scalar tol = Scalar(1e-12), int max_iterations = 200000) {
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    const Eigen::Index n = A.rows();
    Scalar mu = 0;
    for (Eigen::Index i = 0; i < n; ++i) mu = std::max(mu, A(i, i) + (A.row(i).cwiseAbs().sum() - std::abs(A(i, i))));
    Vector v = Vector::Ones(n) / std::sqrt(static_cast<Scalar>(n));
    // Break symmetry so v is not orthogonal to the target eigenvector by accident.
    for (Eigen::Index i = 0; i < n; ++i) v(i) += Scalar(1e-3) * static_cast<Scalar>((i * 7919) % 13) / Scalar(13);
    v.normalize();

    const Scalar target = tol * A.norm();
    EigenPair<Scalar> pair;
    for (int it = 1; it <= max_iterations; ++it) {
        Vector w = mu * v - A * v;
        const Scalar norm = w.norm();
        if (norm == Scalar(0)) break;
        v = w / norm;
        pair.iterations = it;
        if (it % 10 == 0 || it == max_iterations) {
            const Vector Av = A * v;
            const Scalar lambda = v.dot(Av);
            if ((Av - lambda * v).norm() <= target) break;
        }
    }
    const Vector Av = A * v;
    pair.value = v.dot(Av);
    pair.vector = v;
    pair.residual = (Av - pair.value * v).norm();
    return pair;
}

/// Smallest eigenpair: Jacobi up to 512 x 512, power iteration beyond.
template <typename Scalar>
EigenPair<Scalar> smallest_eigenpair(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& A) {
    if (A.rows() > 512) return min_eigenpair_power(A);
    const auto eig = jacobi_eigen(A);
    EigenPair<Scalar> pair;
    pair.value = eig.values(0);
    pair.vector = eig.vectors.col(0);
    pair.iterations = eig.sweeps;
    pair.residual = (A * pair.vector - pair.value * pair.vector).norm();
    return pair;
}

}  // namespace hrta
