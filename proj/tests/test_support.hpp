#pragma once

// Independent loop-based references shared by the unit and acceptance tests.

#include <cmath>

#include <Eigen/Core>

#include "hrta/network.hpp"
#include "hrta/rng.hpp"

#include <cstdint>
#include <utility>

namespace test_support {

inline double ref_sigma(double s, hrta::ActivationKind kind, double z) {
    const double r = z > 0 ? z : 0;
    return kind == hrta::ActivationKind::PiecewiseLinear ? (1 - s) * z + s * r : (1 - s) * z + s * 0.5 * r * r;
}

/// Depth-2 forward pass written as plain nested loops.
inline double ref_forward(const hrta::Network& p, double s, hrta::ActivationKind kind, const Eigen::VectorXd& x) {
    double acc = 0;
    for (Eigen::Index k = 0; k < p.width(); ++k) {
        double z = 0;
        for (Eigen::Index j = 0; j < x.size(); ++j) z += p.omega(k, j) * x(j);
        acc += p.a(k) * ref_sigma(s, kind, z);
    }
    return acc / std::sqrt(static_cast<double>(p.width()));
}

}  // namespace test_support

namespace test_support {

/// n x d matrix with i.i.d. uniform entries in (lo, hi).
inline Eigen::MatrixXd uniform_matrix(Eigen::Index n, Eigen::Index d, std::uint64_t seed, double lo = 0.0,
                                      double hi = 1.0) {
    hrta::Rng rng(seed);
    Eigen::MatrixXd X(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) X(i, j) = rng.uniform(lo, hi);
    return X;
}

/// Kernels for d = 2 by quadrature over the direction of omega. Both kernels
/// factor into a radial part (E r^2 = 2 for sigma sigma, E r^0 = 1 for the
/// derivative product) times a uniform average over the angle phi.
inline std::pair<double, double> quadrature_kernel_2d(double s, const Eigen::Vector2d& u, const Eigen::Vector2d& v,
                                                      int points = 200000) {
    const double pi = 3.14159265358979323846;
    auto act = [s](double z) { return (1 - s) * z + s * (z > 0 ? z : 0); };
    auto der = [s](double z) { return z > 0 ? 1.0 : (z < 0 ? 1 - s : 0.0); };
    double ka = 0, kw = 0;
    for (int i = 0; i < points; ++i) {
        const double phi = 2 * pi * (i + 0.5) / points;
        const double zu = std::cos(phi) * u(0) + std::sin(phi) * u(1);
        const double zv = std::cos(phi) * v(0) + std::sin(phi) * v(1);
        ka += act(zu) * act(zv);
        kw += der(zu) * der(zv);
    }
    return {2.0 * ka / points, kw / points * u.dot(v)};
}

}  // namespace test_support
