#pragma once

// Homotopy activation family sigma_s(x) = (1 - s) x + s * g(x), where g is
// ReLU (piecewise linear) or half squared ReLU (smooth quadratic).

#include <cmath>
#include <concepts>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace hrta {

enum class ActivationKind { PiecewiseLinear, SmoothQuadratic };

std::string_view to_string(ActivationKind kind);
ActivationKind activation_kind_from_string(std::string_view name);

/// Homotopy parameter s. s = 0 is the identity, s = 1 is the pure target
/// activation and s = 2 is the upper relaxation endpoint (|x| for ReLU).
class HomotopyParam {
public:
    static constexpr double kMin = 0.0;
    static constexpr double kMax = 2.0;

    HomotopyParam() = default;
    explicit HomotopyParam(double s) : s_(s) {
        if (!(s >= kMin && s <= kMax)) {
            throw std::domain_error("homotopy parameter must lie in [0, 2], got " + std::to_string(s));
        }
    }

    [[nodiscard]] constexpr double value() const noexcept { return s_; }
    /// Slope of the activation on the negative half-line, 1 - s.
    [[nodiscard]] constexpr double negative_slope() const noexcept { return 1.0 - s_; }

    friend constexpr bool operator==(HomotopyParam, HomotopyParam) = default;

private:
    double s_ = 1.0;
};

namespace detail {

template <typename Scalar>
inline void require_finite(Scalar x) {
    if (!std::isfinite(static_cast<double>(x))) {
        throw std::domain_error("activation input is not finite");
    }
}

}  // namespace detail

template <std::floating_point Scalar>
Scalar activate(ActivationKind kind, HomotopyParam s, Scalar x) {
    detail::require_finite(x);
    const Scalar sv = static_cast<Scalar>(s.value());
    const Scalar relu = x > Scalar(0) ? x : Scalar(0);
    const Scalar target = kind == ActivationKind::PiecewiseLinear ? relu : Scalar(0.5) * relu * relu;
    return (Scalar(1) - sv) * x + sv * target;
}

/// Derivative in x. For the piecewise-linear kind the value at the kink is
/// exactly 0, matching the three-branch convention used by the kernels.
template <std::floating_point Scalar>
Scalar activate_derivative(ActivationKind kind, HomotopyParam s, Scalar x) {
    detail::require_finite(x);
    const Scalar sv = static_cast<Scalar>(s.value());
    if (kind == ActivationKind::PiecewiseLinear) {
        if (x > Scalar(0)) return Scalar(1);
        if (x < Scalar(0)) return Scalar(1) - sv;
        return Scalar(0);
    }
    return (Scalar(1) - sv) + sv * (x > Scalar(0) ? x : Scalar(0));
}

/// Second derivative (almost everywhere). Zero for the piecewise-linear kind.
template <std::floating_point Scalar>
Scalar activate_second_derivative(ActivationKind kind, HomotopyParam s, Scalar x) {
    detail::require_finite(x);
    if (kind == ActivationKind::PiecewiseLinear) return Scalar(0);
    return x > Scalar(0) ? static_cast<Scalar>(s.value()) : Scalar(0);
}

// Coefficient-wise array forms. These skip the finiteness check; callers that
// care (the trainer) test the resulting loss instead.

template <typename Derived>
auto activate(ActivationKind kind, HomotopyParam s, const Eigen::ArrayBase<Derived>& x)
    -> Eigen::Array<typename Derived::Scalar, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime> {
    using Scalar = typename Derived::Scalar;
    const Scalar sv = static_cast<Scalar>(s.value());
    if (kind == ActivationKind::PiecewiseLinear) {
        return (Scalar(1) - sv) * x + sv * x.max(Scalar(0));
    }
    return (Scalar(1) - sv) * x + sv * (Scalar(0.5) * x.max(Scalar(0)).square());
}

template <typename Derived>
auto activate_derivative(ActivationKind kind, HomotopyParam s, const Eigen::ArrayBase<Derived>& x)
    -> Eigen::Array<typename Derived::Scalar, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime> {
    using Scalar = typename Derived::Scalar;
    const Scalar sv = static_cast<Scalar>(s.value());
    if (kind == ActivationKind::PiecewiseLinear) {
        return x.unaryExpr([sv](Scalar v) {
            return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(1) - sv : Scalar(0));
        });
    }
    return (Scalar(1) - sv) + sv * x.max(Scalar(0));
}

template <typename Derived>
auto activate_second_derivative(ActivationKind kind, HomotopyParam s, const Eigen::ArrayBase<Derived>& x)
    -> Eigen::Array<typename Derived::Scalar, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime> {
    using Scalar = typename Derived::Scalar;
    using Result = Eigen::Array<Scalar, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime>;
    if (kind == ActivationKind::PiecewiseLinear) {
        return Result::Zero(x.rows(), x.cols());
    }
    const Scalar sv = static_cast<Scalar>(s.value());
    return x.unaryExpr([sv](Scalar v) { return v > Scalar(0) ? sv : Scalar(0); });
}

/// sigma_s(x) = pos_coeff * relu(x) + neg_coeff * relu(-x); holds identically
/// with pos_coeff = 1 and neg_coeff = -(1 - s).
struct ReluDecomposition {
    double pos_coeff = 1.0;
    double neg_coeff = 0.0;

    template <typename Scalar>
    Scalar operator()(Scalar x) const {
        const Scalar pos = x > Scalar(0) ? x : Scalar(0);
        const Scalar neg = -x > Scalar(0) ? -x : Scalar(0);
        return static_cast<Scalar>(pos_coeff) * pos + static_cast<Scalar>(neg_coeff) * neg;
    }
};

inline ReluDecomposition relu_decomposition(ActivationKind kind, HomotopyParam s) {
    if (kind != ActivationKind::PiecewiseLinear) {
        throw std::invalid_argument("relu decomposition only exists for the piecewise-linear activation");
    }
    return {1.0, -(1.0 - s.value())};
}

}  // namespace hrta
