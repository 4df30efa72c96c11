#include "doctest.h"

#include <cmath>
#include <limits>

#include "hrta/activation.hpp"
#include "hrta/rng.hpp"

using namespace hrta;

namespace {
constexpr auto PL = ActivationKind::PiecewiseLinear;
constexpr auto SQ = ActivationKind::SmoothQuadratic;

double relu(double x) { return x > 0 ? x : 0; }
}  // namespace

TEST_CASE("homotopy parameter range") {
    CHECK_NOTHROW(HomotopyParam(0.0));
    CHECK_NOTHROW(HomotopyParam(2.0));
    CHECK_THROWS_AS(HomotopyParam(-1e-12), std::domain_error);
    CHECK_THROWS_AS(HomotopyParam(2.0 + 1e-12), std::domain_error);
    CHECK_THROWS_AS(HomotopyParam(std::nan("")), std::domain_error);
    CHECK(HomotopyParam(0.25).negative_slope() == 0.75);
}

TEST_CASE("activation values") {
    CHECK(activate(PL, HomotopyParam(1.0), -2.0) == 0.0);
    CHECK(activate(PL, HomotopyParam(0.5), -2.0) == -1.0);
    CHECK(activate(PL, HomotopyParam(1.5), -2.0) == 1.0);
    CHECK(activate(SQ, HomotopyParam(0.5), 2.0) == 2.0);
    CHECK(activate(PL, HomotopyParam(2.0), -3.0) == 3.0);  // |x|
    CHECK(activate(PL, HomotopyParam(0.0), -3.0) == -3.0);
    CHECK_THROWS_AS(activate(PL, HomotopyParam(1.0), std::numeric_limits<double>::infinity()), std::domain_error);
    CHECK_THROWS_AS(activate(SQ, HomotopyParam(1.0), std::nan("")), std::domain_error);
}

TEST_CASE("activation derivatives") {
    CHECK(activate_derivative(PL, HomotopyParam(0.5), -3.0) == 0.5);
    CHECK(activate_derivative(PL, HomotopyParam(1.0), 0.0) == 0.0);
    CHECK(activate_derivative(PL, HomotopyParam(0.3), 0.0) == 0.0);
    CHECK(activate_derivative(SQ, HomotopyParam(1.0), 2.0) == 2.0);
    CHECK(activate_second_derivative(SQ, HomotopyParam(0.5), 1.0) == 0.5);
    CHECK(activate_second_derivative(PL, HomotopyParam(0.5), 1.0) == 0.0);
}

TEST_CASE("activation is affine in s") {
    Rng rng(11);
    for (auto kind : {PL, SQ}) {
        for (int i = 0; i < 10000; ++i) {
            const double s = rng.uniform(0.0, 2.0);
            const double x = rng.uniform(-5.0, 5.0);
            const double lhs = activate(kind, HomotopyParam(s), x);
            const double rhs =
                (1 - s) * activate(kind, HomotopyParam(0.0), x) + s * activate(kind, HomotopyParam(1.0), x);
            CHECK(lhs == rhs);
        }
    }
}

TEST_CASE("ReLU decomposition holds identically") {
    Rng rng(12);
    double worst = 0;
    for (int i = 0; i < 100000; ++i) {
        const HomotopyParam s(rng.uniform(0.0, 2.0));
        const double x = rng.uniform(-10.0, 10.0);
        const auto dec = relu_decomposition(PL, s);
        worst = std::max(worst, std::abs(activate(PL, s, x) - dec(x)));
        // independent form of the same identity
        worst = std::max(worst, std::abs(activate(PL, s, x) - (relu(x) - (1 - s.value()) * relu(-x))));
    }
    CHECK(worst <= 1e-14);

    const auto half = relu_decomposition(PL, HomotopyParam(0.5));
    CHECK(half(-2.0) == -1.0);
    const auto pure = relu_decomposition(PL, HomotopyParam(1.0));
    CHECK(pure.pos_coeff == 1.0);
    CHECK(pure.neg_coeff == 0.0);
    CHECK(relu_decomposition(PL, HomotopyParam(0.0))(3.0) == 3.0);
    CHECK_THROWS_AS(relu_decomposition(SQ, HomotopyParam(0.5)), std::invalid_argument);
}

TEST_CASE("derivative matches central differences") {
    Rng rng(13);
    const double h = 1e-5;
    for (auto kind : {PL, SQ}) {
        for (int i = 0; i < 2000; ++i) {
            const HomotopyParam s(rng.uniform(0.0, 2.0));
            double x = rng.uniform(-3.0, 3.0);
            if (kind == PL && std::abs(x) <= h) x = 0.5;
            const double fd = (activate(kind, s, x + h) - activate(kind, s, x - h)) / (2 * h);
            CHECK(std::abs(activate_derivative(kind, s, x) - fd) <= 1e-6);
        }
    }
}

TEST_CASE("array forms agree with the scalar forms") {
    Rng rng(14);
    Eigen::ArrayXXd X(7, 5);
    for (Eigen::Index i = 0; i < X.size(); ++i) X(i) = rng.uniform(-2.0, 2.0);
    X(0, 0) = 0.0;
    for (auto kind : {PL, SQ}) {
        const HomotopyParam s(0.7);
        const Eigen::ArrayXXd A = activate(kind, s, X);
        const Eigen::ArrayXXd D = activate_derivative(kind, s, X);
        const Eigen::ArrayXXd D2 = activate_second_derivative(kind, s, X);
        for (Eigen::Index i = 0; i < X.size(); ++i) {
            CHECK(A(i) == activate(kind, s, X(i)));
            CHECK(D(i) == activate_derivative(kind, s, X(i)));
            CHECK(D2(i) == activate_second_derivative(kind, s, X(i)));
        }
    }
}

TEST_CASE("activation kind names round trip") {
    for (auto kind : {PL, SQ}) CHECK(activation_kind_from_string(to_string(kind)) == kind);
    CHECK_THROWS_AS(activation_kind_from_string("tanh"), std::invalid_argument);
}
