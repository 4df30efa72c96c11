#include "doctest.h"

#include <cmath>
#include <vector>

#include "hrta/network.hpp"
#include "test_support.hpp"

using namespace hrta;
using test_support::ref_forward;

namespace {
constexpr auto PL = ActivationKind::PiecewiseLinear;
constexpr auto SQ = ActivationKind::SmoothQuadratic;

SampleSet random_samples(Eigen::Index n, Eigen::Index d, std::uint64_t seed, bool with_grad) {
    Rng rng(seed);
    SampleSet data;
    data.X.resize(n, d);
    data.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) data.X(i, j) = rng.uniform(0.05, 0.95);
        data.y(i) = rng.uniform(-1.0, 1.0);
    }
    if (with_grad) {
        data.grad_y = Eigen::MatrixXd(n, d);
        for (Eigen::Index i = 0; i < data.grad_y->size(); ++i) (*data.grad_y)(i) = rng.uniform(-2.0, 2.0);
    }
    return data;
}

// Risk written as explicit loops over samples and neurons.
double ref_risk(const Network& p, double s, ActivationKind kind, const SampleSet& data, bool sobolev) {
    const auto m = p.width();
    double acc = 0;
    for (Eigen::Index i = 0; i < data.size(); ++i) {
        const Eigen::VectorXd x = data.X.row(i).transpose();
        const double e = ref_forward(p, s, kind, x) - data.y(i);
        acc += e * e;
        if (sobolev) {
            for (Eigen::Index j = 0; j < data.grad_y->cols(); ++j) {
                double g = 0;
                for (Eigen::Index k = 0; k < m; ++k) {
                    double z = 0;
                    for (Eigen::Index l = 0; l < data.dim(); ++l) z += p.omega(k, l) * x(l);
                    double dz = 0;
                    if (kind == PL) dz = z > 0 ? 1 : (z < 0 ? 1 - s : 0);
                    else dz = (1 - s) + s * (z > 0 ? z : 0);
                    g += p.a(k) * dz * p.omega(k, j);
                }
                g /= std::sqrt(static_cast<double>(m));
                const double r = g - (*data.grad_y)(i, j);
                acc += r * r;
            }
        }
    }
    return acc / (2.0 * static_cast<double>(data.size()));
}

// Smallest |omega_k . x_i| over the data set and the first layer.
double kink_margin(const Network& p, const Eigen::MatrixXd& X) {
    return (X * p.omega.transpose()).cwiseAbs().minCoeff();
}

double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (a - b).norm() / std::max(b.norm(), 1e-12);
}
}  // namespace

TEST_CASE("initialization is deterministic and standard normal") {
    const auto p1 = init_params(50, 3, 2, 7);
    const auto p2 = init_params(50, 3, 2, 7);
    CHECK(p1.a == p2.a);
    CHECK(p1.omega == p2.omega);
    const auto p3 = init_params(50, 3, 2, 8);
    CHECK(p1.a != p3.a);

    const auto big = init_params(250000, 3, 2, 3);  // 10^6 entries
    const double mean = (big.a.sum() + big.omega.sum()) / 1e6;
    CHECK(std::abs(mean) <= 0.01);
    const double second = (big.a.squaredNorm() + big.omega.squaredNorm()) / 1e6;
    CHECK(second == doctest::Approx(1.0).epsilon(0.01));

    const auto deep = init_params(6, 2, 3, 1, 4);
    CHECK(deep.depth() == 3);
    CHECK(deep.hidden2->rows() == 4);
    CHECK(deep.hidden2->cols() == 6);
    CHECK(deep.a.size() == 4);
    CHECK_THROWS_AS(init_params(0, 1, 2, 1), std::invalid_argument);
    CHECK_THROWS_AS(init_params(1, 1, 4, 1), std::invalid_argument);
}

TEST_CASE("forward on hand instances") {
    Network p;
    p.a = Eigen::VectorXd::Ones(1);
    p.omega = Eigen::MatrixXd::Ones(1, 1);
    CHECK(forward(p, HomotopyParam(1.0), PL, Eigen::VectorXd::Ones(1)) == 1.0);

    Network q;
    q.a = Eigen::VectorXd::Ones(4);
    q.omega = Eigen::MatrixXd::Ones(4, 1);
    CHECK(forward(q, HomotopyParam(0.0), PL, Eigen::VectorXd::Constant(1, 0.5)) == 1.0);

    CHECK_THROWS_AS(forward(q, HomotopyParam(0.0), PL, Eigen::VectorXd::Ones(2)), std::invalid_argument);
}

TEST_CASE("forward and predict match the loop reference") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto p = init_params(8, 2, 2, seed);
        Rng rng(100 + seed);
        Eigen::MatrixXd X(20, 2);
        for (Eigen::Index i = 0; i < X.size(); ++i) X(i) = rng.uniform(-1.0, 1.0);
        for (auto kind : {PL, SQ}) {
            const auto batch = predict(p, HomotopyParam(0.5), kind, X);
            for (Eigen::Index i = 0; i < X.rows(); ++i) {
                const Eigen::VectorXd x = X.row(i).transpose();
                const double ref = ref_forward(p, 0.5, kind, x);
                CHECK(std::abs(forward(p, HomotopyParam(0.5), kind, x) - ref) <= 1e-12);
                CHECK(std::abs(batch(i) - ref) <= 1e-12);
            }
        }
    }
}

TEST_CASE("forward is bit reproducible") {
    const auto p = init_params(300, 3, 2, 5);
    const Eigen::Vector3d x(0.2, 0.4, 0.9);
    const double first = forward(p, HomotopyParam(0.5), PL, x);
    for (int i = 0; i < 5; ++i) CHECK(forward(p, HomotopyParam(0.5), PL, x) == first);
}

TEST_CASE("empirical risk") {
    auto data = random_samples(10, 2, 1, true);
    const auto p = init_params(16, 2, 2, 2);
    SampleSet fitted = data;
    fitted.y = predict(p, HomotopyParam(0.5), PL, data.X);
    CHECK(empirical_risk(p, HomotopyParam(0.5), PL, fitted) == 0.0);

    Network two;
    two.a = Eigen::VectorXd::Constant(1, 2.0);
    two.omega = Eigen::MatrixXd::Ones(1, 1);
    SampleSet one;
    one.X = Eigen::MatrixXd::Constant(1, 1, 1.0);
    one.y = Eigen::VectorXd::Zero(1);
    CHECK(empirical_risk(two, HomotopyParam(1.0), PL, one) == 2.0);

    for (auto kind : {PL, SQ}) {
        CHECK(std::abs(empirical_risk(p, HomotopyParam(0.3), kind, data) - ref_risk(p, 0.3, kind, data, false)) <=
              1e-12);
        CHECK(std::abs(empirical_risk(p, HomotopyParam(0.3), kind, data, LossKind::Sobolev) -
                       ref_risk(p, 0.3, kind, data, true)) <= 1e-12);
        CHECK(empirical_risk(p, HomotopyParam(0.3), kind, data, LossKind::Sobolev) ==
              doctest::Approx(risk_and_gradient(p, HomotopyParam(0.3), kind, data, LossKind::Sobolev).risk));
    }

    SampleSet no_grad = data;
    no_grad.grad_y.reset();
    CHECK_THROWS_AS(empirical_risk(p, HomotopyParam(0.3), SQ, no_grad, LossKind::Sobolev), std::invalid_argument);
}

TEST_CASE("parameter gradient on a hand instance") {
    Network p;
    p.a = Eigen::VectorXd::Ones(1);
    p.omega = Eigen::MatrixXd::Ones(1, 1);
    SampleSet one;
    one.X = Eigen::MatrixXd::Constant(1, 1, 1.0);
    one.y = Eigen::VectorXd::Zero(1);
    const auto rg = risk_and_gradient(p, HomotopyParam(0.0), PL, one);
    CHECK(rg.risk == 0.5);
    CHECK(rg.gradient.d_a(0) == 1.0);
    CHECK(rg.gradient.d_omega(0, 0) == 1.0);

    SampleSet exact = one;
    exact.y(0) = 1.0;
    const auto zero = grad_params(p, HomotopyParam(0.0), PL, exact);
    CHECK(zero.d_a.norm() == 0.0);
    CHECK(zero.d_omega.norm() == 0.0);
}

TEST_CASE("parameter gradient matches central differences") {
    const double h = 1e-6;
    for (auto kind : {PL, SQ}) {
        for (auto loss : {LossKind::Value, LossKind::Sobolev}) {
            int done = 0;
            for (std::uint64_t seed = 0; done < 20 && seed < 500; ++seed) {
                const auto p = init_params(6, 2, 2, 1000 + seed);
                const auto data = random_samples(5, 2, 2000 + seed, true);
                if (kind == PL && kink_margin(p, data.X) < 1e-3) continue;
                const HomotopyParam s(Rng(seed).uniform(0.0, 2.0));
                const auto analytic = flatten(grad_params(p, s, kind, data, loss));
                const Eigen::VectorXd theta = flatten(p);
                Eigen::VectorXd numeric(theta.size());
                for (Eigen::Index k = 0; k < theta.size(); ++k) {
                    Network plus = p, minus = p;
                    Eigen::VectorXd tp = theta, tm = theta;
                    tp(k) += h;
                    tm(k) -= h;
                    assign_flat(plus, tp);
                    assign_flat(minus, tm);
                    numeric(k) = (empirical_risk(plus, s, kind, data, loss) - empirical_risk(minus, s, kind, data, loss)) /
                                 (2 * h);
                }
                CHECK(relative_error(analytic, numeric) <= 1e-5);
                ++done;
            }
            CHECK(done == 20);
        }
    }
}

TEST_CASE("Sobolev labels on the leading inputs only") {
    const double h = 1e-6;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = init_params(7, 3, 2, 300 + seed);
        auto data = random_samples(6, 3, 400 + seed, true);
        data.X.col(2).setConstant(1.0);
        data.grad_y = Eigen::MatrixXd(data.grad_y->leftCols(2));
        const HomotopyParam s(0.25 + 0.3 * static_cast<double>(seed));
        CHECK(std::abs(empirical_risk(p, s, SQ, data, LossKind::Sobolev) - ref_risk(p, s.value(), SQ, data, true)) <=
              1e-12);
        const auto analytic = flatten(grad_params(p, s, SQ, data, LossKind::Sobolev));
        const Eigen::VectorXd theta = flatten(p);
        Eigen::VectorXd numeric(theta.size());
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
            Network plus = p, minus = p;
            Eigen::VectorXd tp = theta, tm = theta;
            tp(k) += h;
            tm(k) -= h;
            assign_flat(plus, tp);
            assign_flat(minus, tm);
            numeric(k) = (empirical_risk(plus, s, SQ, data, LossKind::Sobolev) -
                          empirical_risk(minus, s, SQ, data, LossKind::Sobolev)) /
                         (2 * h);
        }
        CHECK(relative_error(analytic, numeric) <= 1e-5);
    }
    auto bad = random_samples(4, 2, 9, true);
    bad.grad_y = Eigen::MatrixXd::Zero(4, 3);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("depth-3 gradient matches central differences") {
    const double h = 1e-6;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto p = init_params(5, 2, 3, 50 + seed, 4);
        const auto data = random_samples(4, 2, 60 + seed, false);
        const auto kind = seed % 2 ? SQ : PL;
        const HomotopyParam s(0.4 + 0.1 * static_cast<double>(seed));
        const auto analytic = flatten(grad_params(p, s, kind, data));
        Eigen::VectorXd theta = flatten(p);
        Eigen::VectorXd numeric(theta.size());
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
            Network plus = p, minus = p;
            Eigen::VectorXd tp = theta, tm = theta;
            tp(k) += h;
            tm(k) -= h;
            assign_flat(plus, tp);
            assign_flat(minus, tm);
            numeric(k) = (empirical_risk(plus, s, kind, data) - empirical_risk(minus, s, kind, data)) / (2 * h);
        }
        CHECK(relative_error(analytic, numeric) <= 1e-5);
    }
}

TEST_CASE("input gradient") {
    const auto p = init_params(7, 3, 2, 9);
    const Eigen::Vector3d x(0.3, 0.6, 0.2);
    const Eigen::VectorXd linear = grad_input(p, HomotopyParam(0.0), PL, x);
    const Eigen::VectorXd expected = p.omega.transpose() * p.a / std::sqrt(7.0);
    CHECK((linear - expected).norm() <= 1e-13);
    CHECK((grad_input(p, HomotopyParam(0.0), PL, Eigen::Vector3d(0.9, 0.1, 0.5)) - expected).norm() <= 1e-13);

    Network one;
    one.a = Eigen::VectorXd::Ones(1);
    one.omega = Eigen::MatrixXd(1, 2);
    one.omega << 2, 0;
    const Eigen::VectorXd g = grad_input(one, HomotopyParam(1.0), PL, Eigen::Vector2d(1, 1));
    CHECK(g(0) == 2.0);
    CHECK(g(1) == 0.0);

    const double h = 1e-6;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (auto kind : {PL, SQ}) {
            for (int depth : {2, 3}) {
                const auto q = init_params(9, 3, depth, 300 + seed);
                Rng rng(400 + seed);
                Eigen::Vector3d y(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9));
                const Eigen::VectorXd analytic = grad_input(q, HomotopyParam(0.8), kind, y);
                Eigen::VectorXd numeric(3);
                for (int j = 0; j < 3; ++j) {
                    Eigen::Vector3d yp = y, ym = y;
                    yp(j) += h;
                    ym(j) -= h;
                    numeric(j) = (forward(q, HomotopyParam(0.8), kind, yp) - forward(q, HomotopyParam(0.8), kind, ym)) /
                                 (2 * h);
                }
                CHECK(relative_error(analytic, numeric) <= 1e-5);
            }
        }
    }
}

TEST_CASE("width scaling and homogeneity") {
    const auto p = init_params(10, 2, 2, 21);
    Network doubled;
    doubled.a.resize(20);
    doubled.omega.resize(20, 2);
    doubled.a << p.a, p.a;
    doubled.omega << p.omega, p.omega;
    Rng rng(22);
    for (int i = 0; i < 50; ++i) {
        const Eigen::Vector2d x(rng.uniform(), rng.uniform());
        const double base = forward(p, HomotopyParam(0.5), PL, x);
        CHECK(forward(doubled, HomotopyParam(0.5), PL, x) == doctest::Approx(std::sqrt(2.0) * base).epsilon(1e-13));
        const double c = rng.uniform(0.0, 10.0);
        CHECK(forward(p, HomotopyParam(1.0), PL, Eigen::Vector2d(c * x)) ==
              doctest::Approx(c * forward(p, HomotopyParam(1.0), PL, x)).epsilon(1e-12));
    }
}

TEST_CASE("pure-ReLU rewrite preserves outputs") {
    Rng rng(31);
    for (double s : {0.0, 0.5, 1.0, 1.5, 2.0}) {
        const auto p = init_params(40, 3, 2, 32);
        const auto q = rewrite_as_relu(p, HomotopyParam(s));
        CHECK(q.width() == 80);
        if (s == 1.0) CHECK(q.a.tail(40).cwiseAbs().maxCoeff() == 0.0);
        double worst = 0;
        for (int i = 0; i < 1000; ++i) {
            const Eigen::Vector3d x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
            worst = std::max(worst, std::abs(forward(p, HomotopyParam(s), PL, x) -
                                             forward(q, HomotopyParam(1.0), PL, x)));
        }
        CHECK(worst <= 1e-12);
    }
    Network id;
    id.a = Eigen::VectorXd::Ones(1);
    id.omega = Eigen::MatrixXd::Ones(1, 1);
    const auto r = rewrite_as_relu(id, HomotopyParam(0.0));
    for (double x : {-2.0, 0.5, 3.0})
        CHECK(forward(r, HomotopyParam(1.0), PL, Eigen::VectorXd::Constant(1, x)) == doctest::Approx(x).epsilon(1e-15));

    CHECK_THROWS_AS(rewrite_as_relu(init_params(3, 2, 3, 1), HomotopyParam(0.5)), std::invalid_argument);
    CHECK_THROWS_AS(rewrite_as_relu(init_params(3, 2, 2, 1), HomotopyParam(0.5), SQ), std::invalid_argument);
}

TEST_CASE("sample set validation") {
    auto data = random_samples(4, 2, 3, false);
    CHECK_NOTHROW(data.validate());
    data.X(0, 0) = 1.5;
    CHECK_THROWS_AS(data.validate(), std::invalid_argument);
}
