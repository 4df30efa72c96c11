#include "doctest.h"

#include <cmath>
#include <sstream>

#include "hrta/bounds.hpp"
#include "hrta/kernels.hpp"
#include "hrta/trainer.hpp"
#include "test_support.hpp"

using namespace hrta;

TEST_CASE("init magnitude bound") {
    // 2 m (d+1) / delta = e^2 makes the bound exactly 2.
    CHECK(init_magnitude_bound(1, 1, 4 / std::exp(2.0)) == doctest::Approx(2.0).epsilon(1e-15));
    const double v = init_magnitude_bound(1000, 1, 0.01);
    CHECK(v == doctest::Approx(std::sqrt(2 * (std::log(4.0) + 5 * std::log(10.0)))).epsilon(1e-14));
    CHECK(std::abs(v - 5.08) < 5e-3);
}

TEST_CASE("initial risk bound agrees with a log-space factoring") {
    for (double m : {10.0, 1e3, 1e6})
        for (double d : {1.0, 2.0, 5.0})
            for (double delta : {0.5, 0.1, 1e-3}) {
                const double L = std::log(4.0) + std::log(m) + std::log1p(d) - std::log(delta);
                const double inner = std::exp(std::log(2 * d) + std::log(L) +
                                              std::log(2 + 6 * std::sqrt(2 * (3 * std::log(2.0) - std::log(delta)))));
                const double ref = std::exp(2 * std::log1p(inner) - std::log(2.0));
                CHECK(initial_risk_bound(m, d, delta) == doctest::Approx(ref).epsilon(1e-12));
            }
}

TEST_CASE("bounds move in the expected direction") {
    double prev = 0;
    for (double m : {10.0, 100.0, 1e4, 1e6}) {
        const double v = initial_risk_bound(m, 2, 0.1);
        CHECK(v > prev);
        prev = v;
    }
    CHECK(init_magnitude_bound(100, 3, 0.1) > init_magnitude_bound(100, 2, 0.1));
    CHECK(init_magnitude_bound(100, 2, 0.01) > init_magnitude_bound(100, 2, 0.1));
    CHECK(initial_risk_bound(100, 2, 0.01) > initial_risk_bound(100, 2, 0.1));

    // psi decays like sqrt(ln m / m) and scales with sqrt(risk0).
    for (double m : {1e3, 1e4, 1e5}) CHECK(psi_m(4 * m, 10, 2, 0.1, 1, 1) / psi_m(m, 10, 2, 0.1, 1, 1) < 0.6);
    CHECK(psi_m(1e4, 10, 2, 0.1, 1, 2) / psi_m(1e4, 10, 2, 0.1, 1, 1) == doctest::Approx(std::sqrt(2.0)));
    CHECK(psi_m(1e4, 10, 2, 0.1, 2, 1) / psi_m(1e4, 10, 2, 0.1, 1, 1) == doctest::Approx(0.5));

    CHECK(risk_decay_bound(2, 0, 10, 1) == 2);
    CHECK(risk_decay_bound(2, 10, 10, 3) == doctest::Approx(2 * std::exp(-3.0)));
}

TEST_CASE("width thresholds") {
    BoundInputs in;
    in.n = 10;
    in.d = 2;
    in.delta = 0.1;
    const auto t1 = width_threshold(in, WidthStage::Stage1);
    CHECK(t1.value == doctest::Approx(16 * 100 * 4 * std::log(4 * 100 / 0.1)));
    double prev = 0;
    for (double n : {4.0, 8.0, 16.0}) {
        in.n = n;
        const double v = width_threshold(in, WidthStage::Stage1).value;
        CHECK(v > prev);
        prev = v;
    }
    in.n = 6;
    in.lambda_a = in.lambda_w = 0.5;
    CHECK(width_threshold(in, WidthStage::Stage1).value == doctest::Approx(4 * t1.value * 36 / 100 *
                                                                           std::log(4 * 36 / 0.1) /
                                                                           std::log(4 * 100 / 0.1)));

    // Stage 2: the returned m satisfies its own defining inequality up to the iteration tolerance.
    in.lambda_a2 = 0.3;
    in.lambda_w2 = 0.4;
    in.risk0 = 0.7;
    const auto t2 = width_threshold(in, WidthStage::Stage2);
    CHECK(t2.iterations >= 1);
    const double m = t2.value;
    const double rhs = std::pow(in.n, 4) *
                       (128 * std::sqrt(2.0) * in.d * std::sqrt(in.risk0) /
                        ((in.lambda_a + in.lambda_w) * std::min(*in.lambda_a2, *in.lambda_w2))) *
                       2 * std::log(4 * m * (in.d + 1) / in.delta);
    CHECK(m >= width_threshold(in, WidthStage::Stage1).value);
    CHECK(std::abs(m - std::max(rhs, width_threshold(in, WidthStage::Stage1).value)) <= 1.0);

    BoundInputs bad;
    bad.delta = 1.5;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("Wilson interval") {
    const auto [lo0, hi0] = wilson_interval(0, 20);
    const double z2 = 1.959963984540054 * 1.959963984540054;
    CHECK(lo0 == doctest::Approx(0.0));
    CHECK(hi0 == doctest::Approx(z2 / (20 + z2)).epsilon(1e-12));
    const auto [lo1, hi1] = wilson_interval(20, 20);
    CHECK(lo1 == doctest::Approx(20 / (20 + z2)).epsilon(1e-12));
    CHECK(hi1 == doctest::Approx(1.0));
    const auto [lo, hi] = wilson_interval(50, 100);
    CHECK(lo + hi == doctest::Approx(1.0));
    CHECK(lo < 0.5);
}

TEST_CASE("init magnitude event is frequent") {
    const auto r = verify_init_magnitude(100, 2, 0.1, 2000, 7);
    CHECK(r.trials == 2000);
    CHECK(r.rows.size() == 2000);
    CHECK(r.fraction >= 0.9);
    CHECK(r.wilson_lo <= r.fraction);
    CHECK(r.fraction <= r.wilson_hi);
    std::ostringstream out;
    write_verifier_csv(out, r);
    CHECK(out.str().rfind("trial,seed,event_held,statistic,threshold\n", 0) == 0);
}

TEST_CASE("eigenvalue event concentrates with width") {
    const Eigen::MatrixXd X = test_support::uniform_matrix(6, 2, 11, 0.05, 0.95);
    const HomotopyParam s(0.5);
    const auto wide = verify_eig_event(X, 10000, s, 100, 3);
    const auto narrow = verify_eig_event(X, 4, s, 100, 3);
    CHECK(wide.fraction >= 0.95);
    CHECK(narrow.fraction < wide.fraction - 0.3);
}

TEST_CASE("parameter drift in the lazy regime stays inside psi") {
    const Eigen::Index n = 8, m = 4096;
    const double delta = 0.1;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        SampleSet data;
        data.X = test_support::uniform_matrix(n, 2, 100 + seed, 0.1, 0.9);
        data.y = (2 * M_PI * data.X.col(0)).array().sin();
        const auto K = kernel_closed(data.X, HomotopyParam(0.5));
        const auto spec = min_eigs(K);
        const double lsum = spec.lambda_a + spec.lambda_w;

        TrainConfig cfg;
        cfg.width = m;
        cfg.seed = seed;
        cfg.schedule.s1 = HomotopyParam(0.5);
        cfg.schedule.lr = 1.0;
        cfg.schedule.steps_per_stage = 500;  // the bound is uniform in time
        const auto p0 = init_params(m, 2, 2, seed);
        const double risk0 = empirical_risk(p0, HomotopyParam(0.5), ActivationKind::PiecewiseLinear, data);
        const auto run = hrta_run(cfg, data);
        CHECK(run.stages[0].max_param_drift <= psi_m(m, n, 2, delta, lsum, risk0));
    }
}
