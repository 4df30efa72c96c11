#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include "hrta/kernels.hpp"
#include "hrta/trainer.hpp"
#include "test_support.hpp"

using namespace hrta;

namespace {
constexpr auto PL = ActivationKind::PiecewiseLinear;
constexpr auto SQ = ActivationKind::SmoothQuadratic;

SampleSet sine_samples(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    SampleSet data;
    data.X = test_support::uniform_matrix(n, d, seed, 0.1, 0.9);
    data.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) data.y(i) = std::sin(2 * M_PI * data.X.row(i).sum());
    return data;
}

Schedule gd_schedule(double s1, int stages, long steps, double lr) {
    Schedule s;
    s.s1 = HomotopyParam(s1);
    s.zeta_increment = 0.5;
    s.stages = stages;
    s.steps_per_stage = steps;
    s.lr = lr;
    return s;
}

TrainConfig config_with(Schedule s, Eigen::Index width, std::uint64_t seed, ActivationKind kind = PL) {
    TrainConfig c;
    c.schedule = std::move(s);
    c.width = width;
    c.seed = seed;
    c.kind = kind;
    return c;
}

// Adam written out per coordinate.
struct RefAdam {
    std::vector<double> m, v;
    int t = 0;
    void step(std::vector<double>& x, const std::vector<double>& g, double lr, double b1, double b2, double eps) {
        if (m.empty()) m.assign(x.size(), 0.0), v.assign(x.size(), 0.0);
        ++t;
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mhat = m[i] / (1 - std::pow(b1, t));
            const double vhat = v[i] / (1 - std::pow(b2, t));
            x[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
};
}  // namespace

TEST_CASE("gradient descent step on a quadratic") {
    Network p;
    p.a = Eigen::VectorXd::Ones(3);
    p.omega = Eigen::MatrixXd::Ones(3, 2);
    Gradient g;  // gradient of |theta|^2 / 2 is theta
    g.d_a = p.a;
    g.d_omega = p.omega;
    gd_step(p, g, 0.1);
    CHECK((p.a.array() == 0.9).all());
    CHECK((p.omega.array() == 0.9).all());
}

TEST_CASE("Adam matches a per-coordinate reference over five steps") {
    Rng rng(4);
    Eigen::VectorXd theta = rng.normal_vector(7);
    std::vector<double> ref(theta.data(), theta.data() + theta.size());
    AdamState state;
    RefAdam reference;
    const AdamConfig cfg{0.8, 0.99, 1e-7};
    for (int step = 0; step < 5; ++step) {
        const Eigen::VectorXd g = theta.array().sin().matrix() + rng.normal_vector(7);
        const std::vector<double> gv(g.data(), g.data() + g.size());
        adam_step(state, theta, g, 0.05, cfg);
        reference.step(ref, gv, 0.05, cfg.beta1, cfg.beta2, cfg.eps);
        for (Eigen::Index i = 0; i < theta.size(); ++i) CHECK(std::abs(theta(i) - ref[static_cast<std::size_t>(i)]) <= 1e-15);
    }
    CHECK(state.t == 5);

    // The bias-corrected first step moves every coordinate by about lr.
    AdamState fresh;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
    Eigen::VectorXd g(4);
    g << 3.0, -0.01, 250.0, -7.0;
    adam_step(fresh, x, g, 1e-3);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(std::abs(std::abs(x(i)) - 1e-3) <= 1e-3 * 1e-5);
    CHECK(x(1) > 0);
    CHECK(x(0) < 0);
}

TEST_CASE("FixedSteps takes exactly the budget and records every iterate") {
    const auto data = sine_samples(6, 2, 1);
    auto cfg = config_with(gd_schedule(0.5, 1, 10, 0.5), 32, 3);
    const auto run = hrta_run(cfg, data);
    REQUIRE(run.stages.size() == 1);
    CHECK(run.stages[0].step_end == 10);
    CHECK(run.losses.size() == 11);
    CHECK(run.stages[0].reason == SwitchReason::StepBudget);
    CHECK(run.losses.front().step == 0);
    CHECK(run.losses.back().step == 10);
    CHECK(run.losses.back().t == doctest::Approx(5.0));

    // One stage is plain training at s1: replay by hand.
    auto p = init_params(32, 2, 2, 3);
    for (int k = 0; k < 10; ++k) {
        const auto rg = risk_and_gradient(p, HomotopyParam(0.5), PL, data);
        CHECK(rg.risk == run.losses[static_cast<std::size_t>(k)].loss);
        gd_step(p, rg.gradient, 0.5);
    }
    CHECK(empirical_risk(p, HomotopyParam(0.5), PL, data) == run.final_loss());
}

TEST_CASE("two stages switch s and keep the parameters") {
    const auto data = sine_samples(6, 2, 2);
    const auto run = hrta_run(config_with(gd_schedule(0.5, 2, 20, 0.5), 32, 5), data);
    REQUIRE(run.stages.size() == 2);
    CHECK(run.s_history == std::vector<double>{0.5, 1.0});
    const auto& s1 = run.stages[0];
    const auto& s2 = run.stages[1];
    CHECK(s2.step_begin == s1.step_end);
    CHECK(s2.risk_pre_switch.has_value());
    CHECK(*s2.risk_pre_switch == s1.risk_end);
    // The point at the switch step appears twice: old s, then new s.
    const auto& before = run.losses[20];
    const auto& after = run.losses[21];
    CHECK(before.step == after.step);
    CHECK(before.t == after.t);
    CHECK(before.s == 0.5);
    CHECK(after.s == 1.0);
    CHECK(after.stage == 2);
    CHECK(run.losses.size() == 42);
    CHECK(run.relu_rewrite_error.has_value() == false);  // final s is 1

    auto relaxed = gd_schedule(1.0, 2, 5, 0.5);
    const auto run2 = hrta_run(config_with(relaxed, 16, 5), data);
    REQUIRE(run2.relu_rewrite_error.has_value());
    CHECK(*run2.relu_rewrite_error <= 1e-12);
}

TEST_CASE("KernelDrift with an unreachable radius behaves as FixedSteps") {
    const auto data = sine_samples(5, 2, 3);
    auto fixed = gd_schedule(0.5, 2, 30, 0.5);
    auto drift = fixed;
    drift.switch_policy = SwitchPolicy::KernelDrift;
    drift.drift_radius = std::numeric_limits<double>::max();
    drift.drift_check_every = 3;
    const auto a = hrta_run(config_with(fixed, 24, 1), data);
    const auto b = hrta_run(config_with(drift, 24, 1), data);
    REQUIRE(a.losses.size() == b.losses.size());
    for (std::size_t i = 0; i < a.losses.size(); ++i) CHECK(a.losses[i].loss == b.losses[i].loss);
    CHECK(b.stages[0].reason == SwitchReason::StepBudget);
}

TEST_CASE("KernelDrift switches right after the Gram matrix leaves the radius") {
    const auto data = sine_samples(6, 2, 4);
    auto sch = gd_schedule(0.5, 2, 400, 2.0);
    sch.switch_policy = SwitchPolicy::KernelDrift;
    sch.drift_check_every = 4;
    const auto X = data.X;
    const auto p0 = init_params(16, 2, 2, 9);
    const auto G0 = gram_finite(p0, HomotopyParam(0.5), PL, X);
    sch.drift_radius = 0.05 * G0.total().norm();
    const auto run = hrta_run(config_with(sch, 16, 9), data);
    const auto& st = run.stages[0];
    REQUIRE(st.reason == SwitchReason::KernelDrift);
    REQUIRE(st.drift.has_value());
    CHECK(st.drift->at_switch > st.drift->radius);
    CHECK(st.drift->last_inside <= st.drift->radius);
    // Step 0 is inside by construction even though it is never checked.
    CHECK(st.drift->switch_step - std::max(st.drift->last_inside_step, 0L) == sch.drift_check_every);
    CHECK(st.step_end == st.drift->switch_step);

    // Distance is the Frobenius norm of the summed Gram difference.
    const auto p1 = init_params(16, 2, 2, 10);
    DriftMonitor monitor{G0, 1.0, 1};
    const auto G1 = gram_finite(p1, HomotopyParam(0.5), PL, X);
    const double expected = ((G1.Ka - G0.Ka) + (G1.Kw - G0.Kw)).norm();
    CHECK(monitor.distance(p1, HomotopyParam(0.5), PL, X) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("plateau rules") {
    const auto data = sine_samples(5, 1, 5);
    auto sch = gd_schedule(1.0, 1, 100, 1e-12);  // loss is flat at this step size
    sch.plateau_window = 10;
    sch.lr_decay = LrDecay::HalveOnPlateau;
    sch.min_lr = 1e-20;
    auto run = hrta_run(config_with(sch, 8, 2), data);
    // Checks at k = 10, 20, ..., 90 each halve.
    CHECK(run.stages[0].lr_final == doctest::Approx(1e-12 / 512).epsilon(1e-15));

    sch.min_lr = 1e-13;  // only three halvings fit above the floor
    run = hrta_run(config_with(sch, 8, 2), data);
    CHECK(run.stages[0].lr_final == doctest::Approx(1.25e-13));

    auto sw = gd_schedule(0.5, 2, 100, 1e-12);
    sw.plateau_window = 10;
    sw.switch_policy = SwitchPolicy::LossPlateau;
    run = hrta_run(config_with(sw, 8, 2), data);
    CHECK(run.stages[0].reason == SwitchReason::LossPlateau);
    CHECK(run.stages[0].step_end == 10);
    CHECK(run.stages[1].reason == SwitchReason::StepBudget);  // the last stage runs its budget
}

TEST_CASE("Adam resets at stage boundaries") {
    const auto data = sine_samples(5, 2, 6);
    auto sch = gd_schedule(0.5, 2, 3, 1e-2);
    sch.optimizer = OptimizerKind::Adam;
    const auto run = hrta_run(config_with(sch, 8, 4), data);

    // Stage 2 replayed from the switch parameters with a fresh state.
    auto p = init_params(8, 2, 2, 4);
    AdamState st;
    for (int k = 0; k < 3; ++k) adam_step(st, p, grad_params(p, HomotopyParam(0.5), PL, data), 1e-2);
    AdamState fresh;
    for (int k = 0; k < 3; ++k) {
        const auto rg = risk_and_gradient(p, HomotopyParam(1.0), PL, data);
        CHECK(rg.risk == run.losses[4 + static_cast<std::size_t>(k)].loss);
        adam_step(fresh, p, rg.gradient, 1e-2);
    }
}

TEST_CASE("divergence aborts with a partial record") {
    const auto data = sine_samples(5, 2, 7);
    const auto run = hrta_run(config_with(gd_schedule(0.5, 2, 50, 1e4), 16, 1), data);
    CHECK(run.aborted);
    CHECK(run.stages.size() == 1);
    CHECK(run.stages[0].reason == SwitchReason::Diverged);
    CHECK(std::isnan(run.stages[0].rate));
    CHECK_FALSE(run.losses.empty());
}

TEST_CASE("schedule validation") {
    auto bad = gd_schedule(1.5, 3, 10, 0.1);  // reaches s = 2.5
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    auto mismatch = gd_schedule(0.5, 2, 10, 0.1);
    mismatch.stage_steps = {10};
    CHECK_THROWS_AS(mismatch.validate(), std::invalid_argument);
    auto neg = gd_schedule(0.5, 2, 10, 0.1);
    neg.zeta_increment = -0.1;
    CHECK_THROWS_AS(neg.validate(), std::invalid_argument);
    auto ok = gd_schedule(0.5, 2, 10, 0.1);
    ok.stage_steps = {3000, 13000};
    CHECK(ok.total_steps() == 16000);
    CHECK(ok.s_at(1).value() == 1.0);
}

TEST_CASE("adaptive s2") {
    const auto data0 = sine_samples(6, 2, 8);
    auto p = init_params(10, 2, 2, 11);
    p.a = p.a.cwiseAbs();
    p.omega.row(0) << -1.0, -1.0;  // negative preactivation everywhere, so phi_s grows with s
    SampleSet data = data0;
    const HomotopyParam s1(0.5);
    data.y = predict(p, s1, PL, data.X).array() - 0.1;

    CHECK(adaptive_s2(p, s1, 1e300, data, 0.05).value() == 2.0);

    const double zeta = 3.0, step = 0.01;
    const auto s2 = adaptive_s2(p, s1, zeta, data, step);
    const double R1 = empirical_risk(p, s1, PL, data);
    CHECK(s2.value() < 2.0);
    CHECK(empirical_risk(p, s2, PL, data) > zeta * R1);
    CHECK(empirical_risk(p, HomotopyParam(s2.value() - step), PL, data) <= zeta * R1);

    for (double h : {1e-2, 1e-4, 1e-6}) {
        const double jump = std::abs(empirical_risk(p, HomotopyParam(1.0 + h), PL, data) -
                                     empirical_risk(p, HomotopyParam(1.0), PL, data));
        CHECK(jump <= 10 * h);
    }
    CHECK_THROWS_AS(adaptive_s2(p, s1, 1.0, data, 0.1), std::invalid_argument);
}

TEST_CASE("decay-rate fit") {
    std::vector<double> t, l, c;
    for (int i = 0; i < 100; ++i) {
        t.push_back(0.01 * i);
        l.push_back(std::exp(-3.0 * t.back()));
        c.push_back(0.7);
    }
    CHECK(std::abs(fit_decay_rate(t, l, 0, t.size()) - 3.0) <= 1e-9);
    CHECK(fit_decay_rate(t, c, 0, t.size()) == doctest::Approx(0.0));
    l[50] = 0.0;
    CHECK_THROWS_AS(fit_decay_rate(t, l, 0, t.size()), std::domain_error);
    CHECK(std::abs(fit_decay_rate(t, l, 60, 100) - 3.0) <= 1e-9);
}

TEST_CASE("runs are bit-reproducible and round-trip through CSV") {
    const auto data = sine_samples(6, 2, 9);
    auto sch = gd_schedule(0.5, 2, 25, 0.3);
    sch.optimizer = OptimizerKind::Adam;
    const auto a = hrta_run(config_with(sch, 20, 42, SQ), data);
    const auto b = hrta_run(config_with(sch, 20, 42, SQ), data);
    std::ostringstream ca, cb;
    write_loss_csv(ca, a.losses);
    write_loss_csv(cb, b.losses);
    CHECK(ca.str() == cb.str());
    CHECK(a.config_hash == b.config_hash);

    const auto path = std::filesystem::temp_directory_path() / "hrta_test_loss.csv";
    write_loss_csv(path, a.losses);
    const auto back = read_loss_csv(path);
    REQUIRE(back.size() == a.losses.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].step == a.losses[i].step);
        CHECK(back[i].t == a.losses[i].t);
        CHECK(back[i].s == a.losses[i].s);
        CHECK(back[i].loss == a.losses[i].loss);
        CHECK(back[i].stage == a.losses[i].stage);
    }
    std::filesystem::remove(path);

    auto other = config_with(sch, 20, 43, SQ);
    CHECK(config_hash(train_config_json(other)) != a.config_hash);
    const auto json_text = run_record_json(a);
    CHECK(json_text.find("\"config_hash\"") != std::string::npos);
    CHECK(json_text.find("\"omega\"") != std::string::npos);
}

TEST_CASE("gradient descent converges to the gradient flow at rate O(lr)") {
    // Smooth activation, so the flow is a C^1 ODE; reference by RK4.
    const auto data = sine_samples(4, 2, 10);
    const auto p0 = init_params(8, 2, 2, 12);
    const HomotopyParam s(0.7);
    const double T = 1.0;
    auto field = [&](const Eigen::VectorXd& theta) {
        Network p = p0;
        assign_flat(p, theta);
        return Eigen::VectorXd(-flatten(grad_params(p, s, SQ, data)));
    };
    Eigen::VectorXd ref = flatten(p0);
    const int n_rk = 4000;
    const double h = T / n_rk;
    for (int i = 0; i < n_rk; ++i) {
        const Eigen::VectorXd k1 = field(ref);
        const Eigen::VectorXd k2 = field(ref + 0.5 * h * k1);
        const Eigen::VectorXd k3 = field(ref + 0.5 * h * k2);
        const Eigen::VectorXd k4 = field(ref + h * k3);
        ref += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    std::vector<double> errors;
    for (double lr : {1e-2, 1e-3, 1e-4}) {
        const auto steps = static_cast<long>(std::lround(T / lr));
        auto cfg = config_with(gd_schedule(0.7, 1, steps, lr), 8, 12, SQ);
        const auto run = hrta_run(cfg, data);
        errors.push_back((flatten(run.final_params) - ref).cwiseAbs().maxCoeff());
    }
    CHECK(errors[0] > errors[1]);
    CHECK(errors[1] > errors[2]);
    CHECK(errors[0] / errors[1] == doctest::Approx(10).epsilon(0.3));
    CHECK(errors[1] / errors[2] == doctest::Approx(10).epsilon(0.3));
}
