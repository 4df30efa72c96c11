#include "hrta/bounds.hpp"

#include <algorithm>
#include <fstream>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "hrta/io.hpp"
#include "hrta/kernels.hpp"
#include "hrta/rng.hpp"

namespace hrta {

namespace {

void require_delta(double delta) {
    if (!(delta > 0 && delta < 1)) throw std::invalid_argument("delta must lie in (0, 1)");
}

void require_positive(double x, const char* name) {
    if (!(x > 0) || !std::isfinite(x)) throw std::invalid_argument(std::string(name) + " must be positive");
}

}  // namespace

void BoundInputs::validate() const {
    require_positive(m, "m");
    require_positive(d, "d");
    require_positive(n, "n");
    require_delta(delta);
    require_positive(lambda_a, "lambda_a");
    require_positive(lambda_w, "lambda_w");
    if (lambda_a2) require_positive(*lambda_a2, "lambda_a2");
    if (lambda_w2) require_positive(*lambda_w2, "lambda_w2");
    require_positive(risk0, "risk0");
    require_positive(C0, "C0");
    require_positive(C_psi_d, "C_psi_d");
}

double init_magnitude_bound(double m, double d, double delta) {
    require_delta(delta);
    return std::sqrt(2 * std::log(2 * m * (d + 1) / delta));
}

double initial_risk_bound(double m, double d, double delta) {
    require_delta(delta);
    const double inner = 1 + 2 * d * std::log(4 * m * (d + 1) / delta) * (2 + 6 * std::sqrt(2 * std::log(8 / delta)));
    return 0.5 * inner * inner;
}

double psi_m(double m, double n, double d, double delta, double lambda_sum, double risk0) {
    require_delta(delta);
    return 8 * std::sqrt(2.0) * n * d * std::sqrt(risk0) / (std::sqrt(m) * lambda_sum) *
           std::sqrt(2 * std::log(4 * m * (d + 1) / delta));
}

double C_psi_d2(const BoundInputs& in) {
    const double psi = psi_m(in.m, in.n, in.d, in.delta, in.lambda_a + in.lambda_w, in.risk0);
    return 2 * in.C_psi_d + 2 * in.d * psi * psi / std::log(2.0);
}

double risk_decay_bound(double risk0, double t, double n, double lambda_sum) {
    return risk0 * std::exp(-(t / n) * lambda_sum);
}

WidthThreshold width_threshold(const BoundInputs& in, WidthStage which) {
    in.validate();
    const double lambda = std::min(in.lambda_a, in.lambda_w);
    const double stage1 = 16 * in.n * in.n * in.d * in.d * in.C_psi_d / (in.C0 * lambda * lambda) *
                          std::log(4 * in.n * in.n / in.delta);
    if (which == WidthStage::Stage1) return {stage1, 0};

    if (!in.lambda_a2 || !in.lambda_w2) throw std::invalid_argument("stage-2 threshold needs lambda_a2 and lambda_w2");
    const double lambda2 = std::min(*in.lambda_a2, *in.lambda_w2);
    const double n4 = std::pow(in.n, 4);
    const double coeff = 128 * std::sqrt(2.0) * in.d * std::sqrt(in.risk0) / ((in.lambda_a + in.lambda_w) * lambda2);
    auto rhs = [&](double m) { return n4 * coeff * 2 * std::log(4 * m * (in.d + 1) / in.delta); };

    double m = n4;
    for (int it = 1; it <= 100; ++it) {
        const double next = rhs(m);
        if (std::abs(next - m) < 1) return {std::max(stage1, next), it};
        m = next;
    }
    throw std::runtime_error("stage-2 width threshold did not converge in 100 iterations");
}

// ---------------------------------------------------------------------------
// Verifiers

std::pair<double, double> wilson_interval(long successes, long trials, double z) {
    if (trials <= 0) return {0.0, 1.0};
    const double nn = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double centre = (p + z2 / (2 * nn)) / (1 + z2 / nn);
    const double half = z * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn)) / (1 + z2 / nn);
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

std::uint64_t trial_seed(std::uint64_t seed, long trial) { return derive_seed(seed, static_cast<std::uint64_t>(trial)); }

namespace {

void finish(VerifierResult& r) {
    r.trials = static_cast<long>(r.rows.size());
    r.held = static_cast<long>(std::count_if(r.rows.begin(), r.rows.end(), [](const TrialRow& t) { return t.held; }));
    r.fraction = r.trials ? static_cast<double>(r.held) / static_cast<double>(r.trials) : 0.0;
    std::tie(r.wilson_lo, r.wilson_hi) = wilson_interval(r.held, r.trials);
}

}  // namespace

VerifierResult verify_init_magnitude(Eigen::Index m, Eigen::Index d, double delta, long trials, std::uint64_t seed) {
    const double bound = init_magnitude_bound(static_cast<double>(m), static_cast<double>(d), delta);
    VerifierResult r;
    for (long t = 0; t < trials; ++t) {
        const auto ts = trial_seed(seed, t);
        const auto p = init_params(m, d, 2, ts);
        const double peak = std::max(p.a.cwiseAbs().maxCoeff(), p.omega.cwiseAbs().maxCoeff());
        r.rows.push_back({t, ts, peak <= bound, peak, bound});
    }
    finish(r);
    return r;
}

VerifierResult verify_initial_risk(Eigen::Index m, const SampleSet& data, HomotopyParam s, ActivationKind kind,
                                   double delta, long trials, std::uint64_t seed) {
    const double bound = initial_risk_bound(static_cast<double>(m), static_cast<double>(data.dim()), delta);
    VerifierResult r;
    for (long t = 0; t < trials; ++t) {
        const auto ts = trial_seed(seed, t);
        const double risk = empirical_risk(init_params(m, data.dim(), 2, ts), s, kind, data);
        r.rows.push_back({t, ts, risk <= bound, risk, bound});
    }
    finish(r);
    return r;
}

VerifierResult verify_eig_event(const Eigen::MatrixXd& X, Eigen::Index m, HomotopyParam s, long trials,
                                std::uint64_t seed) {
    const auto spec = min_eigs(kernel_closed(X, s));
    const double threshold = 0.75 * spec.lambda_sum;
    VerifierResult r;
    for (long t = 0; t < trials; ++t) {
        const auto ts = trial_seed(seed, t);
        const auto g = gram_finite(init_params(m, X.cols(), 2, ts), s, ActivationKind::PiecewiseLinear, X);
        const Eigen::MatrixXd total = g.total();
        const double lambda = smallest_eigenpair(total).value;
        r.rows.push_back({t, ts, lambda >= threshold, lambda, threshold});
    }
    finish(r);
    return r;
}

void write_verifier_csv(std::ostream& out, const VerifierResult& result) {
    out << "trial,seed,event_held,statistic,threshold\n";
    for (const auto& row : result.rows) {
        out << row.trial << ',' << row.seed << ',' << (row.held ? 1 : 0) << ',' << format_double(row.statistic) << ','
            << format_double(row.threshold) << '\n';
    }
}

void write_verifier_csv(const std::filesystem::path& path, const VerifierResult& result) {
    auto out = open_output(path);
    write_verifier_csv(out, result);
}

std::string bounds_json(const BoundInputs& in) {
    in.validate();
    const double lambda_sum = in.lambda_a + in.lambda_w;
    nlohmann::json j = {
        {"inputs",
         {{"m", in.m}, {"d", in.d}, {"n", in.n}, {"delta", in.delta}, {"lambda_a", in.lambda_a},
          {"lambda_w", in.lambda_w}, {"risk0", in.risk0}, {"C0", in.C0}, {"C_psi_d", in.C_psi_d}}},
        {"init_magnitude_bound", init_magnitude_bound(in.m, in.d, in.delta)},
        {"initial_risk_bound", initial_risk_bound(in.m, in.d, in.delta)},
        {"psi_m", psi_m(in.m, in.n, in.d, in.delta, lambda_sum, in.risk0)},
        {"C_psi_d2", C_psi_d2(in)},
        {"decay_rate", lambda_sum / in.n},
        {"width_threshold_stage1", width_threshold(in, WidthStage::Stage1).value},
    };
    if (in.lambda_a2 && in.lambda_w2) {
        j["inputs"]["lambda_a2"] = *in.lambda_a2;
        j["inputs"]["lambda_w2"] = *in.lambda_w2;
        const auto w2 = width_threshold(in, WidthStage::Stage2);
        j["width_threshold_stage2"] = w2.value;
        j["width_threshold_stage2_iterations"] = w2.iterations;
    }
    return j.dump(2);
}

}  // namespace hrta
