#pragma once

// Closed-form width, magnitude and risk bounds from the convergence analysis,
// plus seeded Monte Carlo estimates of how often the underlying events hold.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hrta/activation.hpp"
#include "hrta/network.hpp"

namespace hrta {

struct BoundInputs {
    double m = 1000;
    double d = 1;
    double n = 100;
    double delta = 0.1;
    double lambda_a = 1;   // stage-1 kernel eigenvalues
    double lambda_w = 1;
    std::optional<double> lambda_a2;  // stage-2 kernel eigenvalues
    std::optional<double> lambda_w2;
    double risk0 = 1;
    double C0 = 1;       // absolute constant of the Bernstein inequality
    double C_psi_d = 1;  // sub-exponential norm constant of chi^2(d)

    void validate() const;
};

enum class WidthStage { Stage1, Stage2 };

/// sqrt(2 ln(2 m (d+1) / delta)).
double init_magnitude_bound(double m, double d, double delta);

/// (1/2) [1 + 2 d ln(4 m (d+1) / delta) (2 + 6 sqrt(2 ln(8 / delta)))]^2.
double initial_risk_bound(double m, double d, double delta);

/// Parameter drift radius 8 sqrt(2) n d sqrt(risk0) / (sqrt(m) lambda_sum) * sqrt(2 ln(4 m (d+1) / delta)).
double psi_m(double m, double n, double d, double delta, double lambda_sum, double risk0);

/// 2 C_psi_d + 2 d psi(m)^2 / ln 2.
double C_psi_d2(const BoundInputs& in);

/// R0 exp(-(t / n) lambda_sum).
double risk_decay_bound(double risk0, double t, double n, double lambda_sum);

struct WidthThreshold {
    double value = 0;
    int iterations = 0;  // fixed-point iterations (Stage2 only)
};

/// Stage1: 16 n^2 d^2 C_psi_d / (C0 lambda^2) ln(4 n^2 / delta) with lambda = min(lambda_a, lambda_w).
/// Stage2: max of Stage1 and n^4 (128 sqrt(2) d sqrt(risk0) / (lambda_sum min(lambda_a2, lambda_w2)) 2 ln(4 m (d+1) / delta)),
/// where m on the right is the unknown; solved by fixed-point iteration from m = n^4.
WidthThreshold width_threshold(const BoundInputs& in, WidthStage which);

// ---------------------------------------------------------------------------
// Empirical verifiers

struct TrialRow {
    long trial = 0;
    std::uint64_t seed = 0;
    bool held = false;
    double statistic = 0;  // the measured quantity
    double threshold = 0;  // what it was compared against
};

struct VerifierResult {
    long trials = 0;
    long held = 0;
    double fraction = 0;
    double wilson_lo = 0;
    double wilson_hi = 0;
    std::vector<TrialRow> rows;
};

/// Wilson score interval for k successes in n trials at the given z.
std::pair<double, double> wilson_interval(long successes, long trials, double z = 1.959963984540054);

/// Event max_k {|a_k(0)|, |omega_k(0)|_inf} <= init_magnitude_bound.
VerifierResult verify_init_magnitude(Eigen::Index m, Eigen::Index d, double delta, long trials, std::uint64_t seed);

/// Event R_{S,s}(theta(0)) <= initial_risk_bound.
VerifierResult verify_initial_risk(Eigen::Index m, const SampleSet& data, HomotopyParam s, ActivationKind kind,
                                   double delta, long trials, std::uint64_t seed);

/// Event lambda_min(G_a + G_w at theta(0)) >= (3/4)(lambda_a + lambda_w), the
/// right side from the closed-form kernels at s.
VerifierResult verify_eig_event(const Eigen::MatrixXd& X, Eigen::Index m, HomotopyParam s, long trials,
                                std::uint64_t seed);

/// Trial seeds are derive_seed(seed, trial), so runs with equal seed are coupled across widths.
std::uint64_t trial_seed(std::uint64_t seed, long trial);

void write_verifier_csv(std::ostream& out, const VerifierResult& result);
void write_verifier_csv(const std::filesystem::path& path, const VerifierResult& result);

/// JSON report of every calculator for the given inputs.
std::string bounds_json(const BoundInputs& in);

}  // namespace hrta
