#pragma once

// Experiment drivers: target functions, sample generation, configuration
// files, the Adam-vs-HRTA comparison and the Poisson study.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hrta/activation.hpp"
#include "hrta/bounds.hpp"
#include "hrta/network.hpp"
#include "hrta/trainer.hpp"

namespace hrta {

/// Invalid or unreadable configuration. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Targets

enum class TargetKind { Sin1D, Sin3D, Poisson2D, Custom };

/// Scalar expression in x1..x9 with + - * / ^, unary minus, parentheses, the
/// constants pi and e, and sin cos tan exp log sqrt abs tanh.
class Expression {
public:
    explicit Expression(std::string text);
    [[nodiscard]] double operator()(const Eigen::Ref<const Eigen::VectorXd>& x) const;
    [[nodiscard]] const std::string& text() const { return text_; }
    /// Largest variable index referenced, 0 for a constant expression.
    [[nodiscard]] int max_variable() const { return max_variable_; }

    struct Node;

private:
    std::string text_;
    std::shared_ptr<const Node> root_;
    int max_variable_ = 0;
};

struct TargetFunction {
    TargetKind kind = TargetKind::Sin1D;
    int dim = 1;
    std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)> f;
    std::function<Eigen::VectorXd(const Eigen::Ref<const Eigen::VectorXd>&)> grad_f;  // empty when unknown
    std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)> source;           // -Laplacian, Poisson only
    std::string expression;                                                            // Custom only

    [[nodiscard]] bool has_gradient() const { return static_cast<bool>(grad_f); }
};

/// Custom targets need the expression; its dimension is the largest xi used
/// unless custom_dim is larger.
TargetFunction make_target(TargetKind kind, const std::string& expression = {}, int custom_dim = 0);

std::string_view to_string(TargetKind kind);
/// "sin1d", "sin3d", "poisson2d" or "custom".
TargetKind target_kind_from_string(std::string_view name);

// ---------------------------------------------------------------------------
// Samples

enum class SamplingKind { UniformGrid, UniformRandom };

struct SamplingConfig {
    SamplingKind kind = SamplingKind::UniformGrid;
    Eigen::Index points_per_dim = 100;  // grid
    Eigen::Index n = 100;               // random
    std::uint64_t seed = 0;             // random
    // Appends a constant 1 input so bias-free neurons can still place their
    // kinks inside the domain; gradients are labelled only for the real inputs.
    bool append_constant = true;
    bool screen_parallel = true;
};

/// Grid points sit at cell centers (i + 1/2)/N, ordered with the first
/// coordinate varying slowest. Targets with a known gradient attach grad labels.
SampleSet make_samples(const TargetFunction& target, const SamplingConfig& sampling);

/// The cell-center grid itself, N^d x d.
Eigen::MatrixXd cell_center_grid(Eigen::Index points_per_dim, int dim);

/// Appends a column of ones.
Eigen::MatrixXd with_constant_column(const Eigen::MatrixXd& X);

// ---------------------------------------------------------------------------
// Experiments

struct Arm {
    std::string name;
    Schedule schedule;
    // Set when a GD arm leaves lr unspecified (or writes lr = "auto"); the
    // learning rate is then default_gd_lr on the run's samples.
    bool auto_lr = false;
};

/// 0.1 / lambda_hat with lambda_hat = lambda_max(K_a + K_w) / n at s, the
/// curvature of the linearized empirical risk. Closed-form kernels for the
/// piecewise-linear activation, 10^5 seeded Monte Carlo draws otherwise.
double default_gd_lr(const SampleSet& data, HomotopyParam s, ActivationKind kind);

struct ExperimentConfig {
    TargetKind target = TargetKind::Sin1D;
    std::string expression;  // Custom target
    int custom_dim = 0;
    SamplingConfig sampling;
    std::vector<Eigen::Index> widths{1000};
    Eigen::Index width2 = 0;
    int depth = 2;
    ActivationKind kind = ActivationKind::PiecewiseLinear;
    LossKind loss = LossKind::Value;
    std::vector<Arm> arms;
    std::optional<Arm> baseline;
    std::vector<std::uint64_t> seeds{0};
    std::filesystem::path output_dir = "out";
    double rate_tail_fraction = 1.0;

    // Poisson reporting
    Eigen::Index eval_grid = 64;
    long ritz_points = 100000;
    std::uint64_t ritz_seed = 0;

    void validate() const;
};

/// Default protocols: "sin1d"/"sin3d" get the two HRTA
/// arms (s = 0.5 -> 1 and s = 1 -> 1.5, 3000 + 13000 Adam steps) and a
/// 16000-step Adam baseline; "poisson2d" gets the 16000 + 13000 relaxation arm.
ExperimentConfig default_experiment(TargetKind target);

/// Reads TOML (by default) or JSON (".json" extension) on top of the defaults
/// for the file's target. Overrides are "key=value" with dotted keys and TOML
/// values, e.g. "sampling.n=200" or "seeds=[0, 1]", applied after the file.
/// Throws ConfigError.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});
ExperimentConfig parse_experiment_config(const std::string& text, bool is_json,
                                         const std::vector<std::string>& overrides = {});

/// Training configuration of one (arm, width, seed) cell.
TrainConfig train_config_for(const ExperimentConfig& config, const Arm& arm, Eigen::Index width, std::uint64_t seed);

/// Throws ConfigError unless every arm and the baseline have the same total
/// step budget.
void require_matched_budgets(const ExperimentConfig& config);

struct SummaryRow {
    Eigen::Index width = 0;
    std::string method;
    double final_loss = 0;
    std::uint64_t seed = 0;
    std::optional<double> rate_stage1;
    std::optional<double> rate_stage2;
};

SummaryRow summary_row(const RunRecord& record, Eigen::Index width, const std::string& method);
/// Rebuilds the row from a written run.json.
SummaryRow summary_row_from_run_json(const std::filesystem::path& path, Eigen::Index width, const std::string& method);
void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows);
void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path);

struct RunOutput {
    Eigen::Index width = 0;
    std::string method;
    std::uint64_t seed = 0;
    std::filesystem::path dir;
    RunRecord record;
};

struct ExperimentResult {
    std::vector<RunOutput> runs;
    std::vector<SummaryRow> summary;
    bool any_aborted = false;
};

/// Per-run directory: output_dir / "m<width>" / method / "seed<seed>".
std::filesystem::path run_directory(const ExperimentConfig& config, Eigen::Index width, const std::string& method,
                                    std::uint64_t seed);

/// Runs every (width, arm, seed) cell, baseline included, writing loss.csv and
/// run.json per run and summary.csv under output_dir. Aborted runs keep their
/// partial outputs.
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Single run with the first arm, first width and first seed, written to output_dir.
RunOutput run_single(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Poisson

struct PoissonReport {
    double sobolev_loss = 0;   // final training loss
    double l2_error = 0;       // RMS error on the held-out cell-center grid
    double h1_semi_error = 0;  // RMS gradient error on the same grid
    double ritz_energy = 0;    // Monte Carlo Deep Ritz energy of the network
    double ritz_energy_exact = 0;
};

/// Deep Ritz energy (1/2) int |grad u|^2 + (1/2) (int u)^2 - int f u over
/// (0,1)^2 by Monte Carlo with the given number of uniform points.
double ritz_energy(const std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>& u,
                   const std::function<Eigen::VectorXd(const Eigen::Ref<const Eigen::VectorXd>&)>& grad_u,
                   const std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>& f, long points,
                   std::uint64_t seed);

/// Exact energy of u* = cos(pi x1) + cos(pi x2), which is -pi^2 / 2.
double poisson_exact_energy();

PoissonReport poisson_report(const Network& params, HomotopyParam s, const ExperimentConfig& config,
                             double sobolev_loss);

struct PoissonRun {
    RunOutput run;
    PoissonReport report;
};

struct PoissonResult {
    std::vector<PoissonRun> runs;
    std::vector<SummaryRow> summary;
    bool any_aborted = false;
};

/// Trains every arm and seed on the Poisson target with the Sobolev loss and
/// writes loss.csv, run.json and poisson.json per run plus summary.csv and
/// poisson_summary.csv.
PoissonResult run_poisson(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Bounds report

struct BoundsConfig {
    BoundInputs inputs;
    // With a target, n, d, the eigenvalues and risk0 are measured on its
    // samples instead of being read from the file.
    std::optional<TargetKind> target;
    std::string expression;
    SamplingConfig sampling;
    double s1 = 0.5;
    std::optional<double> s2;
    ActivationKind kind = ActivationKind::PiecewiseLinear;
    std::uint64_t seed = 0;
    long verify_trials = 0;  // 0 skips the Monte Carlo verifiers
    std::filesystem::path output_dir = "out/bounds";
};

BoundsConfig load_bounds_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
BoundsConfig parse_bounds_config(const std::string& text, bool is_json, const std::vector<std::string>& overrides = {});

struct BoundsResult {
    BoundInputs inputs;
    std::string report;  // bounds_json plus verifier summaries
    std::vector<std::pair<std::string, VerifierResult>> verifiers;
};

/// Evaluates every bound, runs the verifiers when requested, and writes
/// bounds.json and one CSV per verifier under output_dir.
BoundsResult run_bounds(const BoundsConfig& config);

}  // namespace hrta
