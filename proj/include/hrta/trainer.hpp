#pragma once

// Staged homotopy training: stage p optimizes the risk with activation
// sigma_{s_p}, s_{p+1} = s_p + zeta_increment, parameters carried over.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "hrta/activation.hpp"
#include "hrta/kernels.hpp"
#include "hrta/network.hpp"

namespace hrta {

enum class OptimizerKind { GD, Adam };
enum class SwitchPolicy { FixedSteps, KernelDrift, LossPlateau };
enum class LrDecay { None, HalveOnPlateau };
enum class SwitchReason { StepBudget, KernelDrift, LossPlateau, Diverged };

std::string_view to_string(OptimizerKind kind);
std::string_view to_string(SwitchPolicy policy);
std::string_view to_string(LrDecay decay);
std::string_view to_string(SwitchReason reason);
OptimizerKind optimizer_from_string(std::string_view name);
SwitchPolicy switch_policy_from_string(std::string_view name);
LrDecay lr_decay_from_string(std::string_view name);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct Schedule {
    HomotopyParam s1{0.5};
    double zeta_increment = 0.5;
    int stages = 1;
    long steps_per_stage = 1000;
    std::vector<long> stage_steps;  // per-stage override; empty means steps_per_stage everywhere
    double lr = 1e-3;
    std::vector<double> stage_lr;   // per-stage override
    OptimizerKind optimizer = OptimizerKind::GD;
    AdamConfig adam;
    SwitchPolicy switch_policy = SwitchPolicy::FixedSteps;

    // LossPlateau switching and plateau lr halving
    long plateau_window = 500;
    double plateau_tol = 1e-3;
    LrDecay lr_decay = LrDecay::None;
    double min_lr = 1e-6;

    // KernelDrift switching
    long drift_check_every = 10;
    std::optional<double> drift_radius;  // default: (lambda_a + lambda_w) / 4 of the stage kernels

    double divergence_factor = 1e6;
    bool record_spectrum = false;

    [[nodiscard]] HomotopyParam s_at(int stage) const;  // stage is 0-based
    [[nodiscard]] long steps_at(int stage) const;
    [[nodiscard]] double lr_at(int stage) const;
    [[nodiscard]] long total_steps() const;
    void validate() const;
};

struct TrainConfig {
    Schedule schedule;
    ActivationKind kind = ActivationKind::PiecewiseLinear;
    LossKind loss = LossKind::Value;
    Eigen::Index width = 1000;
    Eigen::Index width2 = 0;  // depth-3 second hidden width; 0 means width
    int depth = 2;
    std::uint64_t seed = 0;
    double rate_tail_fraction = 1.0;  // fraction of each stage used for the rate fit

    void validate() const;
};

// ---------------------------------------------------------------------------
// Optimizers

void gd_step(Network& params, const Gradient& grad, double lr);

struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long t = 0;

    void reset(Eigen::Index size);
};

void adam_step(AdamState& state, Network& params, const Gradient& grad, double lr, const AdamConfig& cfg = {});
/// Flat-vector form of the same update.
void adam_step(AdamState& state, Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr,
               const AdamConfig& cfg = {});

// ---------------------------------------------------------------------------
// Records

struct LossPoint {
    long step = 0;
    double t = 0;  // gradient-flow time, the running sum of learning rates
    double s = 0;
    double loss = 0;
    int stage = 0;  // 1-based
};

struct SpectrumSnapshot {
    double lambda_a = 0;  // infinite-width kernels
    double lambda_w = 0;
    double lambda_gram = 0;  // lambda_min(G_a + G_w) at stage start
};

struct DriftMonitor {
    GramPair<double> reference;
    double radius = 0;
    long check_every = 10;

    /// |G(theta) - G_ref|_F for the summed Gram matrix G_a + G_w.
    [[nodiscard]] double distance(const Network& params, HomotopyParam s, ActivationKind kind,
                                  const Eigen::MatrixXd& X) const;
};

struct DriftLog {
    double radius = 0;
    double last_inside = 0;  // distance at the last check within the radius
    long last_inside_step = -1;
    double at_switch = 0;
    long switch_step = -1;
};

struct StageRecord {
    int index = 1;
    double s = 0;
    long step_begin = 0;
    long step_end = 0;
    double lr_initial = 0;
    double lr_final = 0;
    SwitchReason reason = SwitchReason::StepBudget;
    std::optional<double> risk_pre_switch;  // previous stage's final params, previous s
    double risk_start = 0;
    double risk_end = 0;
    double rate = 0;  // fitted decay rate over the stage
    double max_param_drift = 0;  // max_k max(|a_k - a_k(0)|, |omega_k - omega_k(0)|_inf) within the stage
    std::optional<SpectrumSnapshot> spectrum;
    std::optional<DriftLog> drift;
};

struct RunRecord {
    std::vector<StageRecord> stages;
    std::vector<LossPoint> losses;
    std::uint64_t seed = 0;
    std::string config_hash;
    bool aborted = false;
    std::string abort_reason;
    double wall_seconds = 0;
    Network final_params;
    std::vector<double> s_history;
    std::optional<double> relu_rewrite_error;  // set when the final s is not 1

    [[nodiscard]] double final_loss() const { return losses.empty() ? 0.0 : losses.back().loss; }
    [[nodiscard]] double stage_rate(int stage) const;  // 1-based, 0 if absent
};

// ---------------------------------------------------------------------------
// Training

struct StageOutcome {
    StageRecord record;
    bool diverged = false;
};

/// Runs one stage from params in place. Loss points are appended to losses;
/// step_offset and time_offset place the stage on the global axes.
StageOutcome train_stage(Network& params, HomotopyParam s, ActivationKind kind, LossKind loss, const SampleSet& data,
                         const Schedule& schedule, int stage_index, std::vector<LossPoint>& losses, long step_offset,
                         double time_offset, double divergence_threshold, const Network& theta0,
                         const DriftMonitor* monitor = nullptr, double rate_tail_fraction = 1.0);

/// Full staged run from a seeded initialization.
RunRecord hrta_run(const TrainConfig& config, const SampleSet& data);
/// Same, starting from given parameters.
RunRecord hrta_run(const TrainConfig& config, const SampleSet& data, Network initial);

/// Smallest grid point s in (s1, 2) with R_s(theta) > zeta_ratio R_{s1}(theta)
/// for frozen theta; 2 if there is none.
HomotopyParam adaptive_s2(const Network& params, HomotopyParam s1, double zeta_ratio, const SampleSet& data,
                          double grid_step, ActivationKind kind = ActivationKind::PiecewiseLinear,
                          LossKind loss = LossKind::Value);

/// Negated least-squares slope of log(loss) against t over [begin, end).
double fit_decay_rate(const std::vector<double>& t, const std::vector<double>& loss, std::size_t begin,
                      std::size_t end);
double fit_decay_rate(const std::vector<LossPoint>& curve);

// ---------------------------------------------------------------------------
// Serialization

std::string schedule_json(const Schedule& schedule);
std::string train_config_json(const TrainConfig& config);
/// FNV-1a of the canonical JSON text, as 16 hex digits.
std::string config_hash(std::string_view canonical);

void write_loss_csv(std::ostream& out, const std::vector<LossPoint>& losses);
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& losses);
std::vector<LossPoint> read_loss_csv(const std::filesystem::path& path);
std::string run_record_json(const RunRecord& record);
void write_run_json(const std::filesystem::path& path, const RunRecord& record);
/// {m, d, depth, s_history, a, omega, seed}
std::string params_json(const Network& params, const std::vector<double>& s_history, std::uint64_t seed);

}  // namespace hrta
