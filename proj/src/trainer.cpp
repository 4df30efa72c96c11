#include "hrta/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "hrta/io.hpp"

namespace hrta {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Names

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::GD ? "gd" : "adam"; }

std::string_view to_string(SwitchPolicy policy) {
    switch (policy) {
        case SwitchPolicy::FixedSteps: return "fixed_steps";
        case SwitchPolicy::KernelDrift: return "kernel_drift";
        case SwitchPolicy::LossPlateau: return "loss_plateau";
    }
    return "unknown";
}

std::string_view to_string(LrDecay decay) { return decay == LrDecay::None ? "none" : "halve_on_plateau"; }

std::string_view to_string(SwitchReason reason) {
    switch (reason) {
        case SwitchReason::StepBudget: return "step_budget";
        case SwitchReason::KernelDrift: return "kernel_drift";
        case SwitchReason::LossPlateau: return "loss_plateau";
        case SwitchReason::Diverged: return "diverged";
    }
    return "unknown";
}

OptimizerKind optimizer_from_string(std::string_view name) {
    if (name == "gd") return OptimizerKind::GD;
    if (name == "adam") return OptimizerKind::Adam;
    throw std::invalid_argument("unknown optimizer '" + std::string(name) + "'");
}

SwitchPolicy switch_policy_from_string(std::string_view name) {
    for (auto p : {SwitchPolicy::FixedSteps, SwitchPolicy::KernelDrift, SwitchPolicy::LossPlateau})
        if (to_string(p) == name) return p;
    throw std::invalid_argument("unknown switch policy '" + std::string(name) + "'");
}

LrDecay lr_decay_from_string(std::string_view name) {
    for (auto d : {LrDecay::None, LrDecay::HalveOnPlateau})
        if (to_string(d) == name) return d;
    throw std::invalid_argument("unknown lr decay '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Schedule

HomotopyParam Schedule::s_at(int stage) const {
    const double s = s1.value() + static_cast<double>(stage) * zeta_increment;
    if (!(s >= HomotopyParam::kMin && s <= HomotopyParam::kMax + 1e-12)) {
        throw std::invalid_argument("stage " + std::to_string(stage + 1) + " has s = " + std::to_string(s) +
                                    " outside [0, 2]");
    }
    return HomotopyParam(std::min(s, HomotopyParam::kMax));
}

long Schedule::steps_at(int stage) const {
    return stage_steps.empty() ? steps_per_stage : stage_steps.at(static_cast<std::size_t>(stage));
}

double Schedule::lr_at(int stage) const { return stage_lr.empty() ? lr : stage_lr.at(static_cast<std::size_t>(stage)); }

long Schedule::total_steps() const {
    long total = 0;
    for (int p = 0; p < stages; ++p) total += steps_at(p);
    return total;
}

void Schedule::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("schedule: " + what); };
    if (stages < 1) fail("stages must be >= 1");
    if (!(zeta_increment >= 0)) fail("zeta_increment must be >= 0");
    if (!stage_steps.empty() && stage_steps.size() != static_cast<std::size_t>(stages))
        fail("stage_steps must list one entry per stage");
    if (!stage_lr.empty() && stage_lr.size() != static_cast<std::size_t>(stages))
        fail("stage_lr must list one entry per stage");
    for (int p = 0; p < stages; ++p) {
        (void)s_at(p);
        if (steps_at(p) < 1) fail("every stage needs at least one step");
        if (!(lr_at(p) > 0) || !std::isfinite(lr_at(p))) fail("learning rates must be positive");
    }
    if (plateau_window < 1) fail("plateau_window must be >= 1");
    if (!(plateau_tol > 0)) fail("plateau_tol must be positive");
    if (!(min_lr > 0)) fail("min_lr must be positive");
    if (drift_check_every < 1) fail("drift_check_every must be >= 1");
    if (drift_radius && !(*drift_radius > 0)) fail("drift_radius must be positive");
    if (!(divergence_factor > 1)) fail("divergence_factor must exceed 1");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) || !(adam.eps > 0))
        fail("Adam needs beta1, beta2 in [0, 1) and eps > 0");
}

void TrainConfig::validate() const {
    schedule.validate();
    if (width < 1) throw std::invalid_argument("width must be >= 1");
    if (depth != 2 && depth != 3) throw std::invalid_argument("depth must be 2 or 3");
    if (depth == 3 && loss == LossKind::Sobolev)
        throw std::invalid_argument("Sobolev loss needs a depth-2 network");
    if (depth == 3 && schedule.switch_policy == SwitchPolicy::KernelDrift)
        throw std::invalid_argument("kernel-drift switching needs a depth-2 network");
    if (!(rate_tail_fraction > 0 && rate_tail_fraction <= 1))
        throw std::invalid_argument("rate_tail_fraction must lie in (0, 1]");
}

// ---------------------------------------------------------------------------
// Optimizers

void gd_step(Network& params, const Gradient& grad, double lr) {
    params.a -= lr * grad.d_a;
    params.omega -= lr * grad.d_omega;
    if (params.hidden2) *params.hidden2 -= lr * *grad.d_hidden2;
}

void AdamState::reset(Eigen::Index size) {
    m = Eigen::VectorXd::Zero(size);
    v = Eigen::VectorXd::Zero(size);
    t = 0;
}

void adam_step(AdamState& state, Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr,
               const AdamConfig& cfg) {
    if (state.m.size() != theta.size()) state.reset(theta.size());
    ++state.t;
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad;
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad.cwiseAbs2();
    const double c1 = 1 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1 - std::pow(cfg.beta2, static_cast<double>(state.t));
    theta.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

void adam_step(AdamState& state, Network& params, const Gradient& grad, double lr, const AdamConfig& cfg) {
    Eigen::VectorXd theta = flatten(params);
    adam_step(state, theta, flatten(grad), lr, cfg);
    assign_flat(params, theta);
}

// ---------------------------------------------------------------------------
// Monitoring

double DriftMonitor::distance(const Network& params, HomotopyParam s, ActivationKind kind,
                              const Eigen::MatrixXd& X) const {
    const auto g = gram_finite(params, s, kind, X);
    return ((g.Ka - reference.Ka) + (g.Kw - reference.Kw)).norm();
}

namespace {

double param_drift(const Network& p, const Network& p0) {
    double drift = (p.a - p0.a).cwiseAbs().maxCoeff();
    drift = std::max(drift, (p.omega - p0.omega).cwiseAbs().maxCoeff());
    return drift;
}

double stage_rate_from(const std::vector<LossPoint>& losses, std::size_t first, double tail_fraction) {
    const std::size_t count = losses.size() - first;
    if (count < 2) return 0.0;
    const auto skip = static_cast<std::size_t>(std::floor((1.0 - tail_fraction) * static_cast<double>(count)));
    const std::size_t begin = first + std::min(skip, count - 2);
    std::vector<double> t, l;
    for (std::size_t i = begin; i < losses.size(); ++i) {
        if (!(losses[i].loss > 0)) return std::numeric_limits<double>::quiet_NaN();
        t.push_back(losses[i].t);
        l.push_back(losses[i].loss);
    }
    return fit_decay_rate(t, l, 0, t.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Training

StageOutcome train_stage(Network& params, HomotopyParam s, ActivationKind kind, LossKind loss, const SampleSet& data,
                         const Schedule& schedule, int stage_index, std::vector<LossPoint>& losses, long step_offset,
                         double time_offset, double divergence_threshold, const Network& theta0,
                         const DriftMonitor* monitor, double rate_tail_fraction) {
    const int p = stage_index - 1;
    const long budget = schedule.steps_at(p);
    const bool final_stage = stage_index == schedule.stages;
    double lr = schedule.lr_at(p);

    StageOutcome out;
    StageRecord& rec = out.record;
    rec.index = stage_index;
    rec.s = s.value();
    rec.step_begin = step_offset;
    rec.lr_initial = lr;
    if (monitor) {
        rec.drift = DriftLog{};
        rec.drift->radius = monitor->radius;
    }

    AdamState adam;
    adam.reset(params.parameter_count());
    std::vector<double> best_so_far;
    best_so_far.reserve(static_cast<std::size_t>(budget) + 1);
    double best = std::numeric_limits<double>::infinity();
    long plateau_anchor = 0;
    double t = time_offset;
    const std::size_t first_point = losses.size();

    long k = 0;
    for (;; ++k) {
        auto rg = risk_and_gradient(params, s, kind, data, loss);
        const double L = rg.risk;
        losses.push_back({step_offset + k, t, s.value(), L, stage_index});
        if (k == 0) rec.risk_start = L;
        rec.risk_end = L;
        rec.max_param_drift = std::max(rec.max_param_drift, param_drift(params, theta0));

        if (!std::isfinite(L) || L > divergence_threshold) {
            rec.reason = SwitchReason::Diverged;
            out.diverged = true;
            break;
        }
        best = std::min(best, L);
        best_so_far.push_back(best);
        if (k == budget) {
            rec.reason = SwitchReason::StepBudget;
            break;
        }

        if (monitor && k > 0 && k % monitor->check_every == 0) {
            const double dist = monitor->distance(params, s, kind, data.X);
            if (dist > monitor->radius) {
                rec.drift->at_switch = dist;
                rec.drift->switch_step = step_offset + k;
                rec.reason = SwitchReason::KernelDrift;
                break;
            }
            rec.drift->last_inside = dist;
            rec.drift->last_inside_step = step_offset + k;
        }

        if (k - plateau_anchor >= schedule.plateau_window) {
            const double before = best_so_far[static_cast<std::size_t>(k - schedule.plateau_window)];
            const double improvement = (before - best) / before;
            if (improvement < schedule.plateau_tol) {
                if (schedule.switch_policy == SwitchPolicy::LossPlateau && !final_stage) {
                    rec.reason = SwitchReason::LossPlateau;
                    break;
                }
                if (schedule.lr_decay == LrDecay::HalveOnPlateau && lr / 2 >= schedule.min_lr) {
                    lr /= 2;
                    plateau_anchor = k;
                }
            }
        }

        if (schedule.optimizer == OptimizerKind::GD) {
            gd_step(params, rg.gradient, lr);
        } else {
            adam_step(adam, params, rg.gradient, lr, schedule.adam);
        }
        t += lr;
    }

    rec.step_end = step_offset + k;
    rec.lr_final = lr;
    rec.rate = out.diverged ? std::numeric_limits<double>::quiet_NaN()
                            : stage_rate_from(losses, first_point, rate_tail_fraction);
    return out;
}

RunRecord hrta_run(const TrainConfig& config, const SampleSet& data) {
    config.validate();
    return hrta_run(config, data, init_params(config.width, data.dim(), config.depth, config.seed, config.width2));
}

RunRecord hrta_run(const TrainConfig& config, const SampleSet& data, Network initial) {
    const auto start = std::chrono::steady_clock::now();
    config.validate();
    data.validate();
    initial.validate();
    const Schedule& sch = config.schedule;

    RunRecord run;
    run.seed = config.seed;
    run.config_hash = config_hash(train_config_json(config));

    Network params = std::move(initial);
    const Network theta0 = params;
    const double risk0 = empirical_risk(params, sch.s_at(0), config.kind, data, config.loss);
    const double threshold = sch.divergence_factor * std::max(risk0, std::numeric_limits<double>::min());

    long step = 0;
    double t = 0;
    for (int p = 0; p < sch.stages; ++p) {
        const HomotopyParam s = sch.s_at(p);
        std::optional<double> pre_switch;
        if (p > 0) pre_switch = run.stages.back().risk_end;

        std::optional<DriftMonitor> monitor;
        std::optional<SpectrumSnapshot> snapshot;
        if (sch.switch_policy == SwitchPolicy::KernelDrift || sch.record_spectrum) {
            GramPair<double> infinite =
                config.kind == ActivationKind::PiecewiseLinear
                    ? kernel_closed(data.X, s)
                    : kernel_mc(data.X, s, config.kind, 100000, derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(p)));
            const auto spec = min_eigs(infinite);
            if (config.depth == 2) {
                GramPair<double> reference = gram_finite(params, s, config.kind, data.X);
                if (sch.record_spectrum) {
                    const Eigen::MatrixXd total = reference.total();
                    snapshot = SpectrumSnapshot{spec.lambda_a, spec.lambda_w, smallest_eigenpair(total).value};
                }
                if (sch.switch_policy == SwitchPolicy::KernelDrift) {
                    monitor = DriftMonitor{std::move(reference), sch.drift_radius.value_or(spec.lambda_sum / 4),
                                           sch.drift_check_every};
                }
            } else {
                snapshot = SpectrumSnapshot{spec.lambda_a, spec.lambda_w, std::numeric_limits<double>::quiet_NaN()};
            }
        }

        auto outcome = train_stage(params, s, config.kind, config.loss, data, sch, p + 1, run.losses, step, t,
                                   threshold, theta0, monitor ? &*monitor : nullptr, config.rate_tail_fraction);
        outcome.record.risk_pre_switch = pre_switch;
        outcome.record.spectrum = snapshot;
        run.stages.push_back(std::move(outcome.record));
        run.s_history.push_back(s.value());
        step = run.stages.back().step_end;
        t = run.losses.back().t;
        if (outcome.diverged) {
            run.aborted = true;
            run.abort_reason = "loss diverged in stage " + std::to_string(p + 1) + " (exceeded " +
                               format_double(threshold) + " or became non-finite)";
            break;
        }
    }

    const double s_final = run.s_history.back();
    if (!run.aborted && s_final != 1.0 && params.depth() == 2 && config.kind == ActivationKind::PiecewiseLinear) {
        const auto relu = rewrite_as_relu(params, HomotopyParam(s_final));
        const Eigen::VectorXd a = predict(params, HomotopyParam(s_final), config.kind, data.X);
        const Eigen::VectorXd b = predict(relu, HomotopyParam(1.0), config.kind, data.X);
        run.relu_rewrite_error = (a - b).cwiseAbs().maxCoeff();
    }
    run.final_params = std::move(params);
    run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return run;
}

double RunRecord::stage_rate(int stage) const {
    for (const auto& st : stages)
        if (st.index == stage) return st.rate;
    return 0.0;
}

HomotopyParam adaptive_s2(const Network& params, HomotopyParam s1, double zeta_ratio, const SampleSet& data,
                          double grid_step, ActivationKind kind, LossKind loss) {
    if (!(zeta_ratio > 1)) throw std::invalid_argument("adaptive_s2 needs zeta_ratio > 1");
    if (!(grid_step > 0)) throw std::invalid_argument("adaptive_s2 needs a positive grid step");
    const double threshold = zeta_ratio * empirical_risk(params, s1, kind, data, loss);
    for (long k = 1;; ++k) {
        const double s = s1.value() + static_cast<double>(k) * grid_step;
        if (s >= HomotopyParam::kMax) break;
        if (empirical_risk(params, HomotopyParam(s), kind, data, loss) > threshold) return HomotopyParam(s);
    }
    return HomotopyParam(HomotopyParam::kMax);
}

double fit_decay_rate(const std::vector<double>& t, const std::vector<double>& loss, std::size_t begin,
                      std::size_t end) {
    if (t.size() != loss.size() || end > t.size() || begin > end)
        throw std::invalid_argument("fit_decay_rate: window out of range");
    const std::size_t n = end - begin;
    if (n < 2) return 0.0;
    double mt = 0, my = 0;
    for (std::size_t i = begin; i < end; ++i) {
        if (!(loss[i] > 0)) throw std::domain_error("fit_decay_rate needs strictly positive losses");
        mt += t[i];
        my += std::log(loss[i]);
    }
    mt /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0;
    for (std::size_t i = begin; i < end; ++i) {
        const double dt = t[i] - mt;
        sxy += dt * (std::log(loss[i]) - my);
        sxx += dt * dt;
    }
    if (sxx == 0) return 0.0;
    return -sxy / sxx;
}

double fit_decay_rate(const std::vector<LossPoint>& curve) {
    std::vector<double> t, l;
    for (const auto& pt : curve) {
        t.push_back(pt.t);
        l.push_back(pt.loss);
    }
    return fit_decay_rate(t, l, 0, t.size());
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json schedule_to_json(const Schedule& s) {
    json j = {
        {"s1", s.s1.value()},
        {"zeta_increment", s.zeta_increment},
        {"stages", s.stages},
        {"steps_per_stage", s.steps_per_stage},
        {"stage_steps", s.stage_steps},
        {"lr", s.lr},
        {"stage_lr", s.stage_lr},
        {"optimizer", to_string(s.optimizer)},
        {"adam", {{"beta1", s.adam.beta1}, {"beta2", s.adam.beta2}, {"eps", s.adam.eps}}},
        {"switch_policy", to_string(s.switch_policy)},
        {"plateau_window", s.plateau_window},
        {"plateau_tol", s.plateau_tol},
        {"lr_decay", to_string(s.lr_decay)},
        {"min_lr", s.min_lr},
        {"drift_check_every", s.drift_check_every},
        {"divergence_factor", s.divergence_factor},
        {"record_spectrum", s.record_spectrum},
    };
    j["drift_radius"] = s.drift_radius ? json(*s.drift_radius) : json(nullptr);
    return j;
}

json optional_number(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

}  // namespace

std::string schedule_json(const Schedule& schedule) { return schedule_to_json(schedule).dump(); }

std::string train_config_json(const TrainConfig& c) {
    const json j = {
        {"schedule", schedule_to_json(c.schedule)},
        {"activation", to_string(c.kind)},
        {"loss", c.loss == LossKind::Value ? "value" : "sobolev"},
        {"width", c.width},
        {"width2", c.width2},
        {"depth", c.depth},
        {"seed", c.seed},
        {"rate_tail_fraction", c.rate_tail_fraction},
    };
    return j.dump();
}

std::string config_hash(std::string_view canonical) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_loss_csv(std::ostream& out, const std::vector<LossPoint>& losses) {
    out << "step,t,s,loss,stage\n";
    for (const auto& pt : losses) {
        out << pt.step << ',' << format_double(pt.t) << ',' << format_double(pt.s) << ',' << format_double(pt.loss)
            << ',' << pt.stage << '\n';
    }
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& losses) {
    auto out = open_output(path);
    write_loss_csv(out, losses);
}

std::vector<LossPoint> read_loss_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("step,t,s,loss,stage", 0) != 0)
        throw std::runtime_error(path.string() + " is not a loss CSV");
    std::vector<LossPoint> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[5];
        for (auto& field : f)
            if (!std::getline(ss, field, ',')) throw std::runtime_error("short row in " + path.string());
        out.push_back({std::stol(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoi(f[4])});
    }
    return out;
}

std::string run_record_json(const RunRecord& r) {
    json stages = json::array();
    for (const auto& st : r.stages) {
        json js = {
            {"index", st.index},
            {"s", st.s},
            {"step_begin", st.step_begin},
            {"step_end", st.step_end},
            {"lr_initial", st.lr_initial},
            {"lr_final", st.lr_final},
            {"switch_reason", to_string(st.reason)},
            {"risk_pre_switch", optional_number(st.risk_pre_switch)},
            {"risk_start", finite_or_null(st.risk_start)},
            {"risk_end", finite_or_null(st.risk_end)},
            {"rate", finite_or_null(st.rate)},
            {"max_param_drift", st.max_param_drift},
        };
        if (st.spectrum) {
            js["spectrum"] = {{"lambda_a", st.spectrum->lambda_a},
                              {"lambda_w", st.spectrum->lambda_w},
                              {"lambda_gram", finite_or_null(st.spectrum->lambda_gram)}};
        }
        if (st.drift) {
            js["drift"] = {{"radius", st.drift->radius},
                           {"last_inside", st.drift->last_inside},
                           {"last_inside_step", st.drift->last_inside_step},
                           {"at_switch", st.drift->at_switch},
                           {"switch_step", st.drift->switch_step}};
        }
        stages.push_back(std::move(js));
    }
    json j = {
        {"seed", r.seed},
        {"config_hash", r.config_hash},
        {"aborted", r.aborted},
        {"abort_reason", r.abort_reason},
        {"wall_seconds", r.wall_seconds},
        {"s_history", r.s_history},
        {"final_loss", finite_or_null(r.final_loss())},
        {"relu_rewrite_error", optional_number(r.relu_rewrite_error)},
        {"stages", std::move(stages)},
        {"params", json::parse(params_json(r.final_params, r.s_history, r.seed))},
    };
    return j.dump(2);
}

void write_run_json(const std::filesystem::path& path, const RunRecord& record) {
    auto out = open_output(path);
    out << run_record_json(record) << '\n';
}

std::string params_json(const Network& p, const std::vector<double>& s_history, std::uint64_t seed) {
    json omega = json::array();
    for (Eigen::Index k = 0; k < p.omega.rows(); ++k) {
        json row = json::array();
        for (Eigen::Index j = 0; j < p.omega.cols(); ++j) row.push_back(p.omega(k, j));
        omega.push_back(std::move(row));
    }
    json j = {
        {"m", p.width()},
        {"d", p.dim()},
        {"depth", p.depth()},
        {"s_history", s_history},
        {"a", std::vector<double>(p.a.data(), p.a.data() + p.a.size())},
        {"omega", std::move(omega)},
        {"seed", seed},
    };
    if (p.hidden2) {
        json h = json::array();
        for (Eigen::Index k = 0; k < p.hidden2->rows(); ++k) {
            json row = json::array();
            for (Eigen::Index j2 = 0; j2 < p.hidden2->cols(); ++j2) row.push_back((*p.hidden2)(k, j2));
            h.push_back(std::move(row));
        }
        j["hidden2"] = std::move(h);
    }
    return j.dump();
}

}  // namespace hrta
