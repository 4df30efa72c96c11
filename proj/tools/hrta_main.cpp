// hrta command line: train, experiment, kernel, bounds, poisson.
//
// Exit codes: 0 success, 2 configuration error, 3 divergence abort,
// 1 anything else.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hrta/harness.hpp"
#include "hrta/io.hpp"
#include "hrta/kernels.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kConfigError = 2;
constexpr int kDiverged = 3;

struct CommonOptions {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::string> output_dir;
    std::vector<std::uint64_t> seeds;
    std::vector<long> widths;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("config", o.config, "TOML or JSON configuration file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--set", o.overrides, "Override a key, e.g. --set sampling.n=200 (repeatable)");
    cmd->add_option("-o,--output-dir", o.output_dir, "Output directory");
    cmd->add_option("--seeds", o.seeds, "Seeds, replacing the configured list");
    cmd->add_option("--widths", o.widths, "Widths, replacing the configured list");
}

hrta::ExperimentConfig load(const CommonOptions& o) {
    auto overrides = o.overrides;
    auto list = [](const auto& values) {
        std::string s = "[";
        for (std::size_t i = 0; i < values.size(); ++i) s += (i ? ", " : "") + std::to_string(values[i]);
        return s + "]";
    };
    if (o.output_dir) overrides.push_back("output_dir=\"" + *o.output_dir + "\"");
    if (!o.seeds.empty()) overrides.push_back("seeds=" + list(o.seeds));
    if (!o.widths.empty()) overrides.push_back("widths=" + list(o.widths));
    return hrta::load_experiment_config(o.config, overrides);
}

void print_summary(const std::vector<hrta::SummaryRow>& rows) {
    std::printf("%8s  %-12s %6s  %-12s %-12s %-12s\n", "width", "method", "seed", "final_loss", "rate_1", "rate_2");
    for (const auto& r : rows) {
        std::printf("%8ld  %-12s %6llu  %-12.4e %-12.4e %-12.4e\n", static_cast<long>(r.width), r.method.c_str(),
                    static_cast<unsigned long long>(r.seed), r.final_loss, r.rate_stage1.value_or(0.0),
                    r.rate_stage2.value_or(0.0));
    }
}

int cmd_train(const CommonOptions& o) {
    const auto config = load(o);
    const auto run = hrta::run_single(config);
    std::printf("wrote %s\n", run.dir.string().c_str());
    print_summary({hrta::summary_row(run.record, run.width, run.method)});
    if (run.record.aborted) {
        std::fprintf(stderr, "aborted: %s\n", run.record.abort_reason.c_str());
        return kDiverged;
    }
    return kOk;
}

int cmd_experiment(const CommonOptions& o) {
    const auto config = load(o);
    const auto result = hrta::run_experiment(config);
    print_summary(result.summary);
    std::printf("wrote %s\n", (config.output_dir / "summary.csv").string().c_str());
    return result.any_aborted ? kDiverged : kOk;
}

int cmd_poisson(const CommonOptions& o) {
    const auto config = load(o);
    const auto result = hrta::run_poisson(config);
    std::printf("%8s  %-12s %6s  %-12s %-12s %-12s\n", "width", "method", "seed", "sobolev", "l2_error", "ritz");
    for (const auto& r : result.runs) {
        std::printf("%8ld  %-12s %6llu  %-12.4e %-12.4e %-12.5f\n", static_cast<long>(r.run.width),
                    r.run.method.c_str(), static_cast<unsigned long long>(r.run.seed), r.report.sobolev_loss,
                    r.report.l2_error, r.report.ritz_energy);
    }
    std::printf("exact Ritz energy %.5f\nwrote %s\n", hrta::poisson_exact_energy(),
                (config.output_dir / "poisson_summary.csv").string().c_str());
    return result.any_aborted ? kDiverged : kOk;
}

int cmd_bounds(const CommonOptions& o) {
    auto overrides = o.overrides;
    if (o.output_dir) overrides.push_back("output_dir=\"" + *o.output_dir + "\"");
    const auto config = hrta::load_bounds_config(o.config, overrides);
    const auto result = hrta::run_bounds(config);
    std::cout << result.report << '\n';
    return kOk;
}

struct KernelOptions {
    std::string data;
    double s = 1.0;
    long mc = 0;
    bool closed = false;
    std::uint64_t seed = 0;
    std::string activation = "piecewise_linear";
    std::string out = "spectrum.json";
    std::optional<std::string> gram_dir;
};

int cmd_kernel(const KernelOptions& o) {
    Eigen::MatrixXd X;
    try {
        X = hrta::read_matrix_csv(o.data);
    } catch (const std::exception& e) {
        throw hrta::ConfigError(e.what());
    }
    hrta::HomotopyParam s(0.0);
    hrta::ActivationKind kind{};
    try {
        s = hrta::HomotopyParam(o.s);
        kind = hrta::activation_kind_from_string(o.activation);
        hrta::require_non_parallel(X);
    } catch (const std::exception& e) {
        throw hrta::ConfigError(e.what());
    }
    if (o.mc > 0 && o.closed) throw hrta::ConfigError("--mc and --closed are exclusive");
    if (o.mc <= 0 && kind != hrta::ActivationKind::PiecewiseLinear)
        throw hrta::ConfigError("the closed form covers the piecewise-linear activation only; use --mc");

    const auto pair = o.mc > 0 ? hrta::kernel_mc(X, s, kind, o.mc, o.seed) : hrta::kernel_closed(X, s);
    const auto spectrum = hrta::min_eigs(pair);
    const auto text = hrta::spectrum_json(spectrum, s.value(), pair.provenance, pair.n());
    {
        auto out = hrta::open_output(o.out);
        out << text << '\n';
    }
    if (o.gram_dir) {
        const std::filesystem::path dir(*o.gram_dir);
        hrta::write_matrix_csv(dir / "K_a.csv", pair.Ka);
        hrta::write_matrix_csv(dir / "K_w.csv", pair.Kw);
    }
    std::cout << text << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Homotopy relaxation training laboratory"};
    app.require_subcommand(1);

    CommonOptions train_opts, experiment_opts, poisson_opts, bounds_opts;
    add_common(app.add_subcommand("train", "Single staged run (first arm, width and seed)"), train_opts);
    add_common(app.add_subcommand("experiment", "All arms, widths and seeds with matched budgets"), experiment_opts);
    add_common(app.add_subcommand("poisson", "Sobolev training on the Poisson problem"), poisson_opts);

    auto* bounds = app.add_subcommand("bounds", "Evaluate the width and risk bounds");
    bounds->add_option("config", bounds_opts.config, "TOML or JSON configuration file")
        ->required()
        ->check(CLI::ExistingFile);
    bounds->add_option("--set", bounds_opts.overrides, "Override a key (repeatable)");
    bounds->add_option("-o,--output-dir", bounds_opts.output_dir, "Output directory");

    KernelOptions kopts;
    auto* kernel = app.add_subcommand("kernel", "Smallest eigenvalues of the infinite-width Gram matrices");
    kernel->add_option("--data", kopts.data, "CSV of inputs, one row per sample")->required()->check(CLI::ExistingFile);
    kernel->add_option("--s", kopts.s, "Homotopy parameter in [0, 2]")->required();
    auto* mc = kernel->add_option("--mc", kopts.mc, "Monte Carlo draws");
    auto* closed = kernel->add_flag("--closed", kopts.closed, "Closed form (default)");
    mc->excludes(closed);
    kernel->add_option("--seed", kopts.seed, "Monte Carlo seed");
    kernel->add_option("--activation", kopts.activation, "piecewise_linear or smooth_quadratic");
    kernel->add_option("--out", kopts.out, "Spectrum JSON path");
    kernel->add_option("--gram-dir", kopts.gram_dir, "Also write K_a.csv and K_w.csv here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    try {
        if (app.got_subcommand("train")) return cmd_train(train_opts);
        if (app.got_subcommand("experiment")) return cmd_experiment(experiment_opts);
        if (app.got_subcommand("poisson")) return cmd_poisson(poisson_opts);
        if (app.got_subcommand("bounds")) return cmd_bounds(bounds_opts);
        if (app.got_subcommand("kernel")) return cmd_kernel(kopts);
    } catch (const hrta::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfigError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
    return kFailure;
}
