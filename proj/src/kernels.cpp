#include "hrta/kernels.hpp"

#include <nlohmann/json.hpp>

namespace hrta {

std::string_view to_string(KernelSource source) {
    switch (source) {
        case KernelSource::FiniteWidth: return "finite_width";
        case KernelSource::MonteCarlo: return "monte_carlo";
        case KernelSource::ClosedForm: return "closed_form";
    }
    return "unknown";
}

KernelSource kernel_source_from_string(std::string_view name) {
    if (name == "finite_width") return KernelSource::FiniteWidth;
    if (name == "monte_carlo") return KernelSource::MonteCarlo;
    if (name == "closed_form") return KernelSource::ClosedForm;
    throw std::invalid_argument("unknown kernel source '" + std::string(name) + "'");
}

std::string spectrum_json(const SpectrumReport<double>& report, double s, KernelSource provenance, Eigen::Index n) {
    const nlohmann::json j = {
        {"lambda_a", report.lambda_a},
        {"lambda_w", report.lambda_w},
        {"lambda_sum", report.lambda_sum},
        {"s", s},
        {"provenance", to_string(provenance)},
        {"n", n},
        {"method", report.method == SpectrumReport<double>::Method::Jacobi ? "jacobi" : "shifted_power_iteration"},
        {"iterations", report.iterations},
        {"residual", report.residual},
    };
    return j.dump(2);
}

}  // namespace hrta
