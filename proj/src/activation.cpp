#include "hrta/activation.hpp"

#include <stdexcept>
#include <string>

namespace hrta {

std::string_view to_string(ActivationKind kind) {
    switch (kind) {
        case ActivationKind::PiecewiseLinear: return "piecewise_linear";
        case ActivationKind::SmoothQuadratic: return "smooth_quadratic";
    }
    return "unknown";
}

ActivationKind activation_kind_from_string(std::string_view name) {
    if (name == "piecewise_linear" || name == "relu") return ActivationKind::PiecewiseLinear;
    if (name == "smooth_quadratic" || name == "relu2") return ActivationKind::SmoothQuadratic;
    throw std::invalid_argument("unknown activation kind '" + std::string(name) + "'");
}

}  // namespace hrta
