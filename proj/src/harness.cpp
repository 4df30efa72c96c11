#include "hrta/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "hrta/io.hpp"
#include "hrta/kernels.hpp"
#include "hrta/rng.hpp"

namespace hrta {

using nlohmann::json;
using std::numbers::pi;

// ---------------------------------------------------------------------------
// Expressions

struct Expression::Node {
    enum class Op { Number, Variable, Neg, Add, Sub, Mul, Div, Pow, Call };
    Op op = Op::Number;
    double value = 0;
    int variable = 0;  // 1-based
    double (*fn)(double) = nullptr;
    std::shared_ptr<const Node> lhs, rhs;

    [[nodiscard]] double eval(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        switch (op) {
            case Op::Number: return value;
            case Op::Variable: return x(variable - 1);
            case Op::Neg: return -lhs->eval(x);
            case Op::Add: return lhs->eval(x) + rhs->eval(x);
            case Op::Sub: return lhs->eval(x) - rhs->eval(x);
            case Op::Mul: return lhs->eval(x) * rhs->eval(x);
            case Op::Div: return lhs->eval(x) / rhs->eval(x);
            case Op::Pow: return std::pow(lhs->eval(x), rhs->eval(x));
            case Op::Call: return fn(lhs->eval(x));
        }
        return 0;
    }
};

namespace {

using NodePtr = std::shared_ptr<const Expression::Node>;
using Op = Expression::Node::Op;

NodePtr make_node(Op op, NodePtr lhs = nullptr, NodePtr rhs = nullptr) {
    auto n = std::make_shared<Expression::Node>();
    n->op = op;
    n->lhs = std::move(lhs);
    n->rhs = std::move(rhs);
    return n;
}

// Recursive descent: expr := term (('+'|'-') term)*, term := unary (('*'|'/') unary)*,
// unary := '-' unary | power, power := primary ('^' unary)?
class Parser {
public:
    explicit Parser(const std::string& text) : s_(text) {}

    NodePtr parse() {
        auto node = expr();
        skip();
        if (pos_ != s_.size()) fail("unexpected '" + std::string(1, s_[pos_]) + "'");
        return node;
    }

    int max_variable = 0;

private:
    const std::string& s_;
    std::size_t pos_ = 0;

    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError("expression '" + s_ + "': " + what + " at offset " + std::to_string(pos_));
    }

    void skip() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }

    bool eat(char c) {
        skip();
        if (pos_ < s_.size() && s_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    NodePtr expr() {
        auto node = term();
        for (;;) {
            if (eat('+')) node = make_node(Op::Add, node, term());
            else if (eat('-')) node = make_node(Op::Sub, node, term());
            else return node;
        }
    }

    NodePtr term() {
        auto node = unary();
        for (;;) {
            if (eat('*')) node = make_node(Op::Mul, node, unary());
            else if (eat('/')) node = make_node(Op::Div, node, unary());
            else return node;
        }
    }

    NodePtr unary() {
        if (eat('-')) return make_node(Op::Neg, unary());
        if (eat('+')) return unary();
        auto base = primary();
        if (eat('^')) return make_node(Op::Pow, base, unary());
        return base;
    }

    NodePtr primary() {
        skip();
        if (pos_ >= s_.size()) fail("unexpected end");
        if (eat('(')) {
            auto node = expr();
            if (!eat(')')) fail("missing ')'");
            return node;
        }
        const char c = s_[pos_];
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
            const char* begin = s_.c_str() + pos_;
            char* end = nullptr;
            const double v = std::strtod(begin, &end);
            if (end == begin) fail("bad number");
            pos_ += static_cast<std::size_t>(end - begin);
            auto n = std::make_shared<Expression::Node>();
            n->value = v;
            return n;
        }
        if (!std::isalpha(static_cast<unsigned char>(c))) fail("unexpected '" + std::string(1, c) + "'");
        std::string name;
        while (pos_ < s_.size() && std::isalnum(static_cast<unsigned char>(s_[pos_]))) name += s_[pos_++];

        if (name == "pi" || name == "e") {
            auto n = std::make_shared<Expression::Node>();
            n->value = name == "pi" ? pi : std::numbers::e;
            return n;
        }
        if (name.size() == 2 && name[0] == 'x' && name[1] >= '1' && name[1] <= '9') {
            auto n = std::make_shared<Expression::Node>();
            n->op = Op::Variable;
            n->variable = name[1] - '0';
            max_variable = std::max(max_variable, n->variable);
            return n;
        }
        static const std::map<std::string, double (*)(double)> functions = {
            {"sin", [](double v) { return std::sin(v); }},   {"cos", [](double v) { return std::cos(v); }},
            {"tan", [](double v) { return std::tan(v); }},   {"exp", [](double v) { return std::exp(v); }},
            {"log", [](double v) { return std::log(v); }},   {"sqrt", [](double v) { return std::sqrt(v); }},
            {"abs", [](double v) { return std::abs(v); }},   {"tanh", [](double v) { return std::tanh(v); }},
        };
        const auto it = functions.find(name);
        if (it == functions.end()) fail("unknown name '" + name + "'");
        if (!eat('(')) fail("expected '(' after " + name);
        auto arg = expr();
        if (!eat(')')) fail("missing ')'");
        auto n = make_node(Op::Call, arg);
        std::const_pointer_cast<Expression::Node>(n)->fn = it->second;
        return n;
    }
};

}  // namespace

Expression::Expression(std::string text) : text_(std::move(text)) {
    Parser parser(text_);
    root_ = parser.parse();
    max_variable_ = parser.max_variable;
}

double Expression::operator()(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() < max_variable_) throw std::invalid_argument("expression needs " + std::to_string(max_variable_) + " inputs");
    return root_->eval(x);
}

// ---------------------------------------------------------------------------
// Targets

std::string_view to_string(TargetKind kind) {
    switch (kind) {
        case TargetKind::Sin1D: return "sin1d";
        case TargetKind::Sin3D: return "sin3d";
        case TargetKind::Poisson2D: return "poisson2d";
        case TargetKind::Custom: return "custom";
    }
    return "unknown";
}

TargetKind target_kind_from_string(std::string_view name) {
    for (auto k : {TargetKind::Sin1D, TargetKind::Sin3D, TargetKind::Poisson2D, TargetKind::Custom})
        if (to_string(k) == name) return k;
    throw ConfigError("unknown target '" + std::string(name) + "'");
}

namespace {

TargetFunction sine_target(TargetKind kind, int d) {
    TargetFunction t;
    t.kind = kind;
    t.dim = d;
    t.f = [](const Eigen::Ref<const Eigen::VectorXd>& x) { return std::sin(2 * pi * x.sum()); };
    t.grad_f = [](const Eigen::Ref<const Eigen::VectorXd>& x) {
        return Eigen::VectorXd::Constant(x.size(), 2 * pi * std::cos(2 * pi * x.sum()));
    };
    return t;
}

}  // namespace

TargetFunction make_target(TargetKind kind, const std::string& expression, int custom_dim) {
    switch (kind) {
        case TargetKind::Sin1D: return sine_target(kind, 1);
        case TargetKind::Sin3D: return sine_target(kind, 3);
        case TargetKind::Poisson2D: {
            TargetFunction t;
            t.kind = kind;
            t.dim = 2;
            t.f = [](const Eigen::Ref<const Eigen::VectorXd>& x) { return std::cos(pi * x(0)) + std::cos(pi * x(1)); };
            t.grad_f = [](const Eigen::Ref<const Eigen::VectorXd>& x) {
                Eigen::VectorXd g(2);
                g << -pi * std::sin(pi * x(0)), -pi * std::sin(pi * x(1));
                return g;
            };
            t.source = [](const Eigen::Ref<const Eigen::VectorXd>& x) {
                return pi * pi * (std::cos(pi * x(0)) + std::cos(pi * x(1)));
            };
            return t;
        }
        case TargetKind::Custom: {
            if (expression.empty()) throw ConfigError("custom target needs an expression");
            const Expression e(expression);
            TargetFunction t;
            t.kind = kind;
            t.dim = std::max({1, e.max_variable(), custom_dim});
            t.expression = expression;
            t.f = [e](const Eigen::Ref<const Eigen::VectorXd>& x) { return e(x); };
            return t;
        }
    }
    throw ConfigError("unknown target");
}

// ---------------------------------------------------------------------------
// Samples

Eigen::MatrixXd cell_center_grid(Eigen::Index points_per_dim, int dim) {
    if (points_per_dim < 1 || dim < 1) throw std::invalid_argument("grid needs at least one point and dimension");
    Eigen::Index total = 1;
    for (int j = 0; j < dim; ++j) total *= points_per_dim;
    Eigen::MatrixXd X(total, dim);
    const double h = 1.0 / static_cast<double>(points_per_dim);
    for (Eigen::Index row = 0; row < total; ++row) {
        Eigen::Index rest = row;
        for (int j = dim - 1; j >= 0; --j) {
            X(row, j) = (static_cast<double>(rest % points_per_dim) + 0.5) * h;
            rest /= points_per_dim;
        }
    }
    return X;
}

Eigen::MatrixXd with_constant_column(const Eigen::MatrixXd& X) {
    Eigen::MatrixXd out(X.rows(), X.cols() + 1);
    out << X, Eigen::VectorXd::Ones(X.rows());
    return out;
}

SampleSet make_samples(const TargetFunction& target, const SamplingConfig& sampling) {
    Eigen::MatrixXd X;
    if (sampling.kind == SamplingKind::UniformGrid) {
        X = cell_center_grid(sampling.points_per_dim, target.dim);
    } else {
        if (sampling.n < 1) throw ConfigError("sampling.n must be positive");
        Rng rng(sampling.seed);
        X.resize(sampling.n, target.dim);
        // Row by row, open interval (0, 1).
        for (Eigen::Index i = 0; i < X.rows(); ++i)
            for (Eigen::Index j = 0; j < X.cols(); ++j) {
                double u = rng.uniform();
                while (u == 0.0) u = rng.uniform();
                X(i, j) = u;
            }
    }

    SampleSet data;
    data.y.resize(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) data.y(i) = target.f(X.row(i).transpose());
    if (target.has_gradient()) {
        Eigen::MatrixXd G(X.rows(), X.cols());
        for (Eigen::Index i = 0; i < X.rows(); ++i) G.row(i) = target.grad_f(X.row(i).transpose()).transpose();
        data.grad_y = std::move(G);
    }
    data.X = sampling.append_constant ? with_constant_column(X) : X;
    if (sampling.screen_parallel) require_non_parallel(data.X);
    data.validate();
    return data;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

Schedule adam_schedule(double s1, std::vector<long> steps) {
    Schedule s;
    s.s1 = HomotopyParam(s1);
    s.zeta_increment = 0.5;
    s.stages = static_cast<int>(steps.size());
    s.stage_steps = std::move(steps);
    s.steps_per_stage = s.stage_steps.front();
    s.optimizer = OptimizerKind::Adam;
    s.lr = 1e-3;
    s.lr_decay = LrDecay::HalveOnPlateau;
    return s;
}

json toml_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        json j = json::object();
        for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
        return j;
    }
    if (const auto* a = node.as_array()) {
        json j = json::array();
        for (const auto& v : *a) j.push_back(toml_to_json(v));
        return j;
    }
    if (const auto* v = node.as_string()) return v->get();
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    throw ConfigError("unsupported TOML value (dates and times are not accepted)");
}

json parse_toml_text(const std::string& text, const std::string& source) {
    try {
        const toml::table table = toml::parse(std::string_view(text), std::string_view(source));
        return toml_to_json(table);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << "TOML error in " << source << ": " << e.description() << " (line " << e.source().begin.line << ")";
        throw ConfigError(os.str());
    }
}

void apply_override(json& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        const toml::table parsed = toml::parse(std::string_view("v = " + raw), std::string_view("override"));
        value = toml_to_json(*parsed.get("v"));
    } catch (const toml::parse_error&) {
        value = raw;  // bare words are strings
    }
    json* cursor = &root;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!cursor->is_object()) throw ConfigError("override key '" + key + "' walks into a non-table");
        if (dot == std::string::npos) {
            (*cursor)[part] = value;
            return;
        }
        cursor = &(*cursor)[part];
        if (cursor->is_null()) *cursor = json::object();
        start = dot + 1;
    }
}

// Typed reads that reject unknown keys, so typos surface as config errors.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be a table");
    }
    ~Reader() = default;

    [[nodiscard]] bool has(const char* key) {
        seen_.emplace_back(key);
        return j_.contains(key);
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!has(key)) return;
        out = get<T>(j_.at(key), key);
    }

    template <typename T>
    void read_vector(const char* key, std::vector<T>& out) {
        if (!has(key)) return;
        const json& v = j_.at(key);
        if (!v.is_array()) throw ConfigError(where_ + "." + key + " must be an array");
        out.clear();
        for (const auto& item : v) out.push_back(get<T>(item, key));
    }

    [[nodiscard]] const json& at(const char* key) const { return j_.at(key); }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
                throw ConfigError("unknown key '" + k + "' in " + where_);
        }
    }

private:
    template <typename T>
    T get(const json& v, const char* key) const {
        const std::string name = where_ + "." + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(name + " must be a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(name + " must be a string");
            return v.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(name + " must be a number");
            return v.get<T>();
        } else {
            if (!v.is_number_integer()) throw ConfigError(name + " must be an integer");
            if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
                throw ConfigError(name + " must be non-negative");
            return v.get<T>();
        }
    }

    const json& j_;
    std::string where_;
    std::vector<std::string> seen_;
};

void read_schedule(Reader& r, Schedule& s) {
    double s1 = s.s1.value();
    r.read("s1", s1);
    try {
        s.s1 = HomotopyParam(s1);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("s1: ") + e.what());
    }
    r.read("zeta_increment", s.zeta_increment);
    const bool explicit_stages = r.has("stages");
    r.read("stages", s.stages);
    r.read("steps_per_stage", s.steps_per_stage);
    if (r.has("stage_steps")) {
        r.read_vector("stage_steps", s.stage_steps);
        if (!explicit_stages) s.stages = static_cast<int>(s.stage_steps.size());
    } else if (r.has("steps_per_stage")) {
        s.stage_steps.clear();
    }
    r.read("lr", s.lr);
    r.read_vector("stage_lr", s.stage_lr);
    std::string name;
    try {
        if (r.has("optimizer")) {
            r.read("optimizer", name);
            s.optimizer = optimizer_from_string(name);
        }
        if (r.has("switch_policy")) {
            r.read("switch_policy", name);
            s.switch_policy = switch_policy_from_string(name);
        }
        if (r.has("lr_decay")) {
            r.read("lr_decay", name);
            s.lr_decay = lr_decay_from_string(name);
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    r.read("beta1", s.adam.beta1);
    r.read("beta2", s.adam.beta2);
    r.read("eps", s.adam.eps);
    r.read("plateau_window", s.plateau_window);
    r.read("plateau_tol", s.plateau_tol);
    r.read("min_lr", s.min_lr);
    r.read("drift_check_every", s.drift_check_every);
    if (r.has("drift_radius")) {
        double radius = 0;
        r.read("drift_radius", radius);
        s.drift_radius = radius;
    }
    r.read("divergence_factor", s.divergence_factor);
    r.read("record_spectrum", s.record_spectrum);
}

Arm read_arm(const json& j, const std::string& where, Arm arm) {
    json table = j;
    bool auto_lr = false;
    if (table.is_object() && table.contains("lr") && table.at("lr").is_string()) {
        if (table.at("lr").get<std::string>() != "auto") throw ConfigError(where + ".lr must be a number or \"auto\"");
        table.erase("lr");
        auto_lr = true;
    }
    Reader r(table, where);
    r.read("name", arm.name);
    const auto before = arm.schedule.optimizer;
    read_schedule(r, arm.schedule);
    r.finish();
    if (arm.schedule.optimizer != OptimizerKind::GD) {
        if (auto_lr) throw ConfigError(where + ": lr = \"auto\" applies to gd only");
        arm.auto_lr = false;
    } else if (auto_lr || (before != OptimizerKind::GD && !table.contains("lr"))) {
        arm.auto_lr = true;
    } else if (table.contains("lr")) {
        arm.auto_lr = false;
    }
    return arm;
}

ExperimentConfig config_from_json(const json& root) {
    if (!root.is_object()) throw ConfigError("configuration must be a table");
    TargetKind target = TargetKind::Sin1D;
    if (root.contains("target")) {
        if (!root.at("target").is_string()) throw ConfigError("target must be a string");
        target = target_kind_from_string(root.at("target").get<std::string>());
    }
    ExperimentConfig c = default_experiment(target);
    Reader r(root, "config");
    std::string tname;
    r.read("target", tname);
    r.read("expression", c.expression);
    r.read("custom_dim", c.custom_dim);
    if (r.has("width")) {
        Eigen::Index w = 0;
        r.read("width", w);
        c.widths = {w};
    }
    r.read_vector("widths", c.widths);
    r.read("width2", c.width2);
    r.read("depth", c.depth);
    if (r.has("activation")) {
        std::string name;
        r.read("activation", name);
        try {
            c.kind = activation_kind_from_string(name);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (r.has("loss")) {
        std::string name;
        r.read("loss", name);
        if (name == "value") c.loss = LossKind::Value;
        else if (name == "sobolev") c.loss = LossKind::Sobolev;
        else throw ConfigError("loss must be 'value' or 'sobolev'");
    }
    if (r.has("seed")) {
        std::uint64_t seed = 0;
        r.read("seed", seed);
        c.seeds = {seed};
    }
    r.read_vector("seeds", c.seeds);
    if (r.has("output_dir")) {
        std::string dir;
        r.read("output_dir", dir);
        c.output_dir = dir;
    }
    r.read("rate_tail_fraction", c.rate_tail_fraction);
    r.read("eval_grid", c.eval_grid);
    r.read("ritz_points", c.ritz_points);
    r.read("ritz_seed", c.ritz_seed);

    if (r.has("sampling")) {
        Reader s(r.at("sampling"), "sampling");
        if (s.has("kind")) {
            std::string kind;
            s.read("kind", kind);
            if (kind == "grid") c.sampling.kind = SamplingKind::UniformGrid;
            else if (kind == "random") c.sampling.kind = SamplingKind::UniformRandom;
            else throw ConfigError("sampling.kind must be 'grid' or 'random'");
        }
        s.read("points_per_dim", c.sampling.points_per_dim);
        s.read("n", c.sampling.n);
        s.read("seed", c.sampling.seed);
        s.read("append_constant", c.sampling.append_constant);
        s.read("screen_parallel", c.sampling.screen_parallel);
        s.finish();
    }

    // A [schedule] table edits every arm; [[arms]] replaces them.
    if (r.has("schedule")) {
        const json& sj = r.at("schedule");
        for (auto& arm : c.arms) arm = read_arm(sj, "schedule", arm);
    }
    if (r.has("arms")) {
        const json& aj = r.at("arms");
        if (!aj.is_array() || aj.empty()) throw ConfigError("arms must be a non-empty array of tables");
        c.arms.clear();
        Arm base;
        base.schedule = adam_schedule(1.0, {16000});
        for (std::size_t i = 0; i < aj.size(); ++i) {
            base.name = "arm" + std::to_string(i + 1);
            c.arms.push_back(read_arm(aj[i], "arms[" + std::to_string(i) + "]", base));
        }
    }
    if (r.has("baseline")) {
        const json& bj = r.at("baseline");
        if (bj.is_boolean()) {
            if (!bj.get<bool>()) c.baseline.reset();
            else if (!c.baseline) c.baseline = Arm{"adam", adam_schedule(1.0, {c.arms.front().schedule.total_steps()})};
        } else {
            Arm base = c.baseline ? *c.baseline : Arm{"adam", adam_schedule(1.0, {16000})};
            c.baseline = read_arm(bj, "baseline", base);
        }
    }
    r.finish();
    c.validate();
    return c;
}

}  // namespace

ExperimentConfig default_experiment(TargetKind target) {
    ExperimentConfig c;
    c.target = target;
    switch (target) {
        case TargetKind::Sin1D:
        case TargetKind::Sin3D:
        case TargetKind::Custom:
            c.sampling.kind = SamplingKind::UniformGrid;
            c.sampling.points_per_dim = target == TargetKind::Sin3D ? 5 : 100;
            c.arms = {Arm{"hrta_s0.5", adam_schedule(0.5, {3000, 13000})},
                      Arm{"hrta_s1.5", adam_schedule(1.0, {3000, 13000})}};
            c.baseline = Arm{"adam", adam_schedule(1.0, {16000})};
            c.seeds = {0, 1, 2};
            c.output_dir = "out/experiment";
            break;
        case TargetKind::Poisson2D:
            c.sampling.kind = SamplingKind::UniformRandom;
            c.sampling.n = 400;
            c.kind = ActivationKind::SmoothQuadratic;
            c.loss = LossKind::Sobolev;
            c.arms = {Arm{"relax_s1.5", adam_schedule(1.0, {16000, 13000})}};
            c.seeds = {0, 1, 2, 3, 4};
            c.output_dir = "out/poisson";
            break;
    }
    return c;
}

void ExperimentConfig::validate() const {
    if (target == TargetKind::Custom && expression.empty()) throw ConfigError("custom target needs 'expression'");
    if (widths.empty()) throw ConfigError("widths must not be empty");
    for (auto w : widths)
        if (w < 1) throw ConfigError("widths must be positive");
    if (depth != 2 && depth != 3) throw ConfigError("depth must be 2 or 3");
    if (width2 < 0) throw ConfigError("width2 must be non-negative");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (arms.empty()) throw ConfigError("at least one arm is required");
    if (loss == LossKind::Sobolev && target == TargetKind::Custom)
        throw ConfigError("Sobolev loss needs a target with a known gradient");
    if (loss == LossKind::Sobolev && depth != 2) throw ConfigError("Sobolev loss needs depth 2");
    if (sampling.kind == SamplingKind::UniformGrid && sampling.points_per_dim < 1)
        throw ConfigError("sampling.points_per_dim must be positive");
    if (sampling.kind == SamplingKind::UniformRandom && sampling.n < 1) throw ConfigError("sampling.n must be positive");
    if (!(rate_tail_fraction > 0 && rate_tail_fraction <= 1)) throw ConfigError("rate_tail_fraction must be in (0, 1]");
    if (eval_grid < 1 || ritz_points < 1) throw ConfigError("eval_grid and ritz_points must be positive");
    std::vector<std::string> names;
    auto check = [&](const Arm& arm) {
        if (arm.name.empty()) throw ConfigError("every arm needs a name");
        if (std::find(names.begin(), names.end(), arm.name) != names.end())
            throw ConfigError("duplicate arm name '" + arm.name + "'");
        names.push_back(arm.name);
        try {
            arm.schedule.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("arm '" + arm.name + "': " + e.what());
        }
    };
    for (const auto& arm : arms) check(arm);
    if (baseline) check(*baseline);
}

ExperimentConfig parse_experiment_config(const std::string& text, bool is_json,
                                         const std::vector<std::string>& overrides) {
    json root;
    if (is_json) {
        try {
            root = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("JSON error: ") + e.what());
        }
    } else {
        root = parse_toml_text(text, "config");
    }
    for (const auto& o : overrides) apply_override(root, o);
    return config_from_json(root);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_experiment_config(text.str(), path.extension() == ".json", overrides);
}

TrainConfig train_config_for(const ExperimentConfig& config, const Arm& arm, Eigen::Index width, std::uint64_t seed) {
    TrainConfig t;
    t.schedule = arm.schedule;
    t.kind = config.kind;
    t.loss = config.loss;
    t.width = width;
    t.width2 = config.width2;
    t.depth = config.depth;
    t.seed = seed;
    t.rate_tail_fraction = config.rate_tail_fraction;
    return t;
}

void require_matched_budgets(const ExperimentConfig& config) {
    const long budget = config.arms.front().schedule.total_steps();
    auto check = [&](const Arm& arm) {
        if (arm.schedule.total_steps() != budget) {
            throw ConfigError("mismatched step budgets: '" + config.arms.front().name + "' has " +
                              std::to_string(budget) + " steps, '" + arm.name + "' has " +
                              std::to_string(arm.schedule.total_steps()));
        }
    };
    for (const auto& arm : config.arms) check(arm);
    if (config.baseline) check(*config.baseline);
}

// ---------------------------------------------------------------------------
// Summary table

SummaryRow summary_row(const RunRecord& record, Eigen::Index width, const std::string& method) {
    SummaryRow row;
    row.width = width;
    row.method = method;
    row.final_loss = record.final_loss();
    row.seed = record.seed;
    if (!record.stages.empty()) row.rate_stage1 = record.stages[0].rate;
    if (record.stages.size() > 1) row.rate_stage2 = record.stages[1].rate;
    return row;
}

SummaryRow summary_row_from_run_json(const std::filesystem::path& path, Eigen::Index width, const std::string& method) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const json j = json::parse(in);
    auto number = [](const json& v) { return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>(); };
    SummaryRow row;
    row.width = width;
    row.method = method;
    row.final_loss = number(j.at("final_loss"));
    row.seed = j.at("seed").get<std::uint64_t>();
    const auto& stages = j.at("stages");
    if (!stages.empty()) row.rate_stage1 = number(stages[0].at("rate"));
    if (stages.size() > 1) row.rate_stage2 = number(stages[1].at("rate"));
    return row;
}

void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows) {
    out << "width,method,final_loss,seed,rate_stage1,rate_stage2\n";
    auto opt = [](const std::optional<double>& x) { return x ? format_double(*x) : std::string(); };
    for (const auto& r : rows) {
        out << r.width << ',' << r.method << ',' << format_double(r.final_loss) << ',' << r.seed << ','
            << opt(r.rate_stage1) << ',' << opt(r.rate_stage2) << '\n';
    }
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows) {
    auto out = open_output(path);
    write_summary_csv(out, rows);
}

std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "width,method,final_loss,seed,rate_stage1,rate_stage2")
        throw std::runtime_error(path.string() + " is not a summary CSV");
    std::vector<SummaryRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() != 6) throw std::runtime_error("malformed summary row '" + line + "'");
        SummaryRow r;
        r.width = std::stol(f[0]);
        r.method = f[1];
        r.final_loss = std::stod(f[2]);
        r.seed = std::stoull(f[3]);
        if (!f[4].empty()) r.rate_stage1 = std::stod(f[4]);
        if (!f[5].empty()) r.rate_stage2 = std::stod(f[5]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Drivers

double default_gd_lr(const SampleSet& data, HomotopyParam s, ActivationKind kind) {
    const auto K = kind == ActivationKind::PiecewiseLinear ? kernel_closed(data.X, s) : kernel_mc(data.X, s, kind, 100000, 0);
    const double lambda_hat = jacobi_eigen(Eigen::MatrixXd(K.total())).values.maxCoeff() / static_cast<double>(data.size());
    return 0.1 / lambda_hat;
}

std::filesystem::path run_directory(const ExperimentConfig& config, Eigen::Index width, const std::string& method,
                                    std::uint64_t seed) {
    return config.output_dir / ("m" + std::to_string(width)) / method / ("seed" + std::to_string(seed));
}

namespace {

SampleSet samples_for(const ExperimentConfig& config) {
    return make_samples(make_target(config.target, config.expression, config.custom_dim), config.sampling);
}

RunOutput run_cell(const ExperimentConfig& config, const SampleSet& data, const Arm& arm, Eigen::Index width,
                   std::uint64_t seed, const std::filesystem::path& dir) {
    RunOutput out;
    out.width = width;
    out.method = arm.name;
    out.seed = seed;
    out.dir = dir;
    auto cfg = train_config_for(config, arm, width, seed);
    if (arm.auto_lr) {
        cfg.schedule.lr = default_gd_lr(data, arm.schedule.s1, config.kind);
        cfg.schedule.stage_lr.clear();
    }
    out.record = hrta_run(cfg, data);
    write_loss_csv(dir / "loss.csv", out.record.losses);
    write_run_json(dir / "run.json", out.record);
    return out;
}

std::vector<const Arm*> all_arms(const ExperimentConfig& config) {
    std::vector<const Arm*> arms;
    for (const auto& arm : config.arms) arms.push_back(&arm);
    if (config.baseline) arms.push_back(&*config.baseline);
    return arms;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    require_matched_budgets(config);
    const SampleSet data = samples_for(config);
    ExperimentResult result;
    for (const auto width : config.widths) {
        for (const Arm* arm : all_arms(config)) {
            for (const auto seed : config.seeds) {
                auto run = run_cell(config, data, *arm, width, seed, run_directory(config, width, arm->name, seed));
                result.any_aborted = result.any_aborted || run.record.aborted;
                result.summary.push_back(summary_row(run.record, width, arm->name));
                result.runs.push_back(std::move(run));
            }
        }
    }
    write_summary_csv(config.output_dir / "summary.csv", result.summary);
    return result;
}

RunOutput run_single(const ExperimentConfig& config) {
    config.validate();
    const SampleSet data = samples_for(config);
    return run_cell(config, data, config.arms.front(), config.widths.front(), config.seeds.front(), config.output_dir);
}

// ---------------------------------------------------------------------------
// Poisson

double poisson_exact_energy() { return -pi * pi / 2; }

double ritz_energy(const std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>& u,
                   const std::function<Eigen::VectorXd(const Eigen::Ref<const Eigen::VectorXd>&)>& grad_u,
                   const std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>& f, long points,
                   std::uint64_t seed) {
    if (points < 1) throw std::invalid_argument("ritz_energy needs at least one point");
    Rng rng(seed);
    double grad_sq = 0, mean_u = 0, fu = 0;
    Eigen::VectorXd x(2);
    for (long i = 0; i < points; ++i) {
        x(0) = rng.uniform();
        x(1) = rng.uniform();
        const double ux = u(x);
        grad_sq += grad_u(x).squaredNorm();
        mean_u += ux;
        fu += f(x) * ux;
    }
    const auto N = static_cast<double>(points);
    mean_u /= N;
    return 0.5 * grad_sq / N + 0.5 * mean_u * mean_u - fu / N;
}

PoissonReport poisson_report(const Network& params, HomotopyParam s, const ExperimentConfig& config,
                             double sobolev_loss) {
    const auto target = make_target(TargetKind::Poisson2D);
    const bool augment = config.sampling.append_constant;
    auto lift = [augment](const Eigen::MatrixXd& X) { return augment ? with_constant_column(X) : X; };

    PoissonReport rep;
    rep.sobolev_loss = sobolev_loss;
    const Eigen::MatrixXd grid = cell_center_grid(config.eval_grid, 2);
    const Eigen::MatrixXd inputs = lift(grid);
    const Eigen::VectorXd phi = predict(params, s, config.kind, inputs);
    const Eigen::MatrixXd dphi = input_gradients(params, s, config.kind, inputs).leftCols(2);
    double err = 0, gerr = 0;
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
        const Eigen::VectorXd x = grid.row(i).transpose();
        const double e = phi(i) - target.f(x);
        err += e * e;
        gerr += (dphi.row(i).transpose() - target.grad_f(x)).squaredNorm();
    }
    const auto N = static_cast<double>(grid.rows());
    rep.l2_error = std::sqrt(err / N);
    rep.h1_semi_error = std::sqrt(gerr / N);

    const auto kind = config.kind;
    auto net_u = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
        Eigen::VectorXd z = augment ? Eigen::VectorXd(3) : Eigen::VectorXd(2);
        z.head(2) = x;
        if (augment) z(2) = 1.0;
        return forward(params, s, kind, z);
    };
    auto net_grad = [&](const Eigen::Ref<const Eigen::VectorXd>& x) {
        Eigen::VectorXd z = augment ? Eigen::VectorXd(3) : Eigen::VectorXd(2);
        z.head(2) = x;
        if (augment) z(2) = 1.0;
        return Eigen::VectorXd(grad_input(params, s, kind, z).head(2));
    };
    rep.ritz_energy = ritz_energy(net_u, net_grad, target.source, config.ritz_points, config.ritz_seed);
    rep.ritz_energy_exact = poisson_exact_energy();
    return rep;
}

namespace {

std::string poisson_json(const PoissonReport& r) {
    const json j = {
        {"sobolev_loss", r.sobolev_loss},   {"l2_error", r.l2_error},
        {"h1_semi_error", r.h1_semi_error}, {"ritz_energy", r.ritz_energy},
        {"ritz_energy_exact", r.ritz_energy_exact},
    };
    return j.dump(2);
}

}  // namespace

PoissonResult run_poisson(const ExperimentConfig& config) {
    config.validate();
    if (config.target != TargetKind::Poisson2D) throw ConfigError("the poisson command needs target = \"poisson2d\"");
    if (config.kind != ActivationKind::SmoothQuadratic)
        throw ConfigError("the poisson command needs activation = \"smooth_quadratic\"");
    require_matched_budgets(config);
    const SampleSet data = samples_for(config);

    PoissonResult result;
    std::ostringstream table;
    table << "width,method,seed,sobolev_loss,l2_error,h1_semi_error,ritz_energy\n";
    for (const auto width : config.widths) {
        for (const Arm* arm : all_arms(config)) {
            for (const auto seed : config.seeds) {
                const auto dir = run_directory(config, width, arm->name, seed);
                PoissonRun pr{run_cell(config, data, *arm, width, seed, dir), {}};
                const auto& rec = pr.run.record;
                result.any_aborted = result.any_aborted || rec.aborted;
                const HomotopyParam s_final(rec.s_history.empty() ? arm->schedule.s1.value() : rec.s_history.back());
                pr.report = poisson_report(rec.final_params, s_final, config, rec.final_loss());
                {
                    auto out = open_output(dir / "poisson.json");
                    out << poisson_json(pr.report) << '\n';
                }
                table << width << ',' << arm->name << ',' << seed << ',' << format_double(pr.report.sobolev_loss) << ','
                      << format_double(pr.report.l2_error) << ',' << format_double(pr.report.h1_semi_error) << ','
                      << format_double(pr.report.ritz_energy) << '\n';
                result.summary.push_back(summary_row(rec, width, arm->name));
                result.runs.push_back(std::move(pr));
            }
        }
    }
    write_summary_csv(config.output_dir / "summary.csv", result.summary);
    auto out = open_output(config.output_dir / "poisson_summary.csv");
    out << table.str();
    return result;
}

// ---------------------------------------------------------------------------
// Bounds report

namespace {

BoundsConfig bounds_config_from_json(const json& root) {
    BoundsConfig c;
    Reader r(root, "config");
    auto& in = c.inputs;
    r.read("m", in.m);
    r.read("d", in.d);
    r.read("n", in.n);
    r.read("delta", in.delta);
    r.read("lambda_a", in.lambda_a);
    r.read("lambda_w", in.lambda_w);
    if (r.has("lambda_a2")) {
        double v = 0;
        r.read("lambda_a2", v);
        in.lambda_a2 = v;
    }
    if (r.has("lambda_w2")) {
        double v = 0;
        r.read("lambda_w2", v);
        in.lambda_w2 = v;
    }
    r.read("risk0", in.risk0);
    r.read("C0", in.C0);
    r.read("C_psi_d", in.C_psi_d);
    if (r.has("target")) {
        std::string name;
        r.read("target", name);
        c.target = target_kind_from_string(name);
        c.sampling = default_experiment(*c.target).sampling;
    }
    r.read("expression", c.expression);
    r.read("s1", c.s1);
    if (r.has("s2")) {
        double v = 0;
        r.read("s2", v);
        c.s2 = v;
    }
    if (r.has("activation")) {
        std::string name;
        r.read("activation", name);
        try {
            c.kind = activation_kind_from_string(name);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    r.read("seed", c.seed);
    r.read("verify_trials", c.verify_trials);
    if (r.has("output_dir")) {
        std::string dir;
        r.read("output_dir", dir);
        c.output_dir = dir;
    }
    if (r.has("sampling")) {
        Reader s(r.at("sampling"), "sampling");
        if (s.has("kind")) {
            std::string kind;
            s.read("kind", kind);
            if (kind == "grid") c.sampling.kind = SamplingKind::UniformGrid;
            else if (kind == "random") c.sampling.kind = SamplingKind::UniformRandom;
            else throw ConfigError("sampling.kind must be 'grid' or 'random'");
        }
        s.read("points_per_dim", c.sampling.points_per_dim);
        s.read("n", c.sampling.n);
        s.read("seed", c.sampling.seed);
        s.read("append_constant", c.sampling.append_constant);
        s.read("screen_parallel", c.sampling.screen_parallel);
        s.finish();
    }
    r.finish();
    if (c.verify_trials < 0) throw ConfigError("verify_trials must be non-negative");
    if (!(c.s1 >= 0 && c.s1 <= 2) || (c.s2 && !(*c.s2 >= 0 && *c.s2 <= 2)))
        throw ConfigError("s1 and s2 must lie in [0, 2]");
    if (c.target == TargetKind::Custom && c.expression.empty()) throw ConfigError("custom target needs 'expression'");
    return c;
}

json verifier_summary(const VerifierResult& v) {
    return {{"trials", v.trials}, {"held", v.held}, {"fraction", v.fraction},
            {"wilson_lo", v.wilson_lo}, {"wilson_hi", v.wilson_hi}};
}

}  // namespace

BoundsConfig parse_bounds_config(const std::string& text, bool is_json, const std::vector<std::string>& overrides) {
    json root;
    if (is_json) {
        try {
            root = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("JSON error: ") + e.what());
        }
    } else {
        root = parse_toml_text(text, "config");
    }
    for (const auto& o : overrides) apply_override(root, o);
    return bounds_config_from_json(root);
}

BoundsConfig load_bounds_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_bounds_config(text.str(), path.extension() == ".json", overrides);
}

BoundsResult run_bounds(const BoundsConfig& config) {
    BoundsResult result;
    result.inputs = config.inputs;
    auto& in = result.inputs;
    std::optional<SampleSet> data;
    if (config.target) {
        data = make_samples(make_target(*config.target, config.expression), config.sampling);
        in.n = static_cast<double>(data->size());
        in.d = static_cast<double>(data->dim());
        const auto spec1 = min_eigs(kernel_closed(data->X, HomotopyParam(config.s1)));
        in.lambda_a = spec1.lambda_a;
        in.lambda_w = spec1.lambda_w;
        if (config.s2) {
            const auto spec2 = min_eigs(kernel_closed(data->X, HomotopyParam(*config.s2)));
            in.lambda_a2 = spec2.lambda_a;
            in.lambda_w2 = spec2.lambda_w;
        }
        const auto p0 = init_params(static_cast<Eigen::Index>(in.m), data->dim(), 2, config.seed);
        in.risk0 = empirical_risk(p0, HomotopyParam(config.s1), config.kind, *data);
    }
    try {
        in.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    json report = json::parse(bounds_json(in));
    if (config.verify_trials > 0) {
        const auto m = static_cast<Eigen::Index>(in.m);
        const auto d = static_cast<Eigen::Index>(in.d);
        result.verifiers.emplace_back("init_magnitude",
                                      verify_init_magnitude(m, d, in.delta, config.verify_trials, config.seed));
        if (data) {
            result.verifiers.emplace_back("initial_risk",
                                          verify_initial_risk(m, *data, HomotopyParam(config.s1), config.kind, in.delta,
                                                              config.verify_trials, config.seed));
            result.verifiers.emplace_back(
                "eig_event", verify_eig_event(data->X, m, HomotopyParam(config.s1), config.verify_trials, config.seed));
        }
        json verifiers = json::object();
        for (const auto& [name, v] : result.verifiers) {
            verifiers[name] = verifier_summary(v);
            write_verifier_csv(config.output_dir / (name + ".csv"), v);
        }
        report["verifiers"] = std::move(verifiers);
    }
    result.report = report.dump(2);
    auto out = open_output(config.output_dir / "bounds.json");
    out << result.report << '\n';
    return result;
}

}  // namespace hrta
