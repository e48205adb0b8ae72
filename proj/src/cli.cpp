#include "exitbsde/cli.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace exitbsde {

namespace {

using nlohmann::json;

[[noreturn]] void config_error(const std::string& field, const std::string& message) {
    throw Error(ErrorCode::ConfigError, "config field '" + field + "': " + message);
}

/// Strict object reader: every key must be consumed, types are checked.
class Reader {
public:
    Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_object()) config_error(path_.empty() ? "/" : path_, "expected an object");
    }

    bool has(const std::string& key) const { return node_.contains(key); }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return node_.at(key);
    }

    std::string field(const std::string& key) const { return path_ + "/" + key; }

    std::string string(const std::string& key, std::optional<std::string> fallback = std::nullopt) {
        if (!has(key)) return required(key, fallback);
        const json& v = raw(key);
        if (!v.is_string()) config_error(field(key), "expected a string");
        return v.get<std::string>();
    }

    double number(const std::string& key, std::optional<double> fallback = std::nullopt) {
        if (!has(key)) return required(key, fallback);
        const json& v = raw(key);
        if (!v.is_number()) config_error(field(key), "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) config_error(field(key), "must be finite");
        return d;
    }

    std::uint64_t count(const std::string& key, std::optional<std::uint64_t> fallback = std::nullopt) {
        if (!has(key)) return required(key, fallback);
        return as_count(raw(key), field(key));
    }

    bool boolean(const std::string& key, std::optional<bool> fallback = std::nullopt) {
        if (!has(key)) return required(key, fallback);
        const json& v = raw(key);
        if (!v.is_boolean()) config_error(field(key), "expected true or false");
        return v.get<bool>();
    }

    std::vector<double> numbers(const std::string& key, std::optional<std::vector<double>> fallback = std::nullopt) {
        if (!has(key)) return required(key, fallback);
        const json& v = raw(key);
        if (!v.is_array()) config_error(field(key), "expected an array of numbers");
        std::vector<double> out;
        for (const auto& e : v) {
            if (!e.is_number()) config_error(field(key), "expected an array of numbers");
            out.push_back(e.get<double>());
        }
        return out;
    }

    void finish() const {
        for (auto it = node_.begin(); it != node_.end(); ++it) {
            if (!seen_.count(it.key())) config_error(field(it.key()), "unknown key");
        }
    }

    static std::uint64_t as_count(const json& v, const std::string& where) {
        if (v.is_number_unsigned()) return v.get<std::uint64_t>();
        if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
        config_error(where, "expected a non-negative integer");
    }

private:
    template <typename T>
    T required(const std::string& key, const std::optional<T>& fallback) const {
        if (!fallback) config_error(field(key), "missing required field");
        return *fallback;
    }

    const json& node_;
    std::string path_;
    std::set<std::string> seen_;
};

PieceConfig parse_piece(const json& node, const std::string& path) {
    Reader r(node, path);
    PieceConfig p;
    p.kind = r.string("kind");
    if (p.kind == "half_space") {
        p.normal = r.numbers("normal");
        p.offset = r.number("offset", 0.0);
    } else if (p.kind == "ball") {
        p.center = r.numbers("center");
        p.radius = r.number("radius");
        p.complement = r.boolean("complement", false);
    } else if (p.kind == "ellipsoid") {
        p.center = r.numbers("center");
        p.semi_axes = r.numbers("semi_axes");
    } else {
        config_error(r.field("kind"), "expected half_space, ball or ellipsoid, got '" + p.kind + "'");
    }
    r.finish();
    return p;
}

InlineProblem parse_problem(const json& node, const std::string& path) {
    Reader r(node, path);
    InlineProblem p;
    p.name = r.string("name", std::string("inline"));
    if (p.name.empty() || p.name.find_first_of(",\n") != std::string::npos) {
        config_error(r.field("name"), "must be non-empty without commas");
    }
    p.x0 = r.numbers("x0");
    p.dim = p.x0.size();
    if (p.dim == 0) config_error(r.field("x0"), "must have at least one coordinate");
    p.drift = r.numbers("drift", std::vector<double>(p.dim, 0.0));
    if (p.drift.size() != p.dim) config_error(r.field("drift"), "dimension does not match x0");
    if (r.has("diffusion")) {
        const json& rows = r.raw("diffusion");
        if (!rows.is_array() || rows.size() != p.dim) config_error(r.field("diffusion"), "expected a d x d array");
        for (const auto& row : rows) {
            if (!row.is_array() || row.size() != p.dim) config_error(r.field("diffusion"), "expected a d x d array");
            for (const auto& v : row) {
                if (!v.is_number()) config_error(r.field("diffusion"), "expected numbers");
                p.diffusion.push_back(v.get<double>());
            }
        }
    } else {
        p.diffusion.assign(p.dim * p.dim, 0.0);
        for (std::size_t k = 0; k < p.dim; ++k) p.diffusion[k * p.dim + k] = 1.0;
    }
    if (r.has("terminal")) {
        Reader t(r.raw("terminal"), r.field("terminal"));
        p.terminal_constant = t.number("constant", 0.0);
        p.terminal_linear = t.numbers("linear", std::vector<double>(p.dim, 0.0));
        if (p.terminal_linear.size() != p.dim) config_error(t.field("linear"), "dimension does not match x0");
        t.finish();
    } else {
        p.terminal_linear.assign(p.dim, 0.0);
    }
    p.horizon = r.number("horizon", 1.0);
    if (!(p.horizon > 0.0)) config_error(r.field("horizon"), "must be positive");
    if (!r.has("domain")) config_error(r.field("domain"), "missing required field");
    Reader dom(r.raw("domain"), r.field("domain"));
    p.domain_lipschitz = dom.number("lipschitz", 1.0);
    if (!(p.domain_lipschitz > 0.0)) config_error(dom.field("lipschitz"), "must be positive");
    if (!dom.has("pieces")) config_error(dom.field("pieces"), "missing required field");
    const json& pieces = dom.raw("pieces");
    if (!pieces.is_array() || pieces.empty()) config_error(dom.field("pieces"), "expected a non-empty array");
    for (std::size_t k = 0; k < pieces.size(); ++k) {
        p.pieces.push_back(parse_piece(pieces[k], dom.field("pieces") + "/" + std::to_string(k)));
        const auto& pc = p.pieces.back();
        const std::size_t dim = pc.kind == "half_space" ? pc.normal.size() : pc.center.size();
        if (dim != p.dim || (pc.kind == "ellipsoid" && pc.semi_axes.size() != p.dim)) {
            config_error(dom.field("pieces") + "/" + std::to_string(k), "dimension does not match x0");
        }
    }
    dom.finish();
    r.finish();
    return p;
}

AcceptanceRule parse_rule(const json& node, const std::string& path) {
    Reader r(node, path);
    AcceptanceRule rule;
    rule.metric = r.string("metric");
    rule.exit_mode = r.string("exit_mode", std::string("discrete"));
    if (rule.exit_mode != "discrete" && rule.exit_mode != "exact") {
        config_error(r.field("exit_mode"), "expected discrete or exact");
    }
    const bool slope = r.has("slope");
    const bool target = r.has("target");
    if (slope == target) config_error(path, "give exactly one of 'slope' or 'target'");
    if (slope) {
        const auto w = r.numbers("slope");
        if (w.size() != 2 || !(w[0] <= w[1])) config_error(r.field("slope"), "expected [lower, upper]");
        rule.slope_lower = w[0];
        rule.slope_upper = w[1];
    } else {
        rule.target = r.number("target");
        rule.tolerance = r.number("tolerance");
        if (!(rule.tolerance >= 0.0)) config_error(r.field("tolerance"), "must be >= 0");
        rule.steps = r.count("n");
    }
    try {
        ErrorReport probe;
        (void)report_metric(probe, rule.metric);
    } catch (const Error&) {
        config_error(r.field("metric"), "unknown metric '" + rule.metric + "'");
    }
    r.finish();
    return rule;
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

json point_json(const SlopePoint& p, bool excluded) {
    return json{{"h", p.h}, {"value", p.value}, {"std_error", p.std_error}, {"excluded", excluded}};
}

json fit_json(const SlopeFit& fit, const std::string& metric, const std::string& mode) {
    json points = json::array();
    for (std::size_t k = 0; k < fit.points.size(); ++k) points.push_back(point_json(fit.points[k], fit.excluded[k]));
    return json{{"metric", metric},
                {"exit_mode", mode},
                {"slope", fit.slope},
                {"intercept", fit.intercept},
                {"half_width", fit.half_width},
                {"confidence", fit.confidence},
                {"residual_norm", fit.residual_norm},
                {"used", fit.used},
                {"dropped_largest_h", fit.dropped_largest_h},
                {"points", points}};
}

std::vector<SlopePoint> ladder_points(const std::vector<ErrorReport>& rows, const std::string& metric,
                                      const std::string& mode) {
    std::vector<SlopePoint> points;
    for (const auto& r : rows) {
        if (r.exit_mode != mode) continue;
        const Estimate e = report_metric(r, metric);
        if (std::isnan(e.value)) continue;
        points.push_back({r.h, e.value, std::isnan(e.std_error) ? 0.0 : e.std_error});
    }
    return points;
}

struct FitResult {
    std::string metric;
    std::string mode;
    std::optional<SlopeFit> fit;
    std::string error;
};

FitResult try_fit(const std::vector<ErrorReport>& rows, const std::string& metric, const std::string& mode) {
    FitResult out{metric, mode, std::nullopt, {}};
    try {
        const auto points = ladder_points(rows, metric, mode);
        out.fit = fit_slope(points);
    } catch (const Error& e) {
        out.error = e.what();
    }
    return out;
}

void print_fit(std::ostream& out, const std::string& group, const FitResult& f) {
    char line[256];
    if (f.fit) {
        std::snprintf(line, sizeof line, "%-28s %-16s %-9s slope %7.4f +- %6.4f  points %zu%s\n", group.c_str(),
                      f.metric.c_str(), f.mode.c_str(), f.fit->slope, f.fit->half_width, f.fit->used,
                      f.fit->dropped_largest_h ? "  (largest h dropped)" : "");
    } else {
        std::snprintf(line, sizeof line, "%-28s %-16s %-9s no fit: %s\n", group.c_str(), f.metric.c_str(),
                      f.mode.c_str(), f.error.c_str());
    }
    out << line;
}

void write_json(const std::filesystem::path& file, const json& doc) {
    std::ofstream os(file, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::IoError, "cannot open " + file.string());
    os << doc.dump(2) << '\n';
    require(static_cast<bool>(os), ErrorCode::IoError, "write failed for " + file.string());
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::ConfigError, source + ": " + e.what());
    }
    Reader r(doc, "");
    ExperimentConfig c;
    c.schema_version = static_cast<int>(r.count("schema_version"));
    if (c.schema_version != kConfigSchemaVersion) {
        config_error("/schema_version", "unsupported version " + std::to_string(c.schema_version));
    }
    const bool named = r.has("benchmark");
    const bool inline_problem = r.has("problem");
    if (named == inline_problem) config_error("/benchmark", "give exactly one of 'benchmark' or 'problem'");
    if (named) {
        c.benchmark = r.string("benchmark");
        const auto names = benchmark_names();
        if (std::find(names.begin(), names.end(), c.benchmark) == names.end()) {
            config_error("/benchmark", "unknown benchmark '" + c.benchmark + "'");
        }
    } else {
        c.problem = parse_problem(r.raw("problem"), "/problem");
    }

    if (r.has("ladder")) {
        const json& ladder = r.raw("ladder");
        if (!ladder.is_array() || ladder.empty()) config_error("/ladder", "expected a non-empty array");
        for (const auto& v : ladder) c.ladder.push_back(Reader::as_count(v, "/ladder"));
    }
    c.n_paths = r.count("n_paths", c.n_paths);
    c.m_fine = r.count("m_fine", c.m_fine);
    c.seed = r.count("seed", c.seed);
    c.chunk = r.count("chunk", c.chunk);
    c.exact_mode = r.boolean("exact_mode", false);
    c.regularity = r.boolean("regularity", false);
    c.fine_pass = r.boolean("fine_pass", true);

    if (r.has("engine")) {
        Reader e(r.raw("engine"), "/engine");
        c.engine = e.string("mode", std::string("regression"));
        if (c.engine != "regression" && c.engine != "analytic" && c.engine != "exact_tree") {
            config_error("/engine/mode", "expected regression, analytic or exact_tree, got '" + c.engine + "'");
        }
        if (e.has("basis")) {
            Reader b(e.raw("basis"), "/engine/basis");
            const std::string kind = b.string("kind", std::string("hypercube"));
            if (kind == "hypercube") {
                c.basis = BasisSpec::hypercube(b.count("cells_per_axis", 0), b.number("ridge", 0.0));
            } else if (kind == "polynomial") {
                c.basis = BasisSpec::polynomial(static_cast<unsigned>(b.count("degree")), b.number("ridge", 0.0));
            } else {
                config_error("/engine/basis/kind", "expected hypercube or polynomial, got '" + kind + "'");
            }
            if (!(c.basis.ridge >= 0.0)) config_error("/engine/basis/ridge", "must be >= 0");
            b.finish();
        }
        e.finish();
    }
    if (r.has("picard")) {
        Reader p(r.raw("picard"), "/picard");
        c.picard.max_iter = p.count("max_iter", c.picard.max_iter);
        c.picard.tol = p.number("tol", c.picard.tol);
        if (c.picard.max_iter < 1) config_error("/picard/max_iter", "must be >= 1");
        if (!(c.picard.tol > 0.0)) config_error("/picard/tol", "must be positive");
        p.finish();
    }
    if (r.has("theta_modes")) {
        const json& modes = r.raw("theta_modes");
        if (!modes.is_array() || modes.empty()) config_error("/theta_modes", "expected a non-empty array");
        c.theta_modes.clear();
        for (const auto& m : modes) {
            if (!m.is_string() || (m != "T" && m != "stopped")) config_error("/theta_modes", "entries must be T or stopped");
            c.theta_modes.push_back(m.get<std::string>());
        }
    }
    if (r.has("output")) {
        Reader o(r.raw("output"), "/output");
        c.out_dir = o.string("dir", c.out_dir.string());
        c.csv_name = o.string("csv", c.csv_name);
        c.summary_name = o.string("summary", c.summary_name);
        o.finish();
    }
    if (r.has("acceptance")) {
        const json& acc = r.raw("acceptance");
        if (acc.is_string()) {
            if (acc != "benchmark") config_error("/acceptance", "expected an array of rules or \"benchmark\"");
            c.benchmark_acceptance = true;
        } else if (acc.is_array()) {
            for (std::size_t k = 0; k < acc.size(); ++k) {
                c.acceptance.push_back(parse_rule(acc[k], "/acceptance/" + std::to_string(k)));
            }
        } else {
            config_error("/acceptance", "expected an array of rules or \"benchmark\"");
        }
    }
    if (r.has("validation")) {
        Reader v(r.raw("validation"), "/validation");
        if (v.has("lipschitz")) c.validator_lipschitz = v.number("lipschitz");
        c.validation_samples = v.count("samples", c.validation_samples);
        c.validation_seed = v.count("seed", c.validation_seed);
        v.finish();
    }
    r.finish();

    if (c.n_paths < 1) config_error("/n_paths", "must be >= 1");
    if (c.chunk < 1) config_error("/chunk", "must be >= 1");
    if (c.validation_samples < 1) config_error("/validation/samples", "must be >= 1");
    if (c.validator_lipschitz && !(*c.validator_lipschitz > 0.0)) config_error("/validation/lipschitz", "must be positive");
    for (std::size_t k = 0; k < c.ladder.size(); ++k) {
        if (c.ladder[k] < 1) config_error("/ladder", "step counts must be >= 1");
        if (k > 0 && c.ladder[k] <= c.ladder[k - 1]) config_error("/ladder", "must be strictly ascending");
    }
    if (c.fine_pass && (c.m_fine < 16 || (c.m_fine & (c.m_fine - 1)) != 0)) {
        config_error("/m_fine", "must be a power of two >= 16");
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw Error(ErrorCode::ConfigError, "cannot open config " + file.string());
    std::ostringstream text;
    text << is.rdbuf();
    return parse_config(text.str(), file.string());
}

void apply_overrides(ExperimentConfig& config, const Overrides& overrides) {
    if (overrides.seed) config.seed = *overrides.seed;
    if (overrides.paths) {
        if (*overrides.paths < 1) config_error("--paths", "must be >= 1");
        config.n_paths = *overrides.paths;
    }
    if (overrides.out_dir) config.out_dir = *overrides.out_dir;
}

Benchmark resolve_problem(const ExperimentConfig& config) {
    if (!config.problem) return make_benchmark(config.benchmark);
    const InlineProblem& ip = *config.problem;
    std::vector<SmoothPiece> pieces;
    for (const auto& pc : ip.pieces) {
        if (pc.kind == "half_space") {
            pieces.push_back(SmoothPiece::half_space(pc.normal, pc.offset));
        } else if (pc.kind == "ball") {
            pieces.push_back(SmoothPiece::ball(pc.center, pc.radius, pc.complement));
        } else {
            pieces.push_back(SmoothPiece::ellipsoid(pc.center, pc.semi_axes));
        }
    }
    ProblemSpec spec;
    spec.name = ip.name;
    spec.dim = ip.dim;
    spec.x0 = ip.x0;
    spec.drift = VectorCoefficient::constant(ip.drift);
    spec.diffusion = MatrixCoefficient::constant(ip.dim, ip.diffusion);
    spec.driver = zero_driver();
    spec.zero_driver = true;
    spec.lipschitz = 1.0;
    const double c0 = ip.terminal_constant;
    const Point a = ip.terminal_linear;
    const auto affine = [c0, a](double, std::span<const double> x) {
        double s = c0;
        for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * x[k];
        return s;
    };
    spec.terminal = affine;
    double drift_along = 0.0;
    for (std::size_t k = 0; k < ip.dim; ++k) drift_along += a[k] * ip.drift[k];
    if (drift_along == 0.0) {
        spec.reference = affine;
        spec.reference_gradient = [a](double, std::span<const double>, std::span<double> out) {
            std::copy(a.begin(), a.end(), out.begin());
        };
    }
    Benchmark b(ip.name, "inline problem", std::move(spec), Domain(std::move(pieces), ip.domain_lipschitz, ip.horizon));
    b.validator_lipschitz = ip.domain_lipschitz;
    // E[g(X_{i+1}) | x] = g(x) + h <a, b>; E[g(X_{i+1}) dW^k | x] = h (a^T sigma)_k.
    const Point drift = ip.drift;
    const std::vector<double> sigma = ip.diffusion;
    const std::size_t d = ip.dim;
    b.oracle = [c0, a, drift, sigma, d](std::size_t, const Grid& grid, std::span<const double> x, int component) {
        const double h = grid.step();
        if (component < 0) {
            double s = c0;
            for (std::size_t k = 0; k < d; ++k) s += a[k] * (x[k] + drift[k] * h);
            return s;
        }
        double s = 0.0;
        for (std::size_t r = 0; r < d; ++r) s += a[r] * sigma[r * d + static_cast<std::size_t>(component)];
        return h * s;
    };
    b.ladder = config.ladder;
    b.n_paths = config.n_paths;
    b.m_fine = config.m_fine;
    return b;
}

CondExpEngine resolve_engine(const ExperimentConfig& config, const Benchmark& problem) {
    if (config.engine == "analytic") {
        if (!problem.oracle) {
            config_error("/engine/mode", "problem '" + problem.name + "' has no closed-form conditional expectations");
        }
        return CondExpEngine::analytic(problem.oracle);
    }
    if (config.engine == "exact_tree") return CondExpEngine::exact_tree();
    return CondExpEngine::regression(config.basis);
}

std::string engine_label(const ExperimentConfig& config) {
    if (config.engine != "regression") return config.engine;
    if (config.basis.kind == BasisKind::Polynomial) return "regression-poly" + std::to_string(config.basis.degree);
    return config.basis.cells_per_axis == 0 ? "regression-cells-auto"
                                            : "regression-cells-" + std::to_string(config.basis.cells_per_axis);
}

void check_config(const ExperimentConfig& config, const Benchmark& problem) {
    const auto ladder = config.ladder.empty() ? problem.ladder : config.ladder;
    if (ladder.empty()) config_error("/ladder", "missing required field");
    for (std::size_t n : ladder) {
        const double h = problem.domain.horizon() / static_cast<double>(n);
        if (!(problem.spec.lipschitz * h < 1.0)) {
            config_error("/ladder", "L*h >= 1 for n = " + std::to_string(n) + "; refine the grid");
        }
    }
    if (config.exact_mode) {
        for (const auto& piece : problem.domain.pieces()) {
            if (piece.kind() != PieceKind::HalfSpace) config_error("/exact_mode", "needs a half-space or interval domain");
        }
        if (problem.domain.dim() > 1 && problem.domain.pieces().size() > 1) {
            config_error("/exact_mode", "needs a single half-space or a 1D interval");
        }
    }
}

RunOutcome run_experiment(const ExperimentConfig& config, std::ostream& log) {
    const Benchmark problem = resolve_problem(config);
    check_config(config, problem);
    const CondExpEngine engine = resolve_engine(config, problem);
    const std::string label = engine_label(config);
    const auto ladder = config.ladder.empty() ? problem.ladder : config.ladder;

    RunOutcome outcome;
    for (std::size_t n : ladder) {
        EntryOptions options;
        options.steps = n;
        options.n_paths = config.n_paths;
        options.m_fine = config.m_fine;
        options.seed = config.seed;
        options.picard = config.picard;
        options.exact_mode = config.exact_mode;
        options.regularity = config.regularity;
        options.fine_pass = config.fine_pass;
        options.chunk = config.chunk;
        const EntryResult entry = run_entry(problem.spec, problem.domain, engine, options, problem.name, label);
        log << problem.name << " n=" << n << " y0=" << fmt_double(entry.discrete.y0.value)
            << " exit_abs_err=" << fmt_double(entry.discrete.exit_abs_err.value)
            << " err2_T=" << fmt_double(entry.discrete.err2_T.value) << '\n';
        outcome.rows.push_back(entry.discrete);
        if (entry.exact) outcome.rows.push_back(*entry.exact);
    }

    std::filesystem::create_directories(config.out_dir);
    outcome.csv = config.out_dir / config.csv_name;
    outcome.summary = config.out_dir / config.summary_name;
    write_report_csv(outcome.csv, outcome.rows);

    std::vector<std::string> modes = {"discrete"};
    if (config.exact_mode) modes.push_back("exact");
    std::vector<std::string> metrics;
    if (config.fine_pass) {
        metrics.push_back("exit_abs_err");
        if (problem.spec.has_reference()) {
            for (const auto& t : config.theta_modes) metrics.push_back(t == "T" ? "err2_T" : "err2_stopped");
            if (config.regularity) {
                metrics.insert(metrics.end(), {"r_y", "r_z", "r_y_plus_r_z"});
            }
        }
    }
    json fits = json::array();
    std::map<std::pair<std::string, std::string>, FitResult> fit_index;
    for (const auto& mode : modes) {
        for (const auto& metric : metrics) {
            FitResult f = try_fit(outcome.rows, metric, mode);
            print_fit(log, problem.name, f);
            if (f.fit) {
                fits.push_back(fit_json(*f.fit, metric, mode));
                outcome.fits.push_back(*f.fit);
            } else {
                fits.push_back(json{{"metric", metric}, {"exit_mode", mode}, {"error", f.error}});
            }
            fit_index.emplace(std::make_pair(metric, mode), std::move(f));
        }
    }

    std::vector<AcceptanceRule> rules = config.acceptance;
    if (config.benchmark_acceptance) {
        for (const auto& w : problem.windows) {
            AcceptanceRule rule;
            rule.metric = w.metric;
            rule.exit_mode = w.exit_mode;
            rule.slope_lower = w.lower;
            rule.slope_upper = w.upper;
            rules.push_back(rule);
        }
    }
    json checks = json::array();
    for (const auto& rule : rules) {
        json check{{"metric", rule.metric}, {"exit_mode", rule.exit_mode}};
        bool passed = false;
        if (rule.slope_lower) {
            check["kind"] = "slope";
            check["window"] = {*rule.slope_lower, *rule.slope_upper};
            auto it = fit_index.find({rule.metric, rule.exit_mode});
            FitResult f = it != fit_index.end() ? it->second : try_fit(outcome.rows, rule.metric, rule.exit_mode);
            if (f.fit) {
                check["observed"] = f.fit->slope;
                passed = f.fit->slope >= *rule.slope_lower && f.fit->slope <= *rule.slope_upper;
            } else {
                check["observed"] = nullptr;
                check["error"] = f.error;
            }
        } else {
            check["kind"] = "target";
            check["n"] = *rule.steps;
            check["target"] = *rule.target;
            check["tolerance"] = rule.tolerance;
            check["observed"] = nullptr;
            for (const auto& row : outcome.rows) {
                if (row.steps != *rule.steps || row.exit_mode != rule.exit_mode) continue;
                const double v = report_metric(row, rule.metric).value;
                check["observed"] = v;
                passed = std::abs(v - *rule.target) <= rule.tolerance;
            }
        }
        check["passed"] = passed;
        outcome.accepted = outcome.accepted && passed;
        log << "acceptance " << rule.metric << " (" << rule.exit_mode << "): " << (passed ? "PASS" : "FAIL") << '\n';
        checks.push_back(check);
    }

    json summary{{"schema_version", kConfigSchemaVersion},
                 {"benchmark", problem.name},
                 {"engine", label},
                 {"seed", config.seed},
                 {"n_paths", config.n_paths},
                 {"m_fine", config.m_fine},
                 {"fits", fits},
                 {"acceptance", checks},
                 {"passed", outcome.accepted}};
    write_json(outcome.summary, summary);
    return outcome;
}

bool validate_experiment(const ExperimentConfig& config, std::ostream& out) {
    const Benchmark problem = resolve_problem(config);
    bool ok = true;
    try {
        check_config(config, problem);
        out << "config: ok\n";
    } catch (const Error& e) {
        out << "config: FAIL " << e.what() << '\n';
        ok = false;
    }
    ValidationOptions options;
    options.n_samples = config.validation_samples;
    options.seed = config.validation_seed;
    const double L = config.validator_lipschitz.value_or(problem.validator_lipschitz);
    const ValidationReport report =
        validate_assumptions(problem.domain, problem.spec.diffusion, L, options, &problem.spec.drift);
    out << "assumption checks for '" << problem.name << "' at L = " << fmt_double(L) << '\n' << report.table();
    ok = ok && report.passed();
    if (problem.spec.has_reference()) {
        const RegistrationCheck reg = check_registration(problem.spec, problem.domain, problem.sample_lower.empty()
                                                                                              ? Point(problem.spec.dim, -2.0)
                                                                                              : problem.sample_lower,
                                                         problem.sample_upper.empty() ? Point(problem.spec.dim, 2.0)
                                                                                      : problem.sample_upper);
        char line[200];
        std::snprintf(line, sizeof line, "%-28s %-10s max %.3g (tol %.0e)\n", "pde residual",
                      reg.max_pde_residual <= reg.pde_tolerance ? "PASS" : "FAIL", reg.max_pde_residual,
                      reg.pde_tolerance);
        out << line;
        std::snprintf(line, sizeof line, "%-28s %-10s max %.3g (tol %.0e)\n", "boundary data g = u",
                      reg.max_boundary_mismatch <= reg.boundary_tolerance ? "PASS" : "FAIL", reg.max_boundary_mismatch,
                      reg.boundary_tolerance);
        out << line;
        ok = ok && reg.passed();
    } else {
        out << "registration: no closed-form reference, skipped\n";
    }
    out << (ok ? "validate: PASS\n" : "validate: FAIL\n");
    return ok;
}

std::vector<SlopeFit> report_csvs(const std::vector<std::filesystem::path>& files,
                                  const std::optional<std::filesystem::path>& out_dir, std::ostream& out) {
    if (files.empty()) throw Error(ErrorCode::InvalidArgument, "report needs at least one CSV file");
    std::map<std::string, std::vector<ErrorReport>> groups;
    std::vector<std::string> order;
    for (const auto& file : files) {
        for (auto& row : read_report_csv(file)) {
            const std::string key = row.benchmark + "/" + row.engine + "/seed" + std::to_string(row.seed);
            if (!groups.count(key)) order.push_back(key);
            groups[key].push_back(std::move(row));
        }
    }
    std::vector<SlopeFit> fits;
    json doc{{"schema_version", kConfigSchemaVersion}, {"groups", json::array()}};
    const std::vector<std::string> metrics = {"exit_abs_err", "err2_T", "err2_stopped", "r_y", "r_z", "r_y_plus_r_z"};
    for (const auto& key : order) {
        auto& rows = groups[key];
        std::stable_sort(rows.begin(), rows.end(), [](const ErrorReport& a, const ErrorReport& b) { return a.h > b.h; });
        json group{{"group", key}, {"fits", json::array()}};
        for (const std::string mode : {"discrete", "exact"}) {
            const bool present =
                std::any_of(rows.begin(), rows.end(), [&](const ErrorReport& r) { return r.exit_mode == mode; });
            if (!present) continue;
            for (const auto& metric : metrics) {
                if (ladder_points(rows, metric, mode).empty()) continue;
                FitResult f = try_fit(rows, metric, mode);
                print_fit(out, key, f);
                if (f.fit) {
                    group["fits"].push_back(fit_json(*f.fit, metric, mode));
                    fits.push_back(*f.fit);
                } else {
                    group["fits"].push_back(json{{"metric", metric}, {"exit_mode", mode}, {"error", f.error}});
                }
            }
        }
        doc["groups"].push_back(group);
    }
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        write_json(*out_dir / "summary.json", doc);
    }
    return fits;
}

}  // namespace exitbsde
