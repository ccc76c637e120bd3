#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "hjbcert/spec_io.hpp"

namespace hjbcert::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kInputError = 2, kComputeError = 3, kNotCertified = 4 };

namespace fs = std::filesystem;

inline std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw ComputeError("sha256 failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ArgumentError("cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Write through a temporary file in the same directory, then rename.
inline void atomic_write(const fs::path& path, const std::string& data) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ArgumentError("cannot write '" + tmp.string() + "'");
        out << data;
        out.flush();
        if (!out) throw ComputeError("write to '" + tmp.string() + "' failed");
    }
    fs::rename(tmp, path);
}

/// Everything one invocation reads and writes; serialised as manifest.json.
class RunContext {
public:
    RunContext(std::string subcommand, fs::path out_dir, std::vector<std::string> argv, std::uint64_t seed, int threads)
        : subcommand_(std::move(subcommand)), out_dir_(std::move(out_dir)), argv_(std::move(argv)), seed_(seed),
          threads_(threads) {}

    std::uint64_t seed() const { return seed_; }
    int threads() const { return threads_; }
    const fs::path& out_dir() const { return out_dir_; }

    void stage(std::string s) { stage_ = std::move(s); }
    json& config() { return config_; }

    fs::path input(const std::string& ref) {
        fs::path p(ref);
        inputs_.push_back({{"path", ref}, {"sha256", sha256_hex(slurp(p))}});
        return p;
    }

    void write(const std::string& name, const std::string& data) {
        if (name.empty() || fs::path(name).is_absolute()) throw ArgumentError("output names must be relative to --out-dir");
        atomic_write(out_dir_ / name, data);
        for (auto& o : outputs_)
            if (o["path"] == name) {
                o["sha256"] = sha256_hex(data);
                return;
            }
        outputs_.push_back({{"path", name}, {"sha256", sha256_hex(data)}});
    }

    void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }

    json manifest(int exit_code, const std::string& error) const {
        json m{{"tool", "hjbcert"},
               {"version", kVersion},
               {"subcommand", subcommand_},
               {"argv", argv_},
               {"cwd", fs::current_path().string()},
               {"config", config_},
               {"inputs", inputs_},
               {"seed", seed_},
               {"threads", threads_},
               {"outputs", outputs_},
               {"exit_code", exit_code},
               {"status", exit_code == kOk ? "ok" : exit_code == kNotCertified ? "not-certified" : "failed"}};
        if (!error.empty()) {
            m["error"] = error;
            m["failed_stage"] = stage_;
        }
        return m;
    }

    void write_manifest(int exit_code, const std::string& error) {
        atomic_write(out_dir_ / "manifest.json", manifest(exit_code, error).dump(2) + "\n");
    }

private:
    std::string subcommand_;
    fs::path out_dir_;
    std::vector<std::string> argv_;
    std::uint64_t seed_;
    int threads_;
    std::string stage_ = "setup";
    json config_ = json::object();
    json inputs_ = json::array();
    json outputs_ = json::array();
};

inline std::vector<double> parse_list(const std::string& s, const std::string& what) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            std::size_t pos = 0;
            out.push_back(std::stod(cell, &pos));
            if (pos != cell.size()) throw std::invalid_argument(cell);
        } catch (const std::exception&) {
            throw ArgumentError(what + ": cannot parse '" + cell + "'");
        }
    }
    if (out.empty()) throw ArgumentError(what + ": empty list");
    return out;
}

inline Vec to_vec(const std::vector<double>& v) {
    if (v.empty() || v.size() > static_cast<std::size_t>(kMaxDim)) throw ArgumentError("expected 1 or 2 coordinates");
    Vec x(static_cast<int>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) x[static_cast<int>(i)] = v[i];
    return x;
}

/// "k=v,k=v" into a number map.
inline std::map<std::string, double> parse_params(const std::string& s) {
    std::map<std::string, double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        auto eq = item.find('=');
        if (eq == std::string::npos) throw ArgumentError("--params: expected key=value, got '" + item + "'");
        out[item.substr(0, eq)] = parse_list(item.substr(eq + 1), "--params")[0];
    }
    return out;
}

/// Box from "lo,hi[,lo,hi]".
inline Box parse_box(const std::string& s) {
    auto v = parse_list(s, "--test-box");
    if (v.size() != 2 && v.size() != 4) throw ArgumentError("--test-box: expected lo,hi or lo0,hi0,lo1,hi1");
    std::vector<double> lo, hi;
    for (std::size_t i = 0; i < v.size(); i += 2) {
        lo.push_back(v[i]);
        hi.push_back(v[i + 1]);
    }
    return Box(lo, hi);
}

inline Box box_from_json(const json& j) {
    return Box(io::numbers(io::require(j, "lower", "box"), "box.lower"), io::numbers(io::require(j, "upper", "box"), "box.upper"));
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

/// Spec given inline or as a file reference; returns the JSON and its base directory.
inline std::pair<json, fs::path> load_ref(const json& j, const fs::path& base, RunContext& ctx) {
    if (j.is_string()) {
        fs::path p = io::resolve(base, j.get<std::string>());
        ctx.input(p.string());
        return {io::read_json_file(p), p.parent_path()};
    }
    return {j, base};
}

inline json options_json(const CLI::App& app) {
    json j = json::object();
    for (const CLI::Option* opt : app.get_options()) {
        if (opt->get_name() == "--help") continue;
        const auto& res = opt->results();
        std::string key = opt->get_name();
        if (res.empty()) {
            if (!opt->get_default_str().empty()) j[key] = opt->get_default_str();
        } else if (res.size() == 1) {
            j[key] = res.front();
        } else {
            j[key] = res;
        }
    }
    return j;
}

// ---------------------------------------------------------------------------
// Subcommand options.

struct FaceliftArgs {
    std::string problem, grid, input, out = "ghat.csv", report = "facelift-report.json";
    double verify_tol = 1e-6;
};

struct SolveArgs {
    std::string problem, grid, terminal = "facelift", out = "solution.csv", sidecar = "solution.json";
    std::optional<std::size_t> time_nodes, substeps;
    std::optional<int> control_resolution;
    std::optional<std::string> boundary, constraint_mode;
};

struct SimulateArgs {
    std::string problem, policy, x0, out = "ensemble-summary.json", terminal_csv;
    double t0 = 0.0;
    std::size_t paths = 10000, steps = 64;
};

struct CertifyArgs {
    std::string problem, candidate, kind, test_box, adversary_solution, out = "report.json";
    std::vector<std::string> adversaries;
    std::size_t budget = 100000, steps = 32;
    double z = 4.0, tol = 1e-4;
    bool fail_fast = false;
};

struct BracketArgs {
    std::string sub, super, points, out = "bracket.json";
    std::vector<std::string> policies;
    std::size_t paths = 100000, steps = 64;
};

struct ConvergenceArgs {
    std::string problem, grid, terminal = "facelift", mode = "space_time", oracle_family, oracle_params,
                out = "convergence.json";
    int levels = 3;
};

struct OracleArgs {
    std::string family, params, problem, grid, out = "oracle.csv";
    std::vector<std::string> eval;
    double time = 0.0;
    int fine_factor = 4;
};

struct PipelineArgs {
    std::string spec, out = "pipeline-report.json";
};

// ---------------------------------------------------------------------------
// Subcommand bodies.

struct Loaded {
    json spec;
    ControlProblem problem;
};

inline Loaded load_problem(const std::string& path, RunContext& ctx) {
    json j = io::read_json_file(ctx.input(path));
    ctx.config()["problem"] = j;
    return {j, problem_from_json(j)};
}

inline GridSpec load_grid(const std::string& path, RunContext& ctx) {
    json j = io::read_json_file(ctx.input(path));
    GridSpec g = grid_spec_from_json(j);
    g.scheme.threads = ctx.threads();
    ctx.config()["grid"] = j;
    return g;
}

inline std::string grid_csv(const GridFunction& f) {
    std::ostringstream os;
    write_csv(os, f);
    return os.str();
}

inline int cmd_facelift(const FaceliftArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("load");
    Loaded pr = load_problem(a.problem, ctx);
    GridFunction g;
    FaceliftOptions fo;
    if (!a.input.empty()) {
        g = read_grid_function_file(ctx.input(a.input));
        if (!a.grid.empty()) fo = load_grid(a.grid, ctx).facelift;
    } else {
        if (a.grid.empty()) throw ArgumentError("facelift: need --grid or --input");
        GridSpec gs = load_grid(a.grid, ctx);
        fo = gs.facelift;
        g = make_terminal(pr.problem, gs.grid, TerminalKind::raw);
    }
    ctx.config()["facelift_options"] = to_json(fo);
    ctx.stage("facelift");
    FaceliftStats stats;
    GridFunction w = pr.problem.constraint.kind == ConstraintKind::general ? facelift_general(g, pr.problem, fo, &stats)
                                                                          : facelift(g, pr.problem, fo);
    ctx.write(a.out, grid_csv(w));
    ctx.stage("verify");
    FaceliftReport rep = verify_facelift(w, g, pr.problem, a.verify_tol, {});
    const double dist = sup_distance(w, g);
    json r{{"sup_distance_to_payoff", dist},
           {"verify", to_json(rep)},
           {"iterations", stats.iterations},
           {"last_update", stats.last_update},
           {"relaxation", stats.relaxation},
           {"output", a.out}};
    ctx.write_json(a.report, r);
    out << "facelift: " << w.size() << " nodes, |ghat - g|_sup = " << fmt(dist) << ", verify "
        << (rep.passed() ? "passed" : "FAILED") << "\n";
    return kOk;
}

inline SchemeConfig apply_overrides(SchemeConfig s, const SolveArgs& a) {
    if (a.time_nodes) s.time_nodes = *a.time_nodes;
    if (a.substeps) s.substeps = *a.substeps;
    if (a.control_resolution) s.control_resolution = *a.control_resolution;
    if (a.boundary) s.boundary = boundary_mode_from(*a.boundary);
    if (a.constraint_mode) s.constraint_mode = constraint_mode_from(*a.constraint_mode);
    s.validate();
    return s;
}

inline int cmd_solve(const SolveArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("load");
    Loaded pr = load_problem(a.problem, ctx);
    GridSpec gs = load_grid(a.grid, ctx);
    const SchemeConfig scheme = apply_overrides(gs.scheme, a);
    const TerminalKind kind = terminal_kind_from(a.terminal);
    ctx.config()["scheme"] = to_json(scheme);
    ctx.config()["terminal"] = a.terminal;
    ctx.stage("terminal");
    GridFunction terminal = make_terminal(pr.problem, gs.grid, kind, gs.facelift);
    ctx.stage("solve");
    SpaceTimeSolution sol = solve_hjb(pr.problem, terminal, scheme);
    sol.meta.terminal_label = kind == TerminalKind::facelift ? "facelift" : "raw";
    std::ostringstream csv;
    write_solution_csv(csv, sol);
    ctx.write(a.out, csv.str());
    ctx.write("payoff.csv", grid_csv(sol.payoff));
    json side{{"solution", a.out},
              {"payoff", "payoff.csv"},
              {"terminal_slice", sol.meta.terminal_label},
              {"note", "the row at t = T holds the terminal data used by the scheme; payoff.csv holds g itself"},
              {"scheme", to_json(scheme)},
              {"meta", to_json(sol.meta)},
              {"grid", to_json(sol.grid())},
              {"problem", pr.spec},
              {"facelift_options", to_json(gs.facelift)}};
    ctx.write_json(a.sidecar, side);
    out << "solve: " << sol.times.size() << " time nodes x " << sol.grid().size() << " space nodes, "
        << sol.meta.substeps << " substeps per interval\n";
    return kOk;
}

inline int cmd_simulate(const SimulateArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("load");
    Loaded pr = load_problem(a.problem, ctx);
    const fs::path pol_path = ctx.input(a.policy);
    json pj = io::read_json_file(pol_path);
    if (pj.contains("csv")) ctx.input(io::resolve(pol_path.parent_path(), pj.at("csv").get<std::string>()).string());
    ctx.config()["policy"] = pj;
    FeedbackPolicy pol = policy_from_json(pj, pr.problem, pol_path.parent_path());
    const Vec x0 = to_vec(parse_list(a.x0, "--x0"));
    ctx.stage("simulate");
    SimulationOptions so;
    so.threads = ctx.threads();
    PathEnsemble ens = simulate_paths(pr.problem, pol, a.t0, x0, a.paths, a.steps, ctx.seed(), so);
    ValueEstimate est = estimate_value(ens, pr.problem.payoff);
    GaugeReport gr = gauge_check(ens, pr.problem.gauge);
    Vec mean = Vec::Zero(pr.problem.state_dim);
    for (std::size_t p = 0; p < ens.n_paths; ++p) mean += ens.terminal(p);
    mean /= static_cast<double>(ens.n_paths);
    json s{{"policy", pol.id},
           {"t0", a.t0},
           {"x0", io::vec_json(x0)},
           {"paths", a.paths},
           {"steps", a.steps},
           {"seed", ctx.seed()},
           {"value", to_json(est)},
           {"terminal_mean", io::vec_json(mean)},
           {"gauge", {{"mean_sup", gr.mean_sup}, {"tail_ratio", gr.tail_ratio}, {"heavy_tail", gr.heavy_tail}}}};
    if (!a.terminal_csv.empty()) {
        std::ostringstream os;
        os << std::setprecision(std::numeric_limits<double>::max_digits10);
        for (int i = 0; i < ens.dim; ++i) os << (i ? "," : "") << 'x' << i;
        os << ",exited\n";
        for (std::size_t p = 0; p < ens.n_paths; ++p) {
            const Vec x = ens.terminal(p);
            for (int i = 0; i < x.size(); ++i) os << (i ? "," : "") << x[i];
            os << ',' << (ens.exit_step[p] >= 0 ? 1 : 0) << '\n';
        }
        ctx.write(a.terminal_csv, os.str());
        s["terminal_states"] = a.terminal_csv;
    }
    ctx.write_json(a.out, s);
    out << "simulate: E[g(X_T)] = " << fmt(est.mean) << " +/- " << fmt(est.half_width_95) << " (exit fraction "
        << fmt(est.exit_fraction) << ")\n";
    return kOk;
}

inline TestConfig test_config(const Box& box, std::size_t budget, std::size_t steps, double z, double tol, bool fail_fast,
                              std::uint64_t seed, int threads) {
    TestConfig tc;
    tc.test_box = box;
    tc.paths_per_test = budget;
    tc.steps_per_horizon = steps;
    tc.z = z;
    tc.tol = tol;
    tc.stop_on_first_failure = fail_fast;
    tc.seed = seed;
    tc.threads = threads;
    return tc;
}

inline int cmd_certify(const CertifyArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("load");
    Loaded pr = load_problem(a.problem, ctx);
    const fs::path cpath = ctx.input(a.candidate);
    json cj = io::read_json_file(cpath);
    if (cj.contains("csv")) ctx.input(io::resolve(cpath.parent_path(), cj.at("csv").get<std::string>()).string());
    if (!a.kind.empty()) {
        if (cj.contains("kind") && cj.at("kind") != a.kind)
            throw ArgumentError("certify: --kind " + a.kind + " contradicts the candidate file");
        cj["kind"] = a.kind;
    }
    ctx.config()["candidate"] = cj;
    CandidateFunction w = candidate_from_json(cj, pr.problem, cpath.parent_path());
    Box box;
    if (!a.test_box.empty()) box = parse_box(a.test_box);
    else if (cj.contains("test_box")) box = box_from_json(cj.at("test_box"));
    else throw ArgumentError("certify: need --test-box or a test_box in the candidate");
    TestConfig tc = test_config(box, a.budget, a.steps, a.z, a.tol, a.fail_fast, ctx.seed(), ctx.threads());
    ctx.config()["test"] = to_json(tc);
    ctx.stage("certify");
    CertificationReport rep;
    if (w.kind == CandidateKind::sub) {
        rep = certify_subsolution(w, pr.problem, tc);
    } else {
        AdversaryConfig adv;
        if (!a.adversary_solution.empty())
            adv.policies.push_back(read_table_file(ctx.input(a.adversary_solution)).policy("hjb-argmax"));
        for (const auto& p : a.adversaries) {
            const fs::path pp = ctx.input(p);
            adv.policies.push_back(policy_from_json(io::read_json_file(pp), pr.problem, pp.parent_path()));
        }
        rep = certify_supersolution(w, pr.problem, tc, adv);
    }
    json rj = to_json(rep);
    rj["problem_spec"] = pr.spec;
    rj["candidate_spec"] = absolutize(cj, cpath.parent_path());
    ctx.write_json(a.out, rj);
    out << "certify: " << rep.candidate << " (" << to_string(rep.kind) << "): " << rep.verdict << "\n";
    for (const auto* t : rep.failing())
        out << "  failing: " << t->label() << " margin " << fmt(t->margin) << " < " << fmt(t->threshold) << "\n";
    return rep.passed ? kOk : kNotCertified;
}

inline int cmd_bracket(const BracketArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("load");
    json sj = io::read_json_file(ctx.input(a.sub));
    json uj = io::read_json_file(ctx.input(a.super));
    if (!sj.contains("problem_spec") || !uj.contains("problem_spec") || !sj.contains("candidate_spec") ||
        !uj.contains("candidate_spec"))
        throw ArgumentError("bracket: reports must embed problem_spec and candidate_spec");
    if (sj.at("problem_spec") != uj.at("problem_spec")) throw ArgumentError("bracket: reports refer to different problems");
    ControlProblem problem = problem_from_json(sj.at("problem_spec"));
    for (const json* cs : {&sj.at("candidate_spec"), &uj.at("candidate_spec")})
        if (cs->contains("csv")) ctx.input(cs->at("csv").get<std::string>());
    CandidateFunction sub = candidate_from_json(sj.at("candidate_spec"), problem);
    CandidateFunction sup = candidate_from_json(uj.at("candidate_spec"), problem);
    std::ifstream pin(ctx.input(a.points));
    auto points = read_points_csv(pin);
    BracketConfig bc;
    bc.n_paths = a.paths;
    bc.steps_per_horizon = a.steps;
    bc.seed = ctx.seed();
    bc.threads = ctx.threads();
    for (const auto& p : a.policies) {
        const fs::path pp = ctx.input(p);
        bc.policies.push_back(policy_from_json(io::read_json_file(pp), problem, pp.parent_path()));
    }
    ctx.config()["bracket"] = {{"paths", bc.n_paths}, {"steps_per_horizon", bc.steps_per_horizon}, {"tol", bc.tol}};
    ctx.stage("bracket");
    BracketReport rep = bracket_report(sub, report_summary_from_json(sj), sup, report_summary_from_json(uj), problem, points, bc);
    ctx.write_json(a.out, to_json(rep));
    out << "bracket: " << rep.points.size() << " points, max gap " << fmt(rep.max_gap) << ", "
        << (rep.passed ? "ordered" : "NOT ordered") << "\n";
    return rep.passed ? kOk : kNotCertified;
}

inline int cmd_convergence(const ConvergenceArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("load");
    Loaded pr = load_problem(a.problem, ctx);
    GridSpec gs = load_grid(a.grid, ctx);
    RefineMode mode;
    if (a.mode == "space_time") mode = RefineMode::space_time;
    else if (a.mode == "space") mode = RefineMode::space;
    else if (a.mode == "time") mode = RefineMode::time;
    else throw ConfigError("convergence: unknown mode '" + a.mode + "'");
    std::function<double(double, const Vec&)> oracle;
    if (!a.oracle_family.empty()) {
        OracleSpec o{a.oracle_family, parse_params(a.oracle_params)};
        o.validate();
        oracle = [o](double t, const Vec& x) { return o(t, x); };
    }
    ctx.stage("convergence");
    ConvergenceReport rep =
        convergence_study(pr.problem, gs.grid, terminal_kind_from(a.terminal), gs.scheme, a.levels, mode, oracle);
    ctx.write_json(a.out, to_json(rep));
    for (const auto& l : rep.levels)
        out << "convergence: n=" << l.space_nodes << " N=" << l.time_nodes << " diff=" << fmt(l.diff_to_previous)
            << " oracle_err=" << fmt(l.oracle_error) << "\n";
    return kOk;
}

inline int cmd_oracle(const OracleArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("oracle");
    if (a.family == "dense") {
        if (a.problem.empty() || a.grid.empty()) throw ArgumentError("oracle: dense reference needs --problem and --grid");
        Loaded pr = load_problem(a.problem, ctx);
        GridSpec gs = load_grid(a.grid, ctx);
        GridFunction ref = dense_reference(pr.problem, gs.grid, gs.scheme, a.fine_factor);
        ctx.write(a.out, grid_csv(ref));
        for (const auto& e : a.eval) {
            auto v = parse_list(e, "--eval");
            out << fmt(ref.at(to_vec(std::vector<double>(v.begin() + 1, v.end())))) << "\n";
        }
        return kOk;
    }
    OracleSpec o{a.family, parse_params(a.params)};
    o.validate();
    ctx.config()["oracle"] = {{"family", o.family}, {"params", o.params}};
    json values = json::array();
    for (const auto& e : a.eval) {
        auto v = parse_list(e, "--eval");
        if (v.size() < 2) throw ArgumentError("--eval: expected t,x[,x1]");
        const double val = o(v[0], to_vec(std::vector<double>(v.begin() + 1, v.end())));
        out << fmt(val) << "\n";
        values.push_back({{"at", v}, {"value", val}});
    }
    if (!a.grid.empty()) {
        GridSpec gs = load_grid(a.grid, ctx);
        GridFunction f = GridFunction::sample(gs.grid, [&](const Vec& x) { return o(a.time, x); });
        ctx.write(a.out, grid_csv(f));
    }
    if (!values.empty()) ctx.write_json("oracle.json", {{"family", o.family}, {"values", values}});
    return kOk;
}

// ---------------------------------------------------------------------------
// Pipeline: facelift -> solve -> policy -> simulate -> certify -> bracket.

inline int cmd_pipeline(const PipelineArgs& a, RunContext& ctx, std::ostream& out) {
    ctx.stage("load");
    const fs::path spec_path = ctx.input(a.spec);
    const json spec = io::read_json_file(spec_path);
    const fs::path base = spec_path.parent_path();
    auto [pj, pbase] = load_ref(io::require(spec, "problem", "pipeline"), base, ctx);
    auto [gj, gbase] = load_ref(io::require(spec, "grid", "pipeline"), base, ctx);
    (void)pbase;
    (void)gbase;
    const ControlProblem problem = problem_from_json(pj);
    GridSpec gs = grid_spec_from_json(gj);
    gs.scheme.threads = ctx.threads();
    const TerminalKind tk = terminal_kind_from(spec.value("terminal", "facelift"));
    std::vector<std::pair<double, Vec>> points;
    if (spec.contains("points_csv")) {
        std::ifstream in(ctx.input(io::resolve(base, spec.at("points_csv").get<std::string>()).string()));
        points = read_points_csv(in);
    } else {
        for (const auto& p : io::require(spec, "points", "pipeline")) {
            auto v = io::numbers(p, "pipeline.points");
            if (v.size() < 2) throw ArgumentError("pipeline: points are [t, x0(, x1)]");
            points.emplace_back(v[0], to_vec(std::vector<double>(v.begin() + 1, v.end())));
        }
    }
    const json cert = spec.value("certify", json::object());
    const json sim = spec.value("simulate", json::object());
    const json br = spec.value("bracket", json::object());
    const Box test_box = box_from_json(io::require(spec, "test_box", "pipeline"));
    const TestConfig tc = test_config(test_box, cert.value("budget", std::size_t{20000}), cert.value("steps", std::size_t{32}),
                                      io::number_or(cert, "z", 4.0, "certify"), io::number_or(cert, "tol", 1e-4, "certify"),
                                      cert.value("fail_fast", false), ctx.seed(), ctx.threads());
    ctx.config() = {{"problem", pj}, {"grid", gj}, {"scheme", to_json(gs.scheme)}, {"test", to_json(tc)}, {"spec", spec}};
    json report{{"problem", problem.name}, {"stages", json::object()}};

    ctx.stage("facelift");
    GridFunction g = make_terminal(problem, gs.grid, TerminalKind::raw);
    GridFunction ghat = tk == TerminalKind::facelift ? facelift(g, problem, gs.facelift) : g;
    ctx.write("ghat.csv", grid_csv(ghat));
    report["stages"]["facelift"] = {{"sup_distance_to_payoff", sup_distance(ghat, g)}, {"terminal", to_string(tk)}};

    ctx.stage("solve");
    SpaceTimeSolution sol = solve_hjb(problem, ghat, gs.scheme);
    sol.meta.terminal_label = to_string(tk);
    const SolutionTable table = tabulate(sol);
    {
        std::ostringstream csv;
        write_table_csv(csv, table);
        ctx.write("solution.csv", csv.str());
    }
    json layer = json::object();
    if (sol.times.size() >= 2) {
        const GridFunction& before = sol.slices[sol.slices.size() - 2];
        double to_ghat = 0.0, to_g = 0.0;
        for (std::size_t k = 0; k < before.size(); ++k) {
            if (!before.grid.in_trust_region(k)) continue;
            to_ghat = std::max(to_ghat, std::abs(before[k] - ghat[k]));
            to_g = std::max(to_g, std::abs(before[k] - g[k]));
        }
        layer = {{"t", sol.times[sol.times.size() - 2]}, {"sup_to_ghat", to_ghat}, {"sup_to_g", to_g}};
    }
    report["stages"]["solve"] = {{"meta", to_json(sol.meta)}, {"terminal_layer", layer}};

    ctx.stage("simulate");
    const FeedbackPolicy hjb_policy = table.policy("hjb-argmax");
    json sims = json::array();
    std::vector<ValueEstimate> mc(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& [t, x] = points[i];
        SimulationOptions so;
        so.threads = ctx.threads();
        so.store_paths = false;
        PathEnsemble ens = simulate_paths(problem, hjb_policy, t, x, sim.value("paths", std::size_t{100000}),
                                          sim.value("steps", std::size_t{64}), stream_seed(ctx.seed(), 21, i), so);
        mc[i] = estimate_value(ens, problem.payoff);
        sims.push_back({{"t", t}, {"x", io::vec_json(x)}, {"solver", sol.value_at(t, x)}, {"mc", to_json(mc[i])}});
    }
    report["stages"]["simulate"] = sims;

    ctx.stage("certify");
    std::vector<CandidateFunction> subs, supers;
    json certs = json::array();
    AdversaryConfig adv;
    adv.policies.push_back(hjb_policy);
    auto run_cert = [&](const CandidateFunction& w, const std::string& file) {
        CertificationReport rep = w.kind == CandidateKind::sub ? certify_subsolution(w, problem, tc)
                                                               : certify_supersolution(w, problem, tc, adv);
        ctx.write_json(file, to_json(rep));
        certs.push_back({{"candidate", w.name}, {"kind", to_string(w.kind)}, {"passed", rep.passed}, {"verdict", rep.verdict}, {"report", file}});
        if (rep.passed) (w.kind == CandidateKind::sub ? subs : supers).push_back(w);
        out << "pipeline: " << w.name << " (" << to_string(w.kind) << "): " << rep.verdict << "\n";
    };
    run_cert(table_candidate(table, problem, CandidateKind::sub, "solver-sub"), "certify-solver-sub.json");
    run_cert(table_candidate(table, problem, CandidateKind::super, "solver-super"), "certify-solver-super.json");
    if (spec.contains("candidates")) {
        std::size_t i = 0;
        for (const auto& cj : spec.at("candidates")) {
            if (cj.contains("csv")) ctx.input(io::resolve(base, cj.at("csv").get<std::string>()).string());
            run_cert(candidate_from_json(cj, problem, base), "certify-candidate-" + std::to_string(i++) + ".json");
        }
    }
    report["stages"]["certify"] = certs;

    ctx.stage("bracket");
    int code = kOk;
    if (subs.empty() || supers.empty()) {
        report["stages"]["bracket"] = {{"passed", false}, {"reason", "no certified candidate on one side"}};
        code = kNotCertified;
    } else {
        CandidateFunction sub = subs.front(), sup = supers.front();
        for (std::size_t i = 1; i < subs.size(); ++i) sub = lattice_max(sub, subs[i]);
        for (std::size_t i = 1; i < supers.size(); ++i) sup = lattice_min(sup, supers[i]);
        CertificationReport sr, ur;
        sr.candidate = sub.name;
        sr.kind = CandidateKind::sub;
        ur.candidate = sup.name;
        ur.kind = CandidateKind::super;
        BracketConfig bc;
        bc.n_paths = br.value("paths", std::size_t{100000});
        bc.steps_per_horizon = br.value("steps", std::size_t{64});
        bc.seed = stream_seed(ctx.seed(), 31, 0);
        bc.threads = ctx.threads();
        bc.policies.push_back(hjb_policy);
        BracketReport rep = bracket_report(sub, sr, sup, ur, problem, points, bc);
        report["stages"]["bracket"] = to_json(rep);
        if (!rep.passed) code = kNotCertified;
    }
    if (spec.contains("oracle")) {
        const json& oj = spec.at("oracle");
        OracleSpec o{oj.at("family").get<std::string>(), {}};
        const json params = oj.value("params", json::object());
        for (auto it = params.begin(); it != params.end(); ++it) o.params[it.key()] = io::number(it.value(), "oracle.params");
        o.validate();
        json errs = json::array();
        for (const auto& [t, x] : points) {
            const double ref = o(t, x), v = sol.value_at(t, x);
            errs.push_back({{"t", t}, {"x", io::vec_json(x)}, {"oracle", ref}, {"solver", v}, {"relative_error", (v - ref) / ref}});
        }
        report["oracle"] = errs;
    }
    report["passed"] = code == kOk;
    ctx.write_json(a.out, report);
    out << "pipeline: " << (code == kOk ? "sandwich certified" : "NOT certified") << "\n";
    return code;
}

// ---------------------------------------------------------------------------
// Entry point.

inline std::vector<std::string> strip_run_flags(const std::vector<std::string>& args) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& s = args[i];
        if (s == "--out-dir" || s == "--manifest") {
            ++i;
            continue;
        }
        if (s.rfind("--out-dir=", 0) == 0 || s.rfind("--manifest=", 0) == 0) continue;
        out.push_back(s);
    }
    return out;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

namespace detail {

/// Re-run the invocation recorded in a manifest into a new output directory
/// and compare output hashes.
inline int replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out, std::ostream& err) {
    const json m = io::read_json_file(manifest_path);
    const fs::path target = fs::absolute(out_dir).lexically_normal();
    if (fs::absolute(manifest_path).lexically_normal().parent_path() == target.lexically_normal())
        throw ArgumentError("replay: choose an --out-dir different from the recorded one");
    std::vector<std::string> args = m.at("argv").get<std::vector<std::string>>();
    args.push_back("--out-dir");
    args.push_back(target.string());
    const fs::path here = fs::current_path();
    fs::current_path(m.at("cwd").get<std::string>());
    int code;
    try {
        code = run(args, out, err);
    } catch (...) {
        fs::current_path(here);
        throw;
    }
    fs::current_path(here);
    json fresh = io::read_json_file(target / "manifest.json");
    std::map<std::string, std::string> want;
    for (const auto& o : m.at("outputs")) want[o.at("path")] = o.at("sha256");
    std::size_t same = 0;
    json diffs = json::array();
    for (const auto& o : fresh.at("outputs")) {
        auto it = want.find(o.at("path"));
        if (it != want.end() && it->second == o.at("sha256")) ++same;
        else diffs.push_back(o.at("path"));
    }
    const bool match = diffs.empty() && same == want.size() && code == m.at("exit_code").get<int>();
    fresh["replay_of"] = fs::absolute(manifest_path).string();
    fresh["replay_matches"] = match;
    fresh["replay_differences"] = diffs;
    atomic_write(target / "manifest.json", fresh.dump(2) + "\n");
    out << "replay: " << same << "/" << want.size() << " outputs identical" << (match ? "" : " (MISMATCH)") << "\n";
    if (!match) {
        err << "replay: outputs differ from the recorded run\n";
        return kComputeError;
    }
    return code;
}

}  // namespace detail

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"hjbcert: constrained HJB solver and Monte-Carlo sub/super-solution certifier", "hjbcert"};
    app.fallthrough();
    app.require_subcommand(0, 1);
    std::uint64_t seed = 1;
    int threads = 1;
    std::string out_dir = ".";
    std::string manifest;
    app.add_option("--seed", seed, "Base random seed")->capture_default_str();
    app.add_option("--threads", threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--out-dir", out_dir, "Directory receiving all outputs and manifest.json")->capture_default_str();
    app.add_option("--manifest", manifest, "Replay the run recorded in this manifest into --out-dir");
    app.set_version_flag("--version", kVersion);

    FaceliftArgs fa;
    auto* f = app.add_subcommand("facelift", "Face-lift the payoff on a grid");
    f->add_option("--problem", fa.problem, "Problem JSON")->required();
    f->add_option("--grid", fa.grid, "Grid JSON");
    f->add_option("--input", fa.input, "Payoff values as GridFunction CSV (replaces sampling g on --grid)");
    f->add_option("--out", fa.out, "Face-lifted CSV")->capture_default_str();
    f->add_option("--report", fa.report, "Verification report JSON")->capture_default_str();
    f->add_option("--verify-tol", fa.verify_tol, "Tolerance of the verification checks")->capture_default_str();

    SolveArgs sa;
    auto* s = app.add_subcommand("solve", "Solve the constrained HJB equation backward in time");
    s->add_option("--problem", sa.problem, "Problem JSON")->required();
    s->add_option("--grid", sa.grid, "Grid JSON")->required();
    s->add_option("--terminal", sa.terminal, "raw or facelift")->capture_default_str()->check(CLI::IsMember({"raw", "facelift"}));
    s->add_option("--out", sa.out, "Solution CSV")->capture_default_str();
    s->add_option("--sidecar", sa.sidecar, "Configuration echo JSON")->capture_default_str();
    s->add_option("--time-nodes", sa.time_nodes, "Output time nodes");
    s->add_option("--substeps", sa.substeps, "Explicit steps per output interval (0 = CFL)");
    s->add_option("--control-resolution", sa.control_resolution, "Control grid points per axis");
    s->add_option("--boundary", sa.boundary, "dirichlet or gauge")->check(CLI::IsMember({"dirichlet", "gauge"}));
    s->add_option("--constraint-mode", sa.constraint_mode, "project, penalize or none")
        ->check(CLI::IsMember({"project", "penalize", "none"}));

    SimulateArgs ma;
    auto* m = app.add_subcommand("simulate", "Simulate the controlled SDE under a feedback policy");
    m->add_option("--problem", ma.problem, "Problem JSON")->required();
    m->add_option("--policy", ma.policy, "Policy JSON")->required();
    m->add_option("--t0", ma.t0, "Start time")->capture_default_str();
    m->add_option("--x0", ma.x0, "Start state x0[,x1]")->required();
    m->add_option("--paths", ma.paths, "Number of paths")->capture_default_str();
    m->add_option("--steps", ma.steps, "Euler steps to T")->capture_default_str();
    m->add_option("--out", ma.out, "Summary JSON")->capture_default_str();
    m->add_option("--terminal-csv", ma.terminal_csv, "Also write terminal states to this CSV");

    CertifyArgs ca;
    auto* c = app.add_subcommand("certify", "Monte-Carlo certification of a sub- or super-candidate");
    c->add_option("--problem", ca.problem, "Problem JSON")->required();
    c->add_option("--candidate", ca.candidate, "Candidate JSON")->required();
    c->add_option("--kind", ca.kind, "sub or super (overrides the candidate file)")->check(CLI::IsMember({"sub", "super"}));
    c->add_option("--budget", ca.budget, "Paths per battery test")->capture_default_str();
    c->add_option("--steps", ca.steps, "Euler steps per horizon (multiple of 8)")->capture_default_str();
    c->add_option("--z", ca.z, "Standard errors allowed below zero")->capture_default_str();
    c->add_option("--tol", ca.tol, "Absolute tolerance")->capture_default_str();
    c->add_option("--test-box", ca.test_box, "Start region lo,hi[,lo,hi]");
    c->add_flag("--fail-fast", ca.fail_fast, "Skip remaining tests after the first failure");
    c->add_option("--adversary", ca.adversaries, "Extra adversary policy JSON (super only)");
    c->add_option("--adversary-solution", ca.adversary_solution, "Solver CSV whose argmax policy joins the adversaries");
    c->add_option("--out", ca.out, "Report JSON")->capture_default_str();

    BracketArgs ba;
    auto* b = app.add_subcommand("bracket", "Sandwich report from certified sub and super reports");
    b->add_option("--sub", ba.sub, "Passing sub-candidate report")->required();
    b->add_option("--super", ba.super, "Passing super-candidate report")->required();
    b->add_option("--points", ba.points, "Points CSV (t,x0[,x1])")->required();
    b->add_option("--policy", ba.policies, "Extra policy JSON tried for the Monte-Carlo value");
    b->add_option("--paths", ba.paths, "Paths per point")->capture_default_str();
    b->add_option("--steps", ba.steps, "Euler steps per horizon")->capture_default_str();
    b->add_option("--out", ba.out, "Report JSON")->capture_default_str();

    ConvergenceArgs va;
    auto* v = app.add_subcommand("convergence", "Dyadic refinement study of the solver");
    v->add_option("--problem", va.problem, "Problem JSON")->required();
    v->add_option("--grid", va.grid, "Base grid JSON")->required();
    v->add_option("--terminal", va.terminal, "raw or facelift")->capture_default_str()->check(CLI::IsMember({"raw", "facelift"}));
    v->add_option("--levels", va.levels, "Number of levels (>= 2)")->capture_default_str();
    v->add_option("--mode", va.mode, "space_time, space or time")->capture_default_str();
    v->add_option("--oracle-family", va.oracle_family, "Closed-form oracle for absolute errors");
    v->add_option("--oracle-params", va.oracle_params, "Oracle parameters k=v,...");
    v->add_option("--out", va.out, "Report JSON")->capture_default_str();

    OracleArgs oa;
    auto* o = app.add_subcommand("oracle", "Evaluate a closed-form or dense reference solution");
    o->add_option("--family", oa.family, "merton, heat, constant or dense")->required();
    o->add_option("--params", oa.params, "Parameters k=v,...");
    o->add_option("--eval", oa.eval, "Evaluation point t,x[,x1]");
    o->add_option("--grid", oa.grid, "Grid JSON for a reference CSV");
    o->add_option("--time", oa.time, "Time of the reference CSV")->capture_default_str();
    o->add_option("--problem", oa.problem, "Problem JSON (dense family)");
    o->add_option("--fine-factor", oa.fine_factor, "Refinement factor (dense family)")->capture_default_str();
    o->add_option("--out", oa.out, "Reference CSV")->capture_default_str();

    PipelineArgs pa;
    auto* p = app.add_subcommand("pipeline", "facelift, solve, simulate, certify and bracket in one run");
    p->add_option("--spec", pa.spec, "Pipeline JSON")->required();
    p->add_option("--out", pa.out, "Consolidated report JSON")->capture_default_str();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kInputError;
    }

    CLI::App* sub = nullptr;
    for (CLI::App* cand : {f, s, m, c, b, v, o, p})
        if (cand->parsed()) sub = cand;
    if (!manifest.empty()) {
        try {
            return detail::replay(manifest, out_dir, out, err);
        } catch (const std::exception& e) {
            err << "error: " << e.what() << "\n";
            return kInputError;
        }
    }
    if (!sub) {
        err << app.help();
        return kInputError;
    }

    RunContext ctx(sub->get_name(), out_dir, strip_run_flags(args), seed, threads);
    int code = kOk;
    std::string error;
    try {
        ctx.config()["options"] = options_json(*sub);
        fs::create_directories(out_dir);
        const std::string name = sub->get_name();
        if (name == "facelift") code = cmd_facelift(fa, ctx, out);
        else if (name == "solve") code = cmd_solve(sa, ctx, out);
        else if (name == "simulate") code = cmd_simulate(ma, ctx, out);
        else if (name == "certify") code = cmd_certify(ca, ctx, out);
        else if (name == "bracket") code = cmd_bracket(ba, ctx, out);
        else if (name == "convergence") code = cmd_convergence(va, ctx, out);
        else if (name == "oracle") code = cmd_oracle(oa, ctx, out);
        else code = cmd_pipeline(pa, ctx, out);
    } catch (const InputError& e) {
        code = kInputError;
        error = e.what();
    } catch (const json::exception& e) {
        code = kInputError;
        error = e.what();
    } catch (const fs::filesystem_error& e) {
        code = kInputError;
        error = e.what();
    } catch (const std::exception& e) {
        code = kComputeError;
        error = e.what();
    }
    if (!error.empty()) err << "error: " << error << "\n";
    try {
        ctx.write_manifest(code, error);
    } catch (const std::exception& e) {
        err << "error: cannot write manifest: " << e.what() << "\n";
        if (code == kOk) code = kComputeError;
    }
    return code;
}

inline int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args);
}

}  // namespace hjbcert::cli
