// tactsim: command-line front end for scenario runs, sweeps and coefficient checks

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "tactsim/harness.hpp"

using namespace tactsim;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::string snapshot;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string format;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Scenario load(const Options& o) {
    Scenario s = load_scenario(o.config);
    if (o.seed) s.integrator.seed = *o.seed;
    if (o.format == "json") s.format = OutputFormat::Json;
    if (o.format == "csv") s.format = OutputFormat::Csv;
    if (!o.out.empty()) s.output_path = o.out;
    return s;
}

int thread_count(const Options& o) {
    if (o.threads) return std::max(1, *o.threads);
    if (const char* env = std::getenv("TACTSIM_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void print_json(const nlohmann::json& j, const std::string& out) {
    if (out.empty()) std::cout << j.dump(2) << "\n";
    else write_atomic(out, j.dump(2) + "\n");
}

void report_warnings(const RunRecord& r) {
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

int cmd_run(const Options& o) {
    const Scenario s = load(o);
    const RunRecord r = run_scenario(s);
    report_warnings(r);
    if (s.output_path.empty()) {
        if (s.format == OutputFormat::Json) std::cout << r.to_json().dump(2) << "\n";
        else std::cout << format_csv(r.series);
    } else {
        emit(r, s.format, s.output_path);
        std::cerr << "wrote " << s.output_path.string() << " (" << r.solver << ", " << r.wall_time << " s)\n";
    }
    if (!o.snapshot.empty()) write_snapshot(r, o.snapshot);
    return 0;
}

int cmd_sweep(const Options& o) {
    const Scenario s = load(o);
    if (!s.sweep) fail(ErrorKind::ValidationError, "sweep: scenario has no sweep axis");
    const SweepResult res = run_sweep(s, thread_count(o));
    if (s.output_path.empty()) {
        std::cout << res.to_json().dump(2) << "\n";
    } else {
        emit(res, s.format, s.output_path);
        const auto& p = s.output_path;
        const std::string ext = s.format == OutputFormat::Json ? ".json" : ".csv";
        for (const auto& pt : res.points) {
            if (!pt.record) continue;
            char value[32];
            std::snprintf(value, sizeof value, "%g", pt.value);
            const auto file = p.parent_path() / (p.stem().string() + "_" + res.axis + value + ext);
            emit(*pt.record, s.format, file);
        }
    }
    int failed = 0;
    for (const auto& pt : res.points)
        if (!pt.record) {
            ++failed;
            std::cerr << "point " << res.axis << "=" << pt.value << " failed: " << pt.error << "\n";
        }
    return failed == 0 ? 0 : 2;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tactsim: two-axis counter-twisting and two-mode squeezing simulator"};
    app.require_subcommand(1);
    Options o;

    auto add_config = [&](CLI::App* sub) { sub->add_option("--config", o.config, "scenario JSON file")->required(); };
    auto add_out = [&](CLI::App* sub) { sub->add_option("--out", o.out, "output path (stdout when omitted)"); };

    auto* coeffs = app.add_subcommand("coeffs", "print effective coefficients and the regime report");
    add_config(coeffs);
    add_out(coeffs);

    auto* validate = app.add_subcommand("validate", "check a scenario without running it");
    add_config(validate);

    auto* run = app.add_subcommand("run", "run a scenario");
    add_config(run);
    add_out(run);
    run->add_option("--seed", o.seed, "trajectory seed override");
    run->add_option("--format", o.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    run->add_option("--snapshot", o.snapshot, "dump the final state as binary plus a JSON sidecar");

    auto* sweep = app.add_subcommand("sweep", "run every point of the scenario's sweep axis");
    add_config(sweep);
    add_out(sweep);
    sweep->add_option("--seed", o.seed, "trajectory seed override");
    sweep->add_option("--threads", o.threads, "worker threads (default TACTSIM_THREADS or all cores)");
    sweep->add_option("--format", o.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));

    auto* solve = app.add_subcommand("solve-params", "solve for drive parameters meeting the TACT conditions");
    add_config(solve);
    add_out(solve);

    app.add_subcommand("version", "print the version");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*coeffs) {
            print_json(coeffs_report(load(o)), o.out);
        } else if (*validate) {
            const Scenario s = load(o);
            const BuiltModel b = build_model(s);
            std::cout << "ok " << to_string(s.model) << " dim=" << b.space.dimension() << " hash=" << s.hash() << "\n";
        } else if (*run) {
            return cmd_run(o);
        } else if (*sweep) {
            return cmd_sweep(o);
        } else if (*solve) {
            const auto sol = solve_experimental_params(parse_targets(read_file(o.config), o.config));
            print_json(solution_json(sol), o.out);
        } else {
            std::cout << "tactsim " << TACTSIM_VERSION << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
