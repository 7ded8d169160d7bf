#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tactsim/harness.hpp"
#include "test_util.hpp"

using namespace tactsim;
using testutil::kind_of;
namespace fs = std::filesystem;

namespace {

const char* kMinimalLmg = R"({
  "model": "lmg",
  "params": {"N": 10, "c_x": 1.0, "c_y": 1.0},
  "integrator": {"t_final": 1.0, "n_output": 11}
})";

std::string error_text(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("tactsim_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

Scenario mcwf_scenario() {
    return parse_scenario(R"({
      "model": "lmg",
      "params": {"N": 4, "basis": "atoms", "A": 2e6, "B": 2e6, "delta": 1e8, "gamma": 1e8},
      "dissipation": {"kappa": 4e7},
      "integrator": {"t_final": 2e-4, "n_output": 21, "solver": "mcwf", "n_traj": 40, "seed": 11},
      "observables": ["xi2", "mean_sz"]
    })");
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(TACTSIM_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("scenario validation") {
    SUBCASE("minimal counter-twisting scenario") {
        const auto s = parse_scenario(kMinimalLmg);
        CHECK(s.model == ModelKind::Lmg);
        CHECK(s.spin.atoms == 10);
        CHECK(s.integrator.n_output == 11);
        CHECK(build_model(s).space.dimension() == 11);
    }
    SUBCASE("missing spin of the left mode") {
        const auto msg = error_text([] {
            parse_scenario(R"({"model": "tmss", "params": {"S_R": 5, "J": 0.1}, "integrator": {"t_final": 1}})");
        });
        CHECK(msg.find("ValidationError") != std::string::npos);
        CHECK(msg.find("S_L") != std::string::npos);
    }
    SUBCASE("duplicate key") {
        CHECK(kind_of([] {
                  parse_scenario(R"({"model": "lmg", "model": "oat", "params": {"N": 2, "chi": 1},
                                     "integrator": {"t_final": 1}})");
              }) == ErrorKind::ParseError);
    }
    SUBCASE("unknown key names its path") {
        const auto msg = error_text([] {
            parse_scenario(R"({"model": "lmg", "params": {"N": 2, "c_x": 1, "c_y": 1, "cx": 3},
                               "integrator": {"t_final": 1}})");
        });
        CHECK(msg.find("ValidationError") != std::string::npos);
        CHECK(msg.find("params.cx") != std::string::npos);
    }
    SUBCASE("syntax errors carry line and column") {
        const auto msg = error_text([] { parse_scenario("{\n  \"model\": \"lmg\",\n  \"params\": {,}\n}", "bad.json"); });
        CHECK(msg.find("ParseError") != std::string::npos);
        CHECK(msg.find("bad.json:3:") != std::string::npos);
    }
    SUBCASE("non-finite and inconsistent values") {
        CHECK(kind_of([] {
                  parse_scenario(R"({"model": "lmg", "params": {"N": 2, "c_x": 1, "c_y": 1},
                                     "integrator": {"t_final": -1}})");
              }) == ErrorKind::ValidationError);
        CHECK(kind_of([] {
                  parse_scenario(R"({"model": "tmss", "params": {"S_L": 5, "S_R": 5},
                                     "dissipation": {"kappa": 1}, "integrator": {"t_final": 1}})");
              }) == ErrorKind::ValidationError);
        CHECK(kind_of([] {
                  parse_scenario(R"({"model": "oat", "params": {"N": 2, "chi": 1}, "comparator": "lmg",
                                     "integrator": {"t_final": 1}})");
              }) == ErrorKind::ValidationError);
    }
}

TEST_CASE("scenario hash") {
    const auto a = parse_scenario(kMinimalLmg);
    const auto b = parse_scenario(R"({"integrator": {"n_output": 11, "t_final": 1.0},
        "params": {"c_y": 1.0, "c_x": 1.0, "N": 10},    "model": "lmg"})");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 64);
    const auto c = parse_scenario(R"({"model": "lmg", "params": {"N": 10, "c_x": 1.0, "c_y": 1.5},
        "integrator": {"t_final": 1.0, "n_output": 11}})");
    CHECK(a.hash() != c.hash());
    const auto d = parse_scenario(R"({"model": "lmg", "params": {"N": 10, "c_x": 1.0, "c_y": 1.0},
        "integrator": {"t_final": 1.0, "n_output": 11}, "output": {"path": "elsewhere.csv"}})");
    CHECK(a.hash() == d.hash());
    auto e = a;
    e.integrator.seed = 3;
    CHECK(a.hash() != e.hash());
}

TEST_CASE("zero-duration run") {
    const auto s = parse_scenario(R"({"model": "lmg", "params": {"N": 6, "c_x": 1, "c_y": 1},
        "integrator": {"t_final": 0}})");
    const auto r = run_scenario(s);
    REQUIRE(r.series.times.size() == 1);
    CHECK(r.series.times[0] == 0.0);
    CHECK(r.series.channel("xi2")[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.series.channel("fidelity")[0] == doctest::Approx(1.0));
}

TEST_CASE("CSV and JSON emission") {
    const auto dir = scratch_dir("emit");
    TimeSeries ts;
    ts.times = {0.0, 0.5, 1.0};
    ts.add("a", {1.0 / 3.0, 2.0, 3.0});
    ts.add("b", {-1.0, 0.1, 1e-300});
    const std::string csv = format_csv(ts);
    CHECK(count_lines(csv) == 4);
    CHECK(csv.find('\r') == std::string::npos);
    CHECK(csv.rfind("t,a,b\n", 0) == 0);
    CHECK(csv.find("0.33333333333333331") != std::string::npos);

    const auto s = parse_scenario(kMinimalLmg);
    const auto r = run_scenario(s);
    emit(r, OutputFormat::Csv, dir / "run.csv");
    CHECK(count_lines(slurp(dir / "run.csv")) == r.series.times.size() + 1);
    const auto meta = nlohmann::json::parse(slurp(dir / "run.csv.meta.json"));
    CHECK(meta.dump().find(s.hash()) != std::string::npos);

    emit(r, OutputFormat::Json, dir / "run.json");
    const auto j = nlohmann::json::parse(slurp(dir / "run.json"));
    CHECK(j.at("scenario_hash") == s.hash());
    for (const auto& name : r.series.names) {
        const auto back = j.at("channels").at(name).get<std::vector<double>>();
        CHECK(back == r.series.channel(name));
    }
    CHECK(j.at("times").get<std::vector<double>>() == r.series.times);
    for (const auto& entry : fs::directory_iterator(dir)) CHECK(entry.path().extension() != ".tmp");
}

TEST_CASE("emission failures are I/O errors") {
    const auto r = run_scenario(parse_scenario(kMinimalLmg));
    CHECK(kind_of([&] { emit(r, OutputFormat::Csv, "/dev/null/blocked/run.csv"); }) == ErrorKind::IoError);
    CHECK(exit_code(ErrorKind::IoError) == 3);
    CHECK(exit_code(ErrorKind::ValidationError) == 1);
    CHECK(exit_code(ErrorKind::ParseError) == 1);
    CHECK(exit_code(ErrorKind::TraceDrift) == 2);
    CHECK(exit_code(ErrorKind::NoConvergence) == 2);
}

TEST_CASE("final-state snapshot") {
    const auto dir = scratch_dir("snapshot");
    const auto r = run_scenario(parse_scenario(kMinimalLmg));
    write_snapshot(r, dir / "psi.bin");
    CHECK(fs::file_size(dir / "psi.bin") == 11 * 16);
    const auto side = nlohmann::json::parse(slurp(dir / "psi.bin.json"));
    CHECK(side.dump().find(r.scenario_hash) != std::string::npos);
    RunRecord empty;
    CHECK(kind_of([&] { write_snapshot(empty, dir / "none.bin"); }) == ErrorKind::IoError);
}

TEST_CASE("sweeps") {
    SUBCASE("single-point sweep equals a plain run") {
        auto s = parse_scenario(R"({"model": "lmg", "params": {"N": 8, "c_x": 1, "c_y": 1},
            "integrator": {"t_final": 0.5, "n_output": 26}, "sweep": {"N": [8]}})");
        const auto sw = run_sweep(s);
        REQUIRE(sw.points.size() == 1);
        REQUIRE(sw.points[0].record);
        auto plain = s;
        plain.sweep.reset();
        const auto r = run_scenario(plain);
        for (const auto& name : r.series.names) CHECK(sw.points[0].record->series.channel(name) == r.series.channel(name));
    }
    SUBCASE("summary table has one row per point") {
        const auto dir = scratch_dir("sweep");
        auto s = parse_scenario(R"({"model": "lmg", "params": {"N": 8, "c_x": 1, "c_y": 1},
            "integrator": {"t_final": 0.5, "n_output": 26}, "sweep": {"N": [4, 6, 8, 10]}})");
        const auto sw = run_sweep(s, 2);
        emit(sw, OutputFormat::Csv, dir / "table.csv");
        const auto text = slurp(dir / "table.csv");
        CHECK(count_lines(text) == 5);
        CHECK(text.rfind("N,status,xi2_min", 0) == 0);
        for (std::size_t k = 0; k < 4; ++k) CHECK(sw.points[k].value == s.sweep->values[k]);
    }
    SUBCASE("failed points are recorded and the sweep continues") {
        auto s = parse_scenario(R"({"model": "lmg", "params": {"N": 8, "c_x": 1, "c_y": 1},
            "integrator": {"t_final": 0.5, "n_output": 26}, "sweep": {"N": [8, 400, 10]},
            "limits": {"max_vector_dim": 100}})");
        const auto sw = run_sweep(s, 2);
        REQUIRE(sw.points.size() == 3);
        CHECK(sw.points[0].record);
        CHECK(!sw.points[1].record);
        CHECK(sw.points[1].error.find("DimensionOverflow") != std::string::npos);
        CHECK(sw.points[2].record);
        const auto j = sw.to_json();
        CHECK(j.dump().find("DimensionOverflow") != std::string::npos);
    }
    SUBCASE("counter-twisting beats one-axis twisting") {
        auto s = parse_scenario(R"({"model": "lmg", "params": {"N": 20, "c_x": 1, "c_y": 1},
            "integrator": {"t_final": 0.6, "n_output": 601}, "comparator": "oat", "sweep": {"N": [20, 40, 80]},
            "observables": ["xi2"]})");
        const auto sw = run_sweep(s);
        for (const auto& pt : sw.points) {
            REQUIRE(pt.record);
            REQUIRE(pt.record->reference_summary);
            CHECK(*pt.record->summary.xi2_min < *pt.record->reference_summary->xi2_min);
        }
    }
    SUBCASE("two-mode sweep over the coupling") {
        const auto s = load_scenario(fs::path(TACTSIM_SCENARIO_DIR) / "fig4_tmss.json");
        const auto r = run_scenario(sweep_point(s, 0.0));
        for (double v : r.series.channel("delta_prime")) CHECK(std::abs(v) < 1e-10);
        CHECK(*run_scenario(sweep_point(s, 0.1)).summary.delta_prime_min < 0.0);
    }
}

TEST_CASE("determinism") {
    const auto s = mcwf_scenario();
    const auto a = run_scenario(s);
    const auto b = run_scenario(s);
    CHECK(a.solver == "mcwf");
    CHECK(format_csv(a.series) == format_csv(b.series));
    auto other = s;
    other.integrator.seed = 12;
    CHECK(format_csv(run_scenario(other).series) != format_csv(a.series));

    auto sweep = s;
    sweep.sweep = SweepAxis{"N", {2, 4, 6}};
    const auto one = run_sweep(sweep, 1);
    const auto three = run_sweep(sweep, 3);
    for (std::size_t k = 0; k < 3; ++k) {
        REQUIRE(one.points[k].record);
        REQUIRE(three.points[k].record);
        CHECK(format_csv(one.points[k].record->series) == format_csv(three.points[k].record->series));
    }
}

TEST_CASE("solver selection") {
    CHECK(run_scenario(parse_scenario(kMinimalLmg)).solver == "schrodinger");
    const auto s = parse_scenario(R"({"model": "lmg",
      "params": {"N": 3, "basis": "atoms", "A": 2e6, "B": 2e6, "delta": 1e8, "gamma": 1e8},
      "dissipation": {"kappa": 4e7}, "integrator": {"t_final": 1e-4, "n_output": 5}})");
    CHECK(run_scenario(s).solver == "lindblad");
}

TEST_CASE("every shipped scenario validates") {
    std::size_t count = 0;
    for (const auto& entry : fs::directory_iterator(TACTSIM_SCENARIO_DIR)) {
        if (entry.path().extension() != ".json") continue;
        CAPTURE(entry.path().string());
        const auto s = load_scenario(entry.path());
        CHECK(!s.name.empty());
        CHECK(entry.path().stem().string() == s.name);
        const auto b = build_model(s.sweep ? sweep_point(s, s.sweep->values.front()) : s);
        CHECK(b.space.dimension() > 0);
        ++count;
    }
    CHECK(count == 6);
}

TEST_CASE("command-line exit codes") {
    const auto dir = scratch_dir("cli");
    std::ofstream(dir / "good.json") << kMinimalLmg;
    std::ofstream(dir / "bad.json") << R"({"model": "lmg", "params": {"N": 2}, "integrator": {"t_final": 1}})";
    CHECK(run_cli("version") == 0);
    CHECK(run_cli("validate --config " + (dir / "good.json").string()) == 0);
    CHECK(run_cli("validate --config " + (dir / "bad.json").string()) == 1);
    CHECK(run_cli("validate --config " + (dir / "missing.json").string()) == 3);
    CHECK(run_cli("run --config " + (dir / "good.json").string() + " --out " + (dir / "out.csv").string()) == 0);
    CHECK(fs::exists(dir / "out.csv"));
    CHECK(run_cli("run --config " + (dir / "good.json").string() + " --out /dev/null/x.csv") == 3);
    CHECK(run_cli("frobnicate") == 1);
}
