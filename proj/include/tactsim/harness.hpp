// harness.hpp: scenario files, runs, sweeps and result emission

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tactsim/dynamics.hpp"
#include "tactsim/model.hpp"
#include "tactsim/observables.hpp"

namespace tactsim {

enum class ModelKind { Full, Intermediate, Lmg, Oat, TwoCavityFull, Tmss };
enum class SolverChoice { Auto, Schrodinger, Lindblad, Mcwf };
enum class OutputFormat { Csv, Json };

std::string to_string(ModelKind m);

// Coefficients of the spin-only models. Exactly one source is used:
// raw c_x/c_y (or chi for OAT), couplings A/B/delta/gamma, or a full drive parameter set.
struct SpinModelParams {
    int atoms = 2;
    double c_z = 0.0, c_x = 0.0, c_y = 0.0, phi = 0.0;
    std::optional<double> A, B, delta, gamma;  // couplings form
    std::optional<double> A_N_over_delta;      // A = value * delta / N, follows N in sweeps
    std::optional<double> B_over_A;
    std::optional<DriveParams> drive;          // drive form
    CoeffMode coeff_mode = CoeffMode::Approx;
    bool atom_basis = false;                   // AtomLevels(2, N) instead of Dicke(N/2)
};

struct SweepAxis {
    std::string name;  // "N", "J" or "S_R"
    std::vector<double> values;
};

struct Scenario {
    std::string name;
    ModelKind model = ModelKind::Lmg;
    DriveParams drive;               // full, intermediate
    CoeffMode coeff_mode = CoeffMode::Approx;  // intermediate
    SpinModelParams spin;            // lmg, oat
    TwoCavityParams two_cavity;      // two_cavity_full
    TmssParams tmss;                 // tmss
    std::optional<DissipationParams> dissipation;
    std::optional<Vec> custom_state;  // otherwise the stretched / all-in-|1> vacuum state
    IntegratorConfig integrator;
    SolverChoice solver = SolverChoice::Auto;
    std::vector<std::string> observables;  // empty: every channel the model supports
    std::optional<std::string> comparator;  // "lmg" or "oat"
    std::optional<SweepAxis> sweep;
    std::filesystem::path output_path;
    OutputFormat format = OutputFormat::Csv;
    SpaceLimits limits;

    // Canonical form of every semantic field (output location excluded).
    nlohmann::json canonical() const;
    std::string hash() const;
};

Scenario parse_scenario(const std::string& text, const std::string& origin = "<string>");
Scenario load_scenario(const std::filesystem::path& path);

struct RunRecord {
    std::string scenario_hash;
    std::uint64_t seed = 0;
    double wall_time = 0.0;
    std::string solver;
    TimeSeries series;
    SqueezingSummary summary;
    std::optional<SqueezingSummary> reference_summary;
    std::optional<double> max_xi2_gap;  // max |xi2 - xi2_ref| up to the first minimum of xi2
    std::optional<EffectiveCoeffs> coeffs;
    std::optional<RegimeReport> regime;
    std::vector<std::string> warnings;
    // Final state of Schrodinger or Lindblad runs (trajectory runs keep none).
    std::optional<StateVector> final_state;
    std::optional<DensityMatrix> final_density;

    nlohmann::json to_json() const;
};

struct SweepPoint {
    double value = 0.0;
    std::optional<RunRecord> record;
    std::string error;
};

struct SweepResult {
    std::string axis;
    std::string scenario_hash;
    std::vector<SweepPoint> points;

    nlohmann::json to_json() const;
};

// Model space, Hamiltonian and initial state for a scenario (exposed for tests).
struct BuiltModel {
    HilbertSpace space;
    TimeDependentOperator hamiltonian;
    std::vector<Channel> channels;
    StateVector initial;
    double spin = 0.0;  // collective spin for xi2 normalization
    std::optional<EffectiveCoeffs> coeffs;
    std::optional<RegimeReport> regime;
};
BuiltModel build_model(const Scenario& s);

RunRecord run_scenario(const Scenario& s);
// Points run concurrently on `threads` workers; order follows the axis. Failed points keep their error.
SweepResult run_sweep(const Scenario& s, int threads = 1);
// Copy of `s` with the sweep axis fixed at `value`.
Scenario sweep_point(const Scenario& s, double value);

// CSV: header then one row per sample, `t` first, 17 significant digits, LF endings. Standard
// errors, when present, follow as `<name>_se`. A `<path>.meta.json` sidecar carries the hash.
void emit(const RunRecord& r, OutputFormat format, const std::filesystem::path& path);
// Summary table with one row per axis point.
void emit(const SweepResult& r, OutputFormat format, const std::filesystem::path& path);

// Final state as little-endian (re, im) float64 pairs, row-major for density matrices, plus a
// `<path>.json` sidecar with the space factors, time and scenario hash. Throws IoError when the
// record carries no final state.
void write_snapshot(const RunRecord& r, const std::filesystem::path& path);

std::string format_csv(const TimeSeries& ts);
// Writes to a temporary sibling then renames over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& content);

// Effective coefficients and regime report of a drive-based scenario (full, intermediate, or
// lmg/oat with params.drive).
nlohmann::json coeffs_report(const Scenario& s);

// Solver request: {"seed": {drive params}, "detuning_split", "chi", "frozen": [...],
// "max_iterations", "tolerance"}.
ExperimentalTargets parse_targets(const std::string& text, const std::string& origin = "<string>");
nlohmann::json solution_json(const ExperimentalSolution& sol);

// Exit code for an error kind: 1 validation, 2 runtime, 3 I/O.
int exit_code(ErrorKind kind);

} // namespace tactsim
