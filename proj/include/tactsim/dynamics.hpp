// dynamics.hpp: Schrodinger, Lindblad and quantum-trajectory time evolution

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tactsim/model.hpp"
#include "tactsim/operators.hpp"
#include "tactsim/time_operator.hpp"

namespace tactsim {

enum class Method { RK4, Adaptive };

struct IntegratorConfig {
    Method method = Method::RK4;
    double t_final = 0.0;
    int n_output = 101;
    double oversample = 20.0;
    std::optional<double> dt;   // explicit step; must not exceed the oversample bound
    double rtol = 1e-9;         // adaptive only
    double atol = 1e-12;        // adaptive only
    std::uint64_t seed = 0;
    int n_traj = 100;

    void validate() const;
};

// Largest |phase frequency| of H: the explicit drive frequencies or twice the Gershgorin radius
// of the summed terms, whichever is larger.
double fastest_frequency(const TimeDependentOperator& H);
// Bound 2 sum_c rate_c ||O_c^dag O_c|| on the norm of the dissipator superoperator.
double decay_scale(const std::vector<Channel>& channels);
// 2 pi / (max(fastest_frequency, decay_rate) * oversample), clipped by cfg.dt.
double step_bound(const TimeDependentOperator& H, const IntegratorConfig& cfg, double decay_rate = 0.0);
std::vector<double> output_times(const IntegratorConfig& cfg);

struct TimeSeries {
    std::vector<double> times;
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;
    std::vector<std::vector<double>> std_errors;  // parallel to values; empty vectors where not applicable
    std::map<std::string, std::string> metadata;

    void add(const std::string& name, std::vector<double> v, std::vector<double> err = {});
    bool has(const std::string& name) const;
    const std::vector<double>& channel(const std::string& name) const;
    const std::vector<double>& error(const std::string& name) const;
    // Equal channel lengths and strictly increasing times.
    void validate() const;
};

// Observables sampled at every output time. The pure callback receives a normalized state,
// the mixed one a full density matrix on the evolution space.
struct Probe {
    std::vector<std::string> names;
    std::function<std::vector<double>(double t, const Vec& psi)> pure;
    std::function<std::vector<double>(double t, const DenseMat& rho)> mixed;
};

struct EvolutionStats {
    std::size_t steps = 0;
    std::size_t rejected = 0;
    double max_step_drift = 0.0;    // largest per-step |norm - 1| before renormalization
    double norm_error = 0.0;        // accumulated renormalization drift
    std::size_t subspace_dim = 0;   // dimension actually integrated
};

struct Evolution {
    TimeSeries series;
    EvolutionStats stats;
    StateVector final_state;
};

// i d/dt psi = H(t) psi. Adds channel `norm_err`.
Evolution evolve_schrodinger(const TimeDependentOperator& H, const StateVector& psi0, const IntegratorConfig& cfg,
                             const Probe& probe);

// d rho/dt = -i[H, rho] + sum_c r_c (O rho O^dagger - 1/2 {O^dagger O, rho}).
// Adds channels `trace_err` and `herm_err`; throws TraceDrift past 1e-6.
struct LindbladResult {
    TimeSeries series;
    EvolutionStats stats;
    DensityMatrix final_state;
    std::size_t blocks = 0;  // number of populated (sector, sector) blocks
};
LindbladResult evolve_lindblad(const TimeDependentOperator& H, const std::vector<Channel>& channels,
                               const DensityMatrix& rho0, const IntegratorConfig& cfg, const Probe& probe,
                               const SpaceLimits& limits = {});

// Quantum trajectories with per-trajectory RNG streams derived from (seed, index).
// samples[traj][time][k] holds probe output k.
struct McwfResult {
    std::vector<double> times;
    std::vector<std::string> names;
    std::vector<std::vector<std::vector<double>>> samples;
    std::vector<std::size_t> jumps;  // jump count per trajectory
    std::size_t integrated_paths = 0;
    EvolutionStats stats;

    // Mean and stddev/sqrt(n) of every probe channel.
    TimeSeries summary() const;
    // Channels derived from the trajectory-mean probe vector, with jackknife standard errors.
    TimeSeries derive(const std::vector<std::string>& out_names,
                      const std::function<std::vector<double>(double t, const std::vector<double>& mean)>& f) const;
};
McwfResult evolve_mcwf(const TimeDependentOperator& H, const std::vector<Channel>& channels, const StateVector& psi0,
                       const IntegratorConfig& cfg, const Probe& probe);

// splitmix64-seeded stream for trajectory `index`.
std::uint64_t trajectory_seed(std::uint64_t seed, std::uint64_t index);

} // namespace tactsim
