// observables.hpp: squeezing, fidelity, two-mode criterion, entropy, Fisher information

#pragma once

#include <array>
#include <limits>
#include <optional>
#include <vector>

#include "tactsim/dynamics.hpp"
#include "tactsim/operators.hpp"

namespace tactsim {

using Vec3 = std::array<double, 3>;

// First moments and symmetrized second moments 1/2 <S_a S_b + S_b S_a> of a spin triple.
struct SpinMoments {
    Vec3 mean{};
    std::array<Vec3, 3> second{};

    static constexpr std::size_t kSize = 9;
    std::vector<double> flatten() const;  // mean, then xx, yy, zz, xy, xz, yz
    static SpinMoments unflatten(const double* v);
};

SpinMoments spin_moments(const SpinTriple& s, const Vec& psi);
SpinMoments spin_moments(const SpinTriple& s, const DenseMat& rho);

struct SqueezingResult {
    double xi2 = std::numeric_limits<double>::quiet_NaN();
    double xi2_db = std::numeric_limits<double>::quiet_NaN();
    Vec3 mean_spin{};
    Vec3 optimal_direction{};
    bool degenerate = false;
};

// Flags the result as degenerate (xi2 = NaN) when |<S>| < 1e-6 S.
SqueezingResult squeezing_from_moments(const SpinMoments& m, double spin);
// Uses the first Dicke or AtomLevels factor; throws DegenerateMeanSpin.
SqueezingResult squeezing_parameter(const StateVector& psi, double spin);
SqueezingResult squeezing_parameter(const DensityMatrix& rho, double spin);

// |<psi0|psi>|
double overlap_fidelity(const StateVector& psi0, const StateVector& psi);
// sqrt(<psi0|rho|psi0>)
double overlap_fidelity(const StateVector& psi0, const DensityMatrix& rho);

struct TmssResult {
    double delta_prime = 0.0;
    double var_minus_x = 0.0;
    double var_plus_y = 0.0;
    double mean_plus_z = 0.0;
};
TmssResult tmss_delta(const PairSpinOps& ops, const Vec& psi);
TmssResult tmss_delta(const StateVector& psi);

// Von Neumann entropy (natural log) of the factors [0, cut) after tracing out the rest.
double entanglement_entropy(const HilbertSpace& space, const Vec& psi, std::size_t cut = 1);
double entanglement_entropy(const StateVector& psi, std::size_t cut = 1);

struct QfiResult {
    std::array<std::array<double, 2>, 2> I{};
};
// H1 = S+_x, H2 = S-_y
QfiResult qfi_matrix(const PairSpinOps& ops, const Vec& psi);
QfiResult qfi_matrix(const StateVector& psi);

struct AnalyticEstimates {
    double t_opt = 0.0;                // 1.58 ln N / (3 N chi)
    double gamma_eff = 0.0;            // (delta chi / g^2) gamma_d, one channel
    double t_decay = 0.0;              // 1 / gamma_eff
    double gamma_eff_two_channel = 0.0;
    double t_decay_two_channel = 0.0;
};
AnalyticEstimates analytic_estimates(double N, double chi, double g, double delta, double gamma_d);

struct ChannelMinimum {
    double value = std::numeric_limits<double>::quiet_NaN();
    double time = std::numeric_limits<double>::quiet_NaN();
    std::size_t index = 0;
};
// Global minimum over finite samples with a three-point parabolic refinement; the refined
// value is not allowed below `floor`.
ChannelMinimum channel_minimum(const std::vector<double>& times, const std::vector<double>& values,
                               double floor = -std::numeric_limits<double>::infinity());

struct SqueezingSummary {
    std::optional<double> xi2_min, t_at_min, xi2_min_db;
    std::optional<double> delta_prime_min, t_at_dmin;
};
// Needs at least one of `xi2` and `delta_prime`; throws ChannelMissing otherwise.
SqueezingSummary squeezing_summary(const TimeSeries& series);

} // namespace tactsim
