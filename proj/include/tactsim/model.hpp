// model.hpp: physical parameters, effective coefficients, Hamiltonians and dissipators
//
// All rates are angular (rad/s) with hbar = 1. Atomic levels |1>..|4> map to
// indices 0..3 of an AtomLevels factor.

#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "tactsim/operators.hpp"
#include "tactsim/time_operator.hpp"

namespace tactsim {

// Four-level atoms in one cavity, driven by four phase-locked lasers.
struct DriveParams {
    double g1 = 0.0, g2 = 0.0;                  // cavity couplings on |1>-|3>, |2>-|4>
    double rabi1 = 0.0, rabi2 = 0.0;            // Omega_{1,2}
    double rabi_tilde1 = 0.0, rabi_tilde2 = 0.0;  // Omega~_{1,2}
    double detuning1 = 0.0, detuning2 = 0.0;    // large one-photon detunings Delta_{1,2}
    double delta1 = 0.0, delta2 = 0.0;          // two-photon detunings of the Omega~ branch
    double gamma1 = 0.0, gamma2 = 0.0;          // two-photon detunings of the Omega branch
    double phi = 0.0;                           // lock phase
    int atoms = 1;
    int n_max = 4;

    // Finite rates and nonzero elimination denominators.
    void validate() const;
};

// The parameter set used for the single-cavity comparison runs.
DriveParams reference_drive_params(int atoms = 8);

enum class CoeffMode { Approx, Exact };

struct EffectiveCoeffs {
    double A = 0.0, B = 0.0;
    double c_z = 0.0;          // static Zeeman term, cavity in vacuum
    double c_z_osc = 0.0;      // amplitude of the sin((delta+gamma)t) Zeeman term
    double delta = 0.0, gamma = 0.0;                  // bare two-photon detunings
    double delta_shifted = 0.0, gamma_shifted = 0.0;  // cavity-pulled detunings
    double c_x = 0.0, c_y = 0.0;
    double chi = 0.0;          // twisting strength, equal to c_x
    CoeffMode mode = CoeffMode::Approx;
    double a_mismatch = 0.0;   // relative disagreement of the two A branches
    double b_mismatch = 0.0;
    double c_x_exact = 0.0, c_y_exact = 0.0;
    double c_x_approx = 0.0, c_y_approx = 0.0;
};

EffectiveCoeffs effective_coeffs(const DriveParams& p, CoeffMode mode = CoeffMode::Approx,
                                 double branch_tolerance = 1e-6);

struct RegimeReport {
    double threshold = 5.0;
    // min(|Delta|, |Delta+delta|, |Delta-gamma|) / max(|g|, |Omega|, |Omega~|)
    double large_detuning_ratio = 0.0;
    bool large_detuning_ok = false;
    // min(|delta| / (N|A|/4), |gamma| / (N|B|/4))
    double virtual_cavity_ratio = 0.0;
    bool virtual_cavity_ok = false;
    // min(|delta+gamma|, |delta-gamma|) / max(N|A|/4, N|B|/4); informational
    double cross_detuning_ratio = 0.0;
    bool cross_detuning_ok = false;
};

RegimeReport validate_regime(const DriveParams& p, const EffectiveCoeffs& c, double threshold = 5.0);

HilbertSpace full_space(const DriveParams& p, const SpaceLimits& limits = {});
TimeDependentOperator build_full_hamiltonian(const DriveParams& p, const HilbertSpace& space);

TimeDependentOperator build_intermediate_hamiltonian(const EffectiveCoeffs& c, double phi, const HilbertSpace& space);

// c_z S_z - c_x (S_x cos phi - S_y sin phi)^2 + c_y (S_x sin phi + S_y cos phi)^2 on the
// first Dicke or AtomLevels factor of `space`.
OperatorMatrix build_lmg_hamiltonian(double c_z, double c_x, double c_y, double phi, const HilbertSpace& space);
// chi S_x^2
OperatorMatrix build_oat_hamiltonian(double chi, const HilbertSpace& space);

struct DissipationParams {
    double kappa = 0.0;
    double gamma_d = 0.0;
    // Optional per-atom overrides, gamma_ks[k][s] for s = 0..3; empty means gamma_d everywhere.
    std::vector<std::array<double, 4>> gamma_ks;

    void validate() const;
};

struct Channel {
    OperatorMatrix op;
    double rate = 0.0;
    std::string label;
};

// Cavity loss plus the 4N spontaneous-emission channels of the four-level atoms.
std::vector<Channel> full_jump_operators(const HilbertSpace& space, const DissipationParams& d);

struct EffectiveRates {
    double a_z = 0.0, a_plus = 0.0, a_minus = 0.0;
};

EffectiveRates effective_rates(const DriveParams& p);

// Spin-only channels after eliminating the excited levels and the cavity. Zero-rate channels
// are omitted. Individual channels need an AtomLevels(2, N) basis.
std::vector<Channel> effective_dissipators(const DriveParams& p, const EffectiveCoeffs& c,
                                           const DissipationParams& d, const HilbertSpace& basis);

struct TmssParams {
    double chi = 1.0;
    double J = 0.0;
    double spin_left = 0.5, spin_right = 0.5;
};

// Two cavities coupled by photon tunneling; per-cavity effective couplings.
struct TwoCavityParams {
    double A_left = 0.0, A_right = 0.0;
    double B_left = 0.0, B_right = 0.0;
    double delta_left = 0.0, delta_right = 0.0;
    double gamma_left = 0.0, gamma_right = 0.0;
    double J_tilde = 0.0;
    double delta_omega = 0.0;
    double spin_left = 0.5, spin_right = 0.5;
    int n_max = 2;

    // delta_L = -delta_R = delta > 0, -gamma_L = gamma_R = gamma > 0, delta_omega = delta + gamma.
    static TwoCavityParams symmetric(double A, double B, double delta, double gamma, double J_tilde,
                                     double spin_left, double spin_right, int n_max = 2);

    // Throws InconsistentParams when the sign pattern or chi matching is violated.
    void validate() const;
    double chi() const;
    double J() const;
    TmssParams tmss() const;
};

HilbertSpace two_cavity_space(const TwoCavityParams& tc, const SpaceLimits& limits = {});
TimeDependentOperator build_two_cavity_hamiltonian(const TwoCavityParams& tc, const HilbertSpace& space);

HilbertSpace tmss_space(double spin_left, double spin_right, const SpaceLimits& limits = {});
// chi[(S^L_z)^2 - (S^R_z)^2] + 2 J chi (S^L_x S^R_y + S^L_y S^R_x)
OperatorMatrix build_tmss_hamiltonian(const TmssParams& p, const HilbertSpace& space);
// Same model written with transverse quadratics, before the Casimir substitution.
OperatorMatrix build_tmss_hamiltonian_transverse(const TwoCavityParams& tc, const HilbertSpace& space);

struct ExperimentalTargets {
    DriveParams seed;
    double detuning_split = 3.77e10;   // Delta1 - Delta2
    std::optional<double> chi;         // desired c_x
    // Names from {"Delta1","Delta2","Omega1","Omega2","Omega1_tilde","Omega2_tilde",
    // "delta1","delta2","gamma1","gamma2"} held at their seed values.
    std::vector<std::string> frozen;
    int max_iterations = 10000;
    double tolerance = 1e-8;
};

struct ExperimentalSolution {
    DriveParams params;
    std::vector<std::pair<std::string, double>> residuals;  // relative residuals
    double max_residual = 0.0;
    int iterations = 0;
    RegimeReport regime;
    EffectiveCoeffs coeffs;
};

ExperimentalSolution solve_experimental_params(const ExperimentalTargets& targets);

} // namespace tactsim
