#include "tactsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace tactsim {

namespace {

constexpr cplx I{0.0, 1.0};

bool finite_all(std::initializer_list<double> xs) {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

double rel_diff(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

std::size_t fock_factor(const HilbertSpace& space, std::size_t from = 0) {
    const std::size_t i = space.find<Fock>(from);
    if (i == HilbertSpace::npos) fail(ErrorKind::BadFactor, "space " + space.describe() + " has no Fock factor");
    return i;
}

// sum_j |to>_j <from| over every atom of the factor
OperatorMatrix collective_transition(const HilbertSpace& space, std::size_t factor, int to, int from) {
    const auto& al = std::get<AtomLevels>(space.factor(factor));
    const auto n = static_cast<Eigen::Index>(space.dimension());
    SparseMat sum(n, n);
    for (int j = 0; j < al.atoms; ++j) sum += atom_transition(space, factor, j, to, from).matrix();
    return OperatorMatrix(space, std::move(sum));
}

} // namespace

void DriveParams::validate() const {
    if (!finite_all({g1, g2, rabi1, rabi2, rabi_tilde1, rabi_tilde2, detuning1, detuning2, delta1, delta2, gamma1,
                     gamma2, phi}))
        fail(ErrorKind::InconsistentParams, "drive parameters must be finite");
    if (atoms < 1) fail(ErrorKind::InconsistentParams, "atom count must be >= 1");
    if (n_max < 0) fail(ErrorKind::InconsistentParams, "Fock cutoff must be >= 0");
    if (detuning1 == 0.0 || detuning2 == 0.0 || detuning1 + delta1 == 0.0 || detuning1 - gamma1 == 0.0 ||
        detuning2 + delta2 == 0.0 || detuning2 - gamma2 == 0.0)
        fail(ErrorKind::InconsistentParams, "an elimination denominator (Delta, Delta+delta, Delta-gamma) vanishes");
}

DriveParams reference_drive_params(int atoms) {
    DriveParams p;
    p.g1 = p.g2 = 5e7;
    p.rabi1 = p.rabi2 = p.rabi_tilde1 = p.rabi_tilde2 = 5e7;
    p.detuning1 = p.detuning2 = 1e9;
    p.delta1 = p.delta2 = 1e8;
    p.gamma1 = p.gamma2 = 1.26e8;
    p.atoms = atoms;
    return p;
}

EffectiveCoeffs effective_coeffs(const DriveParams& p, CoeffMode mode, double branch_tolerance) {
    p.validate();
    if (rel_diff(p.delta1, p.delta2) > branch_tolerance || rel_diff(p.gamma1, p.gamma2) > branch_tolerance)
        fail(ErrorKind::InconsistentParams, "the reduction needs delta1 = delta2 and gamma1 = gamma2");

    const double A1 = p.g1 * p.rabi_tilde1 * (1.0 / p.detuning1 + 1.0 / (p.detuning1 + p.delta1));
    const double A2 = p.g2 * p.rabi_tilde2 * (1.0 / p.detuning2 + 1.0 / (p.detuning2 + p.delta2));
    const double B1 = p.g1 * p.rabi1 * (1.0 / p.detuning1 + 1.0 / (p.detuning1 - p.gamma1));
    const double B2 = p.g2 * p.rabi2 * (1.0 / p.detuning2 + 1.0 / (p.detuning2 - p.gamma2));

    EffectiveCoeffs c;
    c.mode = mode;
    c.a_mismatch = rel_diff(A1, A2);
    c.b_mismatch = rel_diff(B1, B2);
    if (c.a_mismatch > branch_tolerance)
        fail(ErrorKind::InconsistentParams,
             "A branches disagree (" + std::to_string(A1) + " vs " + std::to_string(A2) + ")");
    if (c.b_mismatch > branch_tolerance)
        fail(ErrorKind::InconsistentParams,
             "B branches disagree (" + std::to_string(B1) + " vs " + std::to_string(B2) + ")");
    c.A = 0.5 * (A1 + A2);
    c.B = 0.5 * (B1 + B2);

    c.delta = 0.5 * (p.delta1 + p.delta2);
    c.gamma = 0.5 * (p.gamma1 + p.gamma2);
    const double pull = 0.5 * p.atoms * (p.g1 * p.g1 / p.detuning1 + p.g2 * p.g2 / p.detuning2);
    c.delta_shifted = c.delta - pull;
    c.gamma_shifted = c.gamma + pull;

    // Cavity in vacuum, so the a^dagger a part of the static Zeeman term drops.
    c.c_z = 0.25 * (p.rabi_tilde1 * p.rabi_tilde1 / (p.detuning1 + p.delta1) +
                    p.rabi1 * p.rabi1 / (p.detuning1 - p.gamma1) -
                    p.rabi_tilde2 * p.rabi_tilde2 / (p.detuning2 + p.delta2) -
                    p.rabi2 * p.rabi2 / (p.detuning2 - p.gamma2));
    c.c_z_osc = 0.25 * (p.rabi_tilde1 * p.rabi1 / (p.detuning1 + p.delta1) +
                        p.rabi_tilde1 * p.rabi1 / (p.detuning1 - p.gamma1) +
                        p.rabi_tilde2 * p.rabi2 / (p.detuning2 + p.delta2) +
                        p.rabi_tilde2 * p.rabi2 / (p.detuning2 - p.gamma2));

    c.c_x_approx = c.A * c.A / (4.0 * c.delta);
    c.c_y_approx = c.B * c.B / (4.0 * c.gamma);
    c.c_x_exact = c.A * c.A / (4.0 * c.delta_shifted);
    c.c_y_exact = c.B * c.B / (4.0 * c.gamma_shifted);
    if (mode == CoeffMode::Exact) {
        c.c_x = c.c_x_exact;
        c.c_y = c.c_y_exact;
    } else {
        c.c_x = c.c_x_approx;
        c.c_y = c.c_y_approx;
    }
    c.chi = c.c_x;
    return c;
}

RegimeReport validate_regime(const DriveParams& p, const EffectiveCoeffs& c, double threshold) {
    RegimeReport r;
    r.threshold = threshold;
    const double detunings = std::min({std::abs(p.detuning1), std::abs(p.detuning2), std::abs(p.detuning1 + p.delta1),
                                       std::abs(p.detuning2 + p.delta2), std::abs(p.detuning1 - p.gamma1),
                                       std::abs(p.detuning2 - p.gamma2)});
    const double couplings = std::max({std::abs(p.g1), std::abs(p.g2), std::abs(p.rabi1), std::abs(p.rabi2),
                                       std::abs(p.rabi_tilde1), std::abs(p.rabi_tilde2)});
    r.large_detuning_ratio = couplings == 0.0 ? INFINITY : detunings / couplings;
    r.large_detuning_ok = r.large_detuning_ratio >= threshold;

    const double na = p.atoms * std::abs(c.A) / 4.0;
    const double nb = p.atoms * std::abs(c.B) / 4.0;
    const double ra = na == 0.0 ? INFINITY : std::abs(c.delta) / na;
    const double rb = nb == 0.0 ? INFINITY : std::abs(c.gamma) / nb;
    r.virtual_cavity_ratio = std::min(ra, rb);
    r.virtual_cavity_ok = r.virtual_cavity_ratio >= threshold;

    const double nmax = std::max(na, nb);
    const double cross = std::min(std::abs(c.delta + c.gamma), std::abs(c.delta - c.gamma));
    r.cross_detuning_ratio = nmax == 0.0 ? INFINITY : cross / nmax;
    r.cross_detuning_ok = r.cross_detuning_ratio >= threshold;
    return r;
}

HilbertSpace full_space(const DriveParams& p, const SpaceLimits& limits) {
    return make_space({AtomLevels{4, p.atoms}, Fock{p.n_max}}, limits);
}

TimeDependentOperator build_full_hamiltonian(const DriveParams& p, const HilbertSpace& space) {
    p.validate();
    const std::size_t atoms = space.find<AtomLevels>();
    if (atoms == HilbertSpace::npos || std::get<AtomLevels>(space.factor(atoms)).levels != 4)
        fail(ErrorKind::BadFactor, "full Hamiltonian needs an AtomLevels(4, N) factor");
    const auto [a, a_dag] = boson_ops(space, fock_factor(space));

    const auto s14 = collective_transition(space, atoms, 0, 3);  // sum |1><4|
    const auto s23 = collective_transition(space, atoms, 1, 2);  // sum |2><3|
    const auto s13 = collective_transition(space, atoms, 0, 2);  // sum |1><3|
    const auto s24 = collective_transition(space, atoms, 1, 3);  // sum |2><4|

    const cplx lock = std::polar(1.0, p.phi);
    TimeDependentOperator H(space);
    H.add_with_hc(s14, 0.5 * lock * p.rabi_tilde2, -(p.detuning2 + p.delta2));
    H.add_with_hc(s14, -0.5 * I * lock * p.rabi2, -(p.detuning2 - p.gamma2));
    H.add_with_hc(s23, 0.5 * std::conj(lock) * p.rabi_tilde1, -(p.detuning1 + p.delta1));
    H.add_with_hc(s23, 0.5 * I * std::conj(lock) * p.rabi1, -(p.detuning1 - p.gamma1));
    H.add_with_hc(s13 * a_dag, p.g1, -p.detuning1);
    H.add_with_hc(s24 * a_dag, p.g2, -p.detuning2);
    return H;
}

TimeDependentOperator build_intermediate_hamiltonian(const EffectiveCoeffs& c, double phi, const HilbertSpace& space) {
    const auto [sx, sy, sz] = collective_spin_ops(space, spin_factor_index(space));
    const auto [a, a_dag] = boson_ops(space, fock_factor(space));
    const double cp = std::cos(phi), sp = std::sin(phi);
    const OperatorMatrix x_phi = sx * cp - sy * sp;
    const OperatorMatrix y_phi = sx * sp + sy * cp;

    TimeDependentOperator H(space);
    H.add(sz, c.c_z, 0.0);
    // -c'_z sin(w t) = (i c'_z / 2) e^{iwt} + c.c.
    H.add_with_hc(sz, 0.5 * I * c.c_z_osc, c.delta + c.gamma);
    H.add_with_hc(x_phi * a_dag, -0.5 * c.A, c.delta_shifted);
    H.add_with_hc(y_phi * a_dag, -0.5 * c.B, -c.gamma_shifted);
    return H;
}

OperatorMatrix build_lmg_hamiltonian(double c_z, double c_x, double c_y, double phi, const HilbertSpace& space) {
    const auto [sx, sy, sz] = collective_spin_ops(space, spin_factor_index(space));
    const double cp = std::cos(phi), sp = std::sin(phi);
    const OperatorMatrix u = sx * cp - sy * sp;
    const OperatorMatrix v = sx * sp + sy * cp;
    const SparseMat h = c_z * sz.matrix() - c_x * (u * u).matrix() + c_y * (v * v).matrix();
    // Products of Hermitian factors can leave 1-ulp asymmetry; symmetrize explicitly.
    SparseMat sym = 0.5 * (h + SparseMat(h.adjoint()));
    sym.prune(cplx(0.0), 0.0);
    return OperatorMatrix(space, std::move(sym), true);
}

OperatorMatrix build_oat_hamiltonian(double chi, const HilbertSpace& space) {
    return build_lmg_hamiltonian(0.0, -chi, 0.0, 0.0, space);
}

void DissipationParams::validate() const {
    if (!std::isfinite(kappa) || !std::isfinite(gamma_d) || kappa < 0.0 || gamma_d < 0.0)
        fail(ErrorKind::RateNegative, "kappa and gamma_d must be finite and >= 0");
    for (const auto& row : gamma_ks)
        for (double g : row)
            if (!std::isfinite(g) || g < 0.0) fail(ErrorKind::RateNegative, "gamma_ks entries must be >= 0");
}

std::vector<Channel> full_jump_operators(const HilbertSpace& space, const DissipationParams& d) {
    d.validate();
    const std::size_t atoms = space.find<AtomLevels>();
    if (atoms == HilbertSpace::npos || std::get<AtomLevels>(space.factor(atoms)).levels != 4)
        fail(ErrorKind::BadFactor, "full jump operators need an AtomLevels(4, N) factor");
    const int n = std::get<AtomLevels>(space.factor(atoms)).atoms;
    if (!d.gamma_ks.empty() && static_cast<int>(d.gamma_ks.size()) != n)
        fail(ErrorKind::DimensionMismatch, "gamma_ks needs one row per atom");

    std::vector<Channel> out;
    out.push_back({boson_ops(space, fock_factor(space)).a, d.kappa, "cavity"});
    // L_k1 = |1><3|, L_k2 = |2><3|, L_k3 = |1><4|, L_k4 = |2><4|
    constexpr int to[4] = {0, 1, 0, 1};
    constexpr int from[4] = {2, 2, 3, 3};
    for (int k = 0; k < n; ++k)
        for (int s = 0; s < 4; ++s) {
            const double rate = d.gamma_ks.empty() ? d.gamma_d : d.gamma_ks[static_cast<std::size_t>(k)][s];
            out.push_back({atom_transition(space, atoms, k, to[s], from[s]), rate,
                           "L_" + std::to_string(k + 1) + std::to_string(s + 1)});
        }
    return out;
}

EffectiveRates effective_rates(const DriveParams& p) {
    auto sq = [](double x) { return x * x; };
    EffectiveRates r;
    r.a_plus = 0.25 * (sq(p.rabi1) / sq(p.detuning1 - p.gamma1) + sq(p.rabi_tilde1) / sq(p.detuning1 + p.delta1));
    r.a_minus = 0.25 * (sq(p.rabi2) / sq(p.detuning2 - p.gamma2) + sq(p.rabi_tilde2) / sq(p.detuning2 + p.delta2));
    r.a_z = r.a_plus + r.a_minus;
    return r;
}

std::vector<Channel> effective_dissipators(const DriveParams& p, const EffectiveCoeffs& c, const DissipationParams& d,
                                           const HilbertSpace& basis) {
    d.validate();
    const std::size_t f = spin_factor_index(basis);
    std::vector<Channel> out;
    if (d.kappa > 0.0) {
        const auto [sx, sy, sz] = collective_spin_ops(basis, f);
        const double rx = d.kappa * c.A * c.A / (4.0 * c.delta * c.delta);
        const double ry = d.kappa * c.B * c.B / (4.0 * c.gamma * c.gamma);
        if (rx > 0.0) out.push_back({sx, rx, "collective_Sx"});
        if (ry > 0.0) out.push_back({sy, ry, "collective_Sy"});
    }
    if (d.gamma_d > 0.0) {
        const auto* al = std::get_if<AtomLevels>(&basis.factor(f));
        if (!al || al->levels != 2)
            fail(ErrorKind::BasisMismatch, "individual spin channels need an AtomLevels(2, N) basis, got " +
                                               basis.describe());
        const auto rates = effective_rates(p);
        SparseMat sz(2, 2), sm(2, 2), spl(2, 2);
        sz.insert(0, 0) = 1.0;
        sz.insert(1, 1) = -1.0;
        sm.insert(1, 0) = 1.0;   // |2><1|
        spl.insert(0, 1) = 1.0;  // |1><2|
        for (int k = 0; k < al->atoms; ++k) {
            const std::string tag = std::to_string(k + 1);
            if (rates.a_z > 0.0) out.push_back({embed_atom(basis, f, k, sz, true), d.gamma_d * rates.a_z, "sigma_z_" + tag});
            if (rates.a_minus > 0.0)
                out.push_back({embed_atom(basis, f, k, sm), d.gamma_d * rates.a_minus, "sigma_minus_" + tag});
            if (rates.a_plus > 0.0)
                out.push_back({embed_atom(basis, f, k, spl), d.gamma_d * rates.a_plus, "sigma_plus_" + tag});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

TwoCavityParams TwoCavityParams::symmetric(double A, double B, double delta, double gamma, double J_tilde,
                                           double spin_left, double spin_right, int n_max) {
    TwoCavityParams tc;
    tc.A_left = tc.A_right = A;
    tc.B_left = tc.B_right = B;
    tc.delta_left = delta;
    tc.delta_right = -delta;
    tc.gamma_left = -gamma;
    tc.gamma_right = gamma;
    tc.delta_omega = delta + gamma;
    tc.J_tilde = J_tilde;
    tc.spin_left = spin_left;
    tc.spin_right = spin_right;
    tc.n_max = n_max;
    return tc;
}

void TwoCavityParams::validate() const {
    if (!finite_all({A_left, A_right, B_left, B_right, delta_left, delta_right, gamma_left, gamma_right, J_tilde,
                     delta_omega, spin_left, spin_right}))
        fail(ErrorKind::InconsistentParams, "two-cavity parameters must be finite");
    Dicke::from_spin(spin_left);
    Dicke::from_spin(spin_right);
    if (delta_left * gamma_left >= 0.0 || delta_right * gamma_right >= 0.0)
        fail(ErrorKind::InconsistentParams, "each cavity needs delta and gamma of opposite sign");
    if (delta_left * delta_right >= 0.0)
        fail(ErrorKind::InconsistentParams,
             "z-quadratic coefficients of the two cavities would have equal signs; they must be opposite");
    constexpr double tol = 1e-9;
    if (!(delta_left > 0.0) || rel_diff(delta_left, -delta_right) > tol)
        fail(ErrorKind::InconsistentParams, "need delta_L = -delta_R = delta > 0");
    if (!(gamma_right > 0.0) || rel_diff(gamma_right, -gamma_left) > tol)
        fail(ErrorKind::InconsistentParams, "need -gamma_L = gamma_R = gamma > 0");
    if (rel_diff(delta_omega, delta_left + gamma_right) > tol)
        fail(ErrorKind::InconsistentParams, "need delta_omega = delta + gamma");
    if (rel_diff(A_left, A_right) > tol || rel_diff(B_left, B_right) > tol)
        fail(ErrorKind::InconsistentParams, "need A_L = A_R and B_L = B_R");
    const double cx = A_left * A_left / (4.0 * delta_left);
    const double cy = B_left * B_left / (4.0 * gamma_right);
    if (rel_diff(cx, cy) > 1e-6) fail(ErrorKind::InconsistentParams, "need A^2/(4 delta) = B^2/(4 gamma)");
}

double TwoCavityParams::chi() const { return A_left * A_left / (4.0 * delta_left); }
double TwoCavityParams::J() const { return J_tilde / std::sqrt(delta_left * gamma_right); }

TmssParams TwoCavityParams::tmss() const {
    validate();
    return {chi(), J(), spin_left, spin_right};
}

HilbertSpace two_cavity_space(const TwoCavityParams& tc, const SpaceLimits& limits) {
    return make_space({Dicke::from_spin(tc.spin_left), Fock{tc.n_max}, Dicke::from_spin(tc.spin_right), Fock{tc.n_max}},
                      limits);
}

TimeDependentOperator build_two_cavity_hamiltonian(const TwoCavityParams& tc, const HilbertSpace& space) {
    tc.validate();
    const std::size_t dl = space.find<Dicke>();
    const std::size_t dr = dl == HilbertSpace::npos ? dl : space.find<Dicke>(dl + 1);
    const std::size_t fl = space.find<Fock>();
    const std::size_t fr = fl == HilbertSpace::npos ? fl : space.find<Fock>(fl + 1);
    if (dr == HilbertSpace::npos || fr == HilbertSpace::npos)
        fail(ErrorKind::BadFactor, "two-cavity model needs Dicke x Fock x Dicke x Fock");

    const auto left = collective_spin_ops(space, dl);
    const auto right = collective_spin_ops(space, dr);
    const auto bl = boson_ops(space, fl);
    const auto br = boson_ops(space, fr);

    TimeDependentOperator H(space);
    H.add_with_hc(left.x * bl.a_dag, -0.5 * tc.A_left, tc.delta_left);
    H.add_with_hc(left.y * bl.a_dag, -0.5 * tc.B_left, -tc.gamma_left);
    H.add_with_hc(right.x * br.a_dag, -0.5 * tc.A_right, tc.delta_right);
    H.add_with_hc(right.y * br.a_dag, -0.5 * tc.B_right, -tc.gamma_right);
    H.add_with_hc(bl.a_dag * br.a, -tc.J_tilde, tc.delta_omega);
    return H;
}

HilbertSpace tmss_space(double spin_left, double spin_right, const SpaceLimits& limits) {
    return make_space({Dicke::from_spin(spin_left), Dicke::from_spin(spin_right)}, limits);
}

OperatorMatrix build_tmss_hamiltonian(const TmssParams& p, const HilbertSpace& space) {
    const auto ops = pair_spin_ops(space);
    const auto& L = ops.left;
    const auto& R = ops.right;
    const SparseMat h = p.chi * ((L.z * L.z).matrix() - (R.z * R.z).matrix()) +
                        2.0 * p.J * p.chi * ((L.x * R.y).matrix() + (L.y * R.x).matrix());
    SparseMat sym = 0.5 * (h + SparseMat(h.adjoint()));
    sym.prune(cplx(0.0), 0.0);
    return OperatorMatrix(space, std::move(sym), true);
}

OperatorMatrix build_tmss_hamiltonian_transverse(const TwoCavityParams& tc, const HilbertSpace& space) {
    tc.validate();
    const auto ops = pair_spin_ops(space);
    const auto& L = ops.left;
    const auto& R = ops.right;
    const double A = tc.A_left, B = tc.B_left, d = tc.delta_left, g = tc.gamma_right;
    const double cx = A * A / (4.0 * d), cy = B * B / (4.0 * g);
    const SparseMat h = -cx * (L.x * L.x).matrix() - cy * (L.y * L.y).matrix() + cx * (R.x * R.x).matrix() +
                        cy * (R.y * R.y).matrix() +
                        (tc.J_tilde * A * B / (2.0 * d * g)) * ((L.x * R.y).matrix() + (L.y * R.x).matrix());
    SparseMat sym = 0.5 * (h + SparseMat(h.adjoint()));
    sym.prune(cplx(0.0), 0.0);
    return OperatorMatrix(space, std::move(sym), true);
}

} // namespace tactsim
