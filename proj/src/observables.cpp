#include "tactsim/observables.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>

namespace tactsim {

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 scaled(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

double variance(const SparseMat& op, const Vec& psi) {
    const Vec v = op * psi;
    const double m = psi.dot(v).real();
    return v.squaredNorm() - m * m;
}

} // namespace

std::vector<double> SpinMoments::flatten() const {
    return {mean[0],      mean[1],      mean[2],      second[0][0], second[1][1],
            second[2][2], second[0][1], second[0][2], second[1][2]};
}

SpinMoments SpinMoments::unflatten(const double* v) {
    SpinMoments m;
    m.mean = {v[0], v[1], v[2]};
    m.second[0][0] = v[3];
    m.second[1][1] = v[4];
    m.second[2][2] = v[5];
    m.second[0][1] = m.second[1][0] = v[6];
    m.second[0][2] = m.second[2][0] = v[7];
    m.second[1][2] = m.second[2][1] = v[8];
    return m;
}

SpinMoments spin_moments(const SpinTriple& s, const Vec& psi) {
    // <S_a S_b> = (S_a psi)^dagger (S_b psi) for Hermitian S_a
    const std::array<Vec, 3> v = {s.x.matrix() * psi, s.y.matrix() * psi, s.z.matrix() * psi};
    SpinMoments m;
    for (int a = 0; a < 3; ++a) m.mean[a] = psi.dot(v[a]).real();
    for (int a = 0; a < 3; ++a)
        for (int b = a; b < 3; ++b) m.second[a][b] = m.second[b][a] = v[a].dot(v[b]).real();
    return m;
}

SpinMoments spin_moments(const SpinTriple& s, const DenseMat& rho) {
    const std::array<const SparseMat*, 3> op = {&s.x.matrix(), &s.y.matrix(), &s.z.matrix()};
    SpinMoments m;
    for (int a = 0; a < 3; ++a) m.mean[a] = expectation(*op[a], rho).real();
    for (int a = 0; a < 3; ++a)
        for (int b = a; b < 3; ++b) {
            const SparseMat p = *op[a] * *op[b];
            m.second[a][b] = m.second[b][a] = expectation(p, rho).real();  // Re Tr(rho S_a S_b) is symmetric
        }
    return m;
}

SqueezingResult squeezing_from_moments(const SpinMoments& m, double spin) {
    SqueezingResult r;
    r.mean_spin = m.mean;
    const double len = std::sqrt(dot(m.mean, m.mean));
    if (!(len >= 1e-6 * spin)) {
        r.degenerate = true;
        return r;
    }
    const Vec3 n = scaled(m.mean, 1.0 / len);
    // Seed the perpendicular frame with the axis least aligned with n.
    int k = 0;
    for (int a = 1; a < 3; ++a)
        if (std::abs(n[a]) < std::abs(n[k])) k = a;
    Vec3 e1{};
    e1[k] = 1.0;
    const double proj = dot(e1, n);
    for (int a = 0; a < 3; ++a) e1[a] -= proj * n[a];
    e1 = scaled(e1, 1.0 / std::sqrt(dot(e1, e1)));
    const Vec3 e2 = cross(n, e1);

    auto cov = [&](const Vec3& u, const Vec3& v) {
        double c = 0.0;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) c += u[a] * v[b] * (m.second[a][b] - m.mean[a] * m.mean[b]);
        return c;
    };
    const double c11 = cov(e1, e1), c22 = cov(e2, e2), c12 = cov(e1, e2);
    const double half_tr = 0.5 * (c11 + c22);
    const double rad = std::hypot(0.5 * (c11 - c22), c12);
    // Smaller root written to avoid cancellation when the two eigenvalues differ strongly.
    const double big = half_tr + rad;
    const double det = c11 * c22 - c12 * c12;
    const double lmin = big > 0.0 ? det / big : half_tr - rad;
    const double theta = 0.5 * std::atan2(2.0 * c12, c11 - c22) + 0.5 * std::numbers::pi;
    for (int a = 0; a < 3; ++a) r.optimal_direction[a] = std::cos(theta) * e1[a] + std::sin(theta) * e2[a];
    r.xi2 = std::max(lmin, 0.0) / (0.5 * spin);
    r.xi2_db = 10.0 * std::log10(r.xi2);
    return r;
}

SqueezingResult squeezing_parameter(const StateVector& psi, double spin) {
    const auto ops = collective_spin_ops(psi.space(), spin_factor_index(psi.space()));
    const auto r = squeezing_from_moments(spin_moments(ops, psi.amplitudes()), spin);
    if (r.degenerate) fail(ErrorKind::DegenerateMeanSpin, "mean spin vanishes; squeezing direction undefined");
    return r;
}

SqueezingResult squeezing_parameter(const DensityMatrix& rho, double spin) {
    const auto ops = collective_spin_ops(rho.space(), spin_factor_index(rho.space()));
    const auto r = squeezing_from_moments(spin_moments(ops, rho.matrix()), spin);
    if (r.degenerate) fail(ErrorKind::DegenerateMeanSpin, "mean spin vanishes; squeezing direction undefined");
    return r;
}

double overlap_fidelity(const StateVector& psi0, const StateVector& psi) {
    if (!(psi0.space() == psi.space())) fail(ErrorKind::DimensionMismatch, "fidelity of states on different spaces");
    return std::min(1.0, std::abs(psi0.amplitudes().dot(psi.amplitudes())));
}

double overlap_fidelity(const StateVector& psi0, const DensityMatrix& rho) {
    if (!(psi0.space() == rho.space())) fail(ErrorKind::DimensionMismatch, "fidelity of states on different spaces");
    const Vec& v = psi0.amplitudes();
    const double p = v.dot(rho.matrix() * v).real();
    return std::sqrt(std::clamp(p, 0.0, 1.0));
}

TmssResult tmss_delta(const PairSpinOps& ops, const Vec& psi) {
    if (static_cast<std::size_t>(psi.size()) != ops.plus.z.space().dimension())
        fail(ErrorKind::DimensionMismatch, "state does not match the two-mode space");
    TmssResult r;
    r.var_minus_x = variance(ops.minus.x.matrix(), psi);
    r.var_plus_y = variance(ops.plus.y.matrix(), psi);
    r.mean_plus_z = expectation(ops.plus.z.matrix(), psi).real();
    r.delta_prime = r.var_minus_x + r.var_plus_y - r.mean_plus_z;
    return r;
}

TmssResult tmss_delta(const StateVector& psi) { return tmss_delta(pair_spin_ops(psi.space()), psi.amplitudes()); }

double entanglement_entropy(const HilbertSpace& space, const Vec& psi, std::size_t cut) {
    if (static_cast<std::size_t>(psi.size()) != space.dimension())
        fail(ErrorKind::DimensionMismatch, "state does not match the space");
    if (cut == 0 || cut >= space.num_factors())
        fail(ErrorKind::DimensionMismatch, "bipartition cut must leave factors on both sides");
    const std::size_t right = space.stride(cut - 1);
    const std::size_t left = space.dimension() / right;
    // Row-major basis: psi[iL * dR + iR] is the (iL, iR) entry of the coefficient matrix.
    const Eigen::Map<const DenseMat> m(psi.data(), static_cast<Eigen::Index>(left), static_cast<Eigen::Index>(right));
    const DenseMat rho_l = m * m.adjoint();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(rho_l, Eigen::EigenvaluesOnly);
    double e = 0.0;
    for (double lam : es.eigenvalues())
        if (lam > 1e-14) e -= lam * std::log(lam);
    return e;
}

double entanglement_entropy(const StateVector& psi, std::size_t cut) {
    return entanglement_entropy(psi.space(), psi.amplitudes(), cut);
}

QfiResult qfi_matrix(const PairSpinOps& ops, const Vec& psi) {
    if (static_cast<std::size_t>(psi.size()) != ops.plus.z.space().dimension())
        fail(ErrorKind::DimensionMismatch, "state does not match the two-mode space");
    const std::array<Vec, 2> v = {ops.plus.x.matrix() * psi, ops.minus.y.matrix() * psi};
    const std::array<double, 2> mean = {psi.dot(v[0]).real(), psi.dot(v[1]).real()};
    QfiResult q;
    // <{H_i, H_j}> = 2 Re <H_i psi | H_j psi>
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) q.I[i][j] = 4.0 * v[i].dot(v[j]).real() - 4.0 * mean[i] * mean[j];
    return q;
}

QfiResult qfi_matrix(const StateVector& psi) { return qfi_matrix(pair_spin_ops(psi.space()), psi.amplitudes()); }

AnalyticEstimates analytic_estimates(double N, double chi, double g, double delta, double gamma_d) {
    if (!(N > 1.0) || !(chi > 0.0) || !(g > 0.0) || !(delta > 0.0) || !(gamma_d > 0.0))
        fail(ErrorKind::ValidationError, "analytic estimates need N > 1 and positive rates");
    AnalyticEstimates a;
    a.t_opt = 1.58 * std::log(N) / (3.0 * N * chi);
    a.gamma_eff = delta * chi / (g * g) * gamma_d;
    a.t_decay = 1.0 / a.gamma_eff;
    a.gamma_eff_two_channel = 2.0 * a.gamma_eff;
    a.t_decay_two_channel = 1.0 / a.gamma_eff_two_channel;
    return a;
}

ChannelMinimum channel_minimum(const std::vector<double>& times, const std::vector<double>& values, double floor) {
    if (times.size() != values.size()) fail(ErrorKind::DimensionMismatch, "times and values differ in length");
    ChannelMinimum best;
    bool found = false;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (std::isfinite(values[i]) && (!found || values[i] < best.value)) {
            best = {values[i], times[i], i};
            found = true;
        }
    if (!found) return best;
    const std::size_t i = best.index;
    if (i == 0 || i + 1 >= values.size() || !std::isfinite(values[i - 1]) || !std::isfinite(values[i + 1]))
        return best;
    const double x0 = times[i - 1], x1 = times[i], x2 = times[i + 1];
    const double y0 = values[i - 1], y1 = values[i], y2 = values[i + 1];
    const double d01 = (y1 - y0) / (x1 - x0), d12 = (y2 - y1) / (x2 - x1);
    const double curv = (d12 - d01) / (x2 - x0);  // half the second derivative
    if (!(curv > 0.0)) return best;
    const double xv = 0.5 * (x0 + x1) - d01 / (2.0 * curv);
    if (!(xv > x0 && xv < x2)) return best;
    const double yv = y1 + d01 * (xv - x1) + curv * (xv - x0) * (xv - x1);
    best.time = xv;
    best.value = std::max(std::min(yv, y1), floor);
    return best;
}

SqueezingSummary squeezing_summary(const TimeSeries& series) {
    const bool has_xi = series.has("xi2"), has_dp = series.has("delta_prime");
    if (!has_xi && !has_dp) fail(ErrorKind::ChannelMissing, "summary needs an `xi2` or `delta_prime` channel");
    SqueezingSummary s;
    if (has_xi) {
        const auto m = channel_minimum(series.times, series.channel("xi2"), 0.0);
        if (std::isfinite(m.value)) {
            s.xi2_min = m.value;
            s.t_at_min = m.time;
            s.xi2_min_db = 10.0 * std::log10(m.value);
        }
    }
    if (has_dp) {
        const auto m = channel_minimum(series.times, series.channel("delta_prime"));
        if (std::isfinite(m.value)) {
            s.delta_prime_min = m.value;
            s.t_at_dmin = m.time;
        }
    }
    return s;
}

} // namespace tactsim
