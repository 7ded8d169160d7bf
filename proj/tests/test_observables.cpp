#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "tactsim/model.hpp"
#include "tactsim/observables.hpp"
#include "test_util.hpp"

using namespace tactsim;
using testutil::dense;
using testutil::kind_of;

namespace {

Vec random_vec(Eigen::Index n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Vec v(n);
    for (auto& x : v) x = cplx(nd(rng), nd(rng));
    return v.normalized();
}

// Symmetric embedding of a Dicke-basis vector into the 2^N product basis (bit 1 = spin down).
oracle::Vec symmetric_embedding(const Vec& dicke, int N) {
    oracle::Vec out = oracle::Vec::Zero(Eigen::Index(1) << N);
    std::vector<int> count(static_cast<std::size_t>(N) + 1, 0);
    for (Eigen::Index i = 0; i < out.size(); ++i) ++count[static_cast<std::size_t>(__builtin_popcountll(i))];
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        const int k = __builtin_popcountll(i);
        out[i] = dicke[k] / std::sqrt(static_cast<double>(count[static_cast<std::size_t>(k)]));
    }
    return out;
}

// exp(-i theta (n . S)) psi
Vec rotate(const SpinTriple& s, const Eigen::Vector3d& n, double theta, const Vec& psi) {
    const oracle::Mat gen = n.x() * dense(s.x) + n.y() * dense(s.y) + n.z() * dense(s.z);
    return oracle::propagate(gen, psi, theta);
}

// Independent two-mode quantities from dense matrices.
struct PairDense {
    oracle::Mat lx, ly, lz, rx, ry, rz;
};

PairDense pair_dense(double SL, double SR) {
    const auto L = oracle::dicke(SL), R = oracle::dicke(SR);
    const auto il = oracle::eye(L.z.rows()), ir = oracle::eye(R.z.rows());
    return {oracle::kron(L.x, ir), oracle::kron(L.y, ir), oracle::kron(L.z, ir),
            oracle::kron(il, R.x), oracle::kron(il, R.y), oracle::kron(il, R.z)};
}

double variance(const oracle::Mat& A, const oracle::Vec& psi) {
    const double m = oracle::expect(A, psi);
    return oracle::expect(A * A, psi) - m * m;
}

std::vector<Vec> tmss_trajectory(double S, double J, const std::vector<double>& taus) {
    TmssParams p;
    p.chi = 1.0;
    p.J = J;
    p.spin_left = p.spin_right = S;
    const auto space = tmss_space(S, S);
    const oracle::Mat H = dense(build_tmss_hamiltonian(p, space));
    const Vec psi0 = StateVector::basis(space, 0).amplitudes();
    std::vector<Vec> out;
    for (double t : taus) out.push_back(oracle::propagate(H, psi0, t));
    return out;
}

std::vector<double> grid(double t_end, int n) {
    std::vector<double> t(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) t[static_cast<std::size_t>(k)] = t_end * k / (n - 1);
    return t;
}

} // namespace

TEST_CASE("coherent states have unit squeezing parameter in every direction") {
    for (double S : {0.5, 1.0, 3.0, 10.0}) {
        const auto space = make_space({Dicke{static_cast<int>(std::lround(2 * S))}});
        for (double theta : {0.0, 0.4, M_PI / 2, 2.0, M_PI})
            for (double phi : {0.0, 1.1, -2.5}) {
                const auto r = squeezing_parameter(StateVector(space, oracle::coherent(S, theta, phi)), S);
                CHECK(r.xi2 == doctest::Approx(1.0).epsilon(1e-8));
                CHECK(!r.degenerate);
            }
    }
    const auto space = make_space({Dicke{6}});
    const auto r = squeezing_parameter(StateVector::basis(space, 0), 3.0);
    CHECK(r.xi2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.xi2_db == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(r.mean_spin[2] == doctest::Approx(3.0));
}

TEST_CASE("spin-1 counter-twisting state in closed form") {
    const auto space = make_space({Dicke{2}});
    Vec v = Vec::Zero(3);
    v[0] = std::cos(M_PI / 8);
    v[2] = oracle::I * std::sin(M_PI / 8);
    const auto r = squeezing_parameter(StateVector(space, v), 1.0);
    CHECK(std::abs(r.xi2 - (1.0 - std::sqrt(2.0) / 2.0)) < 1e-10);
    CHECK(std::abs(r.mean_spin[0]) < 1e-12);
    CHECK(std::abs(r.mean_spin[1]) < 1e-12);
    CHECK(std::abs(r.mean_spin[2] - std::cos(M_PI / 4)) < 1e-12);
    CHECK(std::abs(r.optimal_direction[2]) < 1e-8);
    CHECK(r.xi2_db == doctest::Approx(10.0 * std::log10(r.xi2)));

    // chi t = pi/4: equal superposition of m = +-1, mean spin vanishes.
    v[0] = std::cos(M_PI / 4);
    v[2] = oracle::I * std::sin(M_PI / 4);
    CHECK(kind_of([&] { squeezing_parameter(StateVector(space, v), 1.0); }) == ErrorKind::DegenerateMeanSpin);
    const auto flagged = squeezing_from_moments(spin_moments(collective_spin_ops(space, 0), v), 1.0);
    CHECK(flagged.degenerate);
    CHECK(std::isnan(flagged.xi2));
}

TEST_CASE("density-matrix squeezing equals the pure-state value") {
    const auto space = make_space({Dicke{5}});
    const StateVector psi(space, random_vec(6, 3));
    const auto a = squeezing_parameter(psi, 2.5);
    const auto b = squeezing_parameter(DensityMatrix::from_pure(psi), 2.5);
    CHECK(std::abs(a.xi2 - b.xi2) < 1e-12);
}

TEST_CASE("Dicke pipeline agrees with explicit Pauli sums") {
    for (int N = 1; N <= 4; ++N) {
        const double S = N / 2.0;
        const auto dspace = make_space({Dicke{N}});
        const auto pspace = make_space({AtomLevels{2, N}});
        const auto pauli = oracle::pauli_collective(N);
        for (unsigned seed = 0; seed < 5; ++seed) {
            const Vec d = random_vec(N + 1, 100 * N + seed);
            const oracle::Vec prod = symmetric_embedding(d, N);
            const double via_dicke = squeezing_parameter(StateVector(dspace, d), S).xi2;
            const double via_product = squeezing_parameter(StateVector(pspace, prod), S).xi2;
            const double via_scan = oracle::xi2_scan(pauli, prod, S);
            CHECK(std::abs(via_dicke - via_scan) < 1e-10);
            CHECK(std::abs(via_product - via_scan) < 1e-10);

            // Non-symmetric product-basis states.
            const Vec g = random_vec(Eigen::Index(1) << N, 7 * N + seed);
            CHECK(std::abs(squeezing_parameter(StateVector(pspace, g), S).xi2 - oracle::xi2_scan(pauli, g, S)) < 1e-10);
        }
    }
}

TEST_CASE("squeezing parameter is invariant under global rotations") {
    const auto space = make_space({Dicke{8}});
    const auto s = collective_spin_ops(space, 0);
    const auto H = dense(build_lmg_hamiltonian(0.0, 1.0, 1.0, 0.0, space));
    const Vec squeezed = oracle::propagate(H, StateVector::basis(space, 0).amplitudes(), 0.15);
    for (const Vec& psi : {squeezed, random_vec(9, 21)}) {
        const double ref = squeezing_parameter(StateVector(space, psi), 4.0).xi2;
        for (unsigned k = 0; k < 6; ++k) {
            const Eigen::Vector3d n = Eigen::Vector3d::Random().normalized();
            const Vec rotated = rotate(s, n, 0.3 + k, psi);
            const auto r = squeezing_parameter(StateVector(space, rotated), 4.0);
            CHECK(std::abs(r.xi2 - ref) < 1e-8);
            const Eigen::Vector3d m(r.mean_spin[0], r.mean_spin[1], r.mean_spin[2]);
            const Eigen::Vector3d d(r.optimal_direction[0], r.optimal_direction[1], r.optimal_direction[2]);
            CHECK(std::abs(d.dot(m.normalized())) < 1e-8);
            CHECK(d.norm() == doctest::Approx(1.0));
        }
    }
}

TEST_CASE("overlap fidelity") {
    const auto space = make_space({Dicke{3}});
    const StateVector psi(space, random_vec(4, 1));
    CHECK(overlap_fidelity(psi, psi) == doctest::Approx(1.0));
    CHECK(overlap_fidelity(StateVector::basis(space, 0), StateVector::basis(space, 2)) == 0.0);
    const StateVector phased(space, std::exp(oracle::I * 0.7) * psi.amplitudes());
    CHECK(overlap_fidelity(psi, phased) == doctest::Approx(1.0));
    const StateVector other(space, random_vec(4, 2));
    CHECK(overlap_fidelity(psi, DensityMatrix::from_pure(other)) ==
          doctest::Approx(std::abs(psi.amplitudes().dot(other.amplitudes()))));
    const auto small = make_space({Dicke{2}});
    CHECK(kind_of([&] { overlap_fidelity(psi, StateVector::basis(small, 0)); }) == ErrorKind::DimensionMismatch);
}

TEST_CASE("two-mode criterion") {
    SUBCASE("stretched product state sits at zero") {
        const double S = 5.0;
        const auto r = tmss_delta(StateVector::basis(tmss_space(S, S), 0));
        CHECK(std::abs(r.var_minus_x - S) < 1e-12);
        CHECK(std::abs(r.var_plus_y - S) < 1e-12);
        CHECK(std::abs(r.mean_plus_z - 2 * S) < 1e-12);
        CHECK(std::abs(r.delta_prime) < 1e-12);
    }
    SUBCASE("component identity and dense oracle on random states") {
        const double SL = 1.5, SR = 2.0;
        const auto space = tmss_space(SL, SR);
        const auto d = pair_dense(SL, SR);
        for (unsigned seed = 0; seed < 4; ++seed) {
            const Vec psi = random_vec(static_cast<Eigen::Index>(space.dimension()), seed);
            const auto r = tmss_delta(StateVector(space, psi));
            CHECK(r.delta_prime == r.var_minus_x + r.var_plus_y - r.mean_plus_z);
            const double ref = variance(d.lx - d.rx, psi) + variance(d.ly + d.ry, psi) - oracle::expect(d.lz + d.rz, psi);
            CHECK(std::abs(r.delta_prime - ref) < 1e-10);
        }
    }
    SUBCASE("no coupling means no two-mode squeezing") {
        for (const Vec& psi : tmss_trajectory(5.0, 0.0, grid(3.0, 31)))
            CHECK(std::abs(tmss_delta(StateVector(tmss_space(5, 5), psi)).delta_prime) < 1e-10);
    }
    SUBCASE("coupling produces a negative dip") {
        double lowest = 0.0;
        for (const Vec& psi : tmss_trajectory(5.0, 0.1, grid(3.0, 61)))
            lowest = std::min(lowest, tmss_delta(StateVector(tmss_space(5, 5), psi)).delta_prime);
        CHECK(lowest < 0.0);
    }
}

TEST_CASE("entanglement entropy") {
    const auto space = tmss_space(1.0, 1.0);
    CHECK(std::abs(entanglement_entropy(StateVector::basis(space, 0))) < 1e-12);

    Vec bell = Vec::Zero(9);
    bell[2] = bell[6] = 1.0 / std::sqrt(2.0);  // |1,-1> and |-1,1>
    CHECK(entanglement_entropy(StateVector(space, bell)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    const double SL = 1.0, SR = 2.5;
    const auto uneven = tmss_space(SL, SR);
    const auto swapped = tmss_space(SR, SL);
    const Eigen::Index dl = 3, dr = 6;
    for (unsigned seed = 0; seed < 6; ++seed) {
        const Vec psi = random_vec(dl * dr, 40 + seed);
        const double e_left = entanglement_entropy(StateVector(uneven, psi));
        Vec t(dl * dr);
        for (Eigen::Index i = 0; i < dl; ++i)
            for (Eigen::Index j = 0; j < dr; ++j) t[j * dl + i] = psi[i * dr + j];
        const double e_right = entanglement_entropy(StateVector(swapped, t));
        CHECK(std::abs(e_left - e_right) < 1e-10);
        CHECK(std::abs(e_left - oracle::entropy(psi, dl, dr)) < 1e-10);
        CHECK(e_left <= std::log(3.0) + 1e-10);
    }
}

TEST_CASE("two-parameter Fisher information") {
    SUBCASE("stretched state") {
        const auto q = qfi_matrix(StateVector::basis(tmss_space(5, 5), 0));
        CHECK(q.I[0][0] == doctest::Approx(20.0).epsilon(1e-12));
        CHECK(q.I[1][1] == doctest::Approx(20.0).epsilon(1e-12));
        CHECK(std::abs(q.I[0][1]) < 1e-12);
        CHECK(q.I[0][1] == q.I[1][0]);
    }
    SUBCASE("dense oracle on random states") {
        const double SL = 2.0, SR = 1.5;
        const auto space = tmss_space(SL, SR);
        const auto d = pair_dense(SL, SR);
        const oracle::Mat H1 = d.lx + d.rx, H2 = d.ly - d.ry;
        for (unsigned seed = 0; seed < 4; ++seed) {
            const Vec psi = random_vec(static_cast<Eigen::Index>(space.dimension()), 60 + seed);
            const auto q = qfi_matrix(StateVector(space, psi));
            const oracle::Mat ops[2] = {H1, H2};
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j) {
                    const double ref = 2.0 * oracle::expect(ops[i] * ops[j] + ops[j] * ops[i], psi) -
                                       4.0 * oracle::expect(ops[i], psi) * oracle::expect(ops[j], psi);
                    CHECK(std::abs(q.I[i][j] - ref) < 1e-10);
                }
            CHECK(q.I[0][1] == q.I[1][0]);
            CHECK(q.I[0][0] >= 0.0);
            CHECK(q.I[1][1] >= 0.0);
        }
    }
    SUBCASE("two-mode evolution keeps the diagonal balanced") {
        for (double J : {0.05, 0.1})
            for (const Vec& psi : tmss_trajectory(5.0, J, grid(3.0, 31))) {
                const auto q = qfi_matrix(StateVector(tmss_space(5, 5), psi));
                CHECK(std::abs(q.I[0][0] - q.I[1][1]) < 1e-8);
                CHECK(std::abs(q.I[0][1]) < 1e-8);
            }
    }
}

TEST_CASE("two-mode figures of merit under counter-rotation about z") {
    // exp(-i theta (S^L_z - S^R_z)) maps (S-_x, S+_y) and (S+_x, S-_y) into rotated pairs and
    // commutes with the two-mode Hamiltonian, so delta', entropy and the balanced QFI survive it.
    const double S = 3.0;
    const auto space = tmss_space(S, S);
    const auto d = pair_dense(S, S);
    const oracle::Mat gen = d.lz - d.rz;
    std::vector<Vec> states = tmss_trajectory(S, 0.1, {0.4, 1.3});
    states.push_back(random_vec(49, 5));
    for (const Vec& psi : states) {
        const StateVector a(space, psi);
        const StateVector b(space, oracle::propagate(gen, psi, 0.77));
        CHECK(std::abs(tmss_delta(a).delta_prime - tmss_delta(b).delta_prime) < 1e-8);
        CHECK(std::abs(entanglement_entropy(a) - entanglement_entropy(b)) < 1e-8);
        const auto qa = qfi_matrix(a), qb = qfi_matrix(b);
        CHECK(std::abs((qa.I[0][0] + qa.I[1][1]) - (qb.I[0][0] + qb.I[1][1])) < 1e-8);
        const double det_a = qa.I[0][0] * qa.I[1][1] - qa.I[0][1] * qa.I[1][0];
        const double det_b = qb.I[0][0] * qb.I[1][1] - qb.I[0][1] * qb.I[1][0];
        CHECK(std::abs(det_a - det_b) < 1e-8 * std::max(1.0, std::abs(det_a)));
    }
    // Identical rotations of both cavities are local unitaries: the entropy is unchanged.
    const oracle::Mat same = d.lz + d.rz;
    const Vec psi = random_vec(49, 9);
    CHECK(std::abs(entanglement_entropy(StateVector(space, psi)) -
                   entanglement_entropy(StateVector(space, oracle::propagate(same, psi, 1.1)))) < 1e-8);
}

TEST_CASE("analytic time and decay estimates") {
    const double N = 1e5, g = 1.26e7, delta = 6.3e9, gamma_d = 3.77e7;
    const double chi = 0.0252;
    const auto e = analytic_estimates(N, chi, g, delta, gamma_d);
    CHECK(e.t_opt == doctest::Approx(2.4e-3).epsilon(0.02));  // quoted optimal time
    const double gamma_eff = delta * chi / (g * g) * gamma_d;
    CHECK(e.gamma_eff == doctest::Approx(gamma_eff).epsilon(1e-12));
    CHECK(e.gamma_eff == doctest::Approx(37.7).epsilon(1e-3));
    CHECK(e.t_decay == doctest::Approx(26.5e-3).epsilon(2e-3));
    CHECK(e.gamma_eff_two_channel == doctest::Approx(2 * gamma_eff));
    CHECK(e.t_decay_two_channel == doctest::Approx(13e-3).epsilon(0.05));  // quoted decay time
    CHECK(analytic_estimates(N, 2 * chi, g, delta, gamma_d).t_opt == doctest::Approx(e.t_opt / 2));
}

TEST_CASE("channel minimum extraction") {
    const auto t = grid(1.0, 11);
    std::vector<double> falling(11), flat(11, 0.4);
    for (std::size_t k = 0; k < 11; ++k) falling[k] = 1.0 - t[k];
    auto m = channel_minimum(t, falling);
    CHECK(m.index == 10);
    CHECK(m.time == 1.0);
    CHECK(m.value == doctest::Approx(0.0));
    m = channel_minimum(t, flat);
    CHECK(m.value == 0.4);
    CHECK(m.time == 0.0);

    const double chi = 2.0;
    const auto td = grid(0.6, 601);
    std::vector<double> xi(td.size());
    for (std::size_t k = 0; k < td.size(); ++k) xi[k] = 1.0 - std::abs(std::sin(2 * chi * td[k]));
    m = channel_minimum(td, xi, 0.0);
    CHECK(m.value >= 0.0);
    CHECK(m.value < 1e-3);
    CHECK(std::abs(m.time - M_PI / (4 * chi)) < td[1]);
}

TEST_CASE("squeezing summary") {
    TimeSeries ts;
    ts.times = grid(1.0, 5);
    ts.add("fidelity", {1, 0.9, 0.8, 0.7, 0.6});
    CHECK(kind_of([&] { squeezing_summary(ts); }) == ErrorKind::ChannelMissing);
    ts.add("xi2", {1.0, 0.5, 0.2, 0.5, 1.0});
    const auto s = squeezing_summary(ts);
    REQUIRE(s.xi2_min);
    CHECK(*s.xi2_min <= 0.2);
    CHECK(*s.t_at_min == doctest::Approx(0.5));
    CHECK(*s.xi2_min_db == doctest::Approx(10 * std::log10(*s.xi2_min)));
    CHECK(!s.delta_prime_min);
}
