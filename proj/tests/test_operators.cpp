#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "tactsim/operators.hpp"
#include "tactsim/time_operator.hpp"
#include "test_util.hpp"

using namespace tactsim;
using testutil::dense;
using testutil::max_abs;

namespace {

void check_su2(const SpinTriple& s, double tol = 1e-12) {
    CHECK(max_abs(dense(commutator(s.x, s.y) - s.z * cplx(0, 1))) < tol);
    CHECK(max_abs(dense(commutator(s.y, s.z) - s.x * cplx(0, 1))) < tol);
    CHECK(max_abs(dense(commutator(s.z, s.x) - s.y * cplx(0, 1))) < tol);
}

} // namespace

TEST_CASE("space dimensions follow the product rule") {
    CHECK(make_space({AtomLevels{4, 2}, Fock{3}}).dimension() == 64);
    CHECK(make_space({Dicke::from_spin(5.0)}).dimension() == 11);
    CHECK(make_space({Dicke::from_spin(5.0), Dicke::from_spin(5.0)}).dimension() == 121);
    CHECK(make_space({Dicke::from_spin(0.5)}).dimension() == 2);
    CHECK(Dicke::from_spin(2.5).two_s == 5);
}

TEST_CASE("invalid factors and oversize spaces are rejected") {
    CHECK_THROWS_AS(Dicke::from_spin(0.3), Error);
    CHECK_THROWS_AS(make_space({Fock{-1}}), Error);
    SpaceLimits small;
    small.max_vector_dim = 100;
    try {
        make_space({AtomLevels{4, 4}}, small);
        FAIL("expected overflow");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::DimensionOverflow);
    }
    try {
        make_space({AtomLevels{4, 40}});
        FAIL("expected overflow");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::DimensionOverflow);
    }
}

TEST_CASE("basis index and multi-index round-trip") {
    const auto space = make_space({AtomLevels{3, 2}, Fock{2}, Dicke::from_spin(1.0)});
    REQUIRE(space.dimension() == 81);
    for (std::size_t i = 0; i < space.dimension(); ++i) {
        const auto m = space.multi_index(i);
        CHECK(space.flat_index(m) == i);
    }
    // Row-major: the last factor varies fastest.
    CHECK(space.multi_index(1) == std::vector<std::size_t>{0, 0, 1});
    CHECK(space.multi_index(3) == std::vector<std::size_t>{0, 1, 0});
    CHECK(space.multi_index(9) == std::vector<std::size_t>{1, 0, 0});
    CHECK(space.stride(0) == 9);
}

TEST_CASE("Dicke spin-1/2 and spin-1 matrices") {
    const auto s = dicke_spin_matrices(Dicke::from_spin(0.5));
    oracle::Mat z(2, 2), x(2, 2);
    z << 0.5, 0, 0, -0.5;
    x << 0, 0.5, 0.5, 0;
    CHECK(max_abs(dense(s.z.matrix()) - z) < 1e-15);
    CHECK(max_abs(dense(s.x.matrix()) - x) < 1e-15);

    const auto s1 = dicke_spin_matrices(Dicke::from_spin(1.0));
    const double r = 1.0 / std::sqrt(2.0);
    oracle::Mat x1(3, 3), z1(3, 3);
    x1 << 0, r, 0, r, 0, r, 0, r, 0;
    z1 << 1, 0, 0, 0, 0, 0, 0, 0, -1;
    CHECK(max_abs(dense(s1.x.matrix()) - x1) < 1e-15);
    CHECK(max_abs(dense(s1.z.matrix()) - z1) < 1e-15);
}

TEST_CASE("Dicke matrices match the ladder-formula oracle") {
    for (int two_s = 0; two_s <= 20; ++two_s) {
        const double S = 0.5 * two_s;
        const auto s = dicke_spin_matrices(Dicke{two_s});
        const auto o = oracle::dicke(S);
        CHECK(max_abs(dense(s.x.matrix()) - o.x) < 1e-13);
        CHECK(max_abs(dense(s.y.matrix()) - o.y) < 1e-13);
        CHECK(max_abs(dense(s.z.matrix()) - o.z) < 1e-13);
    }
}

TEST_CASE("su(2) closure and Casimir on every spin construction") {
    for (int two_s = 1; two_s <= 24; ++two_s) {
        const auto space = make_space({Dicke{two_s}});
        const auto s = collective_spin_ops(space, 0);
        check_su2(s);
        const double S = 0.5 * two_s;
        const auto cas = s.x * s.x + s.y * s.y + s.z * s.z;
        CHECK(max_abs(dense(cas) - S * (S + 1.0) * oracle::eye(two_s + 1)) < 1e-10);
    }
    for (int n = 1; n <= 4; ++n) {
        const auto space = make_space({AtomLevels{2, n}});
        check_su2(collective_spin_ops(space, 0));
    }
    // Spin triple on |1>,|2> of four-level atoms, next to a Fock spectator.
    check_su2(collective_spin_ops(make_space({AtomLevels{4, 2}, Fock{1}}), 0));
    // Dicke factor embedded between spectators.
    check_su2(collective_spin_ops(make_space({Fock{2}, Dicke{3}, Fock{1}}), 1));
}

TEST_CASE("collective qubit operators equal the explicit Pauli sums") {
    for (int n = 1; n <= 5; ++n) {
        const auto s = collective_spin_ops(make_space({AtomLevels{2, n}}), 0);
        const auto o = oracle::pauli_collective(n);
        CHECK(max_abs(dense(s.x) - o.x) < 1e-14);
        CHECK(max_abs(dense(s.y) - o.y) < 1e-14);
        CHECK(max_abs(dense(s.z) - o.z) < 1e-14);
    }
}

TEST_CASE("symmetric sector of N qubits is unitarily equivalent to Dicke(N/2)") {
    for (int n = 1; n <= 4; ++n) {
        const auto s = collective_spin_ops(make_space({AtomLevels{2, n}}), 0);
        const auto d = dicke_spin_matrices(Dicke{n});
        const double S = 0.5 * n;
        // Projector onto the maximal-spin sector from the qubit Casimir.
        const oracle::Mat cas = dense(s.x * s.x + s.y * s.y + s.z * s.z);
        Eigen::SelfAdjointEigenSolver<oracle::Mat> es(cas);
        std::vector<Eigen::Index> cols;
        for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
            if (std::abs(es.eigenvalues()[k] - S * (S + 1)) < 1e-9) cols.push_back(k);
        REQUIRE(cols.size() == static_cast<std::size_t>(n + 1));
        oracle::Mat P(cas.rows(), cols.size());
        for (std::size_t k = 0; k < cols.size(); ++k) P.col(k) = es.eigenvectors().col(cols[k]);
        // Generic combination so that the spectrum identifies the representation.
        const auto generic = [](const oracle::Mat& x, const oracle::Mat& y, const oracle::Mat& z) {
            return oracle::Mat(0.3 * x + 0.7 * y - 0.45 * z + 0.2 * x * x + 0.1 * (y * z + z * y));
        };
        const oracle::Mat q = P.adjoint() * generic(dense(s.x), dense(s.y), dense(s.z)) * P;
        const oracle::Mat dd = generic(dense(d.x), dense(d.y), dense(d.z));
        CHECK((oracle::spectrum(q) - oracle::spectrum(dd)).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("truncated boson operators") {
    const auto s1 = make_space({Fock{1}});
    oracle::Mat a1(2, 2);
    a1 << 0, 1, 0, 0;
    CHECK(max_abs(dense(boson_ops(s1, 0).a) - a1) < 1e-15);

    const auto s3 = make_space({Fock{3}});
    const auto b = boson_ops(s3, 0);
    oracle::Mat n = oracle::Mat::Zero(4, 4);
    for (int k = 0; k < 4; ++k) n(k, k) = k;
    CHECK(max_abs(dense(b.a_dag * b.a) - n) < 1e-14);

    for (int n_max = 1; n_max <= 6; ++n_max) {
        const auto sp = make_space({Fock{n_max}});
        const auto bo = boson_ops(sp, 0);
        oracle::Mat expect = oracle::eye(n_max + 1);
        expect(n_max, n_max) -= n_max + 1.0;
        CHECK(max_abs(dense(commutator(bo.a, bo.a_dag)) - expect) < 1e-12);
    }
}

TEST_CASE("pair spin operators") {
    const auto half = make_space({Dicke{1}, Dicke{1}});
    const auto p = pair_spin_ops(half);
    auto ev = oracle::spectrum(dense(p.plus.z));
    std::vector<double> e(ev.data(), ev.data() + ev.size());
    std::sort(e.begin(), e.end());
    CHECK(e[0] == doctest::Approx(-1.0));
    CHECK(e[1] == doctest::Approx(0.0));
    CHECK(e[2] == doctest::Approx(0.0));
    CHECK(e[3] == doctest::Approx(1.0));

    for (int two_s = 1; two_s <= 10; ++two_s) {
        const auto sp = make_space({Dicke{two_s}, Dicke{two_s}});
        const auto ops = pair_spin_ops(sp);
        const auto psi = StateVector::basis(sp, 0);
        CHECK(expectation(ops.plus.z, psi).real() == doctest::Approx(two_s));
    }

    const auto one = make_space({Dicke{2}, Dicke{2}});
    const auto q = pair_spin_ops(one);
    CHECK(max_abs(dense(commutator(q.plus.x, q.minus.x))) < 1e-12);
    CHECK(max_abs(dense(commutator(q.left.x, q.right.y))) < 1e-14);
    // Oracle: S+_x = S_x (x) 1 + 1 (x) S_x
    const auto o = oracle::dicke(1.0);
    CHECK(max_abs(dense(q.plus.x) - (oracle::kron(o.x, oracle::eye(3)) + oracle::kron(oracle::eye(3), o.x))) < 1e-14);
    CHECK(max_abs(dense(q.minus.y) - (oracle::kron(o.y, oracle::eye(3)) - oracle::kron(oracle::eye(3), o.y))) < 1e-14);
}

TEST_CASE("embedding commutes with products") {
    const auto space = make_space({Fock{2}, Dicke{3}, AtomLevels{2, 2}});
    const auto local = dicke_spin_matrices(Dicke{3});
    const auto ex = embed_factor(space, 1, local.x.matrix());
    const auto ey = embed_factor(space, 1, local.y.matrix());
    const SparseMat xy = local.x.matrix() * local.y.matrix();
    CHECK(max_abs(dense(ex * ey) - dense(embed_factor(space, 1, xy))) < 1e-14);
    // Oracle: I_3 (x) local (x) I_4
    CHECK(max_abs(dense(ex) - oracle::kron(oracle::kron(oracle::eye(3), dense(local.x.matrix())), oracle::eye(4))) <
          1e-15);
    // Operators on different factors commute.
    const auto bo = boson_ops(space, 0);
    CHECK(max_abs(dense(commutator(bo.a, ex))) < 1e-15);
}

TEST_CASE("atom transitions and Hermiticity bookkeeping") {
    const auto space = make_space({AtomLevels{4, 2}});
    const auto t = atom_transition(space, 0, 1, 0, 2);  // |1><3| on atom 1
    CHECK(max_abs(dense(t * t)) == 0.0);
    // Atom 1 is the least significant digit: |0,2> -> |0,0>.
    CHECK(std::abs(dense(t)(0, 2) - 1.0) < 1e-15);
    CHECK(t.hermiticity_error() == doctest::Approx(1.0));
    const auto h = t + t.adjoint();
    CHECK(h.hermiticity_error() == 0.0);
    CHECK_THROWS_AS(OperatorMatrix(space, t.matrix(), true), Error);
    CHECK_THROWS_AS(atom_transition(space, 0, 2, 0, 1), Error);
    CHECK_THROWS_AS(collective_spin_ops(make_space({Fock{3}}), 0), Error);
    CHECK_THROWS_AS(spin_factor_index(make_space({Fock{3}})), Error);
    CHECK(spin_factor_index(make_space({Fock{3}, AtomLevels{2, 3}})) == 1);
}

TEST_CASE("operators on different spaces do not mix") {
    const auto a = OperatorMatrix::identity(make_space({Dicke{2}}));
    const auto b = OperatorMatrix::identity(make_space({Fock{2}}));
    try {
        (void)(a + b);
        FAIL("expected mismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::DimensionMismatch);
    }
}

TEST_CASE("sparse storage is sorted with duplicates summed") {
    const auto space = make_space({Dicke{4}});
    const auto s = collective_spin_ops(space, 0);
    const auto h = s.x * s.x + s.x * s.x;
    const SparseMat& m = h.matrix();
    for (Eigen::Index r = 0; r < m.outerSize(); ++r) {
        Eigen::Index prev = -1;
        for (SparseMat::InnerIterator it(m, r); it; ++it) {
            CHECK(it.col() > prev);
            prev = it.col();
        }
    }
    CHECK(max_abs(dense(h) - 2.0 * dense(s.x) * dense(s.x)) < 1e-13);
}

TEST_CASE("density matrices and expectations") {
    const auto space = make_space({Dicke{2}});
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    Vec v(3);
    for (int k = 0; k < 3; ++k) v[k] = cplx(nd(rng), nd(rng));
    StateVector psi(space, v);
    psi.normalize();
    const auto rho = DensityMatrix::from_pure(psi);
    CHECK(std::abs(rho.trace() - 1.0) < 1e-14);
    CHECK(rho.hermiticity_error() < 1e-15);
    CHECK(rho.min_eigenvalue() > -1e-12);
    const auto s = collective_spin_ops(space, 0);
    CHECK(std::abs(expectation(s.x, psi) - expectation(s.x, rho)) < 1e-14);
    CHECK(std::abs(expectation(s.x, psi).real() - oracle::expect(oracle::dicke(1.0).x, psi.amplitudes())) < 1e-14);

    SpaceLimits tight;
    tight.max_dense_dim = 2;
    CHECK_THROWS_AS(DensityMatrix::from_pure(psi, tight), Error);
}

TEST_CASE("time-dependent operators merge equal frequencies and stay Hermitian") {
    const auto space = make_space({Dicke{2}, Fock{2}});
    const auto s = collective_spin_ops(space, 0);
    const auto b = boson_ops(space, 1);
    TimeDependentOperator H(space);
    H.add(s.z, 0.7);
    H.add_with_hc(s.x * b.a_dag, cplx(0.3, 0.1), 2.0);
    H.add_with_hc(s.y * b.a_dag, 0.2, 2.0);
    CHECK(H.terms().size() == 3);  // 0, +2, -2
    CHECK(H.max_frequency() == doctest::Approx(2.0));
    CHECK_FALSE(H.is_constant());
    for (double t : {0.0, 0.37, 1.9, 11.3}) {
        const auto m = H.at(t);
        CHECK(m.hermiticity_error() < 1e-14);
        Vec x = Vec::Random(static_cast<Eigen::Index>(space.dimension()));
        Vec y;
        H.apply(t, x, y);
        CHECK((y - m.apply(x)).norm() < 1e-13);
        // Oracle: explicit phase factors.
        const oracle::Mat X = dense(s.x * b.a_dag), Y = dense(s.y * b.a_dag);
        const cplx ph = std::exp(cplx(0, 2.0 * t));
        const oracle::Mat ref = 0.7 * dense(s.z) + cplx(0.3, 0.1) * ph * X + std::conj(cplx(0.3, 0.1) * ph) * X.adjoint() +
                                0.2 * ph * Y + 0.2 * std::conj(ph) * Y.adjoint();
        CHECK(max_abs(dense(m) - ref) < 1e-14);
    }
}
