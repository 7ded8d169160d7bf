// operators.hpp: Hilbert spaces, sparse operators, and spin/boson constructions

#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "tactsim/errors.hpp"

namespace tactsim {

using cplx = std::complex<double>;
using SparseMat = Eigen::SparseMatrix<cplx, Eigen::RowMajor>;
using DenseMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXcd;

// Tensor factors. Atomic levels are 0-based internally: level |1> is index 0,
// |2> index 1, and so on. Atoms inside an AtomLevels factor are ordered with
// atom 0 most significant.
struct AtomLevels {
    int levels = 2;
    int atoms = 1;
    bool operator==(const AtomLevels&) const = default;
};

struct Fock {
    int n_max = 0;
    bool operator==(const Fock&) const = default;
};

// Total spin S stored as the integer 2S; basis index k <-> m = S - k.
struct Dicke {
    int two_s = 0;
    double spin() const { return 0.5 * two_s; }
    static Dicke from_spin(double s);
    bool operator==(const Dicke&) const = default;
};

using Factor = std::variant<AtomLevels, Fock, Dicke>;

std::size_t factor_dimension(const Factor& f);
std::string describe(const Factor& f);

struct SpaceLimits {
    std::size_t max_vector_dim = 4'000'000;
    std::size_t max_dense_dim = 4096;
};

class HilbertSpace {
public:
    HilbertSpace() = default;

    std::size_t dimension() const { return dim_; }
    std::size_t num_factors() const { return factors_.size(); }
    const Factor& factor(std::size_t i) const { return factors_.at(i); }
    const std::vector<Factor>& factors() const { return factors_; }
    std::size_t factor_dimension(std::size_t i) const { return dims_.at(i); }
    // Product of the dimensions of all factors to the right of i.
    std::size_t stride(std::size_t i) const { return strides_.at(i); }

    std::vector<std::size_t> multi_index(std::size_t index) const;
    std::size_t flat_index(std::span<const std::size_t> multi) const;

    // First factor index holding the given alternative, counting from `from`.
    template <class T>
    std::size_t find(std::size_t from = 0) const {
        for (std::size_t i = from; i < factors_.size(); ++i)
            if (std::holds_alternative<T>(factors_[i])) return i;
        return npos;
    }

    std::string describe() const;

    bool operator==(const HilbertSpace& o) const { return factors_ == o.factors_; }

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

private:
    friend HilbertSpace make_space(std::vector<Factor>, const SpaceLimits&);

    std::vector<Factor> factors_;
    std::vector<std::size_t> dims_;
    std::vector<std::size_t> strides_;
    std::size_t dim_ = 0;
};

HilbertSpace make_space(std::vector<Factor> factors, const SpaceLimits& limits = {});

class OperatorMatrix {
public:
    OperatorMatrix() = default;
    OperatorMatrix(HilbertSpace space, SparseMat m, bool hermitian_hint = false);

    static OperatorMatrix zero(const HilbertSpace& space);
    static OperatorMatrix identity(const HilbertSpace& space);

    const HilbertSpace& space() const { return space_; }
    const SparseMat& matrix() const { return m_; }
    bool hermitian_hint() const { return hermitian_hint_; }

    OperatorMatrix adjoint() const;
    double max_abs() const;
    // max |M - M^dagger| entry
    double hermiticity_error() const;

    OperatorMatrix operator+(const OperatorMatrix& o) const;
    OperatorMatrix operator-(const OperatorMatrix& o) const;
    OperatorMatrix operator*(const OperatorMatrix& o) const;
    OperatorMatrix operator*(cplx s) const;
    friend OperatorMatrix operator*(cplx s, const OperatorMatrix& op) { return op * s; }
    Vec apply(const Vec& v) const;

private:
    void require_same_space(const OperatorMatrix& o) const;

    HilbertSpace space_;
    SparseMat m_;
    bool hermitian_hint_ = false;
};

OperatorMatrix commutator(const OperatorMatrix& a, const OperatorMatrix& b);
OperatorMatrix anticommutator(const OperatorMatrix& a, const OperatorMatrix& b);

class StateVector {
public:
    StateVector() = default;
    StateVector(HilbertSpace space, Vec amplitudes);

    static StateVector basis(const HilbertSpace& space, std::size_t index);

    const HilbertSpace& space() const { return space_; }
    const Vec& amplitudes() const { return amps_; }
    Vec& amplitudes() { return amps_; }
    double norm() const { return amps_.norm(); }
    // Returns the pre-normalization norm.
    double normalize();

private:
    HilbertSpace space_;
    Vec amps_;
};

class DensityMatrix {
public:
    DensityMatrix() = default;
    DensityMatrix(HilbertSpace space, DenseMat rho, const SpaceLimits& limits = {});

    static DensityMatrix from_pure(const StateVector& psi, const SpaceLimits& limits = {});

    const HilbertSpace& space() const { return space_; }
    const DenseMat& matrix() const { return rho_; }
    DenseMat& matrix() { return rho_; }

    cplx trace() const { return rho_.trace(); }
    double hermiticity_error() const;
    // Dense Hermitian eigensolve; intended for small dimensions.
    double min_eigenvalue() const;

private:
    HilbertSpace space_;
    DenseMat rho_;
};

cplx expectation(const OperatorMatrix& op, const StateVector& psi);
cplx expectation(const OperatorMatrix& op, const DensityMatrix& rho);
cplx expectation(const SparseMat& op, const Vec& psi);
cplx expectation(const SparseMat& op, const DenseMat& rho);

// I_left (x) local (x) I_right on the full space.
SparseMat embed_local(const SparseMat& local, std::size_t left, std::size_t right);
// Operator acting on a single factor, identity elsewhere.
OperatorMatrix embed_factor(const HilbertSpace& space, std::size_t factor, const SparseMat& local,
                            bool hermitian_hint = false);
// Single-atom operator (levels x levels) on atom `atom` of an AtomLevels factor.
OperatorMatrix embed_atom(const HilbertSpace& space, std::size_t factor, int atom, const SparseMat& single,
                          bool hermitian_hint = false);
// |to>_atom <from| with 0-based levels.
OperatorMatrix atom_transition(const HilbertSpace& space, std::size_t factor, int atom, int to, int from);

SparseMat kron(const SparseMat& a, const SparseMat& b);

struct SpinTriple {
    OperatorMatrix x, y, z;
};

struct BosonPair {
    OperatorMatrix a, a_dag;
};

struct PairSpinOps {
    SpinTriple plus, minus;  // S^(+-)_k = S^L_k +- S^R_k
    SpinTriple left, right;
};

// Angular momentum matrices in the |S,m> basis, m = S..-S.
SpinTriple dicke_spin_matrices(Dicke d);
SpinTriple collective_spin_ops(const HilbertSpace& space, std::size_t factor);
// First Dicke factor, or AtomLevels factor with at least two levels; throws BadFactor.
std::size_t spin_factor_index(const HilbertSpace& space);
BosonPair boson_ops(const HilbertSpace& space, std::size_t factor);
// Uses the first two Dicke factors of the space; any other factors are spectators.
PairSpinOps pair_spin_ops(const HilbertSpace& space);

} // namespace tactsim
