#include "tactsim/operators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Eigenvalues>

namespace tactsim {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::DimensionOverflow: return "DimensionOverflow";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::BadFactor: return "BadFactor";
    case ErrorKind::InconsistentParams: return "InconsistentParams";
    case ErrorKind::BasisMismatch: return "BasisMismatch";
    case ErrorKind::NoConvergence: return "NoConvergence";
    case ErrorKind::StepSizeTooLarge: return "StepSizeTooLarge";
    case ErrorKind::TraceDrift: return "TraceDrift";
    case ErrorKind::RateNegative: return "RateNegative";
    case ErrorKind::DegenerateMeanSpin: return "DegenerateMeanSpin";
    case ErrorKind::ChannelMissing: return "ChannelMissing";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ValidationError: return "ValidationError";
    case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

Dicke Dicke::from_spin(double s) {
    const double twice = 2.0 * s;
    const double rounded = std::round(twice);
    if (!(s >= 0.0) || std::abs(twice - rounded) > 1e-9)
        fail(ErrorKind::BadFactor, "Dicke spin must be a non-negative multiple of 1/2, got " + std::to_string(s));
    return Dicke{static_cast<int>(rounded)};
}

std::size_t factor_dimension(const Factor& f) {
    return std::visit(
        [](const auto& x) -> std::size_t {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, AtomLevels>) {
                if (x.levels < 1 || x.atoms < 0) fail(ErrorKind::BadFactor, "AtomLevels needs levels >= 1, atoms >= 0");
                std::size_t d = 1;
                for (int i = 0; i < x.atoms; ++i) {
                    if (d > std::numeric_limits<std::size_t>::max() / static_cast<std::size_t>(x.levels))
                        fail(ErrorKind::DimensionOverflow, "AtomLevels dimension overflows");
                    d *= static_cast<std::size_t>(x.levels);
                }
                return d;
            } else if constexpr (std::is_same_v<T, Fock>) {
                if (x.n_max < 0) fail(ErrorKind::BadFactor, "Fock cutoff must be >= 0");
                return static_cast<std::size_t>(x.n_max) + 1;
            } else {
                if (x.two_s < 0) fail(ErrorKind::BadFactor, "Dicke 2S must be >= 0");
                return static_cast<std::size_t>(x.two_s) + 1;
            }
        },
        f);
}

std::string describe(const Factor& f) {
    std::ostringstream os;
    std::visit(
        [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, AtomLevels>)
                os << "AtomLevels(" << x.levels << "," << x.atoms << ")";
            else if constexpr (std::is_same_v<T, Fock>)
                os << "Fock(" << x.n_max << ")";
            else
                os << "Dicke(2S=" << x.two_s << ")";
        },
        f);
    return os.str();
}

HilbertSpace make_space(std::vector<Factor> factors, const SpaceLimits& limits) {
    HilbertSpace s;
    s.factors_ = std::move(factors);
    s.dims_.reserve(s.factors_.size());
    std::size_t dim = 1;
    for (const auto& f : s.factors_) {
        const std::size_t d = factor_dimension(f);
        if (d == 0) fail(ErrorKind::BadFactor, "factor has zero dimension: " + describe(f));
        if (dim > limits.max_vector_dim / d)
            fail(ErrorKind::DimensionOverflow, "space dimension exceeds cap " + std::to_string(limits.max_vector_dim));
        dim *= d;
        s.dims_.push_back(d);
    }
    s.dim_ = dim;
    s.strides_.assign(s.dims_.size(), 1);
    for (std::size_t i = s.dims_.size(); i-- > 1;) s.strides_[i - 1] = s.strides_[i] * s.dims_[i];
    return s;
}

std::vector<std::size_t> HilbertSpace::multi_index(std::size_t index) const {
    if (index >= dim_) fail(ErrorKind::DimensionMismatch, "basis index out of range");
    std::vector<std::size_t> out(dims_.size());
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        out[i] = index / strides_[i];
        index %= strides_[i];
    }
    return out;
}

std::size_t HilbertSpace::flat_index(std::span<const std::size_t> multi) const {
    if (multi.size() != dims_.size()) fail(ErrorKind::DimensionMismatch, "multi-index rank mismatch");
    std::size_t idx = 0;
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (multi[i] >= dims_[i]) fail(ErrorKind::DimensionMismatch, "multi-index component out of range");
        idx += multi[i] * strides_[i];
    }
    return idx;
}

std::string HilbertSpace::describe() const {
    std::string out;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
        if (i) out += " x ";
        out += tactsim::describe(factors_[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------

OperatorMatrix::OperatorMatrix(HilbertSpace space, SparseMat m, bool hermitian_hint)
    : space_(std::move(space)), m_(std::move(m)), hermitian_hint_(hermitian_hint) {
    const auto n = static_cast<Eigen::Index>(space_.dimension());
    if (m_.rows() != n || m_.cols() != n)
        fail(ErrorKind::DimensionMismatch, "operator shape does not match space dimension");
    m_.makeCompressed();
    if (hermitian_hint_) {
        const double scale = max_abs();
        if (hermiticity_error() > 1e-12 * std::max(scale, 1e-300))
            fail(ErrorKind::InconsistentParams, "operator flagged Hermitian is not");
    }
}

OperatorMatrix OperatorMatrix::zero(const HilbertSpace& space) {
    const auto n = static_cast<Eigen::Index>(space.dimension());
    return OperatorMatrix(space, SparseMat(n, n), true);
}

OperatorMatrix OperatorMatrix::identity(const HilbertSpace& space) {
    const auto n = static_cast<Eigen::Index>(space.dimension());
    SparseMat id(n, n);
    id.setIdentity();
    return OperatorMatrix(space, std::move(id), true);
}

OperatorMatrix OperatorMatrix::adjoint() const {
    SparseMat a = m_.adjoint();
    return OperatorMatrix(space_, std::move(a), hermitian_hint_);
}

double OperatorMatrix::max_abs() const {
    double m = 0.0;
    for (Eigen::Index k = 0; k < m_.outerSize(); ++k)
        for (SparseMat::InnerIterator it(m_, k); it; ++it) m = std::max(m, std::abs(it.value()));
    return m;
}

double OperatorMatrix::hermiticity_error() const {
    SparseMat d = m_ - SparseMat(m_.adjoint());
    double m = 0.0;
    for (Eigen::Index k = 0; k < d.outerSize(); ++k)
        for (SparseMat::InnerIterator it(d, k); it; ++it) m = std::max(m, std::abs(it.value()));
    return m;
}

void OperatorMatrix::require_same_space(const OperatorMatrix& o) const {
    if (!(space_ == o.space_)) fail(ErrorKind::DimensionMismatch, "operators live on different spaces");
}

OperatorMatrix OperatorMatrix::operator+(const OperatorMatrix& o) const {
    require_same_space(o);
    return OperatorMatrix(space_, SparseMat(m_ + o.m_));
}

OperatorMatrix OperatorMatrix::operator-(const OperatorMatrix& o) const {
    require_same_space(o);
    return OperatorMatrix(space_, SparseMat(m_ - o.m_));
}

OperatorMatrix OperatorMatrix::operator*(const OperatorMatrix& o) const {
    require_same_space(o);
    SparseMat p = (m_ * o.m_).pruned();
    return OperatorMatrix(space_, std::move(p));
}

OperatorMatrix OperatorMatrix::operator*(cplx s) const {
    return OperatorMatrix(space_, SparseMat(m_ * s), hermitian_hint_ && s.imag() == 0.0);
}

Vec OperatorMatrix::apply(const Vec& v) const {
    if (v.size() != m_.cols()) fail(ErrorKind::DimensionMismatch, "vector length does not match operator");
    return m_ * v;
}

OperatorMatrix commutator(const OperatorMatrix& a, const OperatorMatrix& b) { return a * b - b * a; }
OperatorMatrix anticommutator(const OperatorMatrix& a, const OperatorMatrix& b) { return a * b + b * a; }

// ---------------------------------------------------------------------------

StateVector::StateVector(HilbertSpace space, Vec amplitudes) : space_(std::move(space)), amps_(std::move(amplitudes)) {
    if (static_cast<std::size_t>(amps_.size()) != space_.dimension())
        fail(ErrorKind::DimensionMismatch, "amplitude count does not match space dimension");
}

StateVector StateVector::basis(const HilbertSpace& space, std::size_t index) {
    if (index >= space.dimension()) fail(ErrorKind::DimensionMismatch, "basis index out of range");
    Vec v = Vec::Zero(static_cast<Eigen::Index>(space.dimension()));
    v[static_cast<Eigen::Index>(index)] = 1.0;
    return StateVector(space, std::move(v));
}

double StateVector::normalize() {
    const double n = amps_.norm();
    if (n == 0.0) fail(ErrorKind::DimensionMismatch, "cannot normalize the zero vector");
    amps_ /= n;
    return n;
}

DensityMatrix::DensityMatrix(HilbertSpace space, DenseMat rho, const SpaceLimits& limits)
    : space_(std::move(space)), rho_(std::move(rho)) {
    if (space_.dimension() > limits.max_dense_dim)
        fail(ErrorKind::DimensionOverflow,
             "dense density matrix dimension " + std::to_string(space_.dimension()) + " exceeds cap " +
                 std::to_string(limits.max_dense_dim));
    const auto n = static_cast<Eigen::Index>(space_.dimension());
    if (rho_.rows() != n || rho_.cols() != n) fail(ErrorKind::DimensionMismatch, "density matrix shape mismatch");
}

DensityMatrix DensityMatrix::from_pure(const StateVector& psi, const SpaceLimits& limits) {
    if (psi.space().dimension() > limits.max_dense_dim)
        fail(ErrorKind::DimensionOverflow, "dense density matrix dimension exceeds cap");
    DenseMat rho = psi.amplitudes() * psi.amplitudes().adjoint();
    return DensityMatrix(psi.space(), std::move(rho), limits);
}

double DensityMatrix::hermiticity_error() const { return (rho_ - rho_.adjoint()).cwiseAbs().maxCoeff(); }

double DensityMatrix::min_eigenvalue() const {
    Eigen::MatrixXcd h = 0.5 * (rho_ + rho_.adjoint());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(h, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

cplx expectation(const SparseMat& op, const Vec& psi) { return psi.dot(op * psi); }

cplx expectation(const SparseMat& op, const DenseMat& rho) {
    // Tr(op rho) = sum_{ij} op_ij rho_ji
    cplx acc = 0.0;
    for (Eigen::Index i = 0; i < op.outerSize(); ++i)
        for (SparseMat::InnerIterator it(op, i); it; ++it) acc += it.value() * rho(it.col(), i);
    return acc;
}

cplx expectation(const OperatorMatrix& op, const StateVector& psi) {
    if (!(op.space() == psi.space())) fail(ErrorKind::DimensionMismatch, "operator and state spaces differ");
    return expectation(op.matrix(), psi.amplitudes());
}

cplx expectation(const OperatorMatrix& op, const DensityMatrix& rho) {
    if (!(op.space() == rho.space())) fail(ErrorKind::DimensionMismatch, "operator and state spaces differ");
    return expectation(op.matrix(), rho.matrix());
}

// ---------------------------------------------------------------------------

SparseMat embed_local(const SparseMat& local, std::size_t left, std::size_t right) {
    const std::size_t d = static_cast<std::size_t>(local.rows());
    const std::size_t n = left * d * right;
    std::vector<Eigen::Triplet<cplx>> trips;
    trips.reserve(static_cast<std::size_t>(local.nonZeros()) * left * right);
    for (std::size_t l = 0; l < left; ++l) {
        const std::size_t base = l * d * right;
        for (Eigen::Index a = 0; a < local.outerSize(); ++a)
            for (SparseMat::InnerIterator it(local, a); it; ++it) {
                const std::size_t row0 = base + static_cast<std::size_t>(a) * right;
                const std::size_t col0 = base + static_cast<std::size_t>(it.col()) * right;
                for (std::size_t r = 0; r < right; ++r)
                    trips.emplace_back(static_cast<int>(row0 + r), static_cast<int>(col0 + r), it.value());
            }
    }
    SparseMat out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    out.setFromTriplets(trips.begin(), trips.end());
    return out;
}

OperatorMatrix embed_factor(const HilbertSpace& space, std::size_t factor, const SparseMat& local,
                            bool hermitian_hint) {
    if (factor >= space.num_factors()) fail(ErrorKind::BadFactor, "factor index out of range");
    const std::size_t d = space.factor_dimension(factor);
    if (static_cast<std::size_t>(local.rows()) != d || static_cast<std::size_t>(local.cols()) != d)
        fail(ErrorKind::DimensionMismatch, "local operator does not match factor dimension");
    const std::size_t right = space.stride(factor);
    const std::size_t left = space.dimension() / (d * right);
    return OperatorMatrix(space, embed_local(local, left, right), hermitian_hint);
}

OperatorMatrix embed_atom(const HilbertSpace& space, std::size_t factor, int atom, const SparseMat& single,
                          bool hermitian_hint) {
    if (factor >= space.num_factors()) fail(ErrorKind::BadFactor, "factor index out of range");
    const auto* al = std::get_if<AtomLevels>(&space.factor(factor));
    if (!al) fail(ErrorKind::BadFactor, "factor " + describe(space.factor(factor)) + " is not AtomLevels");
    if (atom < 0 || atom >= al->atoms) fail(ErrorKind::BadFactor, "atom index out of range");
    if (single.rows() != al->levels) fail(ErrorKind::DimensionMismatch, "single-atom operator has wrong size");
    std::size_t right_atoms = 1;
    for (int j = atom + 1; j < al->atoms; ++j) right_atoms *= static_cast<std::size_t>(al->levels);
    const std::size_t d = space.factor_dimension(factor);
    const std::size_t left_atoms = d / (right_atoms * static_cast<std::size_t>(al->levels));
    const std::size_t right = space.stride(factor);
    const std::size_t left = space.dimension() / (d * right);
    return OperatorMatrix(space, embed_local(single, left * left_atoms, right_atoms * right), hermitian_hint);
}

OperatorMatrix atom_transition(const HilbertSpace& space, std::size_t factor, int atom, int to, int from) {
    const auto* al = std::get_if<AtomLevels>(&space.factor(factor));
    if (!al) fail(ErrorKind::BadFactor, "factor is not AtomLevels");
    if (to < 0 || from < 0 || to >= al->levels || from >= al->levels)
        fail(ErrorKind::BadFactor, "atomic level out of range");
    SparseMat t(al->levels, al->levels);
    t.insert(to, from) = 1.0;
    return embed_atom(space, factor, atom, t);
}

SparseMat kron(const SparseMat& a, const SparseMat& b) {
    std::vector<Eigen::Triplet<cplx>> trips;
    trips.reserve(static_cast<std::size_t>(a.nonZeros() * b.nonZeros()));
    for (Eigen::Index i = 0; i < a.outerSize(); ++i)
        for (SparseMat::InnerIterator ia(a, i); ia; ++ia)
            for (Eigen::Index k = 0; k < b.outerSize(); ++k)
                for (SparseMat::InnerIterator ib(b, k); ib; ++ib)
                    trips.emplace_back(static_cast<int>(ia.row() * b.rows() + ib.row()),
                                       static_cast<int>(ia.col() * b.cols() + ib.col()), ia.value() * ib.value());
    SparseMat out(a.rows() * b.rows(), a.cols() * b.cols());
    out.setFromTriplets(trips.begin(), trips.end());
    return out;
}

// ---------------------------------------------------------------------------

namespace {

struct LocalSpin {
    SparseMat x, y, z;
};

LocalSpin local_dicke(Dicke d) {
    const int n = d.two_s + 1;
    const double s = d.spin();
    SparseMat plus(n, n), z(n, n);
    for (int k = 0; k < n; ++k) {
        const double m = s - k;
        z.insert(k, k) = m;
        if (k > 0) {
            // S+ |S, m> = sqrt(S(S+1) - m(m+1)) |S, m+1>; index k-1 holds m+1.
            plus.insert(k - 1, k) = std::sqrt(s * (s + 1.0) - m * (m + 1.0));
        }
    }
    SparseMat minus = plus.adjoint();
    LocalSpin out;
    out.x = 0.5 * (plus + minus);
    out.y = cplx(0.0, -0.5) * (plus - minus);
    out.z = z;
    return out;
}

} // namespace

SpinTriple dicke_spin_matrices(Dicke d) {
    const auto space = make_space({d});
    auto l = local_dicke(d);
    return {OperatorMatrix(space, l.x, true), OperatorMatrix(space, l.y, true), OperatorMatrix(space, l.z, true)};
}

std::size_t spin_factor_index(const HilbertSpace& space) {
    for (std::size_t i = 0; i < space.num_factors(); ++i) {
        const auto& f = space.factor(i);
        if (std::holds_alternative<Dicke>(f)) return i;
        if (const auto* al = std::get_if<AtomLevels>(&f); al && al->levels >= 2) return i;
    }
    fail(ErrorKind::BadFactor, "space " + space.describe() + " has no spin factor");
}

SpinTriple collective_spin_ops(const HilbertSpace& space, std::size_t factor) {
    if (factor >= space.num_factors()) fail(ErrorKind::BadFactor, "factor index out of range");
    const Factor& f = space.factor(factor);
    if (const auto* d = std::get_if<Dicke>(&f)) {
        auto l = local_dicke(*d);
        return {embed_factor(space, factor, l.x, true), embed_factor(space, factor, l.y, true),
                embed_factor(space, factor, l.z, true)};
    }
    if (const auto* al = std::get_if<AtomLevels>(&f)) {
        if (al->levels < 2) fail(ErrorKind::BadFactor, "spin operators need at least two atomic levels");
        const int L = al->levels;
        // Single-atom spin-1/2 on levels |1> (index 0) and |2> (index 1).
        SparseMat sx(L, L), sy(L, L), sz(L, L);
        sx.insert(0, 1) = 0.5;
        sx.insert(1, 0) = 0.5;
        sy.insert(0, 1) = cplx(0.0, -0.5);
        sy.insert(1, 0) = cplx(0.0, 0.5);
        sz.insert(0, 0) = 0.5;
        sz.insert(1, 1) = -0.5;
        const auto n = static_cast<Eigen::Index>(space.dimension());
        SparseMat X(n, n), Y(n, n), Z(n, n);
        for (int j = 0; j < al->atoms; ++j) {
            X += embed_atom(space, factor, j, sx).matrix();
            Y += embed_atom(space, factor, j, sy).matrix();
            Z += embed_atom(space, factor, j, sz).matrix();
        }
        return {OperatorMatrix(space, std::move(X), true), OperatorMatrix(space, std::move(Y), true),
                OperatorMatrix(space, std::move(Z), true)};
    }
    fail(ErrorKind::BadFactor, "factor " + describe(f) + " cannot host spin operators");
}

BosonPair boson_ops(const HilbertSpace& space, std::size_t factor) {
    if (factor >= space.num_factors()) fail(ErrorKind::BadFactor, "factor index out of range");
    const auto* fk = std::get_if<Fock>(&space.factor(factor));
    if (!fk) fail(ErrorKind::BadFactor, "factor " + describe(space.factor(factor)) + " is not a Fock mode");
    const int n = fk->n_max + 1;
    SparseMat a(n, n);
    for (int k = 1; k < n; ++k) a.insert(k - 1, k) = std::sqrt(static_cast<double>(k));
    SparseMat ad = a.adjoint();
    return {embed_factor(space, factor, a), embed_factor(space, factor, ad)};
}

PairSpinOps pair_spin_ops(const HilbertSpace& space) {
    std::vector<std::size_t> dicke;
    for (std::size_t i = 0; i < space.num_factors(); ++i)
        if (std::holds_alternative<Dicke>(space.factor(i))) dicke.push_back(i);
    if (dicke.size() != 2) fail(ErrorKind::BadFactor, "pair spin operators need exactly two Dicke factors");
    PairSpinOps out;
    out.left = collective_spin_ops(space, dicke[0]);
    out.right = collective_spin_ops(space, dicke[1]);
    auto combine = [&](const OperatorMatrix& l, const OperatorMatrix& r, double sign) {
        return OperatorMatrix(space, SparseMat(l.matrix() + sign * r.matrix()), true);
    };
    out.plus = {combine(out.left.x, out.right.x, 1.0), combine(out.left.y, out.right.y, 1.0),
                combine(out.left.z, out.right.z, 1.0)};
    out.minus = {combine(out.left.x, out.right.x, -1.0), combine(out.left.y, out.right.y, -1.0),
                 combine(out.left.z, out.right.z, -1.0)};
    return out;
}

} // namespace tactsim
