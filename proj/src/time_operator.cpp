#include "tactsim/time_operator.hpp"

#include <algorithm>
#include <cmath>

namespace tactsim {

TimeDependentOperator::TimeDependentOperator(HilbertSpace space) : space_(std::move(space)) {}

TimeDependentOperator::TimeDependentOperator(const OperatorMatrix& constant) : space_(constant.space()) {
    add(constant, 1.0, 0.0);
}

void TimeDependentOperator::add(const OperatorMatrix& op, cplx amplitude, double frequency) {
    if (!(op.space() == space_)) fail(ErrorKind::DimensionMismatch, "term lives on a different space");
    if (amplitude == cplx(0.0) || op.matrix().nonZeros() == 0) return;
    SparseMat scaled = op.matrix() * amplitude;
    for (auto& t : terms_) {
        if (t.frequency == frequency) {
            t.matrix = SparseMat(t.matrix + scaled);
            t.matrix.prune(cplx(0.0), 0.0);
            return;
        }
    }
    scaled.makeCompressed();
    terms_.push_back({std::move(scaled), frequency});
}

void TimeDependentOperator::add_with_hc(const OperatorMatrix& op, cplx amplitude, double frequency) {
    add(op, amplitude, frequency);
    add(op.adjoint(), std::conj(amplitude), -frequency);
}

bool TimeDependentOperator::is_constant() const {
    return std::all_of(terms_.begin(), terms_.end(), [](const Term& t) { return t.frequency == 0.0; });
}

double TimeDependentOperator::max_frequency() const {
    double w = 0.0;
    for (const auto& t : terms_) w = std::max(w, std::abs(t.frequency));
    return w;
}

std::size_t TimeDependentOperator::nonzeros() const {
    std::size_t n = 0;
    for (const auto& t : terms_) n += static_cast<std::size_t>(t.matrix.nonZeros());
    return n;
}

OperatorMatrix TimeDependentOperator::at(double t) const {
    const auto n = static_cast<Eigen::Index>(space_.dimension());
    SparseMat sum(n, n);
    for (const auto& term : terms_) sum += term.matrix * std::polar(1.0, term.frequency * t);
    return OperatorMatrix(space_, std::move(sum));
}

void TimeDependentOperator::apply(double t, const Vec& x, Vec& y) const {
    y.setZero(x.size());
    for (const auto& term : terms_) y.noalias() += std::polar(1.0, term.frequency * t) * (term.matrix * x);
}

} // namespace tactsim
