// time_operator.hpp: operators of the form sum_j e^{i w_j t} M_j

#pragma once

#include <vector>

#include "tactsim/operators.hpp"

namespace tactsim {

// Terms sharing a frequency are merged at insertion, so the term list is
// one constant sparse matrix per distinct phase frequency.
class TimeDependentOperator {
public:
    struct Term {
        SparseMat matrix;
        double frequency = 0.0;  // rad/s; coefficient is e^{i frequency t}
    };

    TimeDependentOperator() = default;
    explicit TimeDependentOperator(HilbertSpace space);
    TimeDependentOperator(const OperatorMatrix& constant);  // NOLINT: implicit by intent

    // amplitude * e^{i frequency t} * op
    void add(const OperatorMatrix& op, cplx amplitude, double frequency = 0.0);
    // amplitude e^{i w t} op + h.c.
    void add_with_hc(const OperatorMatrix& op, cplx amplitude, double frequency);

    const HilbertSpace& space() const { return space_; }
    const std::vector<Term>& terms() const { return terms_; }
    bool is_constant() const;
    double max_frequency() const;
    std::size_t nonzeros() const;

    OperatorMatrix at(double t) const;
    void apply(double t, const Vec& x, Vec& y) const;

private:
    HilbertSpace space_;
    std::vector<Term> terms_;
};

} // namespace tactsim
