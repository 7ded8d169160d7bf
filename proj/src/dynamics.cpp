#include "tactsim/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <random>

namespace tactsim {

namespace {

constexpr cplx I{0.0, 1.0};
using Index = Eigen::Index;

// --- subspaces --------------------------------------------------------------

// Connected components of the union sparsity pattern; labels[i] = component id.
std::vector<int> components(const std::vector<const SparseMat*>& ops, std::size_t n) {
    std::vector<std::vector<Index>> adj(n);
    for (const SparseMat* m : ops)
        for (Index r = 0; r < m->outerSize(); ++r)
            for (SparseMat::InnerIterator it(*m, r); it; ++it)
                if (it.col() != r) {
                    adj[static_cast<std::size_t>(r)].push_back(it.col());
                    adj[static_cast<std::size_t>(it.col())].push_back(r);
                }
    std::vector<int> label(n, -1);
    int next = 0;
    std::vector<Index> stack;
    for (std::size_t s = 0; s < n; ++s) {
        if (label[s] >= 0) continue;
        label[s] = next;
        stack.assign(1, static_cast<Index>(s));
        while (!stack.empty()) {
            const Index v = stack.back();
            stack.pop_back();
            for (Index w : adj[static_cast<std::size_t>(v)])
                if (label[static_cast<std::size_t>(w)] < 0) {
                    label[static_cast<std::size_t>(w)] = next;
                    stack.push_back(w);
                }
        }
        ++next;
    }
    return label;
}

// Indices reachable from `seeds` by repeatedly applying the (directed) operators.
std::vector<char> reachable(const std::vector<const SparseMat*>& ops, const std::vector<Index>& seeds, std::size_t n) {
    std::vector<std::vector<Index>> fwd(n);  // column -> rows it feeds
    for (const SparseMat* m : ops)
        for (Index r = 0; r < m->outerSize(); ++r)
            for (SparseMat::InnerIterator it(*m, r); it; ++it) fwd[static_cast<std::size_t>(it.col())].push_back(r);
    std::vector<char> seen(n, 0);
    std::vector<Index> stack;
    for (Index s : seeds)
        if (!seen[static_cast<std::size_t>(s)]) {
            seen[static_cast<std::size_t>(s)] = 1;
            stack.push_back(s);
        }
    while (!stack.empty()) {
        const Index v = stack.back();
        stack.pop_back();
        for (Index w : fwd[static_cast<std::size_t>(v)])
            if (!seen[static_cast<std::size_t>(w)]) {
                seen[static_cast<std::size_t>(w)] = 1;
                stack.push_back(w);
            }
    }
    return seen;
}

// Rows `rows` (global indices, local order) and columns mapped through `col_map` (-1 drops).
SparseMat restrict_matrix(const SparseMat& m, const std::vector<Index>& rows, const std::vector<Index>& col_map,
                          Index n_cols) {
    std::vector<Eigen::Triplet<cplx>> trip;
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (SparseMat::InnerIterator it(m, rows[i]); it; ++it) {
            const Index c = col_map[static_cast<std::size_t>(it.col())];
            if (c >= 0) trip.emplace_back(static_cast<Index>(i), c, it.value());
        }
    SparseMat out(static_cast<Index>(rows.size()), n_cols);
    out.setFromTriplets(trip.begin(), trip.end());
    out.makeCompressed();
    return out;
}

// --- compiled time-dependent operator ------------------------------------------

// One sparse pattern holding sum_j e^{i w_j t} M_j; values are refreshed in place.
class Compiled {
public:
    Compiled() = default;
    explicit Compiled(const std::vector<std::pair<SparseMat, double>>& terms) {
        if (terms.empty()) return;
        const Index n = terms.front().first.rows();
        std::vector<Eigen::Triplet<cplx>> pattern;
        for (const auto& [m, w] : terms)
            for (Index r = 0; r < m.outerSize(); ++r)
                for (SparseMat::InnerIterator it(m, r); it; ++it) pattern.emplace_back(r, it.col(), 1.0);
        m_.resize(n, terms.front().first.cols());
        m_.setFromTriplets(pattern.begin(), pattern.end());
        m_.makeCompressed();

        struct Contribution {
            Index entry;
            int term;
            cplx value;
        };
        std::vector<Contribution> contrib;
        for (std::size_t j = 0; j < terms.size(); ++j) {
            freq_.push_back(terms[j].second);
            const SparseMat& m = terms[j].first;
            for (Index r = 0; r < m.outerSize(); ++r)
                for (SparseMat::InnerIterator it(m, r); it; ++it) {
                    const auto* begin = m_.innerIndexPtr() + m_.outerIndexPtr()[r];
                    const auto* end = m_.innerIndexPtr() + m_.outerIndexPtr()[r + 1];
                    const Index e = std::lower_bound(begin, end, static_cast<SparseMat::StorageIndex>(it.col())) -
                                    m_.innerIndexPtr();
                    contrib.push_back({e, static_cast<int>(j), it.value()});
                }
        }
        std::stable_sort(contrib.begin(), contrib.end(),
                         [](const Contribution& a, const Contribution& b) { return a.entry < b.entry; });
        start_.assign(static_cast<std::size_t>(m_.nonZeros()) + 1, 0);
        for (const auto& c : contrib) {
            ++start_[static_cast<std::size_t>(c.entry) + 1];
            term_.push_back(c.term);
            value_.push_back(c.value);
        }
        for (std::size_t e = 1; e < start_.size(); ++e) start_[e] += start_[e - 1];
        static_ = std::all_of(freq_.begin(), freq_.end(), [](double w) { return w == 0.0; });
        phase_.resize(freq_.size());
    }

    void update(double t) {
        if (m_.nonZeros() == 0) return;
        if (static_ && updated_) return;
        if (updated_ && t == last_t_) return;
        for (std::size_t j = 0; j < freq_.size(); ++j) phase_[j] = std::polar(1.0, freq_[j] * t);
        cplx* v = m_.valuePtr();
        const Index nnz = m_.nonZeros();
        for (Index e = 0; e < nnz; ++e) {
            cplx s = 0.0;
            for (int k = start_[static_cast<std::size_t>(e)]; k < start_[static_cast<std::size_t>(e) + 1]; ++k)
                s += phase_[static_cast<std::size_t>(term_[static_cast<std::size_t>(k)])] *
                     value_[static_cast<std::size_t>(k)];
            v[e] = s;
        }
        updated_ = true;
        last_t_ = t;
    }

    const SparseMat& matrix() const { return m_; }
    Index rows() const { return m_.rows(); }

private:
    SparseMat m_;
    std::vector<double> freq_;
    std::vector<int> start_;
    std::vector<int> term_;
    std::vector<cplx> value_;
    std::vector<cplx> phase_;
    bool static_ = true;
    bool updated_ = false;
    double last_t_ = 0.0;
};

std::vector<std::pair<SparseMat, double>> restricted_terms(const TimeDependentOperator& H,
                                                           const std::vector<Index>& rows,
                                                           const std::vector<Index>& col_map) {
    std::vector<std::pair<SparseMat, double>> out;
    for (const auto& term : H.terms())
        out.emplace_back(restrict_matrix(term.matrix, rows, col_map, static_cast<Index>(rows.size())), term.frequency);
    return out;
}

// --- step grid and integrators ---------------------------------------------------

struct StepGrid {
    std::vector<double> t;        // step boundaries
    std::vector<int> output_at;   // output index reached at boundary i, or -1
};

StepGrid make_grid(const std::vector<double>& times, double h_max) {
    StepGrid g;
    g.t.push_back(times.front());
    g.output_at.push_back(0);
    for (std::size_t k = 1; k < times.size(); ++k) {
        const double span = times[k] - times[k - 1];
        const auto n_sub = std::max<long>(1, static_cast<long>(std::ceil(span / h_max * (1.0 - 1e-12))));
        for (long j = 1; j <= n_sub; ++j) {
            g.t.push_back(j == n_sub ? times[k] : times[k - 1] + span * static_cast<double>(j) / n_sub);
            g.output_at.push_back(j == n_sub ? static_cast<int>(k) : -1);
        }
    }
    return g;
}

using Rhs = std::function<void(double t, const Vec& y, Vec& dy)>;

class Rk4 {
public:
    explicit Rk4(Index n) : k1_(n), k2_(n), k3_(n), k4_(n), tmp_(n) {}
    void step(const Rhs& f, double t, double h, Vec& y) {
        f(t, y, k1_);
        tmp_ = y + (0.5 * h) * k1_;
        f(t + 0.5 * h, tmp_, k2_);
        tmp_ = y + (0.5 * h) * k2_;
        f(t + 0.5 * h, tmp_, k3_);
        tmp_ = y + h * k3_;
        f(t + h, tmp_, k4_);
        y += (h / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
    }

private:
    Vec k1_, k2_, k3_, k4_, tmp_;
};

// Dormand-Prince 5(4) with FSAL and a relative 2-norm error measure.
class Dopri5 {
public:
    Dopri5(Index n, double rtol, double atol) : k_(7, Vec(n)), tmp_(n), y_new_(n), err_(n), rtol_(rtol), atol_(atol) {}

    // Advances y from t to t_end; returns accepted and rejected step counts through the stats.
    template <class AfterStep>
    void advance(const Rhs& f, double& t, double t_end, Vec& y, double h_max, EvolutionStats& st, AfterStep&& after) {
        static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
        static constexpr double a21 = 1.0 / 5;
        static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
        static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
        static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                                a54 = -212.0 / 729;
        static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                                a65 = -5103.0 / 18656;
        static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                                b6 = 11.0 / 84;
        static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                                e6 = 22.0 / 525, e7 = -1.0 / 40;
        if (!fsal_valid_) {
            f(t, y, k_[0]);
            fsal_valid_ = true;
        }
        if (h_ <= 0.0) h_ = std::min(h_max, t_end - t);
        while (t < t_end) {
            const bool last = t + std::min(h_, h_max) >= t_end;
            const double h = last ? t_end - t : std::min(h_, h_max);
            tmp_ = y + h * a21 * k_[0];
            f(t + c2 * h, tmp_, k_[1]);
            tmp_ = y + h * (a31 * k_[0] + a32 * k_[1]);
            f(t + c3 * h, tmp_, k_[2]);
            tmp_ = y + h * (a41 * k_[0] + a42 * k_[1] + a43 * k_[2]);
            f(t + c4 * h, tmp_, k_[3]);
            tmp_ = y + h * (a51 * k_[0] + a52 * k_[1] + a53 * k_[2] + a54 * k_[3]);
            f(t + c5 * h, tmp_, k_[4]);
            tmp_ = y + h * (a61 * k_[0] + a62 * k_[1] + a63 * k_[2] + a64 * k_[3] + a65 * k_[4]);
            f(t + h, tmp_, k_[5]);
            y_new_ = y + h * (b1 * k_[0] + b3 * k_[2] + b4 * k_[3] + b5 * k_[4] + b6 * k_[5]);
            f(t + h, y_new_, k_[6]);
            err_ = h * (e1 * k_[0] + e3 * k_[2] + e4 * k_[3] + e5 * k_[4] + e6 * k_[5] + e7 * k_[6]);
            const double scale = atol_ + rtol_ * std::max(y.norm(), y_new_.norm());
            const double e = err_.norm() / scale;
            if (!std::isfinite(e)) fail(ErrorKind::StepSizeTooLarge, "adaptive step produced a non-finite state");
            if (e <= 1.0) {
                t = last ? t_end : t + h;
                y.swap(y_new_);
                std::swap(k_[0], k_[6]);
                ++st.steps;
                if (after(y)) f(t, y, k_[0]);
                const double fac = e == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(e, -0.2), 0.2, 5.0);
                if (!last || h == h_) h_ = std::min(h * fac, h_max);
            } else {
                ++st.rejected;
                h_ = h * std::max(0.2, 0.9 * std::pow(e, -0.25));
                if (h_ < 1e-14 * std::max(1.0, std::abs(t)))
                    fail(ErrorKind::StepSizeTooLarge, "adaptive step size underflow");
            }
        }
    }

private:
    std::vector<Vec> k_;
    Vec tmp_, y_new_, err_;
    double rtol_, atol_;
    double h_ = 0.0;
    bool fsal_valid_ = false;
};

// Drives y across the output grid. `after` may modify y and returns true when it did.
template <class AfterStep, class Output>
void integrate(const Rhs& f, Vec& y, const std::vector<double>& times, const IntegratorConfig& cfg, double h_max,
               EvolutionStats& st, AfterStep&& after, Output&& out) {
    out(0, y);
    if (times.size() == 1) return;
    if (cfg.method == Method::RK4) {
        const StepGrid grid = make_grid(times, h_max);
        Rk4 rk(y.size());
        for (std::size_t i = 0; i + 1 < grid.t.size(); ++i) {
            rk.step(f, grid.t[i], grid.t[i + 1] - grid.t[i], y);
            ++st.steps;
            after(y);
            if (grid.output_at[i + 1] >= 0) out(static_cast<std::size_t>(grid.output_at[i + 1]), y);
        }
    } else {
        Dopri5 dp(y.size(), cfg.rtol, cfg.atol);
        double t = times.front();
        for (std::size_t k = 1; k < times.size(); ++k) {
            dp.advance(f, t, times[k], y, h_max, st, after);
            out(k, y);
        }
    }
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Pairwise (cascade) sum for an order-fixed reduction.
double pairwise_sum(const double* x, std::size_t n) {
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    const std::size_t h = n / 2;
    return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

void check_probe(const Probe& probe, const std::vector<double>& v) {
    if (v.size() != probe.names.size())
        fail(ErrorKind::DimensionMismatch, "probe returned " + std::to_string(v.size()) + " values for " +
                                               std::to_string(probe.names.size()) + " names");
}

std::vector<Index> support(const Vec& v) {
    std::vector<Index> s;
    for (Index i = 0; i < v.size(); ++i)
        if (v[i] != cplx(0.0)) s.push_back(i);
    return s;
}

} // namespace

// --- configuration ---------------------------------------------------------------

void IntegratorConfig::validate() const {
    if (!std::isfinite(t_final) || t_final < 0.0) fail(ErrorKind::ValidationError, "t_final must be finite and >= 0");
    if (n_output < 1) fail(ErrorKind::ValidationError, "n_output must be >= 1");
    if (t_final > 0.0 && n_output < 2) fail(ErrorKind::ValidationError, "n_output must be >= 2 when t_final > 0");
    if (!(oversample >= 20.0)) fail(ErrorKind::ValidationError, "oversample must be >= 20");
    if (dt && !(*dt > 0.0 && std::isfinite(*dt))) fail(ErrorKind::ValidationError, "dt must be positive");
    if (!(rtol > 0.0) || !(atol >= 0.0)) fail(ErrorKind::ValidationError, "tolerances must be positive");
    if (n_traj < 1) fail(ErrorKind::ValidationError, "n_traj must be >= 1");
}

double fastest_frequency(const TimeDependentOperator& H) {
    const double w = H.max_frequency();
    const auto n = static_cast<std::size_t>(H.space().dimension());
    std::vector<double> row(n, 0.0);
    for (const auto& term : H.terms())
        for (Index r = 0; r < term.matrix.outerSize(); ++r)
            for (SparseMat::InnerIterator it(term.matrix, r); it; ++it)
                row[static_cast<std::size_t>(r)] += std::abs(it.value());
    // Eigenvalues lie in [-r, r], so energy differences (phase frequencies) are at most 2r.
    const double bound = row.empty() ? 0.0 : 2.0 * *std::max_element(row.begin(), row.end());
    return std::max(w, bound);
}

double decay_scale(const std::vector<Channel>& channels) {
    double total = 0.0;
    for (const auto& c : channels) {
        if (c.rate == 0.0) continue;
        const SparseMat n = c.op.matrix().adjoint() * c.op.matrix();
        double r = 0.0;
        for (Index i = 0; i < n.outerSize(); ++i) {
            double row = 0.0;
            for (SparseMat::InnerIterator it(n, i); it; ++it) row += std::abs(it.value());
            r = std::max(r, row);
        }
        total += 2.0 * c.rate * r;
    }
    return total;
}

double step_bound(const TimeDependentOperator& H, const IntegratorConfig& cfg, double decay_rate) {
    const double w = std::max(fastest_frequency(H), decay_rate);
    double h = w > 0.0 ? 2.0 * std::numbers::pi / (w * cfg.oversample) : std::numeric_limits<double>::infinity();
    if (cfg.dt) {
        if (*cfg.dt > h * (1.0 + 1e-12))
            fail(ErrorKind::StepSizeTooLarge, "dt " + std::to_string(*cfg.dt) + " exceeds the oversample bound " +
                                                  std::to_string(h));
        h = *cfg.dt;
    }
    if (!std::isfinite(h)) h = cfg.t_final > 0.0 ? cfg.t_final : 1.0;
    return h;
}

std::vector<double> output_times(const IntegratorConfig& cfg) {
    if (cfg.t_final == 0.0) return {0.0};
    std::vector<double> t(static_cast<std::size_t>(cfg.n_output));
    for (int k = 0; k < cfg.n_output; ++k)
        t[static_cast<std::size_t>(k)] =
            k + 1 == cfg.n_output ? cfg.t_final : cfg.t_final * static_cast<double>(k) / (cfg.n_output - 1);
    return t;
}

std::uint64_t trajectory_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(seed ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

// --- TimeSeries ------------------------------------------------------------------

void TimeSeries::add(const std::string& name, std::vector<double> v, std::vector<double> err) {
    if (has(name)) fail(ErrorKind::ValidationError, "duplicate channel '" + name + "'");
    names.push_back(name);
    values.push_back(std::move(v));
    std_errors.push_back(std::move(err));
}

bool TimeSeries::has(const std::string& name) const {
    return std::find(names.begin(), names.end(), name) != names.end();
}

const std::vector<double>& TimeSeries::channel(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) fail(ErrorKind::ChannelMissing, "channel '" + name + "' not present");
    return values[static_cast<std::size_t>(it - names.begin())];
}

const std::vector<double>& TimeSeries::error(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) fail(ErrorKind::ChannelMissing, "channel '" + name + "' not present");
    return std_errors[static_cast<std::size_t>(it - names.begin())];
}

void TimeSeries::validate() const {
    for (std::size_t i = 1; i < times.size(); ++i)
        if (!(times[i] > times[i - 1])) fail(ErrorKind::ValidationError, "times must be strictly increasing");
    for (std::size_t c = 0; c < names.size(); ++c) {
        if (values[c].size() != times.size())
            fail(ErrorKind::DimensionMismatch, "channel '" + names[c] + "' has the wrong length");
        if (!std_errors[c].empty() && std_errors[c].size() != times.size())
            fail(ErrorKind::DimensionMismatch, "errors of channel '" + names[c] + "' have the wrong length");
    }
}

// --- Schrodinger -------------------------------------------------------------------

Evolution evolve_schrodinger(const TimeDependentOperator& H, const StateVector& psi0, const IntegratorConfig& cfg,
                             const Probe& probe) {
    cfg.validate();
    if (!(H.space() == psi0.space())) fail(ErrorKind::DimensionMismatch, "state and Hamiltonian spaces differ");
    if (std::abs(psi0.norm() - 1.0) > 1e-8) fail(ErrorKind::ValidationError, "initial state is not normalized");
    if (!probe.pure) fail(ErrorKind::ValidationError, "probe has no pure-state callback");
    const auto n = static_cast<std::size_t>(H.space().dimension());

    // Integrate only on the part of the space H can reach from the initial support.
    std::vector<const SparseMat*> ops;
    for (const auto& term : H.terms()) ops.push_back(&term.matrix);
    const auto seen = reachable(ops, support(psi0.amplitudes()), n);
    std::vector<Index> rows, col_map(n, -1);
    for (std::size_t i = 0; i < n; ++i)
        if (seen[i]) {
            col_map[i] = static_cast<Index>(rows.size());
            rows.push_back(static_cast<Index>(i));
        }
    Compiled Hc(restricted_terms(H, rows, col_map));
    const auto m = static_cast<Index>(rows.size());

    Vec y(m);
    for (Index i = 0; i < m; ++i) y[i] = psi0.amplitudes()[rows[static_cast<std::size_t>(i)]];
    const bool has_h = Hc.matrix().nonZeros() > 0;
    Rhs f = [&](double t, const Vec& x, Vec& dx) {
        if (!has_h) {
            dx.setZero(x.size());
            return;
        }
        Hc.update(t);
        dx.noalias() = Hc.matrix() * x;
        dx *= -I;
    };

    Evolution ev;
    ev.stats.subspace_dim = static_cast<std::size_t>(m);
    const auto times = output_times(cfg);
    ev.series.times = times;
    std::vector<std::vector<double>> rows_out(times.size());
    std::vector<double> norm_err(times.size(), 0.0);
    Vec full = Vec::Zero(static_cast<Index>(n));

    auto after = [&](Vec& x) {
        const double nrm = x.norm();
        const double drift = std::abs(nrm - 1.0);
        if (drift > 1e-6)
            fail(ErrorKind::StepSizeTooLarge, "per-step norm drift " + std::to_string(drift) + " exceeds 1e-6");
        ev.stats.max_step_drift = std::max(ev.stats.max_step_drift, drift);
        ev.stats.norm_error += drift;
        x /= nrm;
        return true;
    };
    auto out = [&](std::size_t k, const Vec& x) {
        for (Index i = 0; i < m; ++i) full[rows[static_cast<std::size_t>(i)]] = x[i];
        rows_out[k] = probe.pure(times[k], full);
        check_probe(probe, rows_out[k]);
        norm_err[k] = ev.stats.norm_error;
    };
    integrate(f, y, times, cfg, step_bound(H, cfg), ev.stats, after, out);

    for (std::size_t c = 0; c < probe.names.size(); ++c) {
        std::vector<double> v(times.size());
        for (std::size_t k = 0; k < times.size(); ++k) v[k] = rows_out[k][c];
        ev.series.add(probe.names[c], std::move(v));
    }
    ev.series.add("norm_err", std::move(norm_err));
    for (Index i = 0; i < m; ++i) full[rows[static_cast<std::size_t>(i)]] = y[i];
    ev.final_state = StateVector(psi0.space(), full);
    return ev;
}

// --- Lindblad ----------------------------------------------------------------------

LindbladResult evolve_lindblad(const TimeDependentOperator& H, const std::vector<Channel>& channels,
                               const DensityMatrix& rho0, const IntegratorConfig& cfg, const Probe& probe,
                               const SpaceLimits& limits) {
    cfg.validate();
    const HilbertSpace& space = rho0.space();
    if (!(H.space() == space)) fail(ErrorKind::DimensionMismatch, "state and Hamiltonian spaces differ");
    if (space.dimension() > limits.max_dense_dim)
        fail(ErrorKind::DimensionOverflow, "density matrix dimension " + std::to_string(space.dimension()) +
                                               " exceeds the dense cap " + std::to_string(limits.max_dense_dim));
    if (!probe.mixed) fail(ErrorKind::ValidationError, "probe has no density-matrix callback");
    if (std::abs(rho0.trace() - 1.0) > 1e-8) fail(ErrorKind::ValidationError, "initial density matrix trace != 1");
    for (const auto& c : channels) {
        if (!(c.op.space() == space)) fail(ErrorKind::DimensionMismatch, "jump '" + c.label + "' on another space");
        if (!(c.rate >= 0.0) || !std::isfinite(c.rate)) fail(ErrorKind::RateNegative, "jump '" + c.label + "' rate");
    }
    const auto n = static_cast<std::size_t>(space.dimension());

    std::vector<const Channel*> active;
    for (const auto& c : channels)
        if (c.rate > 0.0 && c.op.matrix().nonZeros() > 0) active.push_back(&c);

    // -(i/2) sum r O^dagger O
    SparseMat decay(static_cast<Index>(n), static_cast<Index>(n));
    for (const Channel* c : active) decay += c->rate * SparseMat(c->op.matrix().adjoint() * c->op.matrix());
    decay.prune(cplx(0.0), 0.0);

    // Populated indices: reachable from the initial support through H and the jumps.
    std::vector<Index> seeds;
    for (std::size_t i = 0; i < n; ++i)
        if (std::abs(rho0.matrix()(static_cast<Index>(i), static_cast<Index>(i))) > 0.0)
            seeds.push_back(static_cast<Index>(i));
    std::vector<const SparseMat*> hops;
    for (const auto& term : H.terms()) hops.push_back(&term.matrix);
    hops.push_back(&decay);
    std::vector<const SparseMat*> all = hops;
    for (const Channel* c : active) all.push_back(&c->op.matrix());
    const auto seen = reachable(all, seeds, n);

    // Sectors: components of the H_eff pattern; each jump must send a sector into a single sector.
    std::vector<int> label = components(hops, n);
    int n_sec = 0;
    {
        std::vector<int> remap(n, -1);
        for (std::size_t i = 0; i < n; ++i) {
            if (!seen[i]) {
                label[i] = -1;
                continue;
            }
            auto& r = remap[static_cast<std::size_t>(label[i])];
            if (r < 0) r = n_sec++;
            label[i] = r;
        }
    }
    std::vector<std::vector<int>> jump_map(active.size(), std::vector<int>(static_cast<std::size_t>(n_sec), -1));
    bool consistent = true;
    for (std::size_t c = 0; c < active.size() && consistent; ++c) {
        const SparseMat& o = active[c]->op.matrix();
        for (Index r = 0; r < o.outerSize() && consistent; ++r)
            for (SparseMat::InnerIterator it(o, r); it; ++it) {
                const int s = label[static_cast<std::size_t>(it.col())];
                if (s < 0) continue;
                const int u = label[static_cast<std::size_t>(r)];
                int& f = jump_map[c][static_cast<std::size_t>(s)];
                if (f >= 0 && f != u) {
                    consistent = false;
                    break;
                }
                f = u;
            }
    }
    if (!consistent) {
        for (std::size_t i = 0; i < n; ++i)
            if (seen[i]) label[i] = 0;
        n_sec = 1;
        for (auto& jm : jump_map) jm.assign(1, 0);
    }
    std::vector<std::vector<Index>> members(static_cast<std::size_t>(n_sec));
    std::vector<Index> local(n, -1);
    for (std::size_t i = 0; i < n; ++i)
        if (label[i] >= 0) {
            auto& mem = members[static_cast<std::size_t>(label[i])];
            local[i] = static_cast<Index>(mem.size());
            mem.push_back(static_cast<Index>(i));
        }

    // Populated block pairs: closure of the initial blocks under the jump maps.
    std::map<std::pair<int, int>, std::size_t> pair_index;
    std::vector<std::pair<int, int>> pairs;
    std::deque<std::pair<int, int>> queue;
    auto add_pair = [&](int a, int b) {
        if (pair_index.emplace(std::make_pair(a, b), pairs.size()).second) {
            pairs.emplace_back(a, b);
            queue.emplace_back(a, b);
        }
    };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (label[i] >= 0 && label[j] >= 0 &&
                rho0.matrix()(static_cast<Index>(i), static_cast<Index>(j)) != cplx(0.0))
                add_pair(label[i], label[j]);
    while (!queue.empty()) {
        const auto [a, b] = queue.front();
        queue.pop_front();
        for (const auto& jm : jump_map) {
            const int fa = jm[static_cast<std::size_t>(a)], fb = jm[static_cast<std::size_t>(b)];
            if (fa >= 0 && fb >= 0) add_pair(fa, fb);
        }
    }
    std::sort(pairs.begin(), pairs.end());
    for (std::size_t p = 0; p < pairs.size(); ++p) pair_index[pairs[p]] = p;

    // Per-sector compiled H_eff and per-channel restricted jumps.
    std::vector<Compiled> heff(static_cast<std::size_t>(n_sec));
    for (int s = 0; s < n_sec; ++s) {
        const auto& rows = members[static_cast<std::size_t>(s)];
        std::vector<Index> cmap(n, -1);
        for (std::size_t k = 0; k < rows.size(); ++k) cmap[static_cast<std::size_t>(rows[k])] = static_cast<Index>(k);
        auto terms = restricted_terms(H, rows, cmap);
        terms.emplace_back(restrict_matrix(decay, rows, cmap, static_cast<Index>(rows.size())) * cplx(0.0, -0.5), 0.0);
        heff[static_cast<std::size_t>(s)] = Compiled(terms);
    }
    struct Entry {
        Index row, col;
        cplx value;
    };
    struct Jump {
        double rate;
        std::vector<int> target;                // per source sector
        std::vector<SparseMat> op;              // per source sector: (target x source)
        std::vector<std::vector<Entry>> entries;  // nonzeros of op
    };
    std::vector<Jump> jumps;
    for (std::size_t c = 0; c < active.size(); ++c) {
        Jump j{active[c]->rate, jump_map[c], {}, {}};
        j.op.resize(static_cast<std::size_t>(n_sec));
        j.entries.resize(static_cast<std::size_t>(n_sec));
        for (int s = 0; s < n_sec; ++s) {
            const int u = jump_map[c][static_cast<std::size_t>(s)];
            if (u < 0) continue;
            const auto& src = members[static_cast<std::size_t>(s)];
            std::vector<Index> cmap(n, -1);
            for (std::size_t k = 0; k < src.size(); ++k) cmap[static_cast<std::size_t>(src[k])] = static_cast<Index>(k);
            SparseMat o = restrict_matrix(active[c]->op.matrix(), members[static_cast<std::size_t>(u)], cmap,
                                          static_cast<Index>(src.size()));
            auto& e = j.entries[static_cast<std::size_t>(s)];
            for (Index r = 0; r < o.outerSize(); ++r)
                for (SparseMat::InnerIterator it(o, r); it; ++it) e.push_back({r, it.col(), it.value()});
            j.op[static_cast<std::size_t>(s)] = std::move(o);
        }
        jumps.push_back(std::move(j));
    }

    // Flat storage of the blocks.
    std::vector<Index> offset(pairs.size() + 1, 0);
    for (std::size_t p = 0; p < pairs.size(); ++p)
        offset[p + 1] = offset[p] + static_cast<Index>(members[static_cast<std::size_t>(pairs[p].first)].size() *
                                                       members[static_cast<std::size_t>(pairs[p].second)].size());
    using Block = Eigen::Map<DenseMat>;
    using CBlock = Eigen::Map<const DenseMat>;
    auto dims = [&](std::size_t p) {
        return std::make_pair(static_cast<Index>(members[static_cast<std::size_t>(pairs[p].first)].size()),
                              static_cast<Index>(members[static_cast<std::size_t>(pairs[p].second)].size()));
    };
    std::vector<std::size_t> transpose(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p)
        transpose[p] = pair_index.at({pairs[p].second, pairs[p].first});

    Vec y = Vec::Zero(offset.back());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto [ra, cb] = dims(p);
        Block b(y.data() + offset[p], ra, cb);
        const auto& ri = members[static_cast<std::size_t>(pairs[p].first)];
        const auto& ci = members[static_cast<std::size_t>(pairs[p].second)];
        for (Index i = 0; i < ra; ++i)
            for (Index j = 0; j < cb; ++j) b(i, j) = rho0.matrix()(ri[static_cast<std::size_t>(i)], ci[static_cast<std::size_t>(j)]);
    }

    // Jump contributions as (source pair, target pair, channel) triples.
    struct Feed {
        std::size_t from, to, channel;
    };
    std::vector<Feed> feeds;
    for (std::size_t c = 0; c < jumps.size(); ++c)
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const int ta = jumps[c].target[static_cast<std::size_t>(pairs[p].first)];
            const int tb = jumps[c].target[static_cast<std::size_t>(pairs[p].second)];
            if (ta >= 0 && tb >= 0) feeds.push_back({p, pair_index.at({ta, tb}), c});
        }

    Vec scratch(y.size());
    DenseMat tmp, tmp2;
    Rhs f = [&](double t, const Vec& x, Vec& dx) {
        for (auto& h : heff) h.update(t);
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const auto [ra, cb] = dims(p);
            CBlock rho(x.data() + offset[p], ra, cb);
            Block out(scratch.data() + offset[p], ra, cb);
            out.noalias() = heff[static_cast<std::size_t>(pairs[p].first)].matrix() * rho;
            out *= -I;
        }
        dx.resize(x.size());
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const auto [ra, cb] = dims(p);
            Block d(dx.data() + offset[p], ra, cb);
            CBlock yt(scratch.data() + offset[transpose[p]], cb, ra);
            d = CBlock(scratch.data() + offset[p], ra, cb) + yt.adjoint();
        }
        // O rho O^dagger, either over pairs of nonzeros or as two sparse-dense products.
        for (const auto& fd : feeds) {
            const auto& j = jumps[fd.channel];
            const auto sa = static_cast<std::size_t>(pairs[fd.from].first);
            const auto sb = static_cast<std::size_t>(pairs[fd.from].second);
            const auto [ra, cb] = dims(fd.from);
            const auto [ta, tb] = dims(fd.to);
            CBlock rho(x.data() + offset[fd.from], ra, cb);
            Block d(dx.data() + offset[fd.to], ta, tb);
            const auto& ea = j.entries[sa];
            const auto& eb = j.entries[sb];
            const double pair_cost = static_cast<double>(ea.size()) * static_cast<double>(eb.size());
            const double product_cost = static_cast<double>(ea.size()) * static_cast<double>(cb) +
                                        static_cast<double>(eb.size()) * static_cast<double>(ta);
            if (pair_cost <= product_cost) {
                for (const auto& a : ea) {
                    const cplx va = j.rate * a.value;
                    for (const auto& b : eb) d(a.row, b.row) += va * std::conj(b.value) * rho(a.col, b.col);
                }
            } else {
                tmp.noalias() = j.op[sa] * rho;
                tmp2.noalias() = j.op[sb] * tmp.adjoint();
                d += j.rate * tmp2.adjoint();
            }
        }
    };

    LindbladResult res;
    res.blocks = pairs.size();
    res.stats.subspace_dim = 0;
    for (const auto& mem : members) res.stats.subspace_dim += mem.size();
    const auto times = output_times(cfg);
    res.series.times = times;
    std::vector<std::vector<double>> rows_out(times.size());
    std::vector<double> trace_err(times.size()), herm_err(times.size());
    DenseMat full(static_cast<Index>(n), static_cast<Index>(n));

    auto assemble = [&](const Vec& x) {
        full.setZero();
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const auto [ra, cb] = dims(p);
            CBlock b(x.data() + offset[p], ra, cb);
            const auto& ri = members[static_cast<std::size_t>(pairs[p].first)];
            const auto& ci = members[static_cast<std::size_t>(pairs[p].second)];
            for (Index i = 0; i < ra; ++i)
                for (Index j = 0; j < cb; ++j) full(ri[static_cast<std::size_t>(i)], ci[static_cast<std::size_t>(j)]) = b(i, j);
        }
    };
    auto after = [](Vec&) { return false; };
    auto out = [&](std::size_t k, const Vec& x) {
        assemble(x);
        trace_err[k] = std::abs(full.trace() - 1.0);
        herm_err[k] = (full - full.adjoint()).cwiseAbs().maxCoeff();
        if (trace_err[k] > 1e-6)
            fail(ErrorKind::TraceDrift, "trace drift " + std::to_string(trace_err[k]) + " at t = " +
                                            std::to_string(times[k]));
        rows_out[k] = probe.mixed(times[k], full);
        check_probe(probe, rows_out[k]);
    };
    integrate(f, y, times, cfg, step_bound(H, cfg, decay_scale(channels)), res.stats, after, out);

    for (std::size_t c = 0; c < probe.names.size(); ++c) {
        std::vector<double> v(times.size());
        for (std::size_t k = 0; k < times.size(); ++k) v[k] = rows_out[k][c];
        res.series.add(probe.names[c], std::move(v));
    }
    res.series.add("trace_err", std::move(trace_err));
    res.series.add("herm_err", std::move(herm_err));
    assemble(y);
    res.final_state = DensityMatrix(space, full, limits);
    return res;
}

// --- quantum trajectories -----------------------------------------------------------

McwfResult evolve_mcwf(const TimeDependentOperator& H, const std::vector<Channel>& channels, const StateVector& psi0,
                       const IntegratorConfig& cfg, const Probe& probe) {
    cfg.validate();
    if (!(H.space() == psi0.space())) fail(ErrorKind::DimensionMismatch, "state and Hamiltonian spaces differ");
    if (!probe.pure) fail(ErrorKind::ValidationError, "probe has no pure-state callback");
    for (const auto& c : channels) {
        if (!(c.op.space() == psi0.space())) fail(ErrorKind::DimensionMismatch, "jump '" + c.label + "' on another space");
        if (!(c.rate >= 0.0) || !std::isfinite(c.rate)) fail(ErrorKind::RateNegative, "jump '" + c.label + "' rate");
    }
    std::vector<const Channel*> active;
    for (const auto& c : channels)
        if (c.rate > 0.0 && c.op.matrix().nonZeros() > 0) active.push_back(&c);

    McwfResult res;
    res.times = output_times(cfg);
    res.names = probe.names;
    const auto n_traj = static_cast<std::size_t>(cfg.n_traj);
    const std::size_t n_out = res.times.size();
    res.samples.assign(n_traj, std::vector<std::vector<double>>(n_out));
    res.jumps.assign(n_traj, 0);

    if (active.empty()) {
        // No jumps: every trajectory is the Schrodinger solution.
        const Evolution ev = evolve_schrodinger(H, psi0, cfg, probe);
        for (std::size_t k = 0; k < n_out; ++k) {
            std::vector<double> row(probe.names.size());
            for (std::size_t c = 0; c < row.size(); ++c) row[c] = ev.series.values[c][k];
            for (auto& s : res.samples) s[k] = row;
        }
        res.integrated_paths = 1;
        res.stats = ev.stats;
        return res;
    }

    const auto n = static_cast<Index>(psi0.space().dimension());
    if (std::abs(psi0.norm() - 1.0) > 1e-8) fail(ErrorKind::ValidationError, "initial state is not normalized");
    SparseMat decay(n, n);
    for (const Channel* c : active) decay += c->rate * SparseMat(c->op.matrix().adjoint() * c->op.matrix());
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::vector<Index> ident(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = ident[static_cast<std::size_t>(i)] = i;
    auto terms = restricted_terms(H, all, ident);
    terms.emplace_back(decay * cplx(0.0, -0.5), 0.0);
    Compiled heff(terms);
    Rhs f = [&](double t, const Vec& x, Vec& dx) {
        heff.update(t);
        dx.noalias() = heff.matrix() * x;
        dx *= -I;
    };

    const StepGrid grid = make_grid(res.times, step_bound(H, cfg, decay_scale(channels)));
    std::vector<std::mt19937_64> rng;
    rng.reserve(n_traj);
    for (std::size_t i = 0; i < n_traj; ++i) rng.emplace_back(trajectory_seed(cfg.seed, i));
    std::vector<double> threshold(n_traj);
    auto draw_threshold = [&](std::size_t i) { threshold[i] = 1.0 - uniform01(rng[i]); };

    // A branch is a state shared by every member trajectory until each one's jump.
    struct Branch {
        Vec psi;
        std::size_t step;  // grid boundary index the state sits on
        std::vector<std::size_t> members;
    };
    std::vector<Branch> work;
    {
        Branch root{psi0.amplitudes(), 0, {}};
        for (std::size_t i = 0; i < n_traj; ++i) {
            draw_threshold(i);
            root.members.push_back(i);
        }
        work.push_back(std::move(root));
    }
    Rk4 rk(n);
    Vec jumped(n);
    auto record = [&](std::size_t k, const Vec& psi, const std::vector<std::size_t>& mem) {
        const Vec normalized = psi / psi.norm();
        std::vector<double> row = probe.pure(res.times[k], normalized);
        check_probe(probe, row);
        for (std::size_t i : mem) res.samples[i][k] = row;
    };

    while (!work.empty()) {
        Branch br = std::move(work.back());
        work.pop_back();
        ++res.integrated_paths;
        if (grid.output_at[br.step] >= 0 && br.step == 0) record(0, br.psi, br.members);
        for (std::size_t s = br.step; s + 1 < grid.t.size() && !br.members.empty(); ++s) {
            rk.step(f, grid.t[s], grid.t[s + 1] - grid.t[s], br.psi);
            ++res.stats.steps;
            const double norm2 = br.psi.squaredNorm();
            if (!std::isfinite(norm2)) fail(ErrorKind::StepSizeTooLarge, "trajectory state became non-finite");

            std::vector<std::size_t> stay, go;
            for (std::size_t i : br.members) (threshold[i] >= norm2 ? go : stay).push_back(i);
            if (!go.empty()) {
                std::vector<double> weight(active.size());
                std::vector<Vec> target(active.size());
                double total = 0.0;
                for (std::size_t c = 0; c < active.size(); ++c) {
                    target[c] = active[c]->op.matrix() * br.psi;
                    weight[c] = active[c]->rate * target[c].squaredNorm();
                    total += weight[c];
                }
                std::map<std::size_t, std::vector<std::size_t>> by_channel;
                for (std::size_t i : go) {
                    if (!(total > 0.0)) {
                        draw_threshold(i);
                        stay.push_back(i);
                        continue;
                    }
                    const double u = uniform01(rng[i]) * total;
                    double acc = 0.0;
                    std::size_t pick = active.size() - 1;
                    for (std::size_t c = 0; c < active.size(); ++c) {
                        acc += weight[c];
                        if (u < acc && weight[c] > 0.0) {
                            pick = c;
                            break;
                        }
                    }
                    while (weight[pick] == 0.0 && pick > 0) --pick;
                    by_channel[pick].push_back(i);
                    ++res.jumps[i];
                    draw_threshold(i);
                }
                std::sort(stay.begin(), stay.end());
                for (auto& [c, mem] : by_channel) {
                    Branch nb{target[c] / target[c].norm(), s + 1, std::move(mem)};
                    if (grid.output_at[s + 1] >= 0)
                        record(static_cast<std::size_t>(grid.output_at[s + 1]), nb.psi, nb.members);
                    if (s + 2 < grid.t.size()) work.push_back(std::move(nb));
                }
                br.members = std::move(stay);
            }
            if (grid.output_at[s + 1] >= 0 && !br.members.empty())
                record(static_cast<std::size_t>(grid.output_at[s + 1]), br.psi, br.members);
        }
    }
    return res;
}

TimeSeries McwfResult::summary() const {
    TimeSeries ts;
    ts.times = times;
    const std::size_t n = samples.size();
    std::vector<double> buf(n);
    for (std::size_t c = 0; c < names.size(); ++c) {
        std::vector<double> mean(times.size()), se(times.size());
        for (std::size_t k = 0; k < times.size(); ++k) {
            for (std::size_t i = 0; i < n; ++i) buf[i] = samples[i][k][c];
            const double m = pairwise_sum(buf.data(), n) / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) buf[i] = (samples[i][k][c] - m) * (samples[i][k][c] - m);
            mean[k] = m;
            se[k] = n > 1 ? std::sqrt(pairwise_sum(buf.data(), n) / static_cast<double>(n - 1) / static_cast<double>(n))
                          : 0.0;
        }
        ts.add(names[c], std::move(mean), std::move(se));
    }
    return ts;
}

TimeSeries McwfResult::derive(const std::vector<std::string>& out_names,
                              const std::function<std::vector<double>(double, const std::vector<double>&)>& f) const {
    TimeSeries ts;
    ts.times = times;
    const std::size_t n = samples.size();
    const std::size_t nc = names.size();
    std::vector<std::vector<double>> value(out_names.size(), std::vector<double>(times.size()));
    std::vector<std::vector<double>> err = value;
    std::vector<double> buf(n), mean(nc), loo(nc);
    for (std::size_t k = 0; k < times.size(); ++k) {
        for (std::size_t c = 0; c < nc; ++c) {
            for (std::size_t i = 0; i < n; ++i) buf[i] = samples[i][k][c];
            mean[c] = pairwise_sum(buf.data(), n);
        }
        std::vector<double> full_mean(nc);
        for (std::size_t c = 0; c < nc; ++c) full_mean[c] = mean[c] / static_cast<double>(n);
        const auto central = f(times[k], full_mean);
        if (central.size() != out_names.size()) fail(ErrorKind::DimensionMismatch, "derived channel count mismatch");
        std::vector<std::vector<double>> reps(out_names.size(), std::vector<double>(n));
        if (n > 1)
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t c = 0; c < nc; ++c)
                    loo[c] = (mean[c] - samples[i][k][c]) / static_cast<double>(n - 1);
                const auto r = f(times[k], loo);
                for (std::size_t o = 0; o < out_names.size(); ++o) reps[o][i] = r[o];
            }
        for (std::size_t o = 0; o < out_names.size(); ++o) {
            value[o][k] = central[o];
            if (n < 2) {
                err[o][k] = 0.0;
                continue;
            }
            const double m = pairwise_sum(reps[o].data(), n) / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) buf[i] = (reps[o][i] - m) * (reps[o][i] - m);
            err[o][k] = std::sqrt(static_cast<double>(n - 1) / static_cast<double>(n) * pairwise_sum(buf.data(), n));
        }
    }
    for (std::size_t o = 0; o < out_names.size(); ++o) ts.add(out_names[o], std::move(value[o]), std::move(err[o]));
    return ts;
}

} // namespace tactsim
