// Damped least squares (Levenberg-Marquardt) for the drive-parameter constraint system.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>

#include <Eigen/Dense>

#include "tactsim/model.hpp"

namespace tactsim {

namespace {

constexpr std::array<const char*, 10> kNames = {"Delta1", "Delta2", "Omega1", "Omega2", "Omega1_tilde",
                                                "Omega2_tilde", "delta1", "delta2", "gamma1", "gamma2"};

std::array<double*, 10> slots(DriveParams& p) {
    return {&p.detuning1, &p.detuning2, &p.rabi1, &p.rabi2, &p.rabi_tilde1,
            &p.rabi_tilde2, &p.delta1, &p.delta2, &p.gamma1, &p.gamma2};
}

struct Branches {
    double A1, A2, B1, B2, c_z, c_z_scale, c_x, c_y;
};

Branches branches(const DriveParams& p) {
    Branches b{};
    b.A1 = p.g1 * p.rabi_tilde1 * (1.0 / p.detuning1 + 1.0 / (p.detuning1 + p.delta1));
    b.A2 = p.g2 * p.rabi_tilde2 * (1.0 / p.detuning2 + 1.0 / (p.detuning2 + p.delta2));
    b.B1 = p.g1 * p.rabi1 * (1.0 / p.detuning1 + 1.0 / (p.detuning1 - p.gamma1));
    b.B2 = p.g2 * p.rabi2 * (1.0 / p.detuning2 + 1.0 / (p.detuning2 - p.gamma2));
    const std::array<double, 4> t = {p.rabi_tilde1 * p.rabi_tilde1 / (p.detuning1 + p.delta1),
                                     p.rabi1 * p.rabi1 / (p.detuning1 - p.gamma1),
                                     p.rabi_tilde2 * p.rabi_tilde2 / (p.detuning2 + p.delta2),
                                     p.rabi2 * p.rabi2 / (p.detuning2 - p.gamma2)};
    b.c_z = 0.25 * (t[0] + t[1] - t[2] - t[3]);
    b.c_z_scale = 0.25 * (std::abs(t[0]) + std::abs(t[1]) + std::abs(t[2]) + std::abs(t[3]));
    b.c_x = b.A1 * b.A1 / (4.0 * p.delta1);
    b.c_y = b.B1 * b.B1 / (4.0 * p.gamma1);
    return b;
}

double nonzero_or(double x, double fallback) { return (std::isfinite(x) && x != 0.0) ? x : fallback; }

} // namespace

ExperimentalSolution solve_experimental_params(const ExperimentalTargets& targets) {
    targets.seed.validate();
    if (targets.chi && !(*targets.chi > 0.0)) fail(ErrorKind::InconsistentParams, "chi target must be positive");

    std::array<bool, 10> frozen{};
    for (const auto& name : targets.frozen) {
        const auto it = std::find_if(kNames.begin(), kNames.end(), [&](const char* n) { return name == n; });
        if (it == kNames.end()) fail(ErrorKind::ValidationError, "unknown adjustable parameter '" + name + "'");
        frozen[static_cast<std::size_t>(it - kNames.begin())] = true;
    }

    // Variables are the free parameters divided by their seed magnitude.
    DriveParams seed = targets.seed;
    auto seed_slots = slots(seed);
    double typical = 0.0;
    for (double* s : seed_slots) typical = std::max(typical, std::abs(*s));
    std::array<double, 10> scale{};
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < 10; ++i) {
        scale[i] = nonzero_or(std::abs(*seed_slots[i]), nonzero_or(typical, 1.0));
        if (!frozen[i]) free.push_back(i);
    }
    if (free.empty()) fail(ErrorKind::ValidationError, "every adjustable parameter is frozen");

    // Residuals are relative to the current magnitudes; with scales frozen at the seed every
    // residual is homogeneous in the drive amplitudes and the solver collapses onto zero drive.
    const double s_split = nonzero_or(std::max(std::abs(targets.detuning_split), std::abs(seed.detuning1)), 1.0);
    auto rel = [](double a, double b) { return (a - b) / nonzero_or(std::abs(a) + std::abs(b), 1.0); };

    std::vector<std::string> names = {"split", "A_equality", "B_equality", "c_z", "cx_eq_cy", "delta_equality",
                                      "gamma_equality"};
    if (targets.chi) names.emplace_back("chi");
    const auto m = static_cast<Eigen::Index>(names.size());
    const auto n = static_cast<Eigen::Index>(free.size());

    auto params_of = [&](const Eigen::VectorXd& x) {
        DriveParams p = seed;
        auto s = slots(p);
        for (Eigen::Index k = 0; k < n; ++k) *s[free[k]] = x[k] * scale[free[k]];
        return p;
    };
    auto residuals = [&](const Eigen::VectorXd& x) {
        const DriveParams p = params_of(x);
        const Branches b = branches(p);
        Eigen::VectorXd r(m);
        r[0] = (p.detuning1 - p.detuning2 - targets.detuning_split) / s_split;
        r[1] = rel(b.A1, b.A2);
        r[2] = rel(b.B1, b.B2);
        r[3] = b.c_z / nonzero_or(b.c_z_scale, 1.0);
        r[4] = rel(b.c_x, b.c_y);
        r[5] = rel(p.delta1, p.delta2);
        r[6] = rel(p.gamma1, p.gamma2);
        if (targets.chi) r[7] = (b.c_x - *targets.chi) / *targets.chi;
        return r;
    };

    Eigen::VectorXd x(n);
    for (Eigen::Index k = 0; k < n; ++k) x[k] = *seed_slots[free[k]] / scale[free[k]];
    Eigen::VectorXd r = residuals(x);
    if (!r.allFinite()) fail(ErrorKind::NoConvergence, "residuals are not finite at the seed");
    double cost = r.squaredNorm();
    double lambda = 1e-3;
    int it = 0;

    for (; it < targets.max_iterations && r.cwiseAbs().maxCoeff() > targets.tolerance; ++it) {
        Eigen::MatrixXd J(m, n);
        for (Eigen::Index k = 0; k < n; ++k) {
            const double h = 1e-7 * std::max(1.0, std::abs(x[k]));
            Eigen::VectorXd xp = x, xm = x;
            xp[k] += h;
            xm[k] -= h;
            J.col(k) = (residuals(xp) - residuals(xm)) / (2.0 * h);
        }
        const Eigen::MatrixXd JtJ = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * r;
        bool accepted = false;
        while (lambda < 1e20) {
            Eigen::MatrixXd lhs = JtJ;
            for (Eigen::Index k = 0; k < n; ++k) lhs(k, k) += lambda * std::max(JtJ(k, k), 1e-12);
            const Eigen::VectorXd step = lhs.ldlt().solve(-g);
            const Eigen::VectorXd xn = x + step;
            const Eigen::VectorXd rn = residuals(xn);
            if (step.allFinite() && rn.allFinite() && rn.squaredNorm() < cost) {
                x = xn;
                r = rn;
                cost = r.squaredNorm();
                lambda = std::max(lambda / 3.0, 1e-15);
                accepted = true;
                break;
            }
            lambda *= 4.0;
        }
        if (!accepted) break;
    }

    const double worst = r.cwiseAbs().maxCoeff();
    if (!(worst <= targets.tolerance))
        fail(ErrorKind::NoConvergence, "constraint residual " + std::to_string(worst) + " above tolerance after " +
                                           std::to_string(it) + " iterations");

    ExperimentalSolution sol;
    sol.params = params_of(x);
    sol.iterations = it;
    sol.max_residual = worst;
    for (Eigen::Index k = 0; k < m; ++k) sol.residuals.emplace_back(names[static_cast<std::size_t>(k)], r[k]);
    sol.coeffs = effective_coeffs(sol.params, CoeffMode::Approx, std::max(1e-6, 10.0 * targets.tolerance));
    sol.regime = validate_regime(sol.params, sol.coeffs);
    return sol;
}

} // namespace tactsim
