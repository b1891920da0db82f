#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qdalign/error.hpp"

namespace qdalign {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Residual callback: fills r (pre-sized to residual_count) for parameters p.
using ResidualFn = std::function<void(const Vector& p, Vector& r)>;
/// Jacobian callback: fills J (residual_count x parameter count), dr_i/dp_j.
using JacobianFn = std::function<void(const Vector& p, Matrix& jac)>;

/// A bounded nonlinear least-squares problem: minimize sum_i r_i(p)^2.
struct FitProblem {
    std::size_t residual_count = 0;
    ResidualFn residuals;
    JacobianFn jacobian;  ///< optional; central differences when empty
    Vector initial;
    Vector lower;  ///< empty means unbounded below
    Vector upper;  ///< empty means unbounded above
    std::vector<bool> fixed;  ///< optional; fixed parameters stay at their initial value
    std::vector<std::string> names;
    int max_iterations = 200;
    double tolerance = 1e-10;  ///< relative cost decrease that counts as "no progress"
};

struct FitResult {
    Vector params;
    Matrix covariance;  ///< (JᵀJ)⁻¹ · cost/(m−n); zero rows/columns for fixed parameters
    double cost = 0.0;
    int iterations = 0;
    bool converged = false;
    Vector ci95;  ///< half-width of the 95.4% (2σ) interval per parameter
    Matrix robust_covariance;  ///< sandwich form (JᵀJ)⁻¹·Jᵀdiag(r²)J·(JᵀJ)⁻¹·m/(m−n), valid for unequal noise
    std::vector<double> cost_history;  ///< cost after each accepted step, starting with the initial cost

    double sigma(int i) const { return std::sqrt(std::max(covariance(i, i), 0.0)); }
};

namespace detail {

inline std::string param_name(const FitProblem& pb, int i) {
    if (static_cast<std::size_t>(i) < pb.names.size()) return pb.names[i];
    return "p" + std::to_string(i);
}

inline void numeric_jacobian(const FitProblem& pb, const Vector& p, const std::vector<int>& free, Matrix& jac) {
    Vector rp(pb.residual_count), rm(pb.residual_count);
    Vector q = p;
    for (std::size_t k = 0; k < free.size(); ++k) {
        const int j = free[k];
        const double h = 1e-6 * std::max(std::fabs(p[j]), 1e-3);
        q[j] = p[j] + h;
        pb.residuals(q, rp);
        q[j] = p[j] - h;
        pb.residuals(q, rm);
        q[j] = p[j];
        jac.col(static_cast<Eigen::Index>(k)) = (rp - rm) / (2.0 * h);
    }
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace detail

/// Damped Gauss–Newton (Levenberg–Marquardt) with bound projection.
///
/// The damping term is mu·diag(JᵀJ) with mu starting at 1e-3, divided by 10 after an
/// accepted step and multiplied by 10 after a rejected one. The very first trial is an
/// undamped Gauss–Newton step, so linear problems are solved in one iteration.
/// Converges when two consecutive accepted steps lower the cost by less than
/// `tolerance` (relative), when the cost reaches zero, or when no step can lower it.
inline FitResult lm_fit(const FitProblem& pb) {
    const auto n = static_cast<int>(pb.initial.size());
    const auto m = static_cast<Eigen::Index>(pb.residual_count);
    if (n == 0) throw ContractError("lm_fit: no parameters");
    if (!pb.residuals) throw ContractError("lm_fit: residual function missing");
    if (!(pb.tolerance > 0.0)) throw ContractError("lm_fit: tolerance must be positive");
    const bool has_lower = pb.lower.size() == n, has_upper = pb.upper.size() == n;
    if ((pb.lower.size() != 0 && !has_lower) || (pb.upper.size() != 0 && !has_upper))
        throw ContractError("lm_fit: bound vectors have the wrong size");
    for (int j = 0; j < n; ++j) {
        if ((has_lower && pb.initial[j] < pb.lower[j]) || (has_upper && pb.initial[j] > pb.upper[j]))
            throw ContractError("lm_fit: initial value of " + detail::param_name(pb, j) + " outside bounds");
    }

    std::vector<int> free;
    for (int j = 0; j < n; ++j)
        if (pb.fixed.empty() || !pb.fixed[j]) free.push_back(j);
    const auto nf = static_cast<Eigen::Index>(free.size());
    if (nf == 0) throw ContractError("lm_fit: every parameter is fixed");

    auto project = [&](Vector& p) {
        for (int j = 0; j < n; ++j) {
            if (has_lower) p[j] = std::max(p[j], pb.lower[j]);
            if (has_upper) p[j] = std::min(p[j], pb.upper[j]);
        }
    };
    Matrix full_jac(m, n);
    auto eval_jacobian = [&](const Vector& p, Matrix& jac) {
        if (pb.jacobian) {
            pb.jacobian(p, full_jac);
            for (Eigen::Index k = 0; k < nf; ++k) jac.col(k) = full_jac.col(free[k]);
        } else {
            detail::numeric_jacobian(pb, p, free, jac);
        }
    };

    Vector p = pb.initial;
    Vector r(m), r_new(m);
    pb.residuals(p, r);
    if (!detail::all_finite(r)) throw ContractError("lm_fit: residuals not finite at the initial parameters");

    FitResult res;
    double cost = r.squaredNorm();
    res.cost_history.push_back(cost);

    Matrix jac(m, nf);
    eval_jacobian(p, jac);
    Matrix a = jac.transpose() * jac;
    Vector g = jac.transpose() * r;
    for (Eigen::Index k = 0; k < nf; ++k)
        if (!(a(k, k) > 0.0)) throw RankDeficientError(detail::param_name(pb, free[k]));

    // exact fits: the residual norm has dropped by nine orders of magnitude or to rounding level
    const double tiny_cost = std::max(1e-28 * std::max<double>(1.0, static_cast<double>(m)), 1e-18 * cost);
    double mu = 1e-3;
    bool gauss_newton_first = true;
    int small_steps = 0;
    bool converged = cost <= tiny_cost;

    while (!converged && res.iterations < pb.max_iterations) {
        ++res.iterations;
        const double damping = gauss_newton_first ? 0.0 : mu;
        Matrix lhs = a;
        for (Eigen::Index k = 0; k < nf; ++k) lhs(k, k) += damping * a(k, k);
        Eigen::LDLT<Matrix> ldlt(lhs);
        Vector step;
        bool solved = ldlt.info() == Eigen::Success && ldlt.isPositive();
        if (solved) {
            step = ldlt.solve(-g);
            solved = step.allFinite();
        }

        bool accepted = false;
        if (solved) {
            Vector p_new = p;
            for (Eigen::Index k = 0; k < nf; ++k) p_new[free[k]] += step[k];
            project(p_new);
            pb.residuals(p_new, r_new);
            const double cost_new = r_new.allFinite() ? r_new.squaredNorm() : std::numeric_limits<double>::infinity();
            if (cost_new < cost) {
                accepted = true;
                const double rel = (cost - cost_new) / cost;
                const double step_size = (p_new - p).norm();
                p = p_new;
                r.swap(r_new);
                cost = cost_new;
                res.cost_history.push_back(cost);
                small_steps = rel < pb.tolerance ? small_steps + 1 : 0;
                if (small_steps >= 2 || cost <= tiny_cost || step_size <= 1e-15 * (p.norm() + 1e-15)) converged = true;
                if (!gauss_newton_first) mu = std::max(mu / 10.0, 1e-15);
                eval_jacobian(p, jac);
                a = jac.transpose() * jac;
                g = jac.transpose() * r;
            }
        }
        if (!accepted && !gauss_newton_first) {
            mu *= 10.0;
            // the damped step has shrunk to nothing: we sit at a (possibly bound-constrained) minimum
            if (mu > 1e16) converged = true;
        }
        gauss_newton_first = false;
    }

    res.params = p;
    res.cost = cost;
    res.converged = converged;

    // covariance at the solution, with a scale-free rank test on the correlation form of JᵀJ
    Vector d(nf);
    for (Eigen::Index k = 0; k < nf; ++k) {
        if (!(a(k, k) > 0.0)) throw RankDeficientError(detail::param_name(pb, free[k]));
        d[k] = 1.0 / std::sqrt(a(k, k));
    }
    const Matrix corr = d.asDiagonal() * a * d.asDiagonal();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(corr);
    if (eig.eigenvalues()[0] < 1e-13) {
        Eigen::Index worst = 0;
        eig.eigenvectors().col(0).cwiseAbs().maxCoeff(&worst);
        throw RankDeficientError(detail::param_name(pb, free[worst]));
    }
    const Matrix corr_inv = eig.eigenvectors() * eig.eigenvalues().cwiseInverse().asDiagonal() *
                            eig.eigenvectors().transpose();
    const double dof = static_cast<double>(std::max<Eigen::Index>(m - nf, 1));
    const Matrix cov_free = d.asDiagonal() * corr_inv * d.asDiagonal() * (cost / dof);

    res.covariance = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < nf; ++i)
        for (Eigen::Index k = 0; k < nf; ++k) res.covariance(free[i], free[k]) = cov_free(i, k);
    res.ci95 = Vector(n);
    for (int j = 0; j < n; ++j) res.ci95[j] = 2.0 * res.sigma(j);

    const Matrix bread = d.asDiagonal() * corr_inv * d.asDiagonal();
    const Matrix meat = jac.transpose() * r.cwiseAbs2().asDiagonal() * jac;
    const Matrix robust = bread * meat * bread * (static_cast<double>(m) / dof);
    res.robust_covariance = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < nf; ++i)
        for (Eigen::Index k = 0; k < nf; ++k) res.robust_covariance(free[i], free[k]) = robust(i, k);
    return res;
}

}  // namespace qdalign
