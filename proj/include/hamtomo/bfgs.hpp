// bfgs.hpp: BFGS quasi-Newton minimizer with a backtracking line search
// that uses quadratic then cubic interpolation of the step length
// (Dennis & Schnabel, "lnsrch"). Gradients may be supplied or taken from
// central finite differences.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace hamtomo {

struct BfgsOptions {
    int max_iterations = 200;
    double grad_tol = 1e-7;        // converged when ||g||_inf below this
    double rel_f_tol = 1e-12;      // or when the relative decrease of f falls below this
    double x_tol = 1e-14;          // or when the step is negligible relative to x
    double fd_step = 1e-6;         // central-difference step (absolute)
    double max_step = std::numeric_limits<double>::infinity();  // cap on ||step||_2
    int max_backtracks = 40;
};

struct BfgsResult {
    Eigen::VectorXd x;
    double f = std::numeric_limits<double>::infinity();
    Eigen::VectorXd grad;
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
    bool line_search_failed = false;
};

template <class F>
Eigen::VectorXd central_difference(F& f, const Eigen::VectorXd& x, double h) {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double xi = x(i);
        xp(i) = xi + h;
        const double fp = f(xp);
        xp(i) = xi - h;
        const double fm = f(xp);
        xp(i) = xi;
        g(i) = (fp - fm) / (2.0 * h);
    }
    return g;
}

// f: VectorXd -> double (may return +inf for infeasible points);
// grad: VectorXd -> VectorXd.
template <class F, class G>
BfgsResult bfgs_minimize(F&& f, G&& grad, Eigen::VectorXd x0, const BfgsOptions& opt = {}) {
    const Eigen::Index n = x0.size();
    BfgsResult res;
    res.x = std::move(x0);
    res.f = f(res.x);
    res.evaluations = 1;
    if (!std::isfinite(res.f)) {
        res.line_search_failed = true;
        res.grad = Eigen::VectorXd::Zero(n);
        return res;
    }
    res.grad = grad(res.x);
    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(n, n);
    bool scaled = false;

    for (res.iterations = 0; res.iterations < opt.max_iterations; ++res.iterations) {
        if (!res.grad.allFinite()) {
            res.line_search_failed = true;
            return res;
        }
        if (res.grad.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
            res.converged = true;
            return res;
        }
        Eigen::VectorXd p = -Hinv * res.grad;
        double slope = res.grad.dot(p);
        if (!(slope < 0.0)) {  // not a descent direction: restart from steepest descent
            Hinv.setIdentity();
            scaled = false;
            p = -res.grad;
            slope = res.grad.dot(p);
        }
        const double pn = p.norm();
        if (pn > opt.max_step) {
            p *= opt.max_step / pn;
            slope *= opt.max_step / pn;
        }

        // Backtracking with interpolation on phi(lambda) = f(x + lambda p).
        constexpr double c1 = 1e-4;
        double lambda = 1.0, lambda_prev = 0.0, f_prev_trial = 0.0;
        Eigen::VectorXd x_new;
        double f_new = 0.0;
        bool accepted = false;
        for (int bt = 0; bt < opt.max_backtracks; ++bt) {
            x_new = res.x + lambda * p;
            f_new = f(x_new);
            ++res.evaluations;
            if (std::isfinite(f_new) && f_new <= res.f + c1 * lambda * slope) {
                accepted = true;
                break;
            }
            double next;
            if (!std::isfinite(f_new)) {
                next = 0.1 * lambda;
            } else if (bt == 0 || !std::isfinite(f_prev_trial)) {
                next = -slope / (2.0 * (f_new - res.f - slope));
            } else {
                const double r1 = f_new - res.f - lambda * slope;
                const double r2 = f_prev_trial - res.f - lambda_prev * slope;
                const double a = (r1 / (lambda * lambda) - r2 / (lambda_prev * lambda_prev)) / (lambda - lambda_prev);
                const double b =
                    (-lambda_prev * r1 / (lambda * lambda) + lambda * r2 / (lambda_prev * lambda_prev)) /
                    (lambda - lambda_prev);
                if (a == 0.0) {
                    next = -slope / (2.0 * b);
                } else {
                    const double disc = b * b - 3.0 * a * slope;
                    if (disc < 0.0) next = 0.5 * lambda;
                    else if (b <= 0.0) next = (-b + std::sqrt(disc)) / (3.0 * a);
                    else next = -slope / (b + std::sqrt(disc));
                }
                next = std::min(next, 0.5 * lambda);
            }
            lambda_prev = lambda;
            f_prev_trial = f_new;
            lambda = std::max(std::isfinite(next) ? next : 0.1 * lambda, 0.1 * lambda);
        }
        if (!accepted) {
            res.line_search_failed = true;
            return res;
        }

        const Eigen::VectorXd s = x_new - res.x;
        const Eigen::VectorXd g_new = grad(x_new);
        const Eigen::VectorXd y = g_new - res.grad;
        const double f_old = res.f;
        res.x = x_new;
        res.f = f_new;
        res.grad = g_new;

        const double denom = std::max({std::abs(f_old), std::abs(f_new), 1e-300});
        if (std::abs(f_old - f_new) <= opt.rel_f_tol * denom) {
            res.converged = true;
            ++res.iterations;
            return res;
        }
        if (s.lpNorm<Eigen::Infinity>() <= opt.x_tol * (1.0 + res.x.lpNorm<Eigen::Infinity>())) {
            res.converged = true;
            ++res.iterations;
            return res;
        }

        const double ys = y.dot(s);
        if (ys > 1e-12 * s.norm() * y.norm()) {
            if (!scaled) {
                Hinv *= ys / y.squaredNorm();
                scaled = true;
            }
            const double rho = 1.0 / ys;
            const Eigen::VectorXd Hy = Hinv * y;
            Hinv += (rho * rho * y.dot(Hy) + rho) * s * s.transpose() -
                    rho * (Hy * s.transpose() + s * Hy.transpose());
        }
    }
    return res;
}

template <class F>
BfgsResult bfgs_minimize_fd(F&& f, Eigen::VectorXd x0, const BfgsOptions& opt = {}) {
    int extra = 0;
    auto counted = [&](const Eigen::VectorXd& x) {
        ++extra;
        return f(x);
    };
    auto grad = [&](const Eigen::VectorXd& x) { return central_difference(counted, x, opt.fd_step); };
    BfgsResult r = bfgs_minimize(f, grad, std::move(x0), opt);
    r.evaluations += extra;
    return r;
}

}  // namespace hamtomo
