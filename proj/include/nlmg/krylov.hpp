#pragma once

#include "nlmg/common.hpp"

#include <functional>

namespace nlmg
{

using ApplyFn = std::function<void(const Vector&, Vector&)>;

struct KrylovResult
{
    int iterations = 0;
    double final_residual = 0.0;
    bool converged = false;
    std::vector<double> residual_history;
};

/**
   @brief Preconditioned conjugate gradients for SPD operators.
   The preconditioner must be SPD as well.
*/
inline KrylovResult cg(const ApplyFn& A, const ApplyFn& precond, const Vector& b, Vector& x,
                       double rel_tol, double abs_tol, int max_iters)
{
    const int n = static_cast<int>(b.size());
    KrylovResult res;
    Vector r = b;
    Vector ax(n);
    if (x.size() != n) { x = Vector::Zero(n); }
    else
    {
        A(x, ax);
        r -= ax;
    }
    Vector z(n);
    precond(r, z);
    Vector p = z;
    double rz = r.dot(z);
    const double tol = std::max(rel_tol * b.norm(), abs_tol);

    res.residual_history.push_back(r.norm());
    if (res.residual_history.back() <= tol)
    {
        res.converged = true;
        res.final_residual = res.residual_history.back();
        return res;
    }

    for (int it = 0; it < max_iters; ++it)
    {
        A(p, ax);
        const double pap = p.dot(ax);
        if (pap <= 0.0) { break; } // operator not SPD on this subspace
        const double alpha = rz / pap;
        x += alpha * p;
        r -= alpha * ax;
        res.iterations = it + 1;
        const double rn = r.norm();
        res.residual_history.push_back(rn);
        if (rn <= tol)
        {
            res.converged = true;
            break;
        }
        precond(r, z);
        const double rz_new = r.dot(z);
        p = z + (rz_new / rz) * p;
        rz = rz_new;
    }
    res.final_residual = res.residual_history.back();
    return res;
}

/**
   @brief Preconditioned MINRES for symmetric (possibly indefinite)
   operators with an SPD preconditioner. The recorded history is the
   preconditioned residual norm, which is monotonically non-increasing.
*/
inline KrylovResult minres(const ApplyFn& A, const ApplyFn& precond, const Vector& b, Vector& x,
                           double rel_tol, double abs_tol, int max_iters)
{
    const int n = static_cast<int>(b.size());
    KrylovResult res;
    if (x.size() != n) { x = Vector::Zero(n); }
    const double tol = std::max(rel_tol * b.norm(), abs_tol);

    Vector r(n), y(n), az(n), z_new(n);
    while (res.iterations < max_iters)
    {
        A(x, r);
        r = b - r;
        if (r.norm() <= tol)
        {
            res.converged = true;
            break;
        }
        precond(r, y);
        double beta = std::sqrt(std::max(0.0, r.dot(y)));
        if (res.residual_history.empty()) { res.residual_history.push_back(beta); }
        if (beta == 0.0) { break; }

        Vector v_old = Vector::Zero(n);
        Vector v = r / beta;
        Vector z = y / beta;
        Vector w = Vector::Zero(n), w_old = Vector::Zero(n);
        double eta = beta;
        double c_old = 1.0, c = 1.0, s_old = 0.0, s = 0.0;
        double beta_old = beta;

        bool stalled = false;
        while (res.iterations < max_iters)
        {
            A(z, az);
            const double alpha = z.dot(az);
            Vector v_new = az - alpha * v - beta_old * v_old;
            precond(v_new, z_new);
            const double beta_new = std::sqrt(std::max(0.0, v_new.dot(z_new)));

            // Two previous Givens rotations, then a new one.
            const double rho1_hat = c * alpha - c_old * s * beta_old;
            const double rho2 = s * alpha + c_old * c * beta_old;
            const double rho3 = s_old * beta_old;
            const double rho1 = std::hypot(rho1_hat, beta_new);
            if (rho1 == 0.0)
            {
                stalled = true;
                break;
            }
            const double c_new = rho1_hat / rho1;
            const double s_new = beta_new / rho1;

            Vector w_new = (z - rho3 * w_old - rho2 * w) / rho1;
            x += (c_new * eta) * w_new;
            eta = -s_new * eta;

            w_old = w;
            w = w_new;
            v_old = v;
            c_old = c;
            s_old = s;
            c = c_new;
            s = s_new;
            beta_old = beta_new;
            if (beta_new > 0.0)
            {
                v = v_new / beta_new;
                z = z_new / beta_new;
            }

            ++res.iterations;
            res.residual_history.push_back(std::abs(eta));
            if (std::abs(eta) <= tol || beta_new == 0.0) { break; }
        }
        if (stalled) { break; }
        // Outer loop re-checks the true residual; restarts if the
        // preconditioned estimate was optimistic.
    }
    A(x, r);
    r = b - r;
    res.final_residual = r.norm();
    res.converged = res.final_residual <= tol;
    return res;
}

/**
   @brief Right-preconditioned restarted GMRES.
*/
inline KrylovResult gmres(const ApplyFn& A, const ApplyFn& precond, const Vector& b, Vector& x,
                          double rel_tol, double abs_tol, int max_iters, int restart = 50)
{
    const int n = static_cast<int>(b.size());
    KrylovResult res;
    if (x.size() != n) { x = Vector::Zero(n); }
    const double tol = std::max(rel_tol * b.norm(), abs_tol);

    Vector r(n), tmp(n);
    int total_it = 0;
    while (total_it < max_iters)
    {
        A(x, r);
        r = b - r;
        double beta = r.norm();
        if (res.residual_history.empty()) { res.residual_history.push_back(beta); }
        if (beta <= tol)
        {
            res.converged = true;
            break;
        }

        const int m = std::min(restart, max_iters - total_it);
        std::vector<Vector> V;
        V.reserve(m + 1);
        V.push_back(r / beta);
        Matrix H = Matrix::Zero(m + 1, m);
        std::vector<double> cs(m, 0.0), sn(m, 0.0);
        Vector gvec = Vector::Zero(m + 1);
        gvec[0] = beta;

        int k = 0;
        for (int j = 0; j < m; ++j)
        {
            precond(V[j], tmp);
            Vector w(n);
            A(tmp, w);
            for (int i = 0; i <= j; ++i)
            {
                H(i, j) = w.dot(V[i]);
                w -= H(i, j) * V[i];
            }
            const double h_next = w.norm();
            H(j + 1, j) = h_next;
            const bool breakdown = h_next <= 1e-300;
            if (!breakdown) { V.push_back(w / h_next); }

            for (int i = 0; i < j; ++i)
            {
                const double t = cs[i] * H(i, j) + sn[i] * H(i + 1, j);
                H(i + 1, j) = -sn[i] * H(i, j) + cs[i] * H(i + 1, j);
                H(i, j) = t;
            }
            const double denom = std::hypot(H(j, j), H(j + 1, j));
            if (denom == 0.0) { break; }
            cs[j] = H(j, j) / denom;
            sn[j] = H(j + 1, j) / denom;
            H(j, j) = denom;
            H(j + 1, j) = 0.0;
            gvec[j + 1] = -sn[j] * gvec[j];
            gvec[j] *= cs[j];

            ++total_it;
            k = j + 1;
            res.iterations = total_it;
            res.residual_history.push_back(std::abs(gvec[j + 1]));
            if (std::abs(gvec[j + 1]) <= tol || breakdown) { break; }
        }

        // Back substitution and update through the preconditioner.
        Vector ycoef = Vector::Zero(k);
        for (int i = k - 1; i >= 0; --i)
        {
            double sum = gvec[i];
            for (int j = i + 1; j < k; ++j) { sum -= H(i, j) * ycoef[j]; }
            ycoef[i] = sum / H(i, i);
        }
        Vector dx = Vector::Zero(n);
        for (int i = 0; i < k; ++i) { dx += ycoef[i] * V[i]; }
        precond(dx, tmp);
        x += tmp;

        A(x, r);
        r = b - r;
        if (r.norm() <= tol)
        {
            res.converged = true;
            break;
        }
        if (k == 0) { break; } // no progress possible
    }
    Vector ax(n);
    A(x, ax);
    res.final_residual = (b - ax).norm();
    res.converged = res.final_residual <= tol;
    return res;
}

} // namespace nlmg
