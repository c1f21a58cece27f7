#pragma once

#include "nlmg/common.hpp"
#include "nlmg/krylov.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <chrono>
#include <memory>
#include <optional>

namespace nlmg
{

/**
   @brief Linearized saddle system

       [ M  E ] [ sigma ]     [ g ]
       [ D  0 ] [   p   ] = - [ f ]

   E = D^T in Picard mode; the Newton flux-pressure block otherwise.
*/
struct BlockSystem
{
    SpMat M; // fluxes x fluxes, symmetric positive
    SpMat E; // fluxes x cells
    SpMat D; // cells x fluxes
    Vector g;
    Vector f;
    bool symmetric = true; // Picard mode

    int n_flux() const { return static_cast<int>(M.rows()); }
    int n_pressure() const { return static_cast<int>(D.rows()); }

    Vector rhs() const
    {
        Vector b(n_flux() + n_pressure());
        b.head(n_flux()) = -g;
        b.tail(n_pressure()) = -f;
        return b;
    }

    void apply(const Vector& x, Vector& y) const
    {
        const auto sigma = x.head(n_flux());
        const auto p = x.tail(n_pressure());
        y.resize(x.size());
        y.head(n_flux()) = M * sigma + E * p;
        y.tail(n_pressure()) = D * sigma;
    }

    /// Residual of the block equations at (sigma, p).
    double residual_norm(const Vector& sigma, const Vector& p) const
    {
        Vector x(n_flux() + n_pressure());
        x.head(n_flux()) = sigma;
        x.tail(n_pressure()) = p;
        Vector ax;
        apply(x, ax);
        return (ax - rhs()).norm();
    }
};

struct KrylovConfig
{
    enum class Method
    {
        automatic, // MINRES when symmetric, GMRES otherwise
        cg,
        minres,
        gmres
    };
    enum class Precond
    {
        schur_direct, // Jacobi on M + direct factorization of the approximate Schur complement
        jacobi,
        none
    };

    Method method = Method::automatic;
    double rel_tol = 1e-10;
    double abs_tol = 1e-14;
    int max_iters = 2000;
    int gmres_restart = 50;
    Precond precond = Precond::schur_direct;
};

struct LinearSolveStats
{
    int iterations = 0;
    double final_residual = 0.0;
    double seconds = 0.0;
    bool converged = false;
};

namespace detail
{

class Stopwatch
{
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

/// Direct solver handle for a sparse matrix: LDLT when symmetric, LU otherwise.
class SparseDirect
{
public:
    void factor(const SpMat& A, bool symmetric)
    {
        symmetric_ = symmetric;
        if (symmetric)
        {
            ldlt_ = std::make_unique<Eigen::SimplicialLDLT<SpMat>>();
            ldlt_->compute(A);
            if (ldlt_->info() != Eigen::Success)
            {
                // Fall back to LU (e.g. semi-definite Schur complements).
                ldlt_.reset();
                symmetric_ = false;
            }
            else { return; }
        }
        lu_ = std::make_unique<Eigen::SparseLU<SpMat>>();
        lu_->compute(A);
        require(lu_->info() == Eigen::Success, "SparseDirect: factorization failed");
    }

    Vector solve(const Vector& b) const
    {
        return symmetric_ ? ldlt_->solve(b) : lu_->solve(b);
    }

private:
    bool symmetric_ = true;
    std::unique_ptr<Eigen::SimplicialLDLT<SpMat>> ldlt_;
    std::unique_ptr<Eigen::SparseLU<SpMat>> lu_;
};

} // namespace detail

/**
   @brief Sparse direct solve of the full block system. Fallback path and
   test oracle.
*/
inline std::pair<Vector, Vector> solve_block_direct(const BlockSystem& sys)
{
    const int nf = sys.n_flux();
    const int np = sys.n_pressure();
    std::vector<Triplet> trips;
    trips.reserve(sys.M.nonZeros() + sys.E.nonZeros() + 2 * sys.D.nonZeros());
    auto add_block = [&](const SpMat& A, int r0, int c0)
    {
        for (int k = 0; k < A.outerSize(); ++k)
        {
            for (SpMat::InnerIterator it(A, k); it; ++it)
            {
                trips.emplace_back(r0 + static_cast<int>(it.row()), c0 + static_cast<int>(it.col()),
                                   it.value());
            }
        }
    };
    add_block(sys.M, 0, 0);
    add_block(sys.E, 0, nf);
    add_block(sys.D, nf, 0);
    SpMat A = sparse_from_triplets(nf + np, nf + np, trips);

    Eigen::SparseLU<SpMat> lu;
    lu.compute(A);
    require(lu.info() == Eigen::Success, "solve_block_direct: singular block system");
    Vector x = lu.solve(sys.rhs());
    return {x.head(nf), x.tail(np)};
}

/**
   @brief Solve the block system by a Krylov method with the block-diagonal
   preconditioner diag(B_M, B_S): B_M is the Jacobi smoother for M and B_S
   acts on the approximate Schur complement S = D diagm(M)^-1 E.

   MINRES is used for symmetric (Picard) systems, GMRES otherwise.
*/
inline std::tuple<Vector, Vector, LinearSolveStats> solve_block(const BlockSystem& sys,
                                                                const KrylovConfig& cfg = {})
{
    detail::Stopwatch clock;
    const int nf = sys.n_flux();
    const int np = sys.n_pressure();

    const Vector m_diag = sys.M.diagonal();
    for (int i = 0; i < nf; ++i)
    {
        require(m_diag[i] > 0.0, "solve_block: M must have positive diagonal");
    }
    const Vector m_diag_inv = m_diag.cwiseInverse();

    detail::SparseDirect schur;
    std::optional<Vector> schur_jacobi_inv;
    if (cfg.precond == KrylovConfig::Precond::schur_direct)
    {
        SpMat S = SpMat(sys.D * m_diag_inv.asDiagonal() * sys.E);
        schur.factor(S, sys.symmetric);
    }
    else if (cfg.precond == KrylovConfig::Precond::jacobi)
    {
        SpMat S = SpMat(sys.D * m_diag_inv.asDiagonal() * sys.E);
        Vector d = S.diagonal();
        for (int i = 0; i < d.size(); ++i) { d[i] = d[i] != 0.0 ? 1.0 / d[i] : 1.0; }
        schur_jacobi_inv = d;
    }

    ApplyFn apply = [&](const Vector& x, Vector& y) { sys.apply(x, y); };
    ApplyFn precond = [&](const Vector& x, Vector& y)
    {
        y.resize(x.size());
        switch (cfg.precond)
        {
            case KrylovConfig::Precond::schur_direct:
                y.head(nf) = m_diag_inv.cwiseProduct(x.head(nf));
                y.tail(np) = schur.solve(x.tail(np));
                break;
            case KrylovConfig::Precond::jacobi:
                y.head(nf) = m_diag_inv.cwiseProduct(x.head(nf));
                y.tail(np) = schur_jacobi_inv->cwiseProduct(x.tail(np));
                break;
            case KrylovConfig::Precond::none: y = x; break;
        }
    };

    const Vector b = sys.rhs();
    Vector x = Vector::Zero(nf + np);

    KrylovConfig::Method method = cfg.method;
    if (method == KrylovConfig::Method::automatic)
    {
        method = sys.symmetric ? KrylovConfig::Method::minres : KrylovConfig::Method::gmres;
    }

    KrylovResult kres;
    switch (method)
    {
        case KrylovConfig::Method::minres:
            kres = minres(apply, precond, b, x, cfg.rel_tol, cfg.abs_tol, cfg.max_iters);
            break;
        case KrylovConfig::Method::gmres:
            kres = gmres(apply, precond, b, x, cfg.rel_tol, cfg.abs_tol, cfg.max_iters,
                         cfg.gmres_restart);
            break;
        case KrylovConfig::Method::cg:
            kres = cg(apply, precond, b, x, cfg.rel_tol, cfg.abs_tol, cfg.max_iters);
            break;
        case KrylovConfig::Method::automatic: break;
    }

    LinearSolveStats stats;
    stats.iterations = kres.iterations;
    stats.final_residual = kres.final_residual;
    stats.converged = kres.converged;
    stats.seconds = clock.seconds();
    return {x.head(nf), x.tail(np), stats};
}

/**
   @brief Per-cell local view of a block system, the input to algebraic
   hybridization. Cell c owns local copies of the flux dofs in cell_fluxes[c]
   and the pressure dofs [pdof_offset[c], pdof_offset[c+1]).
*/
struct LocalBlockSystem
{
    int n_flux = 0;
    int n_pressure = 0;
    std::vector<int> pdof_offset;                // size n_cells + 1
    std::vector<std::vector<int>> cell_fluxes;   // global flux ids per cell
    std::vector<Matrix> M_loc;                   // nloc x nloc
    std::vector<Matrix> E_loc;                   // nloc x np_loc
    std::vector<Matrix> D_loc;                   // np_loc x nloc
    Vector g;                                    // global flux rhs
    Vector f;                                    // global pressure rhs
    bool symmetric = true;

    int n_cells() const { return static_cast<int>(cell_fluxes.size()); }
};

/**
   @brief Hybridized system: duplicated interface fluxes, per-cell saddle
   factorizations, the interface matrix H and reduced right-hand side xi.
*/
struct HybridSystem
{
    const LocalBlockSystem* local = nullptr;
    std::vector<std::vector<int>> lambda_of;    // per cell: lambda id per local flux (-1 if none)
    std::vector<std::vector<double>> sign_of;   // per cell: +1 first copy, -1 second copy
    int n_lambda = 0;
    SpMat H;
    Vector xi;
    std::vector<Eigen::PartialPivLU<Matrix>> cell_lu;
    std::vector<Vector> cell_rhs; // local [-g; -f] per cell
    bool symmetric = true;
};

/**
   @brief Build the reduced interface system H lambda = xi by eliminating the
   duplicated fluxes and pressures cell by cell.

   The constraint matrix pairs the two copies of every shared flux dof with
   +1 on the copy in the lower-numbered cell and -1 on the other; fluxes
   owned by a single cell need no constraint.
*/
inline HybridSystem hybridize(const LocalBlockSystem& lbs)
{
    HybridSystem hs;
    hs.local = &lbs;
    hs.symmetric = lbs.symmetric;
    const int nc = lbs.n_cells();

    // Count copies per global flux dof.
    std::vector<std::pair<int, int>> first_copy(lbs.n_flux, {-1, -1}); // (cell, local slot)
    std::vector<int> lambda_id(lbs.n_flux, -1);
    hs.lambda_of.resize(nc);
    for (int c = 0; c < nc; ++c)
    {
        hs.lambda_of[c].assign(lbs.cell_fluxes[c].size(), -1);
    }
    int n_lambda = 0;
    for (int c = 0; c < nc; ++c)
    {
        for (std::size_t k = 0; k < lbs.cell_fluxes[c].size(); ++k)
        {
            const int e = lbs.cell_fluxes[c][k];
            if (first_copy[e].first < 0) { first_copy[e] = {c, static_cast<int>(k)}; }
            else
            {
                lambda_id[e] = n_lambda++;
            }
        }
    }
    hs.n_lambda = n_lambda;
    hs.sign_of.resize(nc);
    for (int c = 0; c < nc; ++c)
    {
        hs.sign_of[c].assign(lbs.cell_fluxes[c].size(), 1.0);
        for (std::size_t k = 0; k < lbs.cell_fluxes[c].size(); ++k)
        {
            const int e = lbs.cell_fluxes[c][k];
            hs.lambda_of[c][k] = lambda_id[e];
            hs.sign_of[c][k] = (first_copy[e].first == c) ? 1.0 : -1.0;
        }
    }

    // Factor the per-cell saddle blocks [[M, E], [D, 0]].
    hs.cell_lu.resize(nc);
    hs.cell_rhs.resize(nc);
    std::vector<Triplet> h_trips;
    hs.xi = Vector::Zero(n_lambda);
    std::vector<char> g_assigned(lbs.n_flux, 0);

    for (int c = 0; c < nc; ++c)
    {
        const auto& fluxes = lbs.cell_fluxes[c];
        const int nloc = static_cast<int>(fluxes.size());
        const int np = lbs.pdof_offset[c + 1] - lbs.pdof_offset[c];
        const int ntot = nloc + np;

        Matrix K = Matrix::Zero(ntot, ntot);
        K.topLeftCorner(nloc, nloc) = lbs.M_loc[c];
        K.topRightCorner(nloc, np) = lbs.E_loc[c];
        K.bottomLeftCorner(np, nloc) = lbs.D_loc[c];
        hs.cell_lu[c].compute(K);
        require((hs.cell_lu[c].matrixLU().diagonal().array().abs() > 0).all(),
                "hybridize: singular local saddle block");

        // rhs of the hybrid equations: each global g entry charged to its
        // first copy, f to the owning cell.
        Vector rhs = Vector::Zero(ntot);
        for (int k = 0; k < nloc; ++k)
        {
            const int e = fluxes[k];
            if (!g_assigned[e])
            {
                rhs[k] = -lbs.g[e];
                g_assigned[e] = 1;
            }
        }
        rhs.tail(np) = -lbs.f.segment(lbs.pdof_offset[c], np);
        hs.cell_rhs[c] = rhs;

        // Columns of H and entries of xi contributed by this cell.
        const Vector sol_rhs = hs.cell_lu[c].solve(rhs);
        for (int k = 0; k < nloc; ++k)
        {
            const int lam = hs.lambda_of[c][k];
            if (lam < 0) { continue; }
            const double sign = hs.sign_of[c][k];
            hs.xi[lam] += sign * sol_rhs[k];

            Vector e_k = Vector::Zero(ntot);
            e_k[k] = sign;
            const Vector col = hs.cell_lu[c].solve(e_k);
            for (int k2 = 0; k2 < nloc; ++k2)
            {
                const int lam2 = hs.lambda_of[c][k2];
                if (lam2 < 0) { continue; }
                h_trips.emplace_back(lam2, lam, hs.sign_of[c][k2] * col[k2]);
            }
        }
    }
    hs.H = sparse_from_triplets(n_lambda, n_lambda, h_trips);
    return hs;
}

/**
   @brief Solve the hybridized system: CG on H in Picard mode (H is SPD),
   GMRES in Newton mode, then local back substitution. Duplicated flux
   copies agree up to solver tolerance; they are averaged on return.
*/
inline std::tuple<Vector, Vector, Vector, LinearSolveStats> solve_hybrid(const HybridSystem& hs,
                                                                         const KrylovConfig& cfg = {})
{
    detail::Stopwatch clock;
    const LocalBlockSystem& lbs = *hs.local;
    Vector lambda = Vector::Zero(hs.n_lambda);
    LinearSolveStats stats;
    stats.converged = true;

    if (hs.n_lambda > 0)
    {
        detail::SparseDirect h_direct;
        std::optional<Vector> h_jacobi_inv;
        if (cfg.precond == KrylovConfig::Precond::schur_direct)
        {
            h_direct.factor(hs.H, hs.symmetric);
        }
        else
        {
            Vector d = hs.H.diagonal();
            for (int i = 0; i < d.size(); ++i) { d[i] = d[i] != 0.0 ? 1.0 / d[i] : 1.0; }
            h_jacobi_inv = d;
        }

        ApplyFn apply = [&](const Vector& x, Vector& y) { y = hs.H * x; };
        ApplyFn precond = [&](const Vector& x, Vector& y)
        {
            if (cfg.precond == KrylovConfig::Precond::schur_direct) { y = h_direct.solve(x); }
            else if (cfg.precond == KrylovConfig::Precond::jacobi) { y = h_jacobi_inv->cwiseProduct(x); }
            else { y = x; }
        };

        KrylovResult kres;
        if (hs.symmetric)
        {
            kres = cg(apply, precond, hs.xi, lambda, cfg.rel_tol, cfg.abs_tol, cfg.max_iters);
        }
        else
        {
            kres = gmres(apply, precond, hs.xi, lambda, cfg.rel_tol, cfg.abs_tol, cfg.max_iters,
                         cfg.gmres_restart);
        }
        stats.iterations = kres.iterations;
        stats.final_residual = kres.final_residual;
        stats.converged = kres.converged;
    }

    // Local back substitution [sigma_c; p_c] = K_c^-1 (rhs_c - C_c^T lambda).
    Vector sigma = Vector::Zero(lbs.n_flux);
    Vector copies = Vector::Zero(lbs.n_flux);
    Vector p = Vector::Zero(lbs.n_pressure);
    for (int c = 0; c < lbs.n_cells(); ++c)
    {
        const auto& fluxes = lbs.cell_fluxes[c];
        const int nloc = static_cast<int>(fluxes.size());
        const int np = lbs.pdof_offset[c + 1] - lbs.pdof_offset[c];
        Vector rhs = hs.cell_rhs[c];
        for (int k = 0; k < nloc; ++k)
        {
            const int lam = hs.lambda_of[c][k];
            if (lam < 0) { continue; }
            // C^T lambda with the cell-local sign convention used in hybridize.
            rhs[k] -= hs.sign_of[c][k] * lambda[lam];
        }
        const Vector sol = hs.cell_lu[c].solve(rhs);
        for (int k = 0; k < nloc; ++k)
        {
            sigma[fluxes[k]] += sol[k];
            copies[fluxes[k]] += 1.0;
        }
        p.segment(lbs.pdof_offset[c], np) = sol.tail(np);
    }
    for (int e = 0; e < lbs.n_flux; ++e)
    {
        if (copies[e] > 0.0) { sigma[e] /= copies[e]; }
    }
    stats.seconds = clock.seconds();
    return {std::move(sigma), std::move(p), std::move(lambda), stats};
}

} // namespace nlmg
