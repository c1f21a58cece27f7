#pragma once

#include "nlmg/hierarchy.hpp"
#include "nlmg/level_operator.hpp"
#include "nlmg/linear_solvers.hpp"

#include <chrono>
#include <functional>
#include <optional>

namespace nlmg
{

struct BacktrackConfig
{
    int n_max = 4;
    double theta = 0.9;
    std::optional<double> pressure_cap; // max |delta p| per smoothing step
};

enum class BacktrackOutcome
{
    improved,   // residual did not increase; loop never triggered
    early_exit, // relative reduction between halvings exceeded theta
    exhausted,  // n_max halvings spent
    rejected    // non-finite residual at every trial point
};

struct BacktrackResult
{
    Vector x;
    double s = 1.0;
    int steps = 0;
    BacktrackOutcome outcome = BacktrackOutcome::improved;
    double residual = 0.0;
};

/**
   @brief Backtracking line search: halve the step while the residual grows,
   stop early when the reduction between consecutive halvings is a factor
   theta or better, give up after n_max halvings.
*/
inline BacktrackResult backtrack(const std::function<double(const Vector&)>& residual_norm,
                                 const Vector& x, const Vector& dx, const BacktrackConfig& cfg)
{
    auto norm_of = [&](const Vector& v)
    {
        const double r = residual_norm(v);
        return std::isfinite(r) ? r : std::numeric_limits<double>::infinity();
    };

    const double r0 = norm_of(x);
    double s = 1.0;
    int n = 0;
    double rs = norm_of(x + dx);
    BacktrackOutcome outcome = BacktrackOutcome::improved;

    while (rs > r0 && n < cfg.n_max)
    {
        const double r_half = norm_of(x + (0.5 * s) * dx);
        if (r_half > cfg.theta * rs)
        {
            outcome = BacktrackOutcome::early_exit;
            break;
        }
        s *= 0.5;
        ++n;
        rs = r_half;
    }
    if (outcome != BacktrackOutcome::early_exit && rs > r0)
    {
        outcome = BacktrackOutcome::exhausted;
    }

    BacktrackResult res;
    if (!std::isfinite(rs))
    {
        res.x = x;
        res.s = 0.0;
        res.steps = n;
        res.outcome = BacktrackOutcome::rejected;
        res.residual = r0;
        return res;
    }
    res.x = x + s * dx;
    res.s = s;
    res.steps = n;
    res.outcome = outcome;
    res.residual = rs;
    return res;
}

/// Scale the whole update so the maximum pressure change does not exceed cap.
inline Vector pressure_cap_backtrack(const Vector& dx, int n_pressure, double cap)
{
    require(cap > 0.0, "pressure_cap_backtrack: cap must be positive");
    const double dp_max = dx.tail(n_pressure).cwiseAbs().maxCoeff();
    if (dp_max <= cap) { return dx; }
    return (cap / dp_max) * dx;
}

struct NonlinearConfig
{
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    int max_nonlinear_iters = 60;
    int coarsest_max_smoothing = 10;
    BacktrackConfig bt;
    KrylovConfig krylov;

    enum class Routing
    {
        per_paper, // block-diagonal path on the fine level, hybridization on coarse levels
        block_all,
        hybrid_all
    };
    Routing routing = Routing::per_paper;
};

struct IterationRecord
{
    int iter = 0;
    int level = 0;
    double residual = 0.0;
    double s = 1.0;
    int backtrack_steps = 0;
};

struct SolveReport
{
    std::vector<double> residual_history; // fine-level, per outer iteration
    std::vector<int> level_smoothing_counts;
    std::vector<int> level_backtrack_steps;
    std::vector<LinearSolveStats> linear_stats;
    std::vector<int> cascadic_level_iters; // coarsest..finest, cascadic only
    std::vector<IterationRecord> records;
    std::vector<double> level_mass_residual; // |D sigma + f|_inf per level, last cycle
    bool converged = false;
    bool early_presmooth = false;
    int nonlinear_iterations = 0;
    double final_residual = 0.0;
    double solve_seconds = 0.0;

    void write_history_csv(std::ostream& out) const
    {
        out << "iter,level,residual,s,backtrack_steps\n";
        for (const auto& r : records)
        {
            out << r.iter << ',' << r.level << ',' << r.residual << ',' << r.s << ','
                << r.backtrack_steps << "\n";
        }
    }
};

/**
   @brief Nonlinear solution drivers over a hierarchy: single-level
   Picard/Newton, the FAS V-cycle, and coarse-to-fine cascadic multigrid.

   A solver instance owns its mutable iteration state; the hierarchy is
   shared read-only.
*/
class FasSolver
{
public:
    FasSolver(const Hierarchy& hier, const KappaLaw& law, NonlinearConfig cfg = {})
        : hier_(hier), law_(law), cfg_(std::move(cfg))
    {
        for (const auto& lvl : hier_.levels) { ops_.emplace_back(lvl, law_); }
    }

    const LevelOperator& op(int level) const { return ops_[level]; }
    int num_levels() const { return static_cast<int>(ops_.size()); }

    Vector residual(int level, const Vector& x, const Vector& b) const
    {
        return ops_[level].apply_joint(x) - b;
    }

    double residual_norm(int level, const Vector& x, const Vector& b) const
    {
        return residual(level, x, b).norm();
    }

    /// Project the iterate to the next coarser level: x^{l+1} = Q x^l.
    Vector project(int level, const Vector& x) const
    {
        const Level& lvl = hier_.levels[level];
        const LevelOperator& fine = ops_[level];
        const LevelOperator& coarse = ops_[level + 1];
        Vector out(coarse.n_total());
        out.head(coarse.n_flux()) = lvl.Q_sigma * x.head(fine.n_flux());
        out.tail(coarse.n_pressure()) = lvl.P_p.transpose() * x.tail(fine.n_pressure());
        return out;
    }

    /// Interpolate a coarse vector to this level: P y^{l+1}.
    Vector interpolate(int level, const Vector& y) const
    {
        const Level& lvl = hier_.levels[level];
        const LevelOperator& fine = ops_[level];
        const LevelOperator& coarse = ops_[level + 1];
        Vector out(fine.n_total());
        out.head(fine.n_flux()) = lvl.P_sigma * y.head(coarse.n_flux());
        out.tail(fine.n_pressure()) = lvl.P_p * y.tail(coarse.n_pressure());
        return out;
    }

    /// Restrict a residual: R = P^T.
    Vector restrict_residual(int level, const Vector& r) const
    {
        const Level& lvl = hier_.levels[level];
        const LevelOperator& fine = ops_[level];
        const LevelOperator& coarse = ops_[level + 1];
        Vector out(coarse.n_total());
        out.head(coarse.n_flux()) = lvl.P_sigma.transpose() * r.head(fine.n_flux());
        out.tail(coarse.n_pressure()) = lvl.P_p.transpose() * r.tail(fine.n_pressure());
        return out;
    }

    /**
       One nonlinear smoothing step at a level: assemble the Picard or
       Newton linearization, solve it (block-preconditioned Krylov on the
       fine level, algebraic hybridization on coarse levels), cap the
       pressure change if configured, then backtrack.
    */
    Vector smooth(int level, const Vector& x, const Vector& b, bool newton)
    {
        const LevelOperator& lop = ops_[level];
        const int nf = lop.n_flux();
        const int np = lop.n_pressure();
        const Vector sigma = x.head(nf);
        const Vector p = x.tail(np);

        Vector dx(lop.n_total());
        const bool use_hybrid = cfg_.routing == NonlinearConfig::Routing::hybrid_all ||
                                (cfg_.routing == NonlinearConfig::Routing::per_paper && level > 0);

        Vector g_lin, f_lin;
        if (newton)
        {
            const Vector r = residual(level, x, b);
            g_lin = r.head(nf);
            f_lin = r.tail(np);
        }
        else
        {
            g_lin = -b.head(nf);
            f_lin = -b.tail(np);
        }

        LinearSolveStats stats;
        if (use_hybrid)
        {
            const LocalBlockSystem lbs = lop.local_blocks(sigma, p, newton, g_lin, f_lin);
            const HybridSystem hs = hybridize(lbs);
            auto [s_lin, p_lin, lambda, st] = solve_hybrid(hs, cfg_.krylov);
            stats = st;
            dx.head(nf) = s_lin;
            dx.tail(np) = p_lin;
        }
        else
        {
            BlockSystem sys;
            if (newton)
            {
                JacobianBlocks jac = lop.jacobian(sigma, p);
                sys.M = std::move(jac.M);
                sys.E = std::move(jac.E);
                sys.symmetric = false;
            }
            else
            {
                sys.M = lop.assemble_M(p);
                sys.E = SpMat(hier_.levels[level].D.transpose());
                sys.symmetric = true;
            }
            sys.D = hier_.levels[level].D;
            sys.g = g_lin;
            sys.f = f_lin;
            auto [s_lin, p_lin, st] = solve_block(sys, cfg_.krylov);
            stats = st;
            dx.head(nf) = s_lin;
            dx.tail(np) = p_lin;
        }
        report_.linear_stats.push_back(stats);

        // Newton solves produce the update; Picard solves produce the next
        // iterate, so the search direction is x_P - x.
        if (!newton) { dx -= x; }

        if (cfg_.bt.pressure_cap) { dx = pressure_cap_backtrack(dx, np, *cfg_.bt.pressure_cap); }

        auto rnorm = [&](const Vector& y) { return residual_norm(level, y, b); };
        BacktrackResult bt = backtrack(rnorm, x, dx, cfg_.bt);

        report_.level_smoothing_counts[level] += 1;
        report_.level_backtrack_steps[level] += bt.steps;
        last_step_ = bt.s;
        last_bt_steps_ = bt.steps;
        return bt.x;
    }

    /**
       FAS V-cycle at a level (coarsest level: up to coarsest_max_smoothing
       nonlinear smoothing steps). Early exits: a level whose residual is
       already at the absolute tolerance is returned unchanged, and a cycle
       whose fine pre-smoothing converges terminates immediately.
    */
    Vector vcycle(int level, Vector x, const Vector& b, bool newton)
    {
        if (residual_norm(level, x, b) <= cfg_.abs_tol)
        {
            note_mass(level, x, b);
            return x;
        }
        if (level == num_levels() - 1)
        {
            const double entry = residual_norm(level, x, b);
            const double tol = std::max(cfg_.rel_tol * entry, cfg_.abs_tol);
            for (int it = 0; it < cfg_.coarsest_max_smoothing; ++it)
            {
                x = smooth(level, x, b, newton);
                if (residual_norm(level, x, b) <= tol) { break; }
            }
            note_mass(level, x, b);
            return x;
        }

        x = smooth(level, x, b, newton); // pre-smoothing
        if (level == 0 && residual_norm(0, x, b) <= solve_tol_)
        {
            early_presmooth_ = true;
            note_mass(level, x, b);
            return x;
        }

        const Vector xc = project(level, x);
        auto [a_sig, a_p] = ops_[level + 1].apply(xc.head(ops_[level + 1].n_flux()),
                                                  xc.tail(ops_[level + 1].n_pressure()));
        Vector a_coarse(ops_[level + 1].n_total());
        a_coarse.head(ops_[level + 1].n_flux()) = a_sig;
        a_coarse.tail(ops_[level + 1].n_pressure()) = a_p;
        const Vector bc = a_coarse - restrict_residual(level, residual(level, x, b));

        const Vector y = vcycle(level + 1, xc, bc, newton);

        const Vector correction = interpolate(level, y - xc);
        auto rnorm = [&](const Vector& v) { return residual_norm(level, v, b); };
        BacktrackResult bt = backtrack(rnorm, x, correction, cfg_.bt);
        report_.level_backtrack_steps[level] += bt.steps;
        x = bt.x;

        x = smooth(level, x, b, newton); // post-smoothing
        note_mass(level, x, b);
        return x;
    }

    /// Full solve; b0 is the fine right-hand side -[g; f].
    std::pair<Vector, SolveReport> run(SolverMethod method, const Vector& b0, Vector x0 = {})
    {
        detail::Stopwatch clock;
        report_ = SolveReport{};
        report_.level_smoothing_counts.assign(num_levels(), 0);
        report_.level_backtrack_steps.assign(num_levels(), 0);
        report_.level_mass_residual.assign(num_levels(), 0.0);

        const LevelOperator& fine = ops_[0];
        Vector x = x0.size() == fine.n_total() ? std::move(x0) : Vector::Zero(fine.n_total());

        const double r0 = residual_norm(0, x, b0);
        solve_tol_ = std::max(cfg_.rel_tol * r0, cfg_.abs_tol);
        report_.residual_history.push_back(r0);

        const bool newton = method == SolverMethod::single_newton ||
                            method == SolverMethod::fas_newton || method == SolverMethod::cascadic;

        if (method == SolverMethod::cascadic)
        {
            run_cascadic(x, b0, newton);
        }
        else
        {
            const bool multilevel =
                method == SolverMethod::fas_picard || method == SolverMethod::fas_newton;
            require(!multilevel || num_levels() >= 2, "FAS requires at least two levels");

            for (int it = 0; it < cfg_.max_nonlinear_iters; ++it)
            {
                if (report_.residual_history.back() <= solve_tol_)
                {
                    report_.converged = true;
                    break;
                }
                early_presmooth_ = false;
                if (multilevel) { x = vcycle(0, std::move(x), b0, newton); }
                else { x = smooth(0, x, b0, newton); }
                ++report_.nonlinear_iterations;
                const double rn = residual_norm(0, x, b0);
                report_.residual_history.push_back(rn);
                report_.records.push_back(
                    {report_.nonlinear_iterations, 0, rn, last_step_, last_bt_steps_});
                require(std::isfinite(rn), "nonlinear iterate has non-finite residual");
            }
            if (report_.residual_history.back() <= solve_tol_)
            {
                report_.converged = true;
                report_.early_presmooth = early_presmooth_;
            }
        }

        report_.final_residual = report_.residual_history.back();
        report_.solve_seconds = clock.seconds();
        return {std::move(x), report_};
    }

private:
    void run_cascadic(Vector& x, const Vector& b0, bool newton)
    {
        const int nl = num_levels();
        std::vector<Vector> bs(nl);
        bs[0] = b0;
        for (int l = 0; l + 1 < nl; ++l) { bs[l + 1] = restrict_residual(l, bs[l]); }

        std::vector<Vector> xs(nl);
        xs[0] = x;
        for (int l = 0; l + 1 < nl; ++l) { xs[l + 1] = project(l, xs[l]); }

        report_.cascadic_level_iters.assign(nl, 0);
        for (int l = nl - 1; l >= 0; --l)
        {
            Vector xl = (l == nl - 1) ? xs[l] : interpolate(l, xs[l + 1]);
            const double entry = residual_norm(l, xl, bs[l]);
            const double tol =
                l == 0 ? solve_tol_ : std::max(cfg_.rel_tol * entry, cfg_.abs_tol);
            int iters = 0;
            double rn = entry;
            while (rn > tol && iters < cfg_.max_nonlinear_iters)
            {
                xl = smooth(l, xl, bs[l], newton);
                ++iters;
                rn = residual_norm(l, xl, bs[l]);
                report_.records.push_back({iters, l, rn, last_step_, last_bt_steps_});
                if (l == 0) { report_.residual_history.push_back(rn); }
                require(std::isfinite(rn), "cascadic iterate has non-finite residual");
            }
            report_.cascadic_level_iters[l] = iters;
            note_mass(l, xl, bs[l]);
            xs[l] = std::move(xl);
        }
        x = xs[0];
        report_.nonlinear_iterations = report_.cascadic_level_iters[0];
        report_.converged = residual_norm(0, x, b0) <= solve_tol_;
    }

    void note_mass(int level, const Vector& x, const Vector& b)
    {
        const LevelOperator& lop = ops_[level];
        const Vector r_p = hier_.levels[level].D * x.head(lop.n_flux()) - b.tail(lop.n_pressure());
        report_.level_mass_residual[level] = r_p.size() ? r_p.cwiseAbs().maxCoeff() : 0.0;
    }

    const Hierarchy& hier_;
    const KappaLaw& law_;
    NonlinearConfig cfg_;
    std::vector<LevelOperator> ops_;
    SolveReport report_;
    double solve_tol_ = 0.0;
    bool early_presmooth_ = false;
    double last_step_ = 1.0;
    int last_bt_steps_ = 0;
};

} // namespace nlmg
