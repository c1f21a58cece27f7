#pragma once

#include "nlmg/hierarchy.hpp"
#include "nlmg/kappa.hpp"
#include "nlmg/linear_solvers.hpp"

namespace nlmg
{

/// Flux-flux and flux-pressure Jacobian blocks at one level; the
/// pressure-flux block is the level's D and the pressure-pressure block is
/// zero.
struct JacobianBlocks
{
    SpMat M; // M(Pi-tilde p)
    SpMat E; // N(sigma) d(kappa_inv)/dp Pi-tilde + D^T
};

/**
   @brief Evaluates and assembles the nonlinear operator of one level using
   only that level's data: static local blocks scaled by 1/kappa of the
   piecewise-constant pressure, the level divergence, and the local maps.
*/
class LevelOperator
{
public:
    LevelOperator(const Level& lvl, const KappaLaw& law) : lvl_(lvl), law_(law) {}

    const Level& level() const { return lvl_; }
    int n_flux() const { return lvl_.topo.n_flux_dofs; }
    int n_pressure() const { return lvl_.topo.n_pressure_dofs; }
    int n_total() const { return n_flux() + n_pressure(); }

    /// Pi-tilde p: one constant per cell of this level.
    Vector pwc_pressure(const Vector& p) const
    {
        require(p.size() == n_pressure(), "pwc_pressure: size mismatch");
        Vector out(lvl_.topo.n_cells);
        for (int c = 0; c < lvl_.topo.n_cells; ++c)
        {
            out[c] = lvl_.pwc[c].dot(p.segment(lvl_.topo.pdof_offset[c], lvl_.topo.cell_pdofs(c)));
        }
        return out;
    }

    /// kappa per cell at the piecewise-constant pressure (height-aware for
    /// the richards law).
    Vector kappa_cells(const Vector& p) const
    {
        const Vector pc = pwc_pressure(p);
        Vector k(lvl_.topo.n_cells);
        for (int c = 0; c < lvl_.topo.n_cells; ++c)
        {
            k[c] = law_.eval(pc[c], lvl_.topo.cell_height[c]);
            require(k[c] > 0.0, "kappa_cells: non-positive kappa");
        }
        return k;
    }

    /// M(Pi-tilde p): static blocks scaled by 1/kappa, assembled through the
    /// local-to-global flux map; identity rows on fine-level Neumann dofs.
    SpMat assemble_M(const Vector& p) const
    {
        const Vector kap = kappa_cells(p);
        std::vector<Triplet> trips;
        for (int c = 0; c < lvl_.topo.n_cells; ++c)
        {
            const auto& map = lvl_.cell_fluxes[c];
            const Matrix& blk = lvl_.M_static[c];
            const double scale = 1.0 / kap[c];
            for (int i = 0; i < blk.rows(); ++i)
            {
                for (int j = 0; j < blk.cols(); ++j)
                {
                    if (blk(i, j) != 0.0) { trips.emplace_back(map[i], map[j], scale * blk(i, j)); }
                }
            }
        }
        for (const auto& [dof, owner] : lvl_.topo.neumann_dofs) { trips.emplace_back(dof, dof, 1.0); }
        return sparse_from_triplets(n_flux(), n_flux(), trips);
    }

    /// N(sigma): column c is the scatter of M_static[c] sigma|_c; satisfies
    /// M(Pi-tilde p) sigma = N(sigma) kappa_inv(Pi-tilde p) + [Neumann part].
    SpMat assemble_N(const Vector& sigma) const
    {
        require(sigma.size() == n_flux(), "assemble_N: size mismatch");
        std::vector<Triplet> trips;
        for (int c = 0; c < lvl_.topo.n_cells; ++c)
        {
            const auto& map = lvl_.cell_fluxes[c];
            const Matrix& blk = lvl_.M_static[c];
            Vector loc(static_cast<int>(map.size()));
            for (std::size_t i = 0; i < map.size(); ++i) { loc[static_cast<int>(i)] = sigma[map[i]]; }
            const Vector col = blk * loc;
            for (std::size_t i = 0; i < map.size(); ++i)
            {
                if (col[static_cast<int>(i)] != 0.0)
                {
                    trips.emplace_back(map[i], c, col[static_cast<int>(i)]);
                }
            }
        }
        return sparse_from_triplets(n_flux(), lvl_.topo.n_cells, trips);
    }

    /// A(x) without the right-hand side: (M(Pi-tilde p) sigma + D^T p, D sigma).
    std::pair<Vector, Vector> apply(const Vector& sigma, const Vector& p) const
    {
        const Vector kap = kappa_cells(p);
        Vector y_sigma = Vector::Zero(n_flux());
        for (int c = 0; c < lvl_.topo.n_cells; ++c)
        {
            const auto& map = lvl_.cell_fluxes[c];
            const Matrix& blk = lvl_.M_static[c];
            Vector loc(static_cast<int>(map.size()));
            for (std::size_t i = 0; i < map.size(); ++i) { loc[static_cast<int>(i)] = sigma[map[i]]; }
            const Vector out = blk * loc / kap[c];
            for (std::size_t i = 0; i < map.size(); ++i) { y_sigma[map[i]] += out[static_cast<int>(i)]; }
        }
        for (const auto& [dof, owner] : lvl_.topo.neumann_dofs) { y_sigma[dof] += sigma[dof]; }
        y_sigma += lvl_.D.transpose() * p;
        Vector y_p = lvl_.D * sigma;
        return {std::move(y_sigma), std::move(y_p)};
    }

    /// Joint-vector form of apply: x = [sigma; p].
    Vector apply_joint(const Vector& x) const
    {
        auto [ys, yp] = apply(x.head(n_flux()), x.tail(n_pressure()));
        Vector y(n_total());
        y.head(n_flux()) = ys;
        y.tail(n_pressure()) = yp;
        return y;
    }

    /// Newton Jacobian blocks at (sigma, p).
    JacobianBlocks jacobian(const Vector& sigma, const Vector& p) const
    {
        JacobianBlocks jac;
        jac.M = assemble_M(p);

        const Vector pc = pwc_pressure(p);
        std::vector<Triplet> e_trips;
        // D^T part.
        for (int k = 0; k < lvl_.D.outerSize(); ++k)
        {
            for (SpMat::InnerIterator it(lvl_.D, k); it; ++it)
            {
                e_trips.emplace_back(static_cast<int>(it.col()), static_cast<int>(it.row()), it.value());
            }
        }
        // N(sigma) diag(d kappa_inv / dp) Pi-tilde part, as per-cell outer
        // products with the pwc rows.
        for (int c = 0; c < lvl_.topo.n_cells; ++c)
        {
            const double dkinv = law_.inv_derivative(pc[c], lvl_.topo.cell_height[c]);
            if (dkinv == 0.0) { continue; }
            const auto& map = lvl_.cell_fluxes[c];
            const Matrix& blk = lvl_.M_static[c];
            Vector loc(static_cast<int>(map.size()));
            for (std::size_t i = 0; i < map.size(); ++i) { loc[static_cast<int>(i)] = sigma[map[i]]; }
            const Vector col = blk * loc;
            const auto& row = lvl_.pwc[c];
            for (std::size_t i = 0; i < map.size(); ++i)
            {
                if (col[static_cast<int>(i)] == 0.0) { continue; }
                for (int j = 0; j < row.size(); ++j)
                {
                    e_trips.emplace_back(map[i], lvl_.topo.pdof_offset[c] + j,
                                         col[static_cast<int>(i)] * dkinv * row[j]);
                }
            }
        }
        jac.E = sparse_from_triplets(n_flux(), n_pressure(), e_trips);
        return jac;
    }

    /**
       Per-cell local blocks of the Picard or Newton system at (sigma, p),
       consumed by the hybridization solver. Fine-level Neumann dofs join
       their owner cell's local set with a unit diagonal and no derivative
       coupling.
    */
    LocalBlockSystem local_blocks(const Vector& sigma, const Vector& p, bool newton,
                                  const Vector& g, const Vector& f) const
    {
        LocalBlockSystem lbs;
        lbs.n_flux = n_flux();
        lbs.n_pressure = n_pressure();
        lbs.pdof_offset = lvl_.topo.pdof_offset;
        lbs.g = g;
        lbs.f = f;
        lbs.symmetric = !newton;

        const int nc = lvl_.topo.n_cells;
        std::vector<std::vector<int>> neumann_of(nc);
        for (const auto& [dof, owner] : lvl_.topo.neumann_dofs) { neumann_of[owner].push_back(dof); }

        const Vector pc = pwc_pressure(p);
        lbs.cell_fluxes.resize(nc);
        lbs.M_loc.resize(nc);
        lbs.E_loc.resize(nc);
        lbs.D_loc.resize(nc);
        for (int c = 0; c < nc; ++c)
        {
            std::vector<int> local = lvl_.cell_fluxes[c];
            const int n_reg = static_cast<int>(local.size());
            local.insert(local.end(), neumann_of[c].begin(), neumann_of[c].end());
            const int nloc = static_cast<int>(local.size());
            const int np = lvl_.topo.cell_pdofs(c);

            const double kap = law_.eval(pc[c], lvl_.topo.cell_height[c]);
            Matrix M_loc = Matrix::Zero(nloc, nloc);
            M_loc.topLeftCorner(n_reg, n_reg) = lvl_.M_static[c] / kap;
            for (int i = n_reg; i < nloc; ++i) { M_loc(i, i) = 1.0; }

            Matrix D_loc = gather_dense(lvl_.D, lvl_.topo.cell_pdof_ids(c), local);
            Matrix E_loc = D_loc.transpose();
            if (newton)
            {
                const double dkinv = law_.inv_derivative(pc[c], lvl_.topo.cell_height[c]);
                if (dkinv != 0.0)
                {
                    Vector loc_sigma(n_reg);
                    for (int i = 0; i < n_reg; ++i) { loc_sigma[i] = sigma[local[i]]; }
                    const Vector col = lvl_.M_static[c] * loc_sigma;
                    E_loc.topRows(n_reg) += (col * dkinv) * lvl_.pwc[c];
                }
            }

            lbs.cell_fluxes[c] = std::move(local);
            lbs.M_loc[c] = std::move(M_loc);
            lbs.E_loc[c] = std::move(E_loc);
            lbs.D_loc[c] = std::move(D_loc);
        }
        return lbs;
    }

private:
    const Level& lvl_;
    const KappaLaw& law_;
};

} // namespace nlmg
