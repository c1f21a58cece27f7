#pragma once

#include "nlmg/common.hpp"
#include "nlmg/field_io.hpp"
#include "nlmg/kappa.hpp"
#include "nlmg/mesh.hpp"

namespace nlmg
{

/**
   @brief Mixed-form saddle system

       [ M(p)  D^T ] [ sigma ]     [ g ]
       [ D      0  ] [   p   ] = - [ f ]

   with M diagonal on the fine level. Column e of D carries -1 at the first
   cell and +1 at the second cell of an internal interface, a single -1 for a
   Dirichlet interface, and is empty for a Neumann interface.
*/
struct SaddleSystem
{
    Vector M_diag;
    SpMat D;  // cells x fluxes
    SpMat E;  // fluxes x cells; D^T in Picard mode
    Vector g; // one entry per flux dof
    Vector f; // one entry per cell

    SpMat M_sparse() const
    {
        std::vector<Triplet> trips;
        trips.reserve(M_diag.size());
        for (int i = 0; i < M_diag.size(); ++i) { trips.emplace_back(i, i, M_diag[i]); }
        return sparse_from_triplets(static_cast<int>(M_diag.size()), static_cast<int>(M_diag.size()), trips);
    }
};

/// Flux/pressure pair on the fine level.
struct FineState
{
    Vector sigma;
    Vector p;

    static FineState zero(const Mesh& mesh)
    {
        FineState s;
        s.sigma = Vector::Zero(mesh.num_interfaces());
        s.p = Vector::Zero(mesh.num_cells());
        return s;
    }
};

/**
   @brief Geometric one-sided transmissibility

       ubar_{K,eps} = |eps| * n_K . K0|_K . (x_eps - x_K) / ||x_eps - x_K||^2.

   Non-positive values signal TPFA-inadmissible geometry and are reported as
   errors rather than clamped.
*/
inline double half_transmissibility(const Mesh& mesh, const PermField& K0, int cell, int iface)
{
    const Interface& face = mesh.interfaces[iface];
    require(face.cells[0] == cell || face.cells[1] == cell,
            "half_transmissibility: interface does not belong to cell");

    const Vec3 d = face.collocation_point - mesh.cells[cell].barycenter;
    const double dist2 = d.squaredNorm();
    require(dist2 > 0.0, "half_transmissibility: zero collocation distance");

    const Vec3 n = (face.cells[0] == cell) ? face.unit_normal : Vec3(-face.unit_normal);
    const Vec3 Kd(K0.kx[cell] * d[0], K0.ky[cell] * d[1], K0.kz[cell] * d[2]);
    const double ups = face.measure * n.dot(Kd) / dist2;
    require(ups > 0.0, "half_transmissibility: non-admissible geometry (ubar <= 0)");
    return ups;
}

/// All half transmissibilities, indexed like (cell, local interface slot).
inline std::vector<std::vector<double>> all_half_transmissibilities(const Mesh& mesh,
                                                                    const PermField& K0)
{
    std::vector<std::vector<double>> ups(mesh.num_cells());
    for (int c = 0; c < mesh.num_cells(); ++c)
    {
        const auto& ids = mesh.cells[c].interface_ids;
        ups[c].resize(ids.size());
        for (std::size_t k = 0; k < ids.size(); ++k)
        {
            ups[c][k] = half_transmissibility(mesh, K0, c, ids[k]);
        }
    }
    return ups;
}

/**
   @brief Assemble the fine-level system at pressure p.

   source holds the mean source value per cell; the assembled f gains the
   cell volume factor and the Neumann boundary contributions.
*/
inline SaddleSystem assemble_fine_system(const Mesh& mesh, const PermField& K0,
                                         const KappaLaw& law, const Vector& p,
                                         const Vector& source)
{
    require(p.size() == mesh.num_cells(), "assemble_fine_system: pressure size mismatch");
    require(source.size() == mesh.num_cells(), "assemble_fine_system: source size mismatch");

    const int n_flux = mesh.num_interfaces();
    const int n_cell = mesh.num_cells();

    SaddleSystem sys;
    sys.M_diag = Vector::Zero(n_flux);
    sys.g = Vector::Zero(n_flux);
    sys.f = Vector::Zero(n_cell);

    std::vector<Triplet> d_trips;
    d_trips.reserve(2 * n_flux);

    for (int e = 0; e < n_flux; ++e)
    {
        const Interface& face = mesh.interfaces[e];
        const int K = face.cells[0];
        switch (face.kind)
        {
            case FaceKind::internal:
            {
                const int L = face.cells[1];
                const double ups_K = half_transmissibility(mesh, K0, K, e);
                const double ups_L = half_transmissibility(mesh, K0, L, e);
                const double kap_K = law.eval(p[K], mesh.cell_height(K));
                const double kap_L = law.eval(p[L], mesh.cell_height(L));
                sys.M_diag[e] = 1.0 / (kap_K * ups_K) + 1.0 / (kap_L * ups_L);
                d_trips.emplace_back(K, e, -1.0);
                d_trips.emplace_back(L, e, 1.0);
                break;
            }
            case FaceKind::dirichlet:
            {
                const double ups_K = half_transmissibility(mesh, K0, K, e);
                const double kap_K = law.eval(p[K], mesh.cell_height(K));
                sys.M_diag[e] = 1.0 / (kap_K * ups_K);
                sys.g[e] = face.bc_value;
                d_trips.emplace_back(K, e, -1.0);
                break;
            }
            case FaceKind::neumann:
            {
                sys.M_diag[e] = 1.0;
                sys.g[e] = face.measure * face.bc_value;
                sys.f[K] += face.measure * face.bc_value;
                break;
            }
        }
    }
    for (int c = 0; c < n_cell; ++c) { sys.f[c] += mesh.cells[c].volume * source[c]; }

    sys.D = sparse_from_triplets(n_cell, n_flux, d_trips);
    sys.E = SpMat(sys.D.transpose());
    return sys;
}

/**
   @brief Fine-level nonlinear residual r(x) = A(x) - b, returned as the
   (flux, pressure) pair

       r_sigma = M(p) sigma + D^T p + g,   r_p = D sigma + f.
*/
inline std::pair<Vector, Vector> fine_residual(const Mesh& mesh, const PermField& K0,
                                               const KappaLaw& law, const Vector& source,
                                               const FineState& state)
{
    require(state.sigma.size() == mesh.num_interfaces(), "fine_residual: flux size mismatch");
    const SaddleSystem sys = assemble_fine_system(mesh, K0, law, state.p, source);
    Vector r_sigma = sys.M_diag.cwiseProduct(state.sigma) + sys.E * state.p + sys.g;
    Vector r_p = sys.D * state.sigma + sys.f;
    return {std::move(r_sigma), std::move(r_p)};
}

/**
   @brief Reduced cell-centered system (D M^-1 D^T) p = f - D M^-1 g,
   obtained by eliminating the flux unknown. Used as a cross-check oracle.
*/
inline std::pair<SpMat, Vector> reduced_system(const SaddleSystem& sys)
{
    for (int i = 0; i < sys.M_diag.size(); ++i)
    {
        require(sys.M_diag[i] != 0.0, "reduced_system: zero diagonal entry in M");
    }
    const Vector m_inv = sys.M_diag.cwiseInverse();
    SpMat Dmi = sys.D * m_inv.asDiagonal();
    SpMat A = SpMat(Dmi * sys.D.transpose());
    Vector rhs = sys.f - Dmi * sys.g;
    return {std::move(A), std::move(rhs)};
}

} // namespace nlmg
