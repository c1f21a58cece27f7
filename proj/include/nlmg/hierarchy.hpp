#pragma once

#include "nlmg/common.hpp"
#include "nlmg/field_io.hpp"
#include "nlmg/mesh.hpp"
#include "nlmg/partition.hpp"
#include "nlmg/tpfa.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <map>
#include <numeric>
#include <set>

namespace nlmg
{

/**
   @brief One face of a level: the dofs coupling two cells (or one cell and
   the Dirichlet boundary). On the fine level a face is a mesh interface
   with a single dof; on coarse levels it carries up to m_f trace dofs.
*/
struct LevelFace
{
    int c0 = -1;
    int c1 = -1; // -1 for a Dirichlet boundary face
    std::vector<int> dofs;

    bool is_boundary() const { return c1 < 0; }
};

/**
   @brief Cell/face/dof bookkeeping of one level of the hierarchy.

   Pressure dofs are stored cell by cell: cell c owns
   [pdof_offset[c], pdof_offset[c+1]). one_rep is the representation of the
   fine constant-one vector on this level's pressure space.
*/
struct LevelTopology
{
    int n_cells = 0;
    int n_flux_dofs = 0;
    int n_pressure_dofs = 0;
    std::vector<int> pdof_offset;
    std::vector<LevelFace> faces;
    std::vector<std::vector<int>> cell_faces;
    std::vector<std::vector<int>> cell_bubbles;
    std::vector<std::pair<int, int>> neumann_dofs; // (dof, owner cell); fine level only
    Vector cell_volume;
    Vector cell_height;
    Vector one_rep;

    int cell_pdofs(int c) const { return pdof_offset[c + 1] - pdof_offset[c]; }

    std::vector<int> cell_pdof_ids(int c) const
    {
        std::vector<int> ids(cell_pdofs(c));
        std::iota(ids.begin(), ids.end(), pdof_offset[c]);
        return ids;
    }
};

/**
   @brief One level: topology, divergence operator, static local
   transmissibility blocks with their local-to-global maps, the
   piecewise-constant projector rows, and the transfer operators to the next
   coarser level (absent on the coarsest).
*/
struct Level
{
    LevelTopology topo;
    SpMat D; // n_pressure_dofs x n_flux_dofs

    // Static local blocks: M_static[c] over cell_fluxes[c]; pressure
    // independent, evaluated at the kappa == 1 reference.
    std::vector<Matrix> M_static;
    std::vector<std::vector<int>> cell_fluxes;

    // Piecewise-constant projector: row of cell c over its own pressure dofs.
    std::vector<Eigen::RowVectorXd> pwc;

    // Transfers between this level and the next coarser one.
    SpMat P_sigma, Q_sigma, P_p;
    std::vector<int> cell_to_agg;

    bool has_coarser() const { return P_p.cols() > 0; }

    /// Assembled sparse Pi-tilde (cells x pressure dofs).
    SpMat pwc_matrix() const
    {
        std::vector<Triplet> trips;
        for (int c = 0; c < topo.n_cells; ++c)
        {
            for (int j = 0; j < pwc[c].size(); ++j)
            {
                trips.emplace_back(c, topo.pdof_offset[c] + j, pwc[c][j]);
            }
        }
        return sparse_from_triplets(topo.n_cells, topo.n_pressure_dofs, trips);
    }

    /// Reference (kappa == 1) global M assembled from the static blocks;
    /// identity rows on Neumann dofs.
    SpMat reference_M() const
    {
        std::vector<Triplet> trips;
        for (int c = 0; c < topo.n_cells; ++c)
        {
            const auto& map = cell_fluxes[c];
            const Matrix& loc = M_static[c];
            for (int i = 0; i < loc.rows(); ++i)
            {
                for (int j = 0; j < loc.cols(); ++j)
                {
                    if (loc(i, j) != 0.0) { trips.emplace_back(map[i], map[j], loc(i, j)); }
                }
            }
        }
        for (const auto& [dof, owner] : topo.neumann_dofs) { trips.emplace_back(dof, dof, 1.0); }
        return sparse_from_triplets(topo.n_flux_dofs, topo.n_flux_dofs, trips);
    }
};

struct HierarchyParams
{
    int levels = 2;
    std::vector<double> factors; // target mean aggregate size per transition
    int m_A = 1;
    int m_f = 1;
    std::uint64_t seed = 0;
    double svd_tol = 1e-8;

    double factor_for(int transition) const
    {
        if (factors.empty()) { return 8.0; }
        return factors[std::min<std::size_t>(transition, factors.size() - 1)];
    }
};

struct Hierarchy
{
    std::vector<Level> levels;
    HierarchyParams params;

    int num_levels() const { return static_cast<int>(levels.size()); }
};

/// Fine level from a classified mesh: single pressure dof per cell, one flux
/// dof per interface, diagonal static blocks 1/ubar.
inline Level build_fine_level(const Mesh& mesh, const PermField& K0)
{
    Level lvl;
    LevelTopology& topo = lvl.topo;
    const int nc = mesh.num_cells();
    const int ne = mesh.num_interfaces();

    topo.n_cells = nc;
    topo.n_flux_dofs = ne;
    topo.n_pressure_dofs = nc;
    topo.pdof_offset.resize(nc + 1);
    std::iota(topo.pdof_offset.begin(), topo.pdof_offset.end(), 0);
    topo.cell_faces.resize(nc);
    topo.cell_bubbles.assign(nc, {});
    topo.cell_volume.resize(nc);
    topo.cell_height.resize(nc);
    for (int c = 0; c < nc; ++c)
    {
        topo.cell_volume[c] = mesh.cells[c].volume;
        topo.cell_height[c] = mesh.cell_height(c);
    }
    topo.one_rep = Vector::Ones(nc);

    std::vector<Triplet> d_trips;
    for (int e = 0; e < ne; ++e)
    {
        const Interface& face = mesh.interfaces[e];
        if (face.kind == FaceKind::neumann)
        {
            topo.neumann_dofs.emplace_back(e, face.cells[0]);
            continue;
        }
        LevelFace lf;
        lf.c0 = face.cells[0];
        lf.c1 = face.kind == FaceKind::internal ? face.cells[1] : -1;
        lf.dofs = {e};
        const int fid = static_cast<int>(topo.faces.size());
        topo.faces.push_back(lf);
        topo.cell_faces[lf.c0].push_back(fid);
        if (lf.c1 >= 0) { topo.cell_faces[lf.c1].push_back(fid); }

        d_trips.emplace_back(face.cells[0], e, -1.0);
        if (face.kind == FaceKind::internal) { d_trips.emplace_back(face.cells[1], e, 1.0); }
    }
    lvl.D = sparse_from_triplets(nc, ne, d_trips);

    lvl.M_static.resize(nc);
    lvl.cell_fluxes.resize(nc);
    for (int c = 0; c < nc; ++c)
    {
        std::vector<int> local;
        for (int e : mesh.cells[c].interface_ids)
        {
            if (mesh.interfaces[e].kind != FaceKind::neumann) { local.push_back(e); }
        }
        Matrix block = Matrix::Zero(static_cast<int>(local.size()), static_cast<int>(local.size()));
        for (std::size_t k = 0; k < local.size(); ++k)
        {
            block(static_cast<int>(k), static_cast<int>(k)) =
                1.0 / half_transmissibility(mesh, K0, c, local[k]);
        }
        lvl.cell_fluxes[c] = std::move(local);
        lvl.M_static[c] = std::move(block);
    }

    lvl.pwc.resize(nc);
    for (int c = 0; c < nc; ++c) { lvl.pwc[c] = Eigen::RowVectorXd::Ones(1); }
    return lvl;
}

namespace detail
{

/// Solve the saddle system [[M, D^T], [D, 0]] [x; p] = [r1; r2], optionally
/// bordered by the constraint q^T p = 0 when the plain system is singular
/// (pure Neumann local problems with D^T kernel spanned by q).
struct LocalSaddle
{
    int n_flux = 0;
    int n_pressure = 0;
    bool bordered = false;
    Eigen::PartialPivLU<Matrix> lu;

    void factor(const Matrix& M, const Matrix& D, const Vector& border)
    {
        n_flux = static_cast<int>(M.rows());
        n_pressure = static_cast<int>(D.rows());
        bordered = border.size() > 0;
        const int n = n_flux + n_pressure + (bordered ? 1 : 0);
        Matrix K = Matrix::Zero(n, n);
        K.topLeftCorner(n_flux, n_flux) = M;
        K.block(0, n_flux, n_flux, n_pressure) = D.transpose();
        K.block(n_flux, 0, n_pressure, n_flux) = D;
        if (bordered)
        {
            K.block(n_flux, n_flux + n_pressure, n_pressure, 1) = border;
            K.block(n_flux + n_pressure, n_flux, 1, n_pressure) = border.transpose();
        }
        lu.compute(K);
        require((lu.matrixLU().diagonal().array().abs() > 1e-300).all(),
                "local saddle solve: singular system (disconnected aggregate?)");
    }

    std::pair<Vector, Vector> solve(const Vector& r1, const Vector& r2) const
    {
        Vector rhs = Vector::Zero(n_flux + n_pressure + (bordered ? 1 : 0));
        rhs.head(n_flux) = r1;
        rhs.segment(n_flux, n_pressure) = r2;
        const Vector sol = lu.solve(rhs);
        return {sol.head(n_flux), sol.segment(n_flux, n_pressure)};
    }
};

} // namespace detail

/**
   @brief One coarsening pass: builds the pressure eigenbases, the PV/trace
   flux basis with extensions and bubbles, the transfer operators P, Q and
   the next coarser Level. The setup operators are evaluated at the
   kappa == 1 reference state.

   The stages are public so they can be exercised individually in tests; the
   usual entry point is run() via build_hierarchy.
*/
class SpectralCoarsener
{
public:
    SpectralCoarsener(const Level& fine, int m_A, int m_f, double svd_tol = 1e-8)
        : fine_(fine), m_A_(m_A), m_f_(m_f), svd_tol_(svd_tol), M_ref_(fine.reference_M()),
          Dt_(fine.D.transpose())
    {
        require(m_A_ >= 1 && m_f_ >= 1, "SpectralCoarsener: m_A and m_f must be >= 1");
    }

    /// Aggregate the level's cell graph and fix coarse-face connectivity.
    void aggregate(int target_parts, std::uint64_t seed)
    {
        std::vector<std::pair<int, int>> pairs;
        pairs.reserve(fine_.topo.faces.size());
        for (const auto& f : fine_.topo.faces) { pairs.emplace_back(f.c0, f.c1); }
        DualGraph graph = build_dual_graph(fine_.topo.n_cells, pairs);
        agg_ = partition(graph, target_parts, seed);

        FaceAdjacency fa;
        fa.face_cells = pairs;
        fa.cell_faces = fine_.topo.cell_faces;
        coarse_faces_ = fix_coarse_faces(fa, agg_);

        members_ = agg_.members();
        build_dof_sets();
    }

    void set_aggregation(const Aggregation& agg)
    {
        agg_ = agg;
        FaceAdjacency fa;
        for (const auto& f : fine_.topo.faces) { fa.face_cells.emplace_back(f.c0, f.c1); }
        fa.cell_faces = fine_.topo.cell_faces;
        coarse_faces_ = fix_coarse_faces(fa, agg_);
        members_ = agg_.members();
        build_dof_sets();
    }

    const Aggregation& aggregation() const { return agg_; }
    const std::vector<CoarseFace>& coarse_faces() const { return coarse_faces_; }

    /**
       Local spectral pressure basis of one aggregate: the m_A lowest modes
       of D|_N (M|_N)^-1 D|_N^T on the extended aggregate restricted to the
       aggregate, with the first column replaced by the normalized constant
       representation and the rest orthonormalized by SVD truncation.
    */
    Matrix local_eigenbasis(int a) const
    {
        const auto& pdofs = agg_pdofs_[a];
        const auto& ext_pdofs = ext_pdofs_[a];
        const auto& ext_edges = ext_edges_[a];
        const int np = static_cast<int>(pdofs.size());

        int m = m_A_;
        if (m > np)
        {
            warn("local_eigenbasis: m_A exceeds aggregate size, truncating");
            m = np;
        }

        Vector q_pv(np);
        for (int i = 0; i < np; ++i) { q_pv[i] = fine_.topo.one_rep[pdofs[i]]; }
        q_pv.normalize();

        Matrix basis(np, 1);
        basis.col(0) = q_pv;
        if (m == 1) { return basis; }

        // Dense local operator on the extended aggregate.
        const Matrix M_ext = gather_dense(M_ref_, ext_edges, ext_edges);
        Matrix Dt_ext = gather_dense(fine_.D, ext_pdofs, ext_edges).transpose();
        const Eigen::LLT<Matrix> llt(M_ext);
        require(llt.info() == Eigen::Success, "local_eigenbasis: local M not SPD");
        const Matrix MinvDt = llt.solve(Dt_ext);
        const Matrix L = Dt_ext.transpose() * MinvDt;

        Eigen::SelfAdjointEigenSolver<Matrix> eig(L);
        require(eig.info() == Eigen::Success, "local_eigenbasis: eigensolver failed");

        // Positions of the aggregate's pressure dofs inside the extended set.
        std::vector<int> pos(pdofs.size());
        {
            std::map<int, int> where;
            for (std::size_t i = 0; i < ext_pdofs.size(); ++i) { where[ext_pdofs[i]] = static_cast<int>(i); }
            for (std::size_t i = 0; i < pdofs.size(); ++i) { pos[i] = where.at(pdofs[i]); }
        }

        // Candidates: eigenvectors 2..m restricted to the aggregate, with the
        // q_pv component projected out.
        Matrix cand(np, m - 1);
        for (int k = 1; k < m; ++k)
        {
            Vector v(np);
            for (int i = 0; i < np; ++i) { v[i] = eig.eigenvectors()(pos[i], k); }
            v -= q_pv.dot(v) * q_pv;
            cand.col(k - 1) = v;
        }

        Eigen::JacobiSVD<Matrix> svd(cand, Eigen::ComputeThinU);
        int keep = 0;
        const double smax = svd.singularValues().size() > 0 ? svd.singularValues()[0] : 0.0;
        for (int k = 0; k < svd.singularValues().size(); ++k)
        {
            if (svd.singularValues()[k] > svd_tol_ * smax && keep < m - 1) { ++keep; }
        }
        basis.conservativeResize(np, 1 + keep);
        for (int k = 0; k < keep; ++k) { basis.col(1 + k) = svd.matrixU().col(k); }
        return basis;
    }

    void build_pressure_bases()
    {
        const int na = agg_.aggregate_count;
        P_agg_.resize(na);
        for (int a = 0; a < na; ++a) { P_agg_[a] = local_eigenbasis(a); }
    }

    /**
       PV flux of a coarse face: the interface part of the local saddle
       solution on the union of the two adjacent aggregates driven by the
       normalized constant source/sink pair (one-sided for boundary faces).
    */
    Vector build_pv_flux(int face_id) const
    {
        const CoarseFace& cf = coarse_faces_[face_id];
        const auto& fdofs = face_dof_sets_[face_id];
        const int nf = static_cast<int>(fdofs.size());

        std::vector<int> edges = fdofs;
        std::vector<int> pdofs;
        auto append_agg = [&](int a)
        {
            edges.insert(edges.end(), agg_interior_[a].begin(), agg_interior_[a].end());
            pdofs.insert(pdofs.end(), agg_pdofs_[a].begin(), agg_pdofs_[a].end());
        };
        append_agg(cf.a);
        if (!cf.is_boundary()) { append_agg(cf.b); }

        const Matrix M_loc = gather_dense(M_ref_, edges, edges);
        const Matrix D_loc = gather_dense(fine_.D, pdofs, edges);

        Vector rhs2 = Vector::Zero(static_cast<int>(pdofs.size()));
        {
            // -1_a / ||1_a||^2 on the a side, +1_b / ||1_b||^2 on the b side.
            double norm2_a = 0.0, norm2_b = 0.0;
            for (int d : agg_pdofs_[cf.a])
            { norm2_a += fine_.topo.one_rep[d] * fine_.topo.one_rep[d]; }
            if (!cf.is_boundary())
            {
                for (int d : agg_pdofs_[cf.b])
                { norm2_b += fine_.topo.one_rep[d] * fine_.topo.one_rep[d]; }
            }
            for (std::size_t i = 0; i < pdofs.size(); ++i)
            {
                const int d = pdofs[i];
                const bool in_a = i < agg_pdofs_[cf.a].size();
                rhs2[static_cast<int>(i)] = in_a ? -fine_.topo.one_rep[d] / norm2_a
                                                 : fine_.topo.one_rep[d] / norm2_b;
            }
        }

        detail::LocalSaddle solver;
        if (cf.is_boundary())
        {
            solver.factor(M_loc, D_loc, Vector()); // Dirichlet columns make it regular
        }
        else
        {
            Vector border(static_cast<int>(pdofs.size()));
            for (std::size_t i = 0; i < pdofs.size(); ++i) { border[static_cast<int>(i)] = fine_.topo.one_rep[pdofs[i]]; }
            solver.factor(M_loc, D_loc, border);
        }
        const auto [sigma, p] = solver.solve(Vector::Zero(static_cast<int>(edges.size())), rhs2);
        return sigma.head(nf);
    }

    /**
       Per-face flux basis: [sigma_PV] for m_f = 1 (spectral traces
       discarded); otherwise sigma_PV plus the m_f - 1 leading SVD directions
       of the eigenvector traces from both sides, orthogonalized against
       sigma_PV. Each column is supported on the face dofs only; extensions
       into the aggregates are built separately.
    */
    Matrix build_face_basis(int face_id) const
    {
        const CoarseFace& cf = coarse_faces_[face_id];
        const auto& fdofs = face_dof_sets_[face_id];
        const int nf = static_cast<int>(fdofs.size());

        Vector pv = build_pv_flux(face_id);
        Matrix basis(nf, 1);
        basis.col(0) = pv;
        int want = std::min(m_f_, nf);
        if (want < m_f_) { warn("build_face_basis: face smaller than m_f, truncating"); }
        if (want == 1) { return basis; }

        // Traces (M|_N)^-1 D|_N^T q_i from each side, restricted to the face.
        std::vector<Vector> traces;
        auto side_traces = [&](int a)
        {
            const auto& ext_pdofs = ext_pdofs_[a];
            const auto& ext_edges = ext_edges_[a];
            const Matrix M_ext = gather_dense(M_ref_, ext_edges, ext_edges);
            const Matrix D_ext = gather_dense(fine_.D, ext_pdofs, ext_edges);
            Eigen::LLT<Matrix> llt(M_ext);
            if (llt.info() != Eigen::Success) { return; }

            std::map<int, int> edge_pos;
            for (std::size_t i = 0; i < ext_edges.size(); ++i) { edge_pos[ext_edges[i]] = static_cast<int>(i); }
            std::map<int, int> pdof_pos;
            for (std::size_t i = 0; i < ext_pdofs.size(); ++i) { pdof_pos[ext_pdofs[i]] = static_cast<int>(i); }

            const Matrix& P_a = P_agg_[a];
            for (int k = 0; k < P_a.cols(); ++k)
            {
                Vector q_ext = Vector::Zero(static_cast<int>(ext_pdofs.size()));
                for (std::size_t i = 0; i < agg_pdofs_[a].size(); ++i)
                {
                    q_ext[pdof_pos.at(agg_pdofs_[a][i])] = P_a(static_cast<int>(i), k);
                }
                const Vector t_full = llt.solve(D_ext.transpose() * q_ext);
                Vector t(nf);
                bool supported = true;
                for (int i = 0; i < nf; ++i)
                {
                    auto it = edge_pos.find(fdofs[i]);
                    if (it == edge_pos.end())
                    {
                        supported = false;
                        break;
                    }
                    t[i] = t_full[it->second];
                }
                if (supported && t.norm() > 0.0) { traces.push_back(t); }
            }
        };
        side_traces(cf.a);
        if (!cf.is_boundary()) { side_traces(cf.b); }

        if (traces.empty()) { return basis; }
        Matrix T(nf, static_cast<int>(traces.size()));
        const double pv2 = pv.squaredNorm();
        for (std::size_t k = 0; k < traces.size(); ++k)
        {
            T.col(static_cast<int>(k)) = traces[k] - (pv.dot(traces[k]) / pv2) * pv;
        }
        Eigen::JacobiSVD<Matrix> svd(T, Eigen::ComputeThinU);
        const double smax = svd.singularValues().size() > 0 ? svd.singularValues()[0] : 0.0;
        int keep = 0;
        for (int k = 0; k < svd.singularValues().size() && keep < want - 1; ++k)
        {
            if (svd.singularValues()[k] > svd_tol_ * smax) { ++keep; }
        }
        basis.conservativeResize(nf, 1 + keep);
        for (int k = 0; k < keep; ++k) { basis.col(1 + k) = svd.matrixU().col(k); }
        return basis;
    }

    /**
       Neumann extension of a face-basis column into aggregate a: solve the
       interior saddle problem with flux load -M|_{A,F} sigma_F and the
       mean-compatibilized divergence load c_A q_PV - D|_{A,F} sigma_F.
       Returns the interior flux part (ordered like agg_interior_[a]).
    */
    Vector extend_into(int a, const std::vector<int>& face_dofs, const Vector& sigma_f) const
    {
        const auto& interior = agg_interior_[a];
        const auto& pdofs = agg_pdofs_[a];
        if (interior.empty()) { return Vector(); }

        const Matrix M_cross = gather_dense(M_ref_, interior, face_dofs);
        const Matrix D_face = gather_dense(fine_.D, pdofs, face_dofs);

        Vector q_pv(static_cast<int>(pdofs.size()));
        for (std::size_t i = 0; i < pdofs.size(); ++i) { q_pv[static_cast<int>(i)] = fine_.topo.one_rep[pdofs[i]]; }
        q_pv.normalize();

        const Vector d_sigma = D_face * sigma_f;
        const double c_a = q_pv.dot(d_sigma);
        const Vector rhs1 = -(M_cross * sigma_f);
        const Vector rhs2 = c_a * q_pv - d_sigma;
        const auto [sigma, p] = interior_solver_[a].solve(rhs1, rhs2);
        return sigma;
    }

    /// Bubbles of aggregate a: interior solves loaded by each non-PV
    /// pressure basis vector; zero on all face dofs by construction.
    std::vector<Vector> build_bubbles(int a) const
    {
        std::vector<Vector> bubbles;
        const Matrix& P_a = P_agg_[a];
        const int n_b = static_cast<int>(P_a.cols()) - 1;
        if (n_b <= 0) { return bubbles; }
        require(!agg_interior_[a].empty(),
                "build_bubbles: aggregate has non-PV modes but no interior flux dofs");
        for (int k = 1; k <= n_b; ++k)
        {
            const Vector q = P_a.col(k);
            const auto [sigma, p] =
                interior_solver_[a].solve(Vector::Zero(static_cast<int>(agg_interior_[a].size())), q);
            bubbles.push_back(sigma);
        }
        return bubbles;
    }

    /**
       Assemble P_sigma (lower block triangular: face traces, their
       extensions, bubbles) and Q_sigma satisfying Q_sigma P_sigma = I and
       the commutativity D_coarse Q_sigma = Q_p D_fine.
    */
    void assemble_flux_interp()
    {
        const int na = agg_.aggregate_count;
        const int nfaces = static_cast<int>(coarse_faces_.size());

        face_bases_.resize(nfaces);
        face_dof_start_.assign(nfaces, 0);
        int n_coarse = 0;
        for (int f = 0; f < nfaces; ++f)
        {
            face_bases_[f] = build_face_basis(f);
            face_dof_start_[f] = n_coarse;
            n_coarse += static_cast<int>(face_bases_[f].cols());
        }
        n_trace_dofs_ = n_coarse;
        bubble_dof_start_.assign(na, 0);
        bubbles_.resize(na);
        for (int a = 0; a < na; ++a)
        {
            bubbles_[a] = build_bubbles(a);
            bubble_dof_start_[a] = n_coarse;
            n_coarse += static_cast<int>(bubbles_[a].size());
        }
        n_coarse_flux_ = n_coarse;

        std::vector<Triplet> p_trips, q_trips;

        for (int f = 0; f < nfaces; ++f)
        {
            const CoarseFace& cf = coarse_faces_[f];
            const auto& fdofs = face_dof_sets_[f];
            const Matrix& T = face_bases_[f];
            const int nf = static_cast<int>(fdofs.size());
            const int mf = static_cast<int>(T.cols());

            // P_sigma: traces on the face plus extensions into the aggregates.
            for (int k = 0; k < mf; ++k)
            {
                const int col = face_dof_start_[f] + k;
                for (int i = 0; i < nf; ++i)
                {
                    if (T(i, k) != 0.0) { p_trips.emplace_back(fdofs[i], col, T(i, k)); }
                }
                for (int side = 0; side < (cf.is_boundary() ? 1 : 2); ++side)
                {
                    const int a = side == 0 ? cf.a : cf.b;
                    const Vector ext = extend_into(a, fdofs, T.col(k));
                    for (int i = 0; i < ext.size(); ++i)
                    {
                        if (ext[i] != 0.0) { p_trips.emplace_back(agg_interior_[a][i], col, ext[i]); }
                    }
                }
            }

            // Q_sigma face rows: V = T (T^T T)^-1 + s_perp m^T / (m^T m) with
            // s the PV-weighted divergence pattern of the face; V^T T = I and
            // V maps the fine divergence moments onto the coarse PV rows,
            // which is exactly what commutativity requires.
            Vector s(nf);
            {
                const Matrix D_face = gather_dense(fine_.D, agg_pdofs_[cf.a], fdofs);
                Vector q_pv(static_cast<int>(agg_pdofs_[cf.a].size()));
                for (std::size_t i = 0; i < agg_pdofs_[cf.a].size(); ++i)
                {
                    q_pv[static_cast<int>(i)] = fine_.topo.one_rep[agg_pdofs_[cf.a][i]];
                }
                q_pv.normalize();
                s = D_face.transpose() * q_pv;
            }
            const Matrix TtT = T.transpose() * T;
            const Matrix Tpinv = T * TtT.inverse();
            const Vector m = T.transpose() * s;
            const Vector s_perp = s - Tpinv * m;
            const double m2 = m.squaredNorm();
            require(m2 > 0.0, "assemble_flux_interp: degenerate PV moment on a coarse face");
            Matrix V = Tpinv + (s_perp / m2) * m.transpose();
            for (int k = 0; k < mf; ++k)
            {
                const int row = face_dof_start_[f] + k;
                for (int i = 0; i < nf; ++i)
                {
                    if (V(i, k) != 0.0) { q_trips.emplace_back(row, fdofs[i], V(i, k)); }
                }
            }
        }

        for (int a = 0; a < na; ++a)
        {
            // P_sigma bubble columns.
            for (std::size_t b = 0; b < bubbles_[a].size(); ++b)
            {
                const int col = bubble_dof_start_[a] + static_cast<int>(b);
                const Vector& sig = bubbles_[a][b];
                for (int i = 0; i < sig.size(); ++i)
                {
                    if (sig[i] != 0.0) { p_trips.emplace_back(agg_interior_[a][i], col, sig[i]); }
                }
            }
            // Q_sigma bubble rows: q_i^T D restricted to the aggregate rows.
            const Matrix& P_a = P_agg_[a];
            if (P_a.cols() <= 1) { continue; }
            // Row combination via D^T columns (rows of D).
            std::map<int, Vector> row_cache;
            for (std::size_t i = 0; i < agg_pdofs_[a].size(); ++i)
            {
                const int pd = agg_pdofs_[a][i];
                for (SpMat::InnerIterator it(Dt_, pd); it; ++it)
                {
                    auto& acc = row_cache[static_cast<int>(it.row())];
                    if (acc.size() == 0) { acc = Vector::Zero(P_a.cols() - 1); }
                    for (int k = 1; k < P_a.cols(); ++k)
                    {
                        acc[k - 1] += P_a(static_cast<int>(i), k) * it.value();
                    }
                }
            }
            for (const auto& [edge, vals] : row_cache)
            {
                for (int k = 0; k < vals.size(); ++k)
                {
                    if (vals[k] != 0.0)
                    {
                        q_trips.emplace_back(bubble_dof_start_[a] + k, edge, vals[k]);
                    }
                }
            }
        }

        P_sigma_ = sparse_from_triplets(fine_.topo.n_flux_dofs, n_coarse_flux_, p_trips);
        Q_sigma_ = sparse_from_triplets(n_coarse_flux_, fine_.topo.n_flux_dofs, q_trips);
    }

    /// Block-diagonal pressure interpolation from the per-aggregate bases.
    void assemble_pressure_interp()
    {
        std::vector<Triplet> trips;
        int col0 = 0;
        coarse_pdof_offset_.assign(agg_.aggregate_count + 1, 0);
        for (int a = 0; a < agg_.aggregate_count; ++a)
        {
            const Matrix& P_a = P_agg_[a];
            for (int i = 0; i < P_a.rows(); ++i)
            {
                for (int k = 0; k < P_a.cols(); ++k)
                {
                    if (P_a(i, k) != 0.0)
                    {
                        trips.emplace_back(agg_pdofs_[a][i], col0 + k, P_a(i, k));
                    }
                }
            }
            col0 += static_cast<int>(P_a.cols());
            coarse_pdof_offset_[a + 1] = col0;
        }
        P_p_ = sparse_from_triplets(fine_.topo.n_pressure_dofs, col0, trips);
    }

    /// Galerkin-coarsen the static local blocks aggregate by aggregate.
    std::vector<Matrix> coarsen_local_mass(const std::vector<std::vector<int>>& coarse_cell_fluxes) const
    {
        std::vector<Matrix> out(agg_.aggregate_count);
        for (int a = 0; a < agg_.aggregate_count; ++a)
        {
            // Closure dofs and the assembled fine block on them.
            std::vector<int> closure;
            {
                std::set<int> acc;
                for (int c : members_[a])
                {
                    acc.insert(fine_.cell_fluxes[c].begin(), fine_.cell_fluxes[c].end());
                }
                closure.assign(acc.begin(), acc.end());
            }
            std::map<int, int> pos;
            for (std::size_t i = 0; i < closure.size(); ++i) { pos[closure[i]] = static_cast<int>(i); }

            Matrix M_fine = Matrix::Zero(static_cast<int>(closure.size()), static_cast<int>(closure.size()));
            for (int c : members_[a])
            {
                const auto& map = fine_.cell_fluxes[c];
                const Matrix& blk = fine_.M_static[c];
                for (int i = 0; i < blk.rows(); ++i)
                {
                    for (int j = 0; j < blk.cols(); ++j)
                    {
                        if (blk(i, j) != 0.0) { M_fine(pos.at(map[i]), pos.at(map[j])) += blk(i, j); }
                    }
                }
            }
            const Matrix P_loc = gather_dense(P_sigma_, closure, coarse_cell_fluxes[a]);
            out[a] = P_loc.transpose() * M_fine * P_loc;
            out[a] = 0.5 * (out[a] + out[a].transpose().eval()); // enforce exact symmetry
        }
        return out;
    }

    /// Full pass: all stages plus assembly of the coarse Level.
    Level run()
    {
        build_pressure_bases();
        assemble_pressure_interp();

        // Interior saddle factorizations used by extensions and bubbles.
        interior_solver_.resize(agg_.aggregate_count);
        for (int a = 0; a < agg_.aggregate_count; ++a)
        {
            const auto& interior = agg_interior_[a];
            const auto& pdofs = agg_pdofs_[a];
            const Matrix M_loc = gather_dense(M_ref_, interior, interior);
            const Matrix D_loc = gather_dense(fine_.D, pdofs, interior);
            Vector border(static_cast<int>(pdofs.size()));
            for (std::size_t i = 0; i < pdofs.size(); ++i) { border[static_cast<int>(i)] = fine_.topo.one_rep[pdofs[i]]; }
            interior_solver_[a].factor(M_loc, D_loc, border);
        }

        assemble_flux_interp();

        Level coarse;
        LevelTopology& topo = coarse.topo;
        const int na = agg_.aggregate_count;
        topo.n_cells = na;
        topo.n_flux_dofs = n_coarse_flux_;
        topo.n_pressure_dofs = static_cast<int>(P_p_.cols());
        topo.pdof_offset = coarse_pdof_offset_;
        topo.cell_faces.resize(na);
        topo.cell_bubbles.resize(na);
        topo.cell_volume = Vector::Zero(na);
        topo.cell_height = Vector::Zero(na);
        for (int a = 0; a < na; ++a)
        {
            double vol = 0.0, h = 0.0;
            for (int c : members_[a])
            {
                vol += fine_.topo.cell_volume[c];
                h += fine_.topo.cell_volume[c] * fine_.topo.cell_height[c];
            }
            require(vol > 0.0, "coarsen: zero aggregate volume");
            topo.cell_volume[a] = vol;
            topo.cell_height[a] = h / vol;
        }
        topo.one_rep = P_p_.transpose() * fine_.topo.one_rep;

        for (std::size_t f = 0; f < coarse_faces_.size(); ++f)
        {
            LevelFace lf;
            lf.c0 = coarse_faces_[f].a;
            lf.c1 = coarse_faces_[f].b;
            const int n = static_cast<int>(face_bases_[f].cols());
            lf.dofs.resize(n);
            std::iota(lf.dofs.begin(), lf.dofs.end(), face_dof_start_[f]);
            const int fid = static_cast<int>(topo.faces.size());
            topo.faces.push_back(lf);
            topo.cell_faces[lf.c0].push_back(fid);
            if (lf.c1 >= 0) { topo.cell_faces[lf.c1].push_back(fid); }
        }
        for (int a = 0; a < na; ++a)
        {
            topo.cell_bubbles[a].resize(bubbles_[a].size());
            std::iota(topo.cell_bubbles[a].begin(), topo.cell_bubbles[a].end(), bubble_dof_start_[a]);
        }

        // Coarse divergence: variational triple product.
        coarse.D = SpMat(P_p_.transpose() * fine_.D * P_sigma_);
        prune_relative(coarse.D, 1e-14);

        // Local flux maps and static blocks.
        coarse.cell_fluxes.resize(na);
        for (int a = 0; a < na; ++a)
        {
            for (int fid : topo.cell_faces[a])
            {
                coarse.cell_fluxes[a].insert(coarse.cell_fluxes[a].end(), topo.faces[fid].dofs.begin(),
                                             topo.faces[fid].dofs.end());
            }
            coarse.cell_fluxes[a].insert(coarse.cell_fluxes[a].end(), topo.cell_bubbles[a].begin(),
                                         topo.cell_bubbles[a].end());
        }
        coarse.M_static = coarsen_local_mass(coarse.cell_fluxes);

        return coarse;
    }

    const SpMat& P_sigma() const { return P_sigma_; }
    const SpMat& Q_sigma() const { return Q_sigma_; }
    const SpMat& P_p() const { return P_p_; }
    const std::vector<Matrix>& pressure_bases() const { return P_agg_; }

private:
    void build_dof_sets()
    {
        const int na = agg_.aggregate_count;
        agg_pdofs_.assign(na, {});
        agg_interior_.assign(na, {});
        ext_pdofs_.assign(na, {});
        ext_edges_.assign(na, {});

        for (int a = 0; a < na; ++a)
        {
            for (int c : members_[a])
            {
                const auto ids = fine_.topo.cell_pdof_ids(c);
                agg_pdofs_[a].insert(agg_pdofs_[a].end(), ids.begin(), ids.end());
            }
        }

        // Interior dofs: faces internal to the aggregate plus bubbles.
        const auto& part = agg_.vertex_to_aggregate;
        for (const auto& face : fine_.topo.faces)
        {
            if (face.is_boundary()) { continue; }
            if (part[face.c0] == part[face.c1])
            {
                auto& interior = agg_interior_[part[face.c0]];
                interior.insert(interior.end(), face.dofs.begin(), face.dofs.end());
            }
        }
        for (int c = 0; c < fine_.topo.n_cells; ++c)
        {
            auto& interior = agg_interior_[part[c]];
            interior.insert(interior.end(), fine_.topo.cell_bubbles[c].begin(),
                            fine_.topo.cell_bubbles[c].end());
        }

        // Extended aggregates: members plus face-adjacent neighbor cells;
        // extended edge set: faces with both cells inside, plus bubbles.
        std::vector<std::set<int>> ext_cells(na);
        for (int a = 0; a < na; ++a) { ext_cells[a].insert(members_[a].begin(), members_[a].end()); }
        for (const auto& face : fine_.topo.faces)
        {
            if (face.is_boundary()) { continue; }
            const int a0 = part[face.c0];
            const int a1 = part[face.c1];
            if (a0 != a1)
            {
                ext_cells[a0].insert(face.c1);
                ext_cells[a1].insert(face.c0);
            }
        }
        std::vector<std::vector<int>> cell_ext_aggs(fine_.topo.n_cells);
        for (int a = 0; a < na; ++a)
        {
            for (int c : ext_cells[a])
            {
                cell_ext_aggs[c].push_back(a);
                const auto ids = fine_.topo.cell_pdof_ids(c);
                ext_pdofs_[a].insert(ext_pdofs_[a].end(), ids.begin(), ids.end());
                ext_edges_[a].insert(ext_edges_[a].end(), fine_.topo.cell_bubbles[c].begin(),
                                     fine_.topo.cell_bubbles[c].end());
            }
        }
        for (const auto& face : fine_.topo.faces)
        {
            if (face.is_boundary()) { continue; }
            for (int a : cell_ext_aggs[face.c0])
            {
                if (ext_cells[a].count(face.c1))
                {
                    ext_edges_[a].insert(ext_edges_[a].end(), face.dofs.begin(), face.dofs.end());
                }
            }
        }

        // Face dof sets.
        face_dof_sets_.resize(coarse_faces_.size());
        for (std::size_t f = 0; f < coarse_faces_.size(); ++f)
        {
            auto& dofs = face_dof_sets_[f];
            dofs.clear();
            for (int fid : coarse_faces_[f].fine_face_ids)
            {
                dofs.insert(dofs.end(), fine_.topo.faces[fid].dofs.begin(),
                            fine_.topo.faces[fid].dofs.end());
            }
        }
    }

    const Level& fine_;
    int m_A_;
    int m_f_;
    double svd_tol_;
    SpMat M_ref_;
    SpMat Dt_;

    Aggregation agg_;
    std::vector<std::vector<int>> members_;
    std::vector<CoarseFace> coarse_faces_;
    std::vector<std::vector<int>> face_dof_sets_;
    std::vector<std::vector<int>> agg_pdofs_;
    std::vector<std::vector<int>> agg_interior_;
    std::vector<std::vector<int>> ext_pdofs_;
    std::vector<std::vector<int>> ext_edges_;

    std::vector<Matrix> P_agg_;
    std::vector<detail::LocalSaddle> interior_solver_;
    std::vector<Matrix> face_bases_;
    std::vector<std::vector<Vector>> bubbles_;
    std::vector<int> face_dof_start_;
    std::vector<int> bubble_dof_start_;
    std::vector<int> coarse_pdof_offset_;
    int n_trace_dofs_ = 0;
    int n_coarse_flux_ = 0;

    SpMat P_sigma_, Q_sigma_, P_p_;
};

/**
   @brief Build the multilevel hierarchy. The setup-phase eigenproblems and
   local solves use the reference operator at kappa == 1, so one hierarchy
   serves every nonlinearity strength on the same mesh and permeability.
*/
inline Hierarchy build_hierarchy(const Mesh& mesh, const PermField& K0,
                                 const HierarchyParams& params)
{
    require(params.levels >= 1, "build_hierarchy: need at least one level");
    Hierarchy hier;
    hier.params = params;
    hier.levels.push_back(build_fine_level(mesh, K0));

    // Chains from the fine level used for the piecewise-constant projector.
    SpMat P_chain; // fine cells x current pressure dofs
    std::vector<int> fine_to_level(mesh.num_cells());
    std::iota(fine_to_level.begin(), fine_to_level.end(), 0);

    for (int t = 0; t + 1 < params.levels; ++t)
    {
        Level& fine = hier.levels.back();
        if (fine.topo.n_cells <= 1) { break; }
        const double factor = params.factor_for(t);
        const int target = std::max(1, static_cast<int>(std::ceil(fine.topo.n_cells / factor)));
        if (target >= fine.topo.n_cells)
        {
            warn("build_hierarchy: coarsening factor <= 1, stopping early");
            break;
        }

        SpectralCoarsener coarsener(fine, params.m_A, params.m_f, params.svd_tol);
        coarsener.aggregate(target, params.seed + static_cast<std::uint64_t>(t));
        Level coarse = coarsener.run();

        fine.P_sigma = coarsener.P_sigma();
        fine.Q_sigma = coarsener.Q_sigma();
        fine.P_p = coarsener.P_p();
        fine.cell_to_agg = coarsener.aggregation().vertex_to_aggregate;

        // Fine-cell chains for the new level.
        P_chain = (t == 0) ? fine.P_p : SpMat(P_chain * fine.P_p);
        for (auto& v : fine_to_level) { v = fine.cell_to_agg[v]; }

        // Piecewise-constant projector rows: volume-weighted averages of the
        // fine interpolation, one row per coarse cell over its own dofs.
        Vector fine_vol(mesh.num_cells());
        for (int c = 0; c < mesh.num_cells(); ++c) { fine_vol[c] = mesh.cells[c].volume; }
        Vector agg_vol = Vector::Zero(coarse.topo.n_cells);
        for (int c = 0; c < mesh.num_cells(); ++c) { agg_vol[fine_to_level[c]] += fine_vol[c]; }

        Vector weighted = Vector::Zero(coarse.topo.n_pressure_dofs);
        for (int j = 0; j < P_chain.outerSize(); ++j)
        {
            for (SpMat::InnerIterator it(P_chain, j); it; ++it)
            {
                weighted[j] += fine_vol[it.row()] * it.value();
            }
        }
        coarse.pwc.resize(coarse.topo.n_cells);
        for (int a = 0; a < coarse.topo.n_cells; ++a)
        {
            const int n = coarse.topo.cell_pdofs(a);
            coarse.pwc[a] = Eigen::RowVectorXd::Zero(n);
            for (int k = 0; k < n; ++k)
            {
                coarse.pwc[a][k] = weighted[coarse.topo.pdof_offset[a] + k] / agg_vol[a];
            }
        }

        hier.levels.push_back(std::move(coarse));
    }
    return hier;
}

/// Per-level statistics dump (text): cells, flux dofs, mean aggregate size,
/// operator nonzeros.
inline void write_hierarchy_stats(const Hierarchy& hier, std::ostream& out)
{
    out << "level cells flux_dofs pressure_dofs mean_agg_size D_nnz\n";
    for (int l = 0; l < hier.num_levels(); ++l)
    {
        const Level& lvl = hier.levels[l];
        double mean_agg = 1.0;
        if (l > 0)
        {
            mean_agg = static_cast<double>(hier.levels[l - 1].topo.n_cells) / lvl.topo.n_cells;
        }
        out << l << ' ' << lvl.topo.n_cells << ' ' << lvl.topo.n_flux_dofs << ' '
            << lvl.topo.n_pressure_dofs << ' ' << mean_agg << ' ' << lvl.D.nonZeros() << "\n";
    }
}

} // namespace nlmg
