#pragma once

#include "nlmg/fas.hpp"
#include "nlmg/field_io.hpp"
#include "nlmg/hierarchy.hpp"
#include "nlmg/tpfa.hpp"

namespace nlmg
{

/**
   @brief A fully specified benchmark problem: mesh with classified
   boundary, permeability, kappa law, source, and the solver defaults it is
   normally run with.
*/
struct Problem
{
    std::string name;
    Mesh mesh;
    PermField K0;
    KappaLaw law;
    Vector source; // mean source value per cell
    double alpha = 0.0;
    std::optional<double> pressure_cap;
    int default_levels = 3;
    std::vector<double> default_factors = {16.0, 8.0};
    int default_m_A = 1;
    int default_m_f = 1;
    int backtrack_n_max = 4;
};

/// Fine right-hand side b = -[g; f]; independent of the pressure iterate.
inline Vector fine_rhs(const Problem& prob)
{
    const Vector p0 = Vector::Zero(prob.mesh.num_cells());
    const SaddleSystem sys = assemble_fine_system(prob.mesh, prob.K0, KappaLaw::constant(), p0,
                                                  prob.source);
    Vector b(sys.g.size() + sys.f.size());
    b.head(sys.g.size()) = -sys.g;
    b.tail(sys.f.size()) = -sys.f;
    return b;
}

inline NonlinearConfig default_config(const Problem& prob)
{
    NonlinearConfig cfg;
    cfg.bt.pressure_cap = prob.pressure_cap;
    cfg.bt.n_max = prob.backtrack_n_max;
    return cfg;
}

inline HierarchyParams default_hierarchy_params(const Problem& prob, std::uint64_t seed = 0)
{
    HierarchyParams hp;
    hp.levels = prob.default_levels;
    hp.factors = prob.default_factors;
    hp.m_A = prob.default_m_A;
    hp.m_f = prob.default_m_f;
    hp.seed = seed;
    return hp;
}

/// Two unit cells in a row, Dirichlet 1 and 0 at the ends: the analytic
/// regression problem with p = (3/4, 1/4).
inline Problem make_two_cell()
{
    Problem prob;
    prob.name = "two_cell";
    prob.mesh = build_cartesian_mesh_2d(2, 1, 1.0, 1.0);
    classify_boundary(prob.mesh, {plane_rule(0, 0.0, FaceKind::dirichlet, 1.0),
                                  plane_rule(0, 2.0, FaceKind::dirichlet, 0.0)});
    prob.K0 = PermField::uniform(prob.mesh.num_cells(), 1.0);
    prob.law = KappaLaw::constant();
    prob.source = Vector::Zero(prob.mesh.num_cells());
    prob.default_levels = 1;
    return prob;
}

namespace detail
{

/// Source profile of the exponential-law benchmarks: A max{e^{(y-y0)/w}, 1}.
inline Vector exp_source(const Mesh& mesh, double amplitude, double y0, double w)
{
    Vector f(mesh.num_cells());
    for (int c = 0; c < mesh.num_cells(); ++c)
    {
        const double y = mesh.cells[c].barycenter[1];
        f[c] = amplitude * std::max(std::exp((y - y0) / w), 1.0);
    }
    return f;
}

} // namespace detail

/**
   @brief Mildly heterogeneous 2D benchmark with the exponential law:
   lognormal permeability, pressure fixed at y = 0, no-flow elsewhere,
   nonuniform source. The pressure cap log(1.5)/alpha mirrors the special
   backtracking used for this problem family.
*/
inline Problem make_synthetic2d(double alpha, int nx = 64, int ny = 64, std::uint64_t seed = 1)
{
    Problem prob;
    prob.name = "synthetic2d";
    const double h = 8.0;
    prob.mesh = build_cartesian_mesh_2d(nx, ny, h, h);
    classify_boundary(prob.mesh, {plane_rule(1, 0.0, FaceKind::dirichlet, 0.0)});
    prob.K0 = generate_synthetic_field(nx, ny, 1, FieldStyle::lognormal, 1.0, seed);
    prob.law = alpha > 0.0 ? KappaLaw::exponential(alpha) : KappaLaw::constant();
    prob.alpha = alpha;
    prob.source = detail::exp_source(prob.mesh, 0.005, 432.0, 480.0);
    if (alpha > 0.0) { prob.pressure_cap = std::log(1.5) / alpha; }
    prob.default_levels = 3;
    prob.default_factors = {16.0, 8.0};
    prob.default_m_A = 4;
    return prob;
}

/// Channelized anisotropic 3D benchmark with the exponential law and the
/// wider pressure cap log(5)/alpha.
inline Problem make_synthetic3d(double alpha, int nx = 16, int ny = 16, int nz = 8,
                                std::uint64_t seed = 1)
{
    Problem prob;
    prob.name = "synthetic3d";
    prob.mesh = build_cartesian_mesh(nx, ny, nz, 8.0, 8.0, 4.0);
    classify_boundary(prob.mesh, {plane_rule(1, 0.0, FaceKind::dirichlet, 0.0)});
    prob.K0 = generate_synthetic_field(nx, ny, nz, FieldStyle::channel, 1.0, seed);
    prob.K0.kz *= 0.01; // paper-style vertical anisotropy
    prob.law = alpha > 0.0 ? KappaLaw::exponential(alpha) : KappaLaw::constant();
    prob.alpha = alpha;
    prob.source = detail::exp_source(prob.mesh, 0.005, 0.9 * ny * 8.0, ny * 8.0);
    if (alpha > 0.0) { prob.pressure_cap = std::log(5.0) / alpha; }
    prob.default_levels = 3;
    prob.default_factors = {32.0, 8.0};
    return prob;
}

/**
   @brief Static Richards' benchmark on the 4000 m x 1000 m cross-section:
   fixed total head on the two vertical sides, no flow across top and
   bottom, zero source. refine doubles the resolution per step.
*/
inline Problem make_richards(bool sand, int refine = 0)
{
    Problem prob;
    prob.name = sand ? "richards_sand" : "richards_loam";
    const int nx = 160 << refine;
    const int ny = 40 << refine;
    const double h = 25.0 / (1 << refine);
    prob.mesh = build_cartesian_mesh_2d(nx, ny, h, h);

    const double head_left = 1000.0;
    const double head_right = 100.0;
    classify_boundary(prob.mesh, {plane_rule(0, 0.0, FaceKind::dirichlet, head_left),
                                  plane_rule(0, 4000.0, FaceKind::dirichlet, head_right)});

    if (sand) { prob.law = KappaLaw::richards(1.175e6, 4.74, 8.160e2); }
    else { prob.law = KappaLaw::richards(1.246e2, 1.77, 1.067); }
    prob.alpha = prob.law.alpha;
    prob.K0 = PermField::uniform(prob.mesh.num_cells(), prob.law.k0);
    prob.source = Vector::Zero(prob.mesh.num_cells());
    prob.default_levels = 3;
    prob.default_factors = {36.0};
    prob.default_m_A = 13;
    prob.backtrack_n_max = sand ? 10 : 4;
    return prob;
}

/// User-supplied permeability raster with the synthetic2d boundary/source
/// setup, rescaled so the horizontal maximum is 1 (vertical 1e-2).
inline Problem make_raster(const std::string& path, int nx, int ny, int nz, double alpha,
                           double hx = 8.0, double hy = 8.0, double hz = 4.0)
{
    Problem prob;
    prob.name = "raster";
    prob.K0 = load_perm_raster(path, nx, ny, nz, /*rescale=*/true);
    if (nz == 1) { prob.mesh = build_cartesian_mesh_2d(nx, ny, hx, hy); }
    else { prob.mesh = build_cartesian_mesh(nx, ny, nz, hx, hy, hz); }
    classify_boundary(prob.mesh, {plane_rule(1, 0.0, FaceKind::dirichlet, 0.0)});
    prob.law = alpha > 0.0 ? KappaLaw::exponential(alpha) : KappaLaw::constant();
    prob.alpha = alpha;
    prob.source = detail::exp_source(prob.mesh, 0.005, 0.9 * ny * hy, ny * hy);
    if (alpha > 0.0) { prob.pressure_cap = std::log(1.5) / alpha; }
    return prob;
}

/// Catalog dispatch by name with catalog defaults.
inline Problem make_problem(const std::string& name, double alpha = 0.4, std::uint64_t seed = 1)
{
    if (name == "two_cell") { return make_two_cell(); }
    if (name == "synthetic2d") { return make_synthetic2d(alpha, 64, 64, seed); }
    if (name == "synthetic3d") { return make_synthetic3d(alpha, 16, 16, 8, seed); }
    if (name == "richards_loam") { return make_richards(false); }
    if (name == "richards_sand") { return make_richards(true); }
    fail("unknown problem '" + name + "' (raster problems need --config)");
}

} // namespace nlmg
