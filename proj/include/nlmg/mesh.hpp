#pragma once

#include "nlmg/common.hpp"

#include <array>
#include <functional>
#include <optional>

namespace nlmg
{

enum class FaceKind
{
    internal,
    dirichlet,
    neumann
};

/**
   @brief Oriented mesh interface (edge in 2D, face in 3D).

   The unit normal always equals the outward normal of the first adjacent
   cell, which fixes the orientation of the flux unknown living on the
   interface.
*/
struct Interface
{
    FaceKind kind = FaceKind::neumann;
    std::array<int, 2> cells = {-1, -1}; // cells[1] == -1 on the boundary
    double measure = 0.0;
    Vec3 collocation_point = Vec3::Zero();
    Vec3 unit_normal = Vec3::Zero();
    double bc_value = 0.0; // g_D (dirichlet) or g_N (neumann)

    bool is_boundary() const { return cells[1] < 0; }
};

struct Cell
{
    Vec3 barycenter = Vec3::Zero();
    double volume = 0.0;
    std::vector<int> interface_ids;
};

/**
   @brief Fine computational mesh: cells, oriented interfaces, geometry and
   boundary classification. Immutable after construction and classification.
*/
struct Mesh
{
    int dim = 3;
    std::vector<Cell> cells;
    std::vector<Interface> interfaces;

    int num_cells() const { return static_cast<int>(cells.size()); }
    int num_interfaces() const { return static_cast<int>(interfaces.size()); }

    double total_volume() const
    {
        double v = 0.0;
        for (const auto& c : cells) { v += c.volume; }
        return v;
    }

    /// Height coordinate used by gravity terms: y in 2D, z in 3D.
    double cell_height(int cell) const
    {
        return cells[cell].barycenter[dim == 2 ? 1 : 2];
    }
};

namespace detail
{

inline void push_boundary_face(Mesh& mesh, int cell, const Vec3& center, const Vec3& normal,
                               double measure)
{
    Interface face;
    face.kind = FaceKind::neumann;
    face.cells = {cell, -1};
    face.measure = measure;
    face.collocation_point = center;
    face.unit_normal = normal;
    const int id = mesh.num_interfaces();
    mesh.interfaces.push_back(face);
    mesh.cells[cell].interface_ids.push_back(id);
}

inline void push_internal_face(Mesh& mesh, int c0, int c1, const Vec3& center,
                               const Vec3& normal, double measure)
{
    Interface face;
    face.kind = FaceKind::internal;
    face.cells = {c0, c1};
    face.measure = measure;
    face.collocation_point = center;
    face.unit_normal = normal; // outward for c0
    const int id = mesh.num_interfaces();
    mesh.interfaces.push_back(face);
    mesh.cells[c0].interface_ids.push_back(id);
    mesh.cells[c1].interface_ids.push_back(id);
}

} // namespace detail

/**
   @brief Build an axis-aligned Cartesian mesh with optional inactive cells.

   Inactive cells (mask entry false) generate no unknowns and no interfaces;
   interfaces between an active and an inactive cell become boundary
   interfaces. Boundary interfaces default to zero-flux Neumann until
   classify_boundary is applied.
*/
inline Mesh build_cartesian_mesh(int nx, int ny, int nz, double hx, double hy, double hz,
                                 const std::vector<bool>& active_mask = {})
{
    require(nx >= 1 && ny >= 1 && nz >= 1, "build_cartesian_mesh: counts must be >= 1");
    require(hx > 0 && hy > 0 && hz > 0, "build_cartesian_mesh: spacings must be > 0");
    const std::size_t n_lattice = static_cast<std::size_t>(nx) * ny * nz;
    require(active_mask.empty() || active_mask.size() == n_lattice,
            "build_cartesian_mesh: active mask size mismatch");

    auto active = [&](int i, int j, int k) -> bool
    {
        if (i < 0 || j < 0 || k < 0 || i >= nx || j >= ny || k >= nz) { return false; }
        if (active_mask.empty()) { return true; }
        return active_mask[static_cast<std::size_t>(k) * nx * ny + static_cast<std::size_t>(j) * nx + i];
    };

    Mesh mesh;
    mesh.dim = 3;

    std::vector<int> cell_id(n_lattice, -1);
    for (int k = 0; k < nz; ++k)
    {
        for (int j = 0; j < ny; ++j)
        {
            for (int i = 0; i < nx; ++i)
            {
                if (!active(i, j, k)) { continue; }
                cell_id[static_cast<std::size_t>(k) * nx * ny + static_cast<std::size_t>(j) * nx + i] =
                    mesh.num_cells();
                Cell c;
                c.barycenter = Vec3((i + 0.5) * hx, (j + 0.5) * hy, (k + 0.5) * hz);
                c.volume = hx * hy * hz;
                mesh.cells.push_back(c);
            }
        }
    }
    require(!mesh.cells.empty(), "build_cartesian_mesh: fully inactive mask");

    const double ax = hy * hz, ay = hx * hz, az = hx * hy;
    auto id_at = [&](int i, int j, int k)
    { return cell_id[static_cast<std::size_t>(k) * nx * ny + static_cast<std::size_t>(j) * nx + i]; };

    for (int k = 0; k < nz; ++k)
    {
        for (int j = 0; j < ny; ++j)
        {
            for (int i = 0; i < nx; ++i)
            {
                if (!active(i, j, k)) { continue; }
                const int c = id_at(i, j, k);
                const Vec3 xc = mesh.cells[c].barycenter;

                // -x / -y / -z sides: boundary face if the neighbor is inactive.
                if (!active(i - 1, j, k))
                { detail::push_boundary_face(mesh, c, xc - Vec3(0.5 * hx, 0, 0), Vec3(-1, 0, 0), ax); }
                if (!active(i, j - 1, k))
                { detail::push_boundary_face(mesh, c, xc - Vec3(0, 0.5 * hy, 0), Vec3(0, -1, 0), ay); }
                if (!active(i, j, k - 1))
                { detail::push_boundary_face(mesh, c, xc - Vec3(0, 0, 0.5 * hz), Vec3(0, 0, -1), az); }

                // +x / +y / +z sides: internal face if the neighbor is active.
                if (active(i + 1, j, k))
                { detail::push_internal_face(mesh, c, id_at(i + 1, j, k), xc + Vec3(0.5 * hx, 0, 0), Vec3(1, 0, 0), ax); }
                else
                { detail::push_boundary_face(mesh, c, xc + Vec3(0.5 * hx, 0, 0), Vec3(1, 0, 0), ax); }
                if (active(i, j + 1, k))
                { detail::push_internal_face(mesh, c, id_at(i, j + 1, k), xc + Vec3(0, 0.5 * hy, 0), Vec3(0, 1, 0), ay); }
                else
                { detail::push_boundary_face(mesh, c, xc + Vec3(0, 0.5 * hy, 0), Vec3(0, 1, 0), ay); }
                if (active(i, j, k + 1))
                { detail::push_internal_face(mesh, c, id_at(i, j, k + 1), xc + Vec3(0, 0, 0.5 * hz), Vec3(0, 0, 1), az); }
                else
                { detail::push_boundary_face(mesh, c, xc + Vec3(0, 0, 0.5 * hz), Vec3(0, 0, 1), az); }
            }
        }
    }
    return mesh;
}

/// 2D Cartesian builder: cells are rectangles, interfaces are edges.
inline Mesh build_cartesian_mesh_2d(int nx, int ny, double hx, double hy,
                                    const std::vector<bool>& active_mask = {})
{
    require(nx >= 1 && ny >= 1, "build_cartesian_mesh_2d: counts must be >= 1");
    require(hx > 0 && hy > 0, "build_cartesian_mesh_2d: spacings must be > 0");
    const std::size_t n_lattice = static_cast<std::size_t>(nx) * ny;
    require(active_mask.empty() || active_mask.size() == n_lattice,
            "build_cartesian_mesh_2d: active mask size mismatch");

    auto active = [&](int i, int j) -> bool
    {
        if (i < 0 || j < 0 || i >= nx || j >= ny) { return false; }
        if (active_mask.empty()) { return true; }
        return active_mask[static_cast<std::size_t>(j) * nx + i];
    };

    Mesh mesh;
    mesh.dim = 2;

    std::vector<int> cell_id(n_lattice, -1);
    for (int j = 0; j < ny; ++j)
    {
        for (int i = 0; i < nx; ++i)
        {
            if (!active(i, j)) { continue; }
            cell_id[static_cast<std::size_t>(j) * nx + i] = mesh.num_cells();
            Cell c;
            c.barycenter = Vec3((i + 0.5) * hx, (j + 0.5) * hy, 0.0);
            c.volume = hx * hy;
            mesh.cells.push_back(c);
        }
    }
    require(!mesh.cells.empty(), "build_cartesian_mesh_2d: fully inactive mask");

    auto id_at = [&](int i, int j) { return cell_id[static_cast<std::size_t>(j) * nx + i]; };

    for (int j = 0; j < ny; ++j)
    {
        for (int i = 0; i < nx; ++i)
        {
            if (!active(i, j)) { continue; }
            const int c = id_at(i, j);
            const Vec3 xc = mesh.cells[c].barycenter;

            if (!active(i - 1, j))
            { detail::push_boundary_face(mesh, c, xc - Vec3(0.5 * hx, 0, 0), Vec3(-1, 0, 0), hy); }
            if (!active(i, j - 1))
            { detail::push_boundary_face(mesh, c, xc - Vec3(0, 0.5 * hy, 0), Vec3(0, -1, 0), hx); }

            if (active(i + 1, j))
            { detail::push_internal_face(mesh, c, id_at(i + 1, j), xc + Vec3(0.5 * hx, 0, 0), Vec3(1, 0, 0), hy); }
            else
            { detail::push_boundary_face(mesh, c, xc + Vec3(0.5 * hx, 0, 0), Vec3(1, 0, 0), hy); }
            if (active(i, j + 1))
            { detail::push_internal_face(mesh, c, id_at(i, j + 1), xc + Vec3(0, 0.5 * hy, 0), Vec3(0, 1, 0), hx); }
            else
            { detail::push_boundary_face(mesh, c, xc + Vec3(0, 0.5 * hy, 0), Vec3(0, 1, 0), hx); }
        }
    }
    return mesh;
}

/**
   @brief One boundary rule: faces whose collocation point satisfies the
   predicate get the given kind and value. Rules are tested in order; the
   first match wins. Unmatched boundary faces stay zero-flux Neumann.
*/
struct BoundaryRule
{
    std::function<bool(const Vec3&)> where;
    FaceKind kind = FaceKind::dirichlet;
    double value = 0.0;
};

using BoundarySpec = std::vector<BoundaryRule>;

/// Axis-aligned plane test, the common case for Cartesian benchmarks.
inline BoundaryRule plane_rule(int axis, double coordinate, FaceKind kind, double value,
                               double tol = 1e-9)
{
    BoundaryRule rule;
    rule.where = [axis, coordinate, tol](const Vec3& x) { return std::abs(x[axis] - coordinate) <= tol; };
    rule.kind = kind;
    rule.value = value;
    return rule;
}

inline void classify_boundary(Mesh& mesh, const BoundarySpec& spec)
{
    for (auto& face : mesh.interfaces)
    {
        if (!face.is_boundary()) { continue; }
        face.kind = FaceKind::neumann;
        face.bc_value = 0.0;
        for (const auto& rule : spec)
        {
            if (rule.where(face.collocation_point))
            {
                require(rule.kind != FaceKind::internal,
                        "classify_boundary: rules may not assign the internal kind");
                face.kind = rule.kind;
                face.bc_value = rule.value;
                break;
            }
        }
    }
}

/// Explicit-id variant; rejects attempts to classify an internal interface.
inline void classify_boundary(Mesh& mesh, const std::vector<int>& interface_ids, FaceKind kind,
                              double value)
{
    for (int id : interface_ids)
    {
        require(id >= 0 && id < mesh.num_interfaces(), "classify_boundary: interface id out of range");
        require(mesh.interfaces[id].is_boundary(),
                "classify_boundary: cannot assign boundary data to an internal interface");
        mesh.interfaces[id].kind = kind;
        mesh.interfaces[id].bc_value = value;
    }
}

} // namespace nlmg
