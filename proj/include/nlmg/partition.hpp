#pragma once

#include "nlmg/common.hpp"
#include "nlmg/mesh.hpp"

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

namespace nlmg
{

/**
   @brief Undirected dual graph: one vertex per cell, one edge per internal
   interface (parallel edges between the same cell pair merged).
*/
struct DualGraph
{
    int vertex_count = 0;
    std::vector<std::pair<int, int>> edges; // (K, L) with K < L
    std::vector<std::vector<int>> adjacency;

    void build_adjacency()
    {
        adjacency.assign(vertex_count, {});
        for (const auto& [a, b] : edges)
        {
            adjacency[a].push_back(b);
            adjacency[b].push_back(a);
        }
    }
};

inline DualGraph build_dual_graph(const Mesh& mesh)
{
    require(mesh.num_cells() >= 1, "build_dual_graph: empty mesh");
    DualGraph g;
    g.vertex_count = mesh.num_cells();
    for (const auto& face : mesh.interfaces)
    {
        if (face.kind != FaceKind::internal) { continue; }
        const int a = std::min(face.cells[0], face.cells[1]);
        const int b = std::max(face.cells[0], face.cells[1]);
        g.edges.emplace_back(a, b);
    }
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
    g.build_adjacency();
    return g;
}

/// Dual graph of a coarse level given its cell count and face cell pairs.
inline DualGraph build_dual_graph(int n_cells, const std::vector<std::pair<int, int>>& face_pairs)
{
    require(n_cells >= 1, "build_dual_graph: empty level");
    DualGraph g;
    g.vertex_count = n_cells;
    for (auto [a, b] : face_pairs)
    {
        if (b < 0) { continue; }
        if (a > b) { std::swap(a, b); }
        g.edges.emplace_back(a, b);
    }
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
    g.build_adjacency();
    return g;
}

struct Aggregation
{
    std::vector<int> vertex_to_aggregate;
    int aggregate_count = 0;

    std::vector<std::vector<int>> members() const
    {
        std::vector<std::vector<int>> out(aggregate_count);
        for (std::size_t v = 0; v < vertex_to_aggregate.size(); ++v)
        {
            out[vertex_to_aggregate[v]].push_back(static_cast<int>(v));
        }
        return out;
    }
};

namespace detail
{

inline std::vector<int> connected_components(const DualGraph& g, const std::vector<int>& verts)
{
    // Component label per position in verts, using only edges inside verts.
    std::vector<int> pos(g.vertex_count, -1);
    for (std::size_t i = 0; i < verts.size(); ++i) { pos[verts[i]] = static_cast<int>(i); }
    std::vector<int> comp(verts.size(), -1);
    int n_comp = 0;
    for (std::size_t i = 0; i < verts.size(); ++i)
    {
        if (comp[i] >= 0) { continue; }
        std::deque<int> queue = {static_cast<int>(i)};
        comp[i] = n_comp;
        while (!queue.empty())
        {
            const int u = queue.front();
            queue.pop_front();
            for (int w : g.adjacency[verts[u]])
            {
                const int j = pos[w];
                if (j >= 0 && comp[j] < 0)
                {
                    comp[j] = n_comp;
                    queue.push_back(j);
                }
            }
        }
        ++n_comp;
    }
    for (int v : verts) { pos[v] = -1; }
    return comp;
}

/// True if removing vertex v keeps its aggregate connected. Runs a BFS
/// confined to the aggregate; mark/epoch avoid per-call allocation.
inline bool removal_keeps_connected(const DualGraph& g, const std::vector<int>& part,
                                    int agg_size, int v, std::vector<int>& mark, int epoch)
{
    const int agg = part[v];
    const int rest = agg_size - 1;
    if (rest <= 1) { return true; }
    int start = -1;
    for (int w : g.adjacency[v])
    {
        if (part[w] == agg) { start = w; break; }
    }
    if (start < 0) { return true; } // v was isolated in its aggregate already
    std::deque<int> queue = {start};
    mark[start] = epoch;
    int reached = 1;
    while (!queue.empty())
    {
        const int u = queue.front();
        queue.pop_front();
        for (int w : g.adjacency[u])
        {
            if (mark[w] != epoch && w != v && part[w] == agg)
            {
                mark[w] = epoch;
                ++reached;
                queue.push_back(w);
            }
        }
    }
    return reached == rest;
}

} // namespace detail

/**
   @brief Partition a graph into connected, roughly balanced aggregates.

   Seeded greedy BFS growth from spread-out seeds, followed by
   Kernighan-Lin-style boundary smoothing and a connectivity repair pass.
   Deterministic for a fixed seed. A disconnected input is partitioned per
   component (with a warning).
*/
inline Aggregation partition(const DualGraph& graph, int target_parts, std::uint64_t seed = 0)
{
    const int n = graph.vertex_count;
    require(target_parts >= 1 && target_parts <= n, "partition: invalid target part count");

    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    const std::vector<int> comp = detail::connected_components(graph, all);
    const int n_comp = 1 + *std::max_element(comp.begin(), comp.end());
    if (n_comp > 1) { warn("partition: input graph is disconnected; partitioning per component"); }

    std::mt19937_64 rng(seed);
    std::vector<int> part(n, -1);
    int next_agg = 0;

    for (int c = 0; c < n_comp; ++c)
    {
        std::vector<int> verts;
        for (int v = 0; v < n; ++v)
        {
            if (comp[v] == c) { verts.push_back(v); }
        }
        const int nc = static_cast<int>(verts.size());
        int parts_here = std::max(1, static_cast<int>(std::llround(static_cast<double>(target_parts) * nc / n)));
        parts_here = std::min(parts_here, nc);

        // Farthest-point seeding: first seed random, then repeatedly take the
        // vertex at maximum BFS distance from all current seeds.
        std::vector<int> seeds;
        seeds.push_back(verts[rng() % nc]);
        std::vector<int> dist(n, -1);
        while (static_cast<int>(seeds.size()) < parts_here)
        {
            for (int v : verts) { dist[v] = -1; }
            std::deque<int> queue;
            for (int s : seeds)
            {
                dist[s] = 0;
                queue.push_back(s);
            }
            while (!queue.empty())
            {
                const int u = queue.front();
                queue.pop_front();
                for (int w : graph.adjacency[u])
                {
                    if (comp[w] == c && dist[w] < 0)
                    {
                        dist[w] = dist[u] + 1;
                        queue.push_back(w);
                    }
                }
            }
            int best = -1;
            for (int v : verts)
            {
                if (best < 0 || dist[v] > dist[best]) { best = v; }
            }
            seeds.push_back(best);
        }

        // Grow all aggregates together, always expanding the smallest one.
        std::vector<std::deque<int>> frontier(parts_here);
        std::vector<int> size(parts_here, 0);
        for (int k = 0; k < parts_here; ++k)
        {
            part[seeds[k]] = next_agg + k;
            frontier[k].push_back(seeds[k]);
            size[k] = 1;
        }
        int assigned = parts_here;
        while (assigned < nc)
        {
            int k_min = -1;
            for (int k = 0; k < parts_here; ++k)
            {
                if (!frontier[k].empty() && (k_min < 0 || size[k] < size[k_min])) { k_min = k; }
            }
            if (k_min < 0)
            {
                // Frontiers exhausted (pockets remain): attach any unassigned
                // vertex adjacent to an aggregate.
                for (int v : verts)
                {
                    if (part[v] >= 0) { continue; }
                    for (int w : graph.adjacency[v])
                    {
                        if (part[w] >= 0)
                        {
                            part[v] = part[w];
                            ++size[part[w] - next_agg];
                            frontier[part[w] - next_agg].push_back(v);
                            ++assigned;
                            break;
                        }
                    }
                }
                continue;
            }
            bool grew = false;
            while (!frontier[k_min].empty() && !grew)
            {
                const int u = frontier[k_min].front();
                frontier[k_min].pop_front();
                for (int w : graph.adjacency[u])
                {
                    if (comp[w] == c && part[w] < 0)
                    {
                        part[w] = next_agg + k_min;
                        frontier[k_min].push_back(w);
                        if (!grew) { frontier[k_min].push_back(u); } // u may have more unassigned neighbors
                        ++size[k_min];
                        ++assigned;
                        grew = true;
                        break;
                    }
                }
            }
        }
        next_agg += parts_here;
    }

    Aggregation agg;
    agg.vertex_to_aggregate = part;
    agg.aggregate_count = next_agg;

    // Boundary smoothing: move a vertex to a neighboring aggregate when that
    // strictly improves size balance, provided the donor stays connected.
    std::vector<int> size(agg.aggregate_count, 0);
    for (int v = 0; v < n; ++v) { ++size[part[v]]; }
    std::vector<int> mark(n, -1);
    int epoch = 0;
    for (int pass = 0; pass < 3; ++pass)
    {
        bool moved = false;
        for (int v = 0; v < n; ++v)
        {
            const int from = part[v];
            if (size[from] <= 1) { continue; }
            int best_to = -1;
            for (int w : graph.adjacency[v])
            {
                const int to = part[w];
                if (to != from && size[to] + 1 < size[from] && (best_to < 0 || size[to] < size[best_to]))
                {
                    best_to = to;
                }
            }
            if (best_to >= 0 &&
                detail::removal_keeps_connected(graph, part, size[from], v, mark, ++epoch))
            {
                part[v] = best_to;
                --size[from];
                ++size[best_to];
                moved = true;
            }
        }
        if (!moved) { break; }
    }

    // Connectivity repair: keep each aggregate's largest component, move the
    // rest to adjacent aggregates.
    auto repair = [&]()
    {
        bool changed = false;
        const auto groups = agg.members();
        for (int a = 0; a < agg.aggregate_count; ++a)
        {
            if (groups[a].empty()) { continue; }
            const auto comp_of = detail::connected_components(graph, groups[a]);
            const int n_parts = 1 + *std::max_element(comp_of.begin(), comp_of.end());
            if (n_parts == 1) { continue; }
            std::vector<int> comp_size(n_parts, 0);
            for (int cix : comp_of) { ++comp_size[cix]; }
            const int keep = static_cast<int>(std::max_element(comp_size.begin(), comp_size.end()) -
                                              comp_size.begin());
            for (std::size_t i = 0; i < groups[a].size(); ++i)
            {
                if (comp_of[i] == keep) { continue; }
                const int v = groups[a][i];
                for (int w : graph.adjacency[v])
                {
                    if (part[w] != a)
                    {
                        part[v] = part[w];
                        changed = true;
                        break;
                    }
                }
            }
        }
        return changed;
    };
    for (int pass = 0; pass < 8 && repair(); ++pass) {}

    // Renumber to drop any aggregates emptied by smoothing or repair.
    std::vector<int> remap(agg.aggregate_count, -1);
    int kept = 0;
    for (int v = 0; v < n; ++v)
    {
        if (remap[part[v]] < 0) { remap[part[v]] = kept++; }
    }
    for (int v = 0; v < n; ++v) { part[v] = remap[part[v]]; }
    agg.vertex_to_aggregate = part;
    agg.aggregate_count = kept;
    return agg;
}

/**
   @brief One coarse face: the set of fine faces joining an aggregate pair
   (or joining one aggregate to the Dirichlet boundary), connected in the
   shared-cell sense.
*/
struct CoarseFace
{
    int a = -1;
    int b = -1; // -1 for a boundary coarse face
    std::vector<int> fine_face_ids;

    bool is_boundary() const { return b < 0; }
};

/// Fine face description used by fix_coarse_faces; c1 < 0 marks a
/// Dirichlet boundary face. Neumann faces are not passed in at all.
struct FaceAdjacency
{
    std::vector<std::pair<int, int>> face_cells; // (c0, c1)
    std::vector<std::vector<int>> cell_faces;    // face ids per cell
};

inline FaceAdjacency face_adjacency_from_mesh(const Mesh& mesh)
{
    FaceAdjacency fa;
    fa.face_cells.resize(mesh.num_interfaces(), {-1, -1});
    fa.cell_faces.resize(mesh.num_cells());
    for (int e = 0; e < mesh.num_interfaces(); ++e)
    {
        const auto& face = mesh.interfaces[e];
        if (face.kind == FaceKind::neumann) { continue; }
        fa.face_cells[e] = {face.cells[0], face.cells[1]};
        fa.cell_faces[face.cells[0]].push_back(e);
        if (face.cells[1] >= 0) { fa.cell_faces[face.cells[1]].push_back(e); }
    }
    return fa;
}

/**
   @brief Group fine faces into coarse faces and split any group that is
   disconnected under shared-cell adjacency, so every coarse face is a
   connected set of fine faces.
*/
inline std::vector<CoarseFace> fix_coarse_faces(const FaceAdjacency& fa, const Aggregation& agg)
{
    const auto& part = agg.vertex_to_aggregate;

    // Group candidate faces by (aggregate pair) or (aggregate, boundary).
    std::map<std::pair<int, int>, std::vector<int>> groups;
    for (std::size_t e = 0; e < fa.face_cells.size(); ++e)
    {
        const auto [c0, c1] = fa.face_cells[e];
        if (c0 < 0) { continue; } // not a participating face
        if (c1 < 0)
        {
            groups[{part[c0], -1}].push_back(static_cast<int>(e));
            continue;
        }
        int a = part[c0];
        int b = part[c1];
        if (a == b) { continue; } // interior to an aggregate
        if (a > b) { std::swap(a, b); }
        groups[{a, b}].push_back(static_cast<int>(e));
    }

    std::vector<CoarseFace> out;
    std::vector<int> face_pos(fa.face_cells.size(), -1);
    for (auto& [key, faces] : groups)
    {
        // Connected components of the group's faces; two faces are adjacent
        // iff they share a cell.
        for (std::size_t i = 0; i < faces.size(); ++i) { face_pos[faces[i]] = static_cast<int>(i); }
        std::vector<int> comp(faces.size(), -1);
        int n_comp = 0;
        for (std::size_t i = 0; i < faces.size(); ++i)
        {
            if (comp[i] >= 0) { continue; }
            std::deque<int> queue = {static_cast<int>(i)};
            comp[i] = n_comp;
            while (!queue.empty())
            {
                const int fi = queue.front();
                queue.pop_front();
                const auto [c0, c1] = fa.face_cells[faces[fi]];
                for (int c : {c0, c1})
                {
                    if (c < 0) { continue; }
                    for (int other : fa.cell_faces[c])
                    {
                        const int j = face_pos[other];
                        if (j >= 0 && comp[j] < 0)
                        {
                            comp[j] = n_comp;
                            queue.push_back(j);
                        }
                    }
                }
            }
            ++n_comp;
        }
        for (int fid : faces) { face_pos[fid] = -1; }

        for (int cix = 0; cix < n_comp; ++cix)
        {
            CoarseFace cf;
            cf.a = key.first;
            cf.b = key.second;
            for (std::size_t i = 0; i < faces.size(); ++i)
            {
                if (comp[i] == cix) { cf.fine_face_ids.push_back(faces[i]); }
            }
            out.push_back(std::move(cf));
        }
    }
    return out;
}

/// Dump `vertex_id aggregate_id` lines, one per vertex.
inline void write_aggregation(const Aggregation& agg, const std::string& path)
{
    std::ofstream out(path);
    require(out.good(), "write_aggregation: cannot open '" + path + "'");
    for (std::size_t v = 0; v < agg.vertex_to_aggregate.size(); ++v)
    {
        out << v << ' ' << agg.vertex_to_aggregate[v] << "\n";
    }
}

} // namespace nlmg
