#pragma once

#include "nlmg/common.hpp"
#include "nlmg/kappa.hpp"
#include "nlmg/mesh.hpp"

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>

namespace nlmg
{

/**
   @brief Per-cell diagonal permeability tensor, stored as (kx, ky, kz)
   triples in consistent units. All components must stay positive.
*/
struct PermField
{
    Vector kx, ky, kz;

    int size() const { return static_cast<int>(kx.size()); }

    static PermField uniform(int n, double k)
    {
        PermField f;
        f.kx = Vector::Constant(n, k);
        f.ky = Vector::Constant(n, k);
        f.kz = Vector::Constant(n, k);
        return f;
    }
};

/**
   @brief Read a raster of 3*nx*ny*nz positive values: the kx block, then ky,
   then kz, each row-major with x fastest.

   With rescale set, horizontal components are divided by their global
   maximum and vertical components by 100x their global maximum, so the
   rescaled maxima are 1 and 1e-2 respectively.
*/
inline PermField load_perm_raster(const std::string& path, int nx, int ny, int nz,
                                  bool rescale = false)
{
    std::ifstream in(path);
    require(in.good(), "load_perm_raster: cannot open '" + path + "'");

    const std::size_t n = static_cast<std::size_t>(nx) * ny * nz;
    PermField field;
    field.kx.resize(n);
    field.ky.resize(n);
    field.kz.resize(n);

    auto read_block = [&](Vector& block, const char* name)
    {
        for (std::size_t i = 0; i < n; ++i)
        {
            double v = 0.0;
            require(static_cast<bool>(in >> v),
                    "load_perm_raster: '" + path + "' has too few " + name + " values");
            require(v > 0.0, "load_perm_raster: non-positive permeability in '" + path + "'");
            block[static_cast<int>(i)] = v;
        }
    };
    read_block(field.kx, "kx");
    read_block(field.ky, "ky");
    read_block(field.kz, "kz");

    double trailing = 0.0;
    require(!(in >> trailing), "load_perm_raster: '" + path + "' has trailing values");

    if (rescale)
    {
        const double mh = std::max(field.kx.maxCoeff(), field.ky.maxCoeff());
        const double mv = field.kz.maxCoeff();
        field.kx /= mh;
        field.ky /= mh;
        field.kz /= 100.0 * mv;
    }
    return field;
}

/// Write a raster in the layout load_perm_raster reads, at 17 significant digits.
inline void save_perm_raster(const PermField& field, const std::string& path)
{
    std::ofstream out(path);
    require(out.good(), "save_perm_raster: cannot open '" + path + "'");
    out.precision(17);
    auto dump = [&](const Vector& block)
    {
        for (int i = 0; i < block.size(); ++i) { out << block[i] << "\n"; }
    };
    dump(field.kx);
    dump(field.ky);
    dump(field.kz);
}

enum class FieldStyle
{
    lognormal,
    layered,
    channel
};

/**
   @brief Deterministic synthetic heterogeneous permeability fields.

   lognormal: exp(sigma * G) with G smoothed unit-variance Gaussian noise.
   layered:   decade-contrast horizontal layers.
   channel:   high-permeability sinusoidal bands at 100:1 contrast.
*/
inline PermField generate_synthetic_field(int nx, int ny, int nz, FieldStyle style,
                                          double sigma, std::uint64_t seed)
{
    require(sigma >= 0.0, "generate_synthetic_field: sigma must be >= 0");
    const std::size_t n = static_cast<std::size_t>(nx) * ny * nz;
    Vector k = Vector::Ones(static_cast<int>(n));

    auto at = [&](Vector& v, int i, int j, int l) -> double&
    { return v[static_cast<int>(static_cast<std::size_t>(l) * nx * ny + static_cast<std::size_t>(j) * nx + i)]; };

    if (style == FieldStyle::lognormal && sigma > 0.0)
    {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        Vector g(static_cast<int>(n));
        for (int i = 0; i < g.size(); ++i) { g[i] = gauss(rng); }

        // Three box-blur passes per axis give a correlated field.
        Vector tmp = g;
        for (int pass = 0; pass < 3; ++pass)
        {
            for (int l = 0; l < nz; ++l)
            {
                for (int j = 0; j < ny; ++j)
                {
                    for (int i = 0; i < nx; ++i)
                    {
                        double sum = 0.0;
                        int cnt = 0;
                        for (int d = -1; d <= 1; ++d)
                        {
                            if (i + d >= 0 && i + d < nx) { sum += at(g, i + d, j, l); ++cnt; }
                            if (j + d >= 0 && j + d < ny) { sum += at(g, i, j + d, l); ++cnt; }
                            if (nz > 1 && l + d >= 0 && l + d < nz) { sum += at(g, i, j, l + d); ++cnt; }
                        }
                        at(tmp, i, j, l) = sum / cnt;
                    }
                }
            }
            g = tmp;
        }
        const double mean = g.mean();
        double var = 0.0;
        for (int i = 0; i < g.size(); ++i) { var += (g[i] - mean) * (g[i] - mean); }
        var /= g.size();
        const double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
        for (int i = 0; i < k.size(); ++i) { k[i] = std::exp(sigma * scale * (g[i] - mean)); }
    }
    else if (style == FieldStyle::layered)
    {
        for (int l = 0; l < nz; ++l)
        {
            for (int j = 0; j < ny; ++j)
            {
                const double v = (j / std::max(1, ny / 8)) % 2 == 0 ? 1.0 : 0.1;
                for (int i = 0; i < nx; ++i) { at(k, i, j, l) = v; }
            }
        }
    }
    else if (style == FieldStyle::channel)
    {
        // Two sinusoidal bands; inside a band the permeability is 100.
        for (int l = 0; l < nz; ++l)
        {
            for (int j = 0; j < ny; ++j)
            {
                for (int i = 0; i < nx; ++i)
                {
                    const double x = (i + 0.5) / nx;
                    const double y = (j + 0.5) / ny;
                    double v = 1.0;
                    for (double y0 : {0.3, 0.7})
                    {
                        const double band = y0 + 0.1 * std::sin(2.0 * M_PI * (x + y0));
                        if (std::abs(y - band) < 0.06) { v = 100.0; }
                    }
                    at(k, i, j, l) = v;
                }
            }
        }
    }

    PermField f;
    f.kx = k;
    f.ky = k;
    f.kz = k;
    return f;
}

enum class SolverMethod
{
    single_picard,
    single_newton,
    fas_picard,
    fas_newton,
    cascadic
};

inline std::string to_string(SolverMethod m)
{
    switch (m)
    {
        case SolverMethod::single_picard: return "single_picard";
        case SolverMethod::single_newton: return "single_newton";
        case SolverMethod::fas_picard: return "fas_picard";
        case SolverMethod::fas_newton: return "fas_newton";
        case SolverMethod::cascadic: return "cascadic";
    }
    return "?";
}

inline SolverMethod solver_method_from_string(const std::string& s)
{
    if (s == "single_picard") { return SolverMethod::single_picard; }
    if (s == "single_newton") { return SolverMethod::single_newton; }
    if (s == "fas_picard") { return SolverMethod::fas_picard; }
    if (s == "fas_newton") { return SolverMethod::fas_newton; }
    if (s == "cascadic") { return SolverMethod::cascadic; }
    fail("unknown solver method '" + s + "'");
}

/**
   @brief Parsed run configuration (INI sections [mesh], [kappa], [solver],
   [output]).
*/
struct RunConfig
{
    std::string problem = "two_cell";
    int nx = 2, ny = 1, nz = 1;
    double hx = 1.0, hy = 1.0, hz = 1.0;

    KappaLaw::Kind kappa_kind = KappaLaw::Kind::constant;
    double alpha = 0.0, beta = 0.0, k0 = 1.0;

    std::vector<SolverMethod> solvers = {SolverMethod::single_newton};
    int levels = 1;
    std::vector<double> factors;
    int m_A = 1;
    int m_f = 1;
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    std::uint64_t seed = 0;
    std::string raster_path;

    std::string report_path;
    std::string export_path;
};

namespace detail
{

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) { return ""; }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep)
{
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
    {
        item = trim(item);
        if (!item.empty()) { out.push_back(item); }
    }
    return out;
}

} // namespace detail

inline RunConfig parse_config(const std::string& path)
{
    std::ifstream in(path);
    require(in.good(), "parse_config: cannot open '" + path + "'");

    RunConfig cfg;
    std::string section;
    std::string line;
    bool have_kappa = false;
    while (std::getline(in, line))
    {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') { continue; }
        if (line.front() == '[' && line.back() == ']')
        {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        const auto eq = line.find('=');
        require(eq != std::string::npos, "parse_config: malformed line '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));

        if (section == "mesh")
        {
            if (key == "nx") { cfg.nx = std::stoi(value); }
            else if (key == "ny") { cfg.ny = std::stoi(value); }
            else if (key == "nz") { cfg.nz = std::stoi(value); }
            else if (key == "hx") { cfg.hx = std::stod(value); }
            else if (key == "hy") { cfg.hy = std::stod(value); }
            else if (key == "hz") { cfg.hz = std::stod(value); }
            else { warn("parse_config: unknown [mesh] key '" + key + "'"); }
        }
        else if (section == "kappa")
        {
            if (key == "law")
            {
                have_kappa = true;
                if (value == "constant") { cfg.kappa_kind = KappaLaw::Kind::constant; }
                else if (value == "exponential") { cfg.kappa_kind = KappaLaw::Kind::exponential; }
                else if (value == "richards") { cfg.kappa_kind = KappaLaw::Kind::richards; }
                else { fail("parse_config: unknown kappa law '" + value + "'"); }
            }
            else if (key == "alpha") { cfg.alpha = std::stod(value); }
            else if (key == "beta") { cfg.beta = std::stod(value); }
            else if (key == "k0") { cfg.k0 = std::stod(value); }
            else { warn("parse_config: unknown [kappa] key '" + key + "'"); }
        }
        else if (section == "solver")
        {
            if (key == "problem") { cfg.problem = value; }
            else if (key == "method" || key == "solver")
            {
                cfg.solvers.clear();
                for (const auto& name : detail::split(value, ',')) { cfg.solvers.push_back(solver_method_from_string(name)); }
            }
            else if (key == "levels") { cfg.levels = std::stoi(value); }
            else if (key == "factor" || key == "factors")
            {
                cfg.factors.clear();
                for (const auto& v : detail::split(value, ',')) { cfg.factors.push_back(std::stod(v)); }
            }
            else if (key == "ma") { cfg.m_A = std::stoi(value); }
            else if (key == "mf") { cfg.m_f = std::stoi(value); }
            else if (key == "tol_rel") { cfg.rel_tol = std::stod(value); }
            else if (key == "tol_abs") { cfg.abs_tol = std::stod(value); }
            else if (key == "seed") { cfg.seed = std::stoull(value); }
            else if (key == "raster") { cfg.raster_path = value; }
            else { warn("parse_config: unknown [solver] key '" + key + "'"); }
        }
        else if (section == "output")
        {
            if (key == "report") { cfg.report_path = value; }
            else if (key == "export") { cfg.export_path = value; }
            else { warn("parse_config: unknown [output] key '" + key + "'"); }
        }
        else
        {
            warn("parse_config: key '" + key + "' outside a known section");
        }
    }
    require(cfg.nx >= 1 && cfg.ny >= 1 && cfg.nz >= 1, "parse_config: mesh dimensions missing or invalid");
    if (cfg.kappa_kind == KappaLaw::Kind::exponential)
    {
        require(have_kappa && cfg.alpha > 0.0, "parse_config: exponential law requires alpha > 0");
    }
    if (cfg.kappa_kind == KappaLaw::Kind::richards)
    {
        require(cfg.alpha > 0.0 && cfg.beta > 0.0 && cfg.k0 > 0.0,
                "parse_config: richards law requires alpha, beta, k0 > 0");
    }
    return cfg;
}

/// Cell pressures and interface fluxes in a legacy-VTK-style ASCII layout.
inline void export_solution(const Mesh& mesh, const Vector& sigma, const Vector& p,
                            const std::string& path)
{
    require(p.size() == mesh.num_cells(), "export_solution: pressure size mismatch");
    require(sigma.size() == mesh.num_interfaces(), "export_solution: flux size mismatch");
    std::ofstream out(path);
    require(out.good(), "export_solution: cannot open '" + path + "'");
    out.precision(17);
    out << "# vtk DataFile Version 3.0\n";
    out << "nlmg solution\n";
    out << "ASCII\n";
    out << "CELL_DATA " << mesh.num_cells() << "\n";
    out << "SCALARS pressure double 1\n";
    out << "LOOKUP_TABLE default\n";
    for (int i = 0; i < p.size(); ++i) { out << p[i] << "\n"; }
    out << "FACE_DATA " << mesh.num_interfaces() << "\n";
    out << "SCALARS flux double 1\n";
    out << "LOOKUP_TABLE default\n";
    for (int i = 0; i < sigma.size(); ++i) { out << sigma[i] << "\n"; }
}

/// One row of the benchmark report CSV.
struct ReportRow
{
    std::string solver;
    double alpha = 0.0;
    int cells = 0;
    int levels = 1;
    int m_A = 1;
    int m_f = 1;
    int nonlinear_iters = 0;
    double time_s = 0.0;
    bool converged = false;
    bool early_presmooth = false;
};

inline void write_report(const std::vector<ReportRow>& rows, const std::string& path)
{
    std::ofstream out(path);
    require(out.good(), "write_report: cannot open '" + path + "'");
    out << "solver,alpha,cells,levels,mA,mf,nonlinear_iters,time_s,converged,early_presmooth\n";
    out.precision(12);
    for (const auto& r : rows)
    {
        out << r.solver << ',' << r.alpha << ',' << r.cells << ',' << r.levels << ','
            << r.m_A << ',' << r.m_f << ',' << r.nonlinear_iters << ',' << r.time_s << ','
            << (r.converged ? 1 : 0) << ',' << (r.early_presmooth ? 1 : 0) << "\n";
    }
}

} // namespace nlmg
