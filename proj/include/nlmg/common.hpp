#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nlmg
{

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;
using Vec3 = Eigen::Vector3d;

[[noreturn]] inline void fail(const std::string& msg)
{
    throw std::runtime_error(msg);
}

inline void require(bool cond, const std::string& msg)
{
    if (!cond) { fail(msg); }
}

inline void warn(const std::string& msg)
{
    std::cerr << "nlmg warning: " << msg << "\n";
}

/// Max-norm of a sparse matrix (0 for an empty matrix).
inline double max_abs(const SpMat& A)
{
    double m = 0.0;
    for (int k = 0; k < A.outerSize(); ++k)
    {
        for (SpMat::InnerIterator it(A, k); it; ++it)
        {
            m = std::max(m, std::abs(it.value()));
        }
    }
    return m;
}

/// Drop entries below tol * max_abs(A); keeps coarse operators structurally clean.
inline void prune_relative(SpMat& A, double tol = 1e-14)
{
    const double cut = tol * max_abs(A);
    if (cut > 0.0) { A.prune([cut](int, int, double v) { return std::abs(v) > cut; }); }
}

inline SpMat sparse_from_triplets(int rows, int cols, const std::vector<Triplet>& trips)
{
    SpMat A(rows, cols);
    A.setFromTriplets(trips.begin(), trips.end());
    A.makeCompressed();
    return A;
}

/// Dense submatrix A(rows, cols) gathered from a sparse matrix.
inline Matrix gather_dense(const SpMat& A, const std::vector<int>& rows,
                           const std::vector<int>& cols)
{
    std::vector<int> row_pos(A.rows(), -1);
    for (std::size_t i = 0; i < rows.size(); ++i) { row_pos[rows[i]] = static_cast<int>(i); }

    Matrix out = Matrix::Zero(static_cast<int>(rows.size()), static_cast<int>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j)
    {
        for (SpMat::InnerIterator it(A, cols[j]); it; ++it)
        {
            const int i = row_pos[it.row()];
            if (i >= 0) { out(i, static_cast<int>(j)) = it.value(); }
        }
    }
    for (int r : rows) { row_pos[r] = -1; }
    return out;
}

} // namespace nlmg
