// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/eig.hpp"

#include <cmath>

#include "quad/error.hpp"

namespace quad {

EigGram eig_gram(const Matrix& G) {
    if (G.rows() != G.cols() || G.rows() == 0)
        throw ValidationError("eig_gram: matrix must be square and non-empty");
    check_finite(G, "eig_gram");
    const double scale = std::max(1.0, max_abs(G));
    if ((G - G.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
        throw ValidationError("eig_gram: matrix is not symmetric");

    Matrix s = 0.5 * (G + G.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> solver(s);
    if (solver.info() != Eigen::Success)
        throw NumericalError("eig_gram: eigendecomposition did not converge");

    // Eigen returns ascending order; flip to descending.
    Vector sigma2 = solver.eigenvalues().reverse();
    Matrix u = solver.eigenvectors().rowwise().reverse();

    const double fro = s.norm();
    if (sigma2.minCoeff() < -1e-8 * std::max(fro, 1.0))
        throw NumericalError("eig_gram: matrix is not positive semidefinite");
    sigma2 = sigma2.cwiseMax(0.0);

    for (Index j = 0; j < u.cols(); ++j) {
        const double tau = 1e-12 * std::max(1.0, u.col(j).cwiseAbs().maxCoeff());
        for (Index i = 0; i < u.rows(); ++i) {
            if (std::abs(u(i, j)) > tau) {
                if (u(i, j) < 0.0) u.col(j) = -u.col(j);
                break;
            }
        }
    }
    return {std::move(u), std::move(sigma2)};
}

double incoherence(const Matrix& W) {
    if (W.size() == 0) throw ValidationError("incoherence: empty matrix");
    const double fro = W.norm();
    if (fro == 0.0) throw ValidationError("incoherence: undefined for an all-zero matrix");
    const double mn = static_cast<double>(W.rows()) * static_cast<double>(W.cols());
    return max_abs(W) * std::sqrt(mn) / fro;
}

}  // namespace quad
