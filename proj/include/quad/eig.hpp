// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "quad/matrix.hpp"

namespace quad {

// Eigendecomposition of a symmetric PSD Gram matrix: G = U diag(sigma2) U^T,
// eigenvalues descending, column signs canonicalized so the first
// non-negligible entry of each column is positive.
struct EigGram {
    Matrix U;
    Vector sigma2;
};

EigGram eig_gram(const Matrix& G);

// Incoherence mu = max|W_ij| * sqrt(m*n) / ||W||_F. 1 for a uniform matrix,
// sqrt(m*n) for a single spike; lower is flatter.
double incoherence(const Matrix& W);

}  // namespace quad
