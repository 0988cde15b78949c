// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "quad/matrix.hpp"

namespace quad {

// Randomized Hadamard matrix: orthonormal Walsh-Hadamard times a ±1 sign
// diagonal drawn from sign_seed. dim must be a power of two.
struct HadamardSpec {
    Index dim = 1;
    uint64_t sign_seed = 0;
};

// In-place orthonormal fast Walsh-Hadamard transform, 1/sqrt(2) scaling at
// each butterfly level so the full transform is an isometry. O(n log n).
void walsh_hadamard(double* data, Index n);
Vector walsh_hadamard(Vector x);

// Hx applied along rows (x * H for row-vector activations; H symmetric).
void walsh_hadamard_rows(Matrix& m);
// H * m: transform each column.
void walsh_hadamard_cols(Matrix& m);
// Per-row transform of contiguous blocks of size `block` (head-wise use).
void walsh_hadamard_row_blocks(Matrix& m, Index block);
// H_block row-transform applied blockwise down the rows: rows [k*block,
// (k+1)*block) of m are left-multiplied by H_block.
void walsh_hadamard_col_blocks(Matrix& m, Index block);

// Dense orthonormal Walsh-Hadamard matrix (entries ±1/sqrt(dim)).
Matrix hadamard_matrix(Index dim);

std::vector<int8_t> random_signs(Index dim, uint64_t seed);

// H * diag(signs); orthogonal, deterministic in the seed.
Matrix random_hadamard(const HadamardSpec& spec);

}  // namespace quad
