// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/hadamard.hpp"

#include <cmath>

#include "quad/error.hpp"

namespace quad {

void walsh_hadamard(double* data, Index n) {
    if (!is_pow2(n))
        throw ValidationError("walsh_hadamard: length " + std::to_string(n) +
                              " is not a power of two");
    static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
    for (Index len = 1; len < n; len <<= 1) {
        for (Index i = 0; i < n; i += len << 1) {
            for (Index j = i; j < i + len; ++j) {
                double x = data[j];
                double y = data[j + len];
                data[j] = (x + y) * kInvSqrt2;
                data[j + len] = (x - y) * kInvSqrt2;
            }
        }
    }
}

Vector walsh_hadamard(Vector x) {
    walsh_hadamard(x.data(), x.size());
    return x;
}

void walsh_hadamard_rows(Matrix& m) {
    for (Index i = 0; i < m.rows(); ++i) walsh_hadamard(m.row(i).data(), m.cols());
}

void walsh_hadamard_cols(Matrix& m) {
    for (Index j = 0; j < m.cols(); ++j) {
        Vector col = m.col(j);
        walsh_hadamard(col.data(), col.size());
        m.col(j) = col;
    }
}

void walsh_hadamard_row_blocks(Matrix& m, Index block) {
    if (block <= 0 || m.cols() % block != 0)
        throw ValidationError("walsh_hadamard_row_blocks: width not divisible by block");
    for (Index i = 0; i < m.rows(); ++i)
        for (Index b = 0; b < m.cols(); b += block) walsh_hadamard(m.row(i).data() + b, block);
}

void walsh_hadamard_col_blocks(Matrix& m, Index block) {
    if (block <= 0 || m.rows() % block != 0)
        throw ValidationError("walsh_hadamard_col_blocks: height not divisible by block");
    for (Index b = 0; b < m.rows(); b += block) {
        for (Index j = 0; j < m.cols(); ++j) {
            Vector seg = m.col(j).segment(b, block);
            walsh_hadamard(seg.data(), block);
            m.col(j).segment(b, block) = seg;
        }
    }
}

Matrix hadamard_matrix(Index dim) {
    if (!is_pow2(dim)) throw ValidationError("hadamard_matrix: dim must be a power of two");
    Matrix h = Matrix::Identity(dim, dim);
    walsh_hadamard_cols(h);
    return h;
}

std::vector<int8_t> random_signs(Index dim, uint64_t seed) {
    Rng rng(seed);
    std::vector<int8_t> s(dim);
    for (Index i = 0; i < dim; ++i) s[i] = (rng() & 1u) ? int8_t{1} : int8_t{-1};
    return s;
}

Matrix random_hadamard(const HadamardSpec& spec) {
    if (!is_pow2(spec.dim))
        throw ValidationError("random_hadamard: dim must be a power of two");
    Matrix m = hadamard_matrix(spec.dim);
    auto signs = random_signs(spec.dim, spec.sign_seed);
    for (Index j = 0; j < spec.dim; ++j) m.col(j) *= static_cast<double>(signs[j]);
    return m;
}

}  // namespace quad
