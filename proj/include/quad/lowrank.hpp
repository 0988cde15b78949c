// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "quad/matrix.hpp"
#include "quad/quant.hpp"

namespace quad {

// Full-precision low-rank side branch replacing an online Hadamard site:
// X W = Q(X s^-1) Q(s W') + X s^-1 L R, with per-input-channel smoothing
// s_i = max|X_i|^0.25 from calibration and (L, R) the top-k SVD factors of
// the smoothed weight. Works for any width, power of two or not.
struct LowRankBranch {
    Vector s;        // in, > 0
    Matrix W_prime;  // in x out, s*W - L*R
    Matrix L;        // in x k
    Matrix R;        // k x out
    Index rank = 0;
};

LowRankBranch build_lowrank_branch(const Matrix& w, const Matrix& calib_x, Index k);

// Same construction from streamed per-channel absolute maxima.
LowRankBranch build_lowrank_branch_from_max(const Matrix& w, const Vector& channel_abs_max,
                                            Index k);

// Quantized forward through the branch; bits 16 disable the corresponding
// quantizer and the result then equals X W exactly.
Matrix forward_lowrank(const Matrix& x, const LowRankBranch& branch, int act_bits,
                       int weight_bits, double act_clip = 1.0, double weight_clip = 1.0);

}  // namespace quad
