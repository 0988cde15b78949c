// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/lowrank.hpp"

#include <cmath>

#include "quad/error.hpp"

namespace quad {

LowRankBranch build_lowrank_branch_from_max(const Matrix& w, const Vector& channel_abs_max,
                                            Index k) {
    if (channel_abs_max.size() != w.rows())
        throw ValidationError("lowrank: channel max length != weight input dim");
    if (k < 0 || k > std::min(w.rows(), w.cols()))
        throw ValidationError("lowrank: rank out of range");

    LowRankBranch b;
    b.rank = k;
    b.s = channel_abs_max.array().pow(0.25).max(1e-6);
    Matrix sw = b.s.asDiagonal() * w;

    Eigen::JacobiSVD<Matrix> svd(sw, Eigen::ComputeThinU | Eigen::ComputeThinV);
    b.L = svd.matrixU().leftCols(k);
    b.R = svd.singularValues().head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();
    b.W_prime = sw - b.L * b.R;
    return b;
}

LowRankBranch build_lowrank_branch(const Matrix& w, const Matrix& calib_x, Index k) {
    if (calib_x.cols() != w.rows())
        throw ValidationError("lowrank: calibration width != weight input dim");
    if (calib_x.rows() == 0) throw ValidationError("lowrank: empty calibration");
    Vector mx = calib_x.cwiseAbs().colwise().maxCoeff();
    return build_lowrank_branch_from_max(w, mx, k);
}

Matrix forward_lowrank(const Matrix& x, const LowRankBranch& branch, int act_bits,
                       int weight_bits, double act_clip, double weight_clip) {
    if (x.cols() != branch.s.size()) throw ValidationError("forward_lowrank: width mismatch");
    Matrix xs = x * branch.s.cwiseInverse().asDiagonal();
    Matrix qx = act_bits == 16 ? xs : dequantize(rtn_quantize_rows(xs, act_bits, act_clip));
    Matrix qw = weight_bits == 16
                    ? branch.W_prime
                    : dequantize(rtn_quantize_rows(branch.W_prime.transpose(), weight_bits,
                                                   weight_clip))
                          .transpose();
    Matrix out = qx * qw;
    if (branch.rank > 0) out.noalias() += (xs * branch.L) * branch.R;
    return out;
}

}  // namespace quad
