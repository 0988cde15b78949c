// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/quant.hpp"

#include <cmath>

#include "quad/error.hpp"

namespace quad {

int q_max_for_bits(int bits) {
    if (bits == 4) return 7;
    if (bits == 8) return 127;
    throw ValidationError("quantization bits must be 4 or 8");
}

namespace {

int8_t round_clamp(double v, int qmax) {
    double r = std::round(v);  // half away from zero
    if (r > qmax) r = qmax;
    if (r < -qmax) r = -qmax;
    return static_cast<int8_t>(r);
}

}  // namespace

QuantizedTensor rtn_quantize_rows(const Matrix& x, int bits, double clip) {
    const int qmax = q_max_for_bits(bits);
    if (!(clip > 0.0 && clip <= 1.0)) throw ValidationError("rtn: clip must be in (0, 1]");
    check_finite(x, "rtn_quantize_rows");

    QuantizedTensor qt;
    qt.bits = bits;
    qt.codes.resize(x.rows(), x.cols());
    qt.scales.resize(x.rows());
    for (Index i = 0; i < x.rows(); ++i) {
        const double m = x.cols() == 0 ? 0.0 : x.row(i).cwiseAbs().maxCoeff();
        if (m == 0.0) {
            qt.scales(i) = 1.0;
            qt.codes.row(i).setZero();
            continue;
        }
        const double scale = static_cast<double>(static_cast<float>(clip * m / qmax));
        qt.scales(i) = scale;
        for (Index j = 0; j < x.cols(); ++j) qt.codes(i, j) = round_clamp(x(i, j) / scale, qmax);
    }
    return qt;
}

Matrix dequantize(const QuantizedTensor& qt) {
    Matrix out = qt.codes.cast<double>();
    for (Index i = 0; i < out.rows(); ++i) out.row(i) *= qt.scales(i);
    return out;
}

double gram_weighted_sq_error(const Matrix& delta, const Matrix* G) {
    if (!G) return delta.squaredNorm();
    if (G->rows() != delta.rows() || G->cols() != delta.rows())
        throw ValidationError("gram_weighted_sq_error: G shape mismatch");
    return (delta.transpose() * (*G) * delta).trace();
}

double clip_search(const Matrix& w, const std::vector<double>& grid, const Matrix* G, int bits) {
    if (grid.empty()) throw ValidationError("clip_search: empty grid");
    double best_ratio = 0.0, best_err = 0.0;
    bool first = true;
    for (double ratio : grid) {
        if (!(ratio > 0.0 && ratio <= 1.0))
            throw ValidationError("clip_search: grid values must be in (0, 1]");
        Matrix deq = dequantize(rtn_quantize_rows(w.transpose(), bits, ratio)).transpose();
        double err = gram_weighted_sq_error(w - deq, G);
        if (first || err < best_err || (err == best_err && ratio > best_ratio)) {
            best_err = err;
            best_ratio = ratio;
            first = false;
        }
    }
    return best_ratio;
}

QuantizedTensor gptq_quantize(const Matrix& w, const Matrix& G, int bits, double clip) {
    const Index m = w.rows();  // input dims
    const Index n = w.cols();  // output channels
    if (G.rows() != m || G.cols() != m)
        throw ValidationError("gptq: Gram shape does not match weight input dim");
    const int qmax = q_max_for_bits(bits);
    if (!(clip > 0.0 && clip <= 1.0)) throw ValidationError("gptq: clip must be in (0, 1]");

    Matrix H = 0.5 * (G + G.transpose());
    const double damp = 0.01 * H.diagonal().mean();
    H.diagonal().array() += damp;

    Eigen::LLT<Matrix> llt(H);
    if (llt.info() != Eigen::Success)
        throw NumericalError("gptq: Cholesky of the dampened Hessian failed; raise the damping");
    Matrix hinv = llt.solve(Matrix::Identity(m, m));
    Eigen::LLT<Matrix> llt_inv(0.5 * (hinv + hinv.transpose()));
    if (llt_inv.info() != Eigen::Success)
        throw NumericalError("gptq: Cholesky of the inverse Hessian failed; raise the damping");
    Matrix upper = llt_inv.matrixL().transpose();  // m x m, upper triangular

    // Fixed per-output-channel scales from the original weights.
    QuantizedTensor qt;
    qt.bits = bits;
    qt.codes.resize(n, m);
    qt.scales.resize(n);
    for (Index o = 0; o < n; ++o) {
        const double mx = w.col(o).cwiseAbs().maxCoeff();
        qt.scales(o) =
            mx == 0.0 ? 1.0 : static_cast<double>(static_cast<float>(clip * mx / qmax));
    }

    Matrix work = w;  // residual-compensated copy, column q quantized in order
    for (Index q = 0; q < m; ++q) {
        const double d = upper(q, q);
        Vector err(n);
        for (Index o = 0; o < n; ++o) {
            const int8_t code = round_clamp(work(q, o) / qt.scales(o), qmax);
            qt.codes(o, q) = code;
            const double deq = code * qt.scales(o);
            err(o) = (work(q, o) - deq) / d;
        }
        if (q + 1 < m) work.bottomRows(m - q - 1).noalias() -=
            upper.row(q).tail(m - q - 1).transpose() * err.transpose();
    }
    return qt;
}

double quant_error(const Matrix& x, const Matrix& w, RtnSpec xq, RtnSpec wq) {
    if (x.cols() != w.rows()) throw ValidationError("quant_error: inner dims differ");
    Matrix qx = xq.bits == 16 ? x : dequantize(rtn_quantize_rows(x, xq.bits, xq.clip));
    Matrix qw =
        wq.bits == 16 ? w : dequantize(rtn_quantize_rows(w.transpose(), wq.bits, wq.clip)).transpose();
    return (x * w - qx * qw).norm();
}

}  // namespace quad
