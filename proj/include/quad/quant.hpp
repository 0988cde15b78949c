// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "quad/matrix.hpp"

namespace quad {

// Symmetric per-row quantization: codes in [-q_max, q_max] (7 for 4-bit,
// 127 for 8-bit) with one positive scale per row. Scales are rounded through
// float32 so the in-memory value matches the serialized container exactly.
struct QuantizedTensor {
    CodeMatrix codes;
    Vector scales;
    int bits = 4;

    Index rows() const { return codes.rows(); }
    Index cols() const { return codes.cols(); }
};

int q_max_for_bits(int bits);

// Per row: scale = clip * max|row| / q_max, codes = clamp(round(row/scale)).
// Rounding is half away from zero; an all-zero row gets scale 1 and zero
// codes.
QuantizedTensor rtn_quantize_rows(const Matrix& x, int bits, double clip);

Matrix dequantize(const QuantizedTensor& qt);

// Grid search for the weight clipping ratio minimizing the squared
// reconstruction error of 4-bit per-output-channel RTN; G-weighted
// (tr(D^T G D), G the input Gram) when G is given, plain Frobenius
// otherwise. Ties resolve to the larger ratio.
double clip_search(const Matrix& w, const std::vector<double>& grid, const Matrix* G = nullptr,
                   int bits = 4);

// Column-sequential weight quantization with error compensation against the
// Cholesky factor of the dampened inverse Hessian (G + 0.01*mean(diag G)*I).
// w is input-dim x output-dim; the result stores codes output-major with
// per-output-channel scales, same layout as rtn_quantize_rows(w.transpose()).
QuantizedTensor gptq_quantize(const Matrix& w, const Matrix& G, int bits, double clip);

// ||X W - Q(X) Q(W)||_F with per-token RTN on X and per-output-channel RTN
// on W; bits 16 means the factor is left unquantized.
struct RtnSpec {
    int bits = 4;
    double clip = 1.0;
};
double quant_error(const Matrix& x, const Matrix& w, RtnSpec xq, RtnSpec wq);

// tr(D^T G D) convenience used by clip search and the GPTQ-vs-RTN checks.
double gram_weighted_sq_error(const Matrix& delta, const Matrix* G);

}  // namespace quad
