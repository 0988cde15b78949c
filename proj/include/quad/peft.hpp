// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "quad/matrix.hpp"
#include "quad/qmodel.hpp"

namespace quad {

struct TuneConfig {
    int steps = 200;
    double lr = 1e-3;
    bool tune_W_r = true;
    bool tune_u_scales = true;
    bool tune_d_scales = true;
    uint64_t seed = 0;

    void validate() const;
};

// Relative error of approximating X X^T gY by X_r X_r^T gY with
// X_r = X U_{1:r}; 0 when rank(X) <= r, 1 at r = 0, non-increasing in r.
double grad_approx_error(const Matrix& x, const Matrix& u, Index r, const Matrix& gy);

// Layer-wise distillation: plain gradient descent on the mean squared error
// against the teacher output. W_r gets its exact analytic gradient; body
// scales are updated through the straight-through estimator (quantization
// codes held fixed in the backward pass).
struct TuneResult {
    QuadLinear layer;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};
TuneResult tune_layer(QuadLinear layer, const Matrix& x_calib, const Matrix& y_teacher,
                      const TuneConfig& cfg, const QuantScheme& scheme);

// Sequential sweep over all quantized linears, each tuned against the
// teacher model's activations at the same site.
QuantizedModel tune_model(QuantizedModel qmodel, const ModelGraph& teacher,
                          const std::vector<TokenIds>& calib, const TuneConfig& cfg);

}  // namespace quad
