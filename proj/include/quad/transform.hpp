// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "quad/matrix.hpp"
#include "quad/model.hpp"

namespace quad {

// P = (U_{1:r}, I - sum_i U_i U_i^T), h x (r+h), with orthonormal rows:
// P P^T = I. Right-multiplying activations by P moves the dominant singular
// directions into r leading outlier coordinates and removes them from the
// remaining h.
struct ProjectionTransform {
    Index h = 0;
    Index r = 0;
    Matrix U_top;  // h x r
    Matrix P;      // h x (r+h)
    Vector sigma;  // calibration singular values (may be empty)
};

// Q = blockdiag(I_r, H_h) with H a randomized Hadamard; orthogonal, leaves
// the outlier coordinates untouched.
struct RotationTransform {
    Index r = 0;
    Index h = 0;
    Matrix Q;  // (r+h) x (r+h)
    uint64_t sign_seed = 0;
};

ProjectionTransform build_projection(const Matrix& U, const Vector& sigma, Index r);
RotationTransform build_rotation(Index r, Index h, uint64_t sign_seed);

struct TransformOptions {
    OnlineTransform online = OnlineTransform::hadamard;
};

// Fuses P and Q into every weight of an absorbed model: input-side weights
// become Q^T P^T W, output-side weights H W P Q with the online-Hadamard
// factor fused on the left (head-wise for W_O, full width for W_down), W_V
// picks up the head-wise Hadamard on its right, and embedding/lm_head move
// into the (h+r)-dimensional residual space. Logits are preserved.
ModelGraph apply_transform(ModelGraph model, const ProjectionTransform& proj,
                           const RotationTransform& rot, const TransformOptions& opts = {});

struct TransformReport {
    std::vector<double> per_layer_fusion_residual;
    double outlier_energy_fraction = 0.0;
    double equivalence_deviation = 0.0;
};

TransformReport equivalence_report(const ModelGraph& original, const ModelGraph& transformed,
                                   std::span<const int32_t> tokens);

}  // namespace quad
