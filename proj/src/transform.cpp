// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/transform.hpp"

#include <cmath>

#include "quad/error.hpp"
#include "quad/hadamard.hpp"

namespace quad {

ProjectionTransform build_projection(const Matrix& U, const Vector& sigma, Index r) {
    const Index h = U.rows();
    if (h == 0) throw ValidationError("build_projection: empty singular basis");
    if (r < 0 || r > h) throw ValidationError("build_projection: rank out of range [0, h]");
    if (U.cols() < r) throw ValidationError("build_projection: U has fewer than r columns");
    const Matrix gram = U.transpose() * U;
    if ((gram - Matrix::Identity(U.cols(), U.cols())).cwiseAbs().maxCoeff() > 1e-8)
        throw ValidationError("build_projection: U columns are not orthonormal");

    ProjectionTransform t;
    t.h = h;
    t.r = r;
    t.U_top = U.leftCols(r);
    t.P.resize(h, r + h);
    t.P.leftCols(r) = t.U_top;
    t.P.rightCols(h) = Matrix::Identity(h, h) - t.U_top * t.U_top.transpose();
    t.sigma = sigma;
    return t;
}

RotationTransform build_rotation(Index r, Index h, uint64_t sign_seed) {
    if (r < 0) throw ValidationError("build_rotation: negative rank");
    if (!is_pow2(h))
        throw ValidationError(
            "build_rotation: h must be a power of two for the Hadamard block; "
            "use the low-rank branch (--replace-hadamard) for other widths");
    RotationTransform t;
    t.r = r;
    t.h = h;
    t.sign_seed = sign_seed;
    t.Q = Matrix::Identity(r + h, r + h);
    t.Q.bottomRightCorner(h, h) = random_hadamard({h, sign_seed});
    return t;
}

namespace {

double fuse_residual(const Matrix& w, const Matrix& p, const Matrix& q, const Matrix& pq) {
    Matrix sequential = (w * p) * q;
    Matrix combined = w * pq;
    return (sequential - combined).cwiseAbs().maxCoeff();
}

}  // namespace

ModelGraph apply_transform(ModelGraph model, const ProjectionTransform& proj,
                           const RotationTransform& rot, const TransformOptions& opts) {
    if (model.transform_state != TransformState::absorbed)
        throw ValidationError("apply_transform: model must be absorbed first");
    const Index h = model.config.hidden_size;
    const Index r = proj.r;
    if (proj.h != h) throw ValidationError("apply_transform: projection dim != hidden size");
    if (rot.h != h || rot.r != r)
        throw ValidationError("apply_transform: rotation block sizes do not match projection");
    if (opts.online == OnlineTransform::hadamard) {
        if (!is_pow2(model.config.head_dim))
            throw ValidationError(
                "apply_transform: head_dim must be a power of two for the online Hadamard; "
                "use the low-rank branch for other widths");
        if (!is_pow2(model.config.intermediate_size))
            throw ValidationError(
                "apply_transform: intermediate_size must be a power of two for the online "
                "Hadamard; use the low-rank branch for other widths");
    }

    const Matrix pq = proj.P * rot.Q;        // h x (r+h)
    const Matrix pq_t = pq.transpose();      // (r+h) x h
    const Index head_dim = model.config.head_dim;
    const bool online_h = opts.online == OnlineTransform::hadamard;

    model.transform_meta = TransformMeta{};
    model.transform_meta.rank = r;
    model.transform_meta.sign_seed = rot.sign_seed;
    model.transform_meta.sigma = proj.sigma;
    double energy_num = 0.0, energy_den = 0.0;
    for (Index i = 0; i < proj.sigma.size(); ++i) {
        double e = proj.sigma(i) * proj.sigma(i);
        energy_den += e;
        if (i < r) energy_num += e;
    }
    model.transform_meta.outlier_energy_fraction = energy_den > 0 ? energy_num / energy_den : 0.0;

    for (LayerWeights& lw : model.layers) {
        double resid = fuse_residual(lw.W_O, proj.P, rot.Q, pq);

        lw.W_Q = pq_t * lw.W_Q;
        lw.W_K = pq_t * lw.W_K;
        lw.W_V = pq_t * lw.W_V;
        lw.W_up = pq_t * lw.W_up;
        lw.W_gate = pq_t * lw.W_gate;
        if (online_h) {
            // Head-wise rotation: fused into W_V's columns so the attention
            // output arrives already rotated, undone on W_O's rows.
            walsh_hadamard_row_blocks(lw.W_V, head_dim);
            walsh_hadamard_col_blocks(lw.W_O, head_dim);
        }
        lw.W_O = lw.W_O * pq;
        if (online_h) walsh_hadamard_cols(lw.W_down);
        lw.W_down = lw.W_down * pq;

        lw.alpha_attn = Vector::Ones(r + h);
        lw.alpha_ffn = Vector::Ones(r + h);
        model.transform_meta.fusion_residuals.push_back(resid);
    }
    model.embedding = model.embedding * pq;
    model.lm_head = pq_t * model.lm_head;
    model.final_norm = Vector::Ones(r + h);

    model.residual_dim = h + r;
    model.outlier_dims = r;
    model.online = online_h ? OnlineTransform::hadamard : OnlineTransform::none;
    model.transform_state = TransformState::transformed;
    model.validate_shapes();
    return model;
}

TransformReport equivalence_report(const ModelGraph& original, const ModelGraph& transformed,
                                   std::span<const int32_t> tokens) {
    if (original.config.vocab_size != transformed.config.vocab_size)
        throw ValidationError("equivalence_report: vocab mismatch");
    TransformReport rep;
    rep.per_layer_fusion_residual = transformed.transform_meta.fusion_residuals;
    rep.outlier_energy_fraction = transformed.transform_meta.outlier_energy_fraction;
    Matrix lo = forward(original, tokens);
    Matrix lt = forward(transformed, tokens);
    rep.equivalence_deviation = rel_max_dev(lt, lo);
    return rep;
}

}  // namespace quad
