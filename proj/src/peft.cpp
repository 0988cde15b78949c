// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/peft.hpp"

#include <cmath>

#include "quad/error.hpp"
#include "quad/hadamard.hpp"

namespace quad {

void TuneConfig::validate() const {
    if (!(lr > 0.0)) throw ValidationError("tune: lr must be positive");
    if (steps < 0) throw ValidationError("tune: steps must be >= 0");
}

double grad_approx_error(const Matrix& x, const Matrix& u, Index r, const Matrix& gy) {
    if (r < 0 || r > u.cols()) throw ValidationError("grad_approx_error: rank out of range");
    if (u.rows() != x.cols()) throw ValidationError("grad_approx_error: basis dim != x width");
    if (gy.rows() != x.rows()) throw ValidationError("grad_approx_error: gY rows != x rows");
    Matrix full = x * (x.transpose() * gy);
    Matrix approx = Matrix::Zero(full.rows(), full.cols());
    if (r > 0) {
        Matrix xr = x * u.leftCols(r);
        approx = xr * (xr.transpose() * gy);
    }
    double denom = full.norm();
    if (denom == 0.0) return 0.0;
    return (full - approx).norm() / denom;
}

namespace {

struct Grads {
    Matrix w_r;      // r x out
    Vector scales;   // out
};

// Loss: mean squared error over all output elements.
double layer_loss(const Matrix& out, const Matrix& y) {
    return (out - y).squaredNorm() / static_cast<double>(out.size());
}

Grads layer_grads(const QuadLinear& layer, const Matrix& x, const Matrix& y,
                  const QuantScheme& scheme, const Matrix& out, const Matrix& body) {
    Grads g;
    const double inv_n = 1.0 / static_cast<double>(out.size());
    Matrix d = 2.0 * inv_n * (out - y);

    if (layer.W_r.rows() > 0) g.w_r = x.leftCols(layer.W_r.rows()).transpose() * d;

    if (layer.fp_body.size() == 0) {
        // STE: codes fixed, the body output is linear in each output scale.
        g.scales.resize(layer.body.scales.size());
        for (Index o = 0; o < g.scales.size(); ++o)
            g.scales(o) = d.col(o).dot(body.col(o)) / layer.body.scales(o);
    }
    (void)scheme;
    return g;
}

}  // namespace

TuneResult tune_layer(QuadLinear layer, const Matrix& x_calib, const Matrix& y_teacher,
                      const TuneConfig& cfg, const QuantScheme& scheme) {
    cfg.validate();
    if (y_teacher.rows() != x_calib.rows() || y_teacher.cols() != layer.out_features)
        throw ValidationError("tune_layer: teacher output shape mismatch");

    const bool tune_scales =
        (layer.u_type ? cfg.tune_u_scales : cfg.tune_d_scales) && layer.fp_body.size() == 0;
    const bool tune_wr = cfg.tune_W_r && layer.u_type && layer.W_r.rows() > 0;

    TuneResult res;
    res.initial_loss = layer_loss(quantized_matmul(x_calib, layer, scheme), y_teacher);
    res.final_loss = res.initial_loss;
    res.layer = layer;
    if (cfg.steps == 0 || (!tune_scales && !tune_wr)) return res;

    double best = res.initial_loss;
    for (int step = 0; step < cfg.steps; ++step) {
        Matrix body = quantized_body_part(x_calib, layer, scheme);
        Matrix out = body;
        if (layer.branch) {
            Matrix xs = x_calib * layer.branch->s.cwiseInverse().asDiagonal();
            out.noalias() += (xs * layer.branch->L) * layer.branch->R;
        } else if (layer.W_r.rows() > 0) {
            out.noalias() += x_calib.leftCols(layer.W_r.rows()) * layer.W_r;
        }
        Grads g = layer_grads(layer, x_calib, y_teacher, scheme, out, body);
        if (tune_wr) layer.W_r -= cfg.lr * g.w_r;
        if (tune_scales)
            layer.body.scales = (layer.body.scales - cfg.lr * g.scales).cwiseMax(1e-12);

        double loss = layer_loss(quantized_matmul(x_calib, layer, scheme), y_teacher);
        if (loss > 10.0 * res.initial_loss)
            throw NumericalError("tune_layer: diverged at step " + std::to_string(step) +
                                 " (loss " + std::to_string(loss) + ", initial " +
                                 std::to_string(res.initial_loss) + "); lower the lr");
        if (loss < best) {
            best = loss;
            res.layer = layer;
        }
    }
    res.final_loss = best;
    return res;
}

QuantizedModel tune_model(QuantizedModel qmodel, const ModelGraph& teacher,
                          const std::vector<TokenIds>& calib, const TuneConfig& cfg) {
    cfg.validate();
    if (teacher.transform_state != TransformState::transformed)
        throw ValidationError("tune_model: teacher must be the transformed fp model");
    if (teacher.residual_dim != qmodel.residual_dim ||
        static_cast<Index>(teacher.layers.size()) != static_cast<Index>(qmodel.layers.size()))
        throw ValidationError("tune_model: teacher/student shape mismatch");
    if (cfg.steps == 0 || (!cfg.tune_W_r && !cfg.tune_u_scales && !cfg.tune_d_scales))
        return qmodel;

    // Teacher activations streamed once, concatenated across batches.
    const size_t n_layers = qmodel.layers.size();
    std::vector<Matrix> attn_in(n_layers), ffn_in(n_layers), pre_wo(n_layers),
        ffn_act(n_layers);
    auto append = [](Matrix& dst, const Matrix& add) {
        if (dst.size() == 0) {
            dst = add;
        } else {
            Matrix merged(dst.rows() + add.rows(), add.cols());
            merged << dst, add;
            dst = std::move(merged);
        }
    };
    for (const TokenIds& ids : calib) {
        CaptureSet cs = forward_capture_all(teacher, ids);
        for (size_t l = 0; l < n_layers; ++l) {
            append(attn_in[l], cs.attn_norm_out[l]);
            append(ffn_in[l], cs.ffn_norm_out[l]);
            append(pre_wo[l], cs.pre_wo[l]);
            append(ffn_act[l], cs.ffn_act[l]);
        }
    }

    for (size_t l = 0; l < n_layers; ++l) {
        const LayerWeights& tw = teacher.layers[l];
        QuantLayer& ql = qmodel.layers[l];
        auto tune_site = [&](QuadLinear& lin, const Matrix& x, const Matrix& w_teacher) {
            Matrix y = x * w_teacher;
            lin = tune_layer(std::move(lin), x, y, cfg, qmodel.scheme).layer;
        };
        tune_site(ql.W_Q, attn_in[l], tw.W_Q);
        tune_site(ql.W_K, attn_in[l], tw.W_K);
        tune_site(ql.W_V, attn_in[l], tw.W_V);
        tune_site(ql.W_up, ffn_in[l], tw.W_up);
        tune_site(ql.W_gate, ffn_in[l], tw.W_gate);
        tune_site(ql.W_O, pre_wo[l], tw.W_O);
        // W_down's quantized input is the raw SwiGLU output; the teacher
        // target includes the teacher's own online rotation when present.
        Matrix x_down = ffn_act[l];
        Matrix y_down;
        if (teacher.online == OnlineTransform::hadamard) {
            Matrix xh = x_down;
            walsh_hadamard_rows(xh);
            y_down = xh * tw.W_down;
        } else {
            y_down = x_down * tw.W_down;
        }
        ql.W_down = tune_layer(std::move(ql.W_down), x_down, y_down, cfg, qmodel.scheme).layer;
    }
    return qmodel;
}

}  // namespace quad
