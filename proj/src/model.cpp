// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/model.hpp"

#include <cmath>

#include "quad/error.hpp"
#include "quad/hadamard.hpp"

namespace quad {

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw ValidationError(msg);
}

Matrix norm_rows(const ModelGraph& m, const Matrix& x, const Vector& alpha) {
    Matrix out(x.rows(), x.cols());
    if (m.transform_state == TransformState::none) {
        const double h = static_cast<double>(m.config.hidden_size);
        for (Index i = 0; i < x.rows(); ++i) {
            double denom = std::sqrt(x.row(i).squaredNorm() / h + m.config.rms_eps);
            out.row(i) = x.row(i).cwiseProduct(alpha.transpose()) / denom;
        }
    } else {
        // Scales already folded into the downstream weights.
        for (Index i = 0; i < x.rows(); ++i) {
            double denom = std::sqrt(x.row(i).squaredNorm() + m.norm_bias);
            out.row(i) = x.row(i) / denom;
        }
    }
    return out;
}

void apply_rope(Matrix& qk, Index head_dim) {
    for (Index pos = 0; pos < qk.rows(); ++pos) {
        for (Index b = 0; b < qk.cols(); b += head_dim) {
            for (Index d = 0; d + 1 < head_dim; d += 2) {
                double theta = std::pow(10000.0, -static_cast<double>(d) / head_dim);
                double angle = pos * theta;
                double c = std::cos(angle), s = std::sin(angle);
                double x0 = qk(pos, b + d), x1 = qk(pos, b + d + 1);
                qk(pos, b + d) = x0 * c - x1 * s;
                qk(pos, b + d + 1) = x0 * s + x1 * c;
            }
        }
    }
}

Matrix causal_attention(const ModelConfig& cfg, const LayerWeights& lw, const Matrix& a) {
    const Index b = a.rows();
    const Index hd = cfg.head_dim;
    Matrix q = a * lw.W_Q;
    Matrix k = a * lw.W_K;
    Matrix v = a * lw.W_V;
    if (cfg.use_rope) {
        apply_rope(q, hd);
        apply_rope(k, hd);
    }
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix z(b, cfg.n_heads * hd);
    for (Index h = 0; h < cfg.n_heads; ++h) {
        auto qh = q.middleCols(h * hd, hd);
        auto kh = k.middleCols(h * hd, hd);
        auto vh = v.middleCols(h * hd, hd);
        Matrix scores = qh * kh.transpose() * inv_sqrt_hd;
        for (Index i = 0; i < b; ++i) {
            auto row = scores.row(i).head(i + 1);
            double mx = row.maxCoeff();
            Eigen::RowVectorXd e = (row.array() - mx).exp();
            scores.row(i).head(i + 1) = e / e.sum();
            scores.row(i).tail(b - i - 1).setZero();
        }
        z.middleCols(h * hd, hd) = scores * vh;
    }
    return z;
}

Matrix silu(const Matrix& x) {
    return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

struct CaptureSink {
    CaptureSet* all = nullptr;
    std::vector<Matrix>* single = nullptr;
    CaptureTap tap = CaptureTap::layer_inputs;
};

Matrix forward_impl(const ModelGraph& m, std::span<const int32_t> tokens, CaptureSink sink) {
    m.validate_shapes();
    const Index b = static_cast<Index>(tokens.size());
    for (int32_t t : tokens)
        if (t < 0 || t >= m.config.vocab_size)
            throw ValidationError("forward: token id out of range");

    Matrix x(b, m.residual_dim);
    for (Index i = 0; i < b; ++i) x.row(i) = m.embedding.row(tokens[i]);

    auto grab = [&](CaptureTap tap, std::vector<Matrix> CaptureSet::* field, const Matrix& v) {
        if (sink.all) (sink.all->*field).push_back(v);
        if (sink.single && sink.tap == tap) sink.single->push_back(v);
    };

    const bool online_h = m.transform_state == TransformState::transformed &&
                          m.online == OnlineTransform::hadamard;

    for (const LayerWeights& lw : m.layers) {
        grab(CaptureTap::layer_inputs, &CaptureSet::layer_inputs, x);
        Matrix a = norm_rows(m, x, lw.alpha_attn);
        if (sink.all) sink.all->attn_norm_out.push_back(a);
        Matrix z = causal_attention(m.config, lw, a);
        grab(CaptureTap::pre_Wo, &CaptureSet::pre_wo, z);
        x += z * lw.W_O;

        grab(CaptureTap::ffn_inputs, &CaptureSet::ffn_inputs, x);
        Matrix f = norm_rows(m, x, lw.alpha_ffn);
        if (sink.all) sink.all->ffn_norm_out.push_back(f);
        Matrix s = silu(f * lw.W_gate).cwiseProduct(f * lw.W_up);
        if (sink.all) sink.all->ffn_act.push_back(s);
        if (online_h) walsh_hadamard_rows(s);
        grab(CaptureTap::pre_Wdown, &CaptureSet::pre_wdown, s);
        x += s * lw.W_down;
    }
    Matrix xn = norm_rows(m, x, m.final_norm);
    return xn * m.lm_head;
}

}  // namespace

void ModelGraph::validate_shapes() const {
    require(config.hidden_size == config.n_heads * config.head_dim,
            "model: hidden_size != n_heads * head_dim");
    require(residual_dim == config.hidden_size + outlier_dims,
            "model: residual_dim inconsistent with outlier_dims");
    require(transform_state == TransformState::transformed || outlier_dims == 0,
            "model: outlier dims without transform");
    require(embedding.rows() == config.vocab_size && embedding.cols() == residual_dim,
            "model: embedding shape mismatch");
    require(lm_head.rows() == residual_dim && lm_head.cols() == config.vocab_size,
            "model: lm_head shape mismatch");
    require(static_cast<Index>(layers.size()) == config.n_layers, "model: layer count mismatch");
    const Index h = config.hidden_size;
    const Index inter = config.intermediate_size;
    for (const LayerWeights& lw : layers) {
        require(lw.W_Q.rows() == residual_dim && lw.W_Q.cols() == h, "model: W_Q shape");
        require(lw.W_K.rows() == residual_dim && lw.W_K.cols() == h, "model: W_K shape");
        require(lw.W_V.rows() == residual_dim && lw.W_V.cols() == h, "model: W_V shape");
        require(lw.W_O.rows() == h && lw.W_O.cols() == residual_dim, "model: W_O shape");
        require(lw.W_up.rows() == residual_dim && lw.W_up.cols() == inter, "model: W_up shape");
        require(lw.W_gate.rows() == residual_dim && lw.W_gate.cols() == inter,
                "model: W_gate shape");
        require(lw.W_down.rows() == inter && lw.W_down.cols() == residual_dim,
                "model: W_down shape");
        require(lw.alpha_attn.size() == residual_dim && lw.alpha_ffn.size() == residual_dim,
                "model: norm scale length");
    }
    require(final_norm.size() == residual_dim, "model: final_norm length");
}

Matrix forward(const ModelGraph& model, std::span<const int32_t> tokens) {
    return forward_impl(model, tokens, {});
}

std::vector<Matrix> forward_capture(const ModelGraph& model, std::span<const int32_t> tokens,
                                    CaptureTap tap) {
    std::vector<Matrix> out;
    CaptureSink sink;
    sink.single = &out;
    sink.tap = tap;
    forward_impl(model, tokens, sink);
    return out;
}

CaptureSet forward_capture_all(const ModelGraph& model, std::span<const int32_t> tokens) {
    CaptureSet set;
    CaptureSink sink;
    sink.all = &set;
    forward_impl(model, tokens, sink);
    return set;
}

ModelGraph absorb_rmsnorm(ModelGraph model) {
    if (model.transform_state != TransformState::none)
        throw ValidationError("absorb_rmsnorm: scales already absorbed");
    model.validate_shapes();
    const double sqrt_h = std::sqrt(static_cast<double>(model.config.hidden_size));
    for (LayerWeights& lw : model.layers) {
        Vector attn_scale = lw.alpha_attn * sqrt_h;
        Vector ffn_scale = lw.alpha_ffn * sqrt_h;
        lw.W_Q = attn_scale.asDiagonal() * lw.W_Q;
        lw.W_K = attn_scale.asDiagonal() * lw.W_K;
        lw.W_V = attn_scale.asDiagonal() * lw.W_V;
        lw.W_up = ffn_scale.asDiagonal() * lw.W_up;
        lw.W_gate = ffn_scale.asDiagonal() * lw.W_gate;
        lw.alpha_attn.setOnes();
        lw.alpha_ffn.setOnes();
    }
    model.lm_head = (model.final_norm * sqrt_h).asDiagonal() * model.lm_head;
    model.final_norm.setOnes();
    model.norm_bias = model.config.hidden_size * model.config.rms_eps;
    model.transform_state = TransformState::absorbed;
    return model;
}

ModelGraph synth_model(const ModelConfig& config, const SynthSpec& spec) {
    if (config.hidden_size != config.n_heads * config.head_dim)
        throw ValidationError("synth_model: hidden_size != n_heads * head_dim");
    Rng rng(spec.seed);
    const Index h = config.hidden_size;
    const Index inter = config.intermediate_size;

    ModelGraph m;
    m.config = config;
    m.residual_dim = h;
    m.embedding = gaussian_matrix(config.vocab_size, h, rng);
    for (Index k = 0; k < spec.outlier_rank; ++k) {
        Vector coeff = gaussian_vector(config.vocab_size, rng);
        Vector dir = gaussian_vector(h, rng);
        dir.normalize();
        m.embedding += spec.outlier_gain * coeff * dir.transpose();
    }
    m.layers.resize(config.n_layers);
    for (LayerWeights& lw : m.layers) {
        const double wh = 1.0 / std::sqrt(static_cast<double>(h));
        const double wi = 1.0 / std::sqrt(static_cast<double>(inter));
        lw.W_Q = gaussian_matrix(h, h, rng, wh);
        lw.W_K = gaussian_matrix(h, h, rng, wh);
        lw.W_V = gaussian_matrix(h, h, rng, wh);
        lw.W_O = gaussian_matrix(h, h, rng, wh);
        lw.W_up = gaussian_matrix(h, inter, rng, wh);
        lw.W_gate = gaussian_matrix(h, inter, rng, wh);
        lw.W_down = gaussian_matrix(inter, h, rng, wi);
        lw.alpha_attn = Vector::Ones(h) + 0.1 * gaussian_vector(h, rng);
        lw.alpha_ffn = Vector::Ones(h) + 0.1 * gaussian_vector(h, rng);
    }
    m.final_norm = Vector::Ones(h) + 0.1 * gaussian_vector(h, rng);
    m.lm_head = gaussian_matrix(h, config.vocab_size, rng, 1.0 / std::sqrt(double(h)));
    m.validate_shapes();
    return m;
}

double perplexity_from_logits(const Matrix& logits, std::span<const int32_t> tokens) {
    if (tokens.size() < 2)
        throw ValidationError("perplexity: need at least two tokens");
    double nll = 0.0;
    const Index n = static_cast<Index>(tokens.size());
    for (Index i = 0; i + 1 < n; ++i) {
        auto row = logits.row(i);
        double mx = row.maxCoeff();
        double lse = mx + std::log((row.array() - mx).exp().sum());
        nll += lse - row(tokens[i + 1]);
    }
    return std::exp(nll / static_cast<double>(n - 1));
}

double eval_perplexity(const ModelGraph& model, std::span<const int32_t> tokens) {
    return perplexity_from_logits(forward(model, tokens), tokens);
}

}  // namespace quad
