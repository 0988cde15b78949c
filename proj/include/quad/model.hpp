// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "quad/matrix.hpp"

namespace quad {

struct ModelConfig {
    Index hidden_size = 128;
    Index n_heads = 8;
    Index head_dim = 16;
    Index intermediate_size = 256;
    Index n_layers = 2;
    Index vocab_size = 512;
    double rms_eps = 0.0;
    bool use_rope = false;
};

// Weights stored input-dim x output-dim; activations are row vectors and a
// linear layer computes X * W.
struct LayerWeights {
    Matrix W_Q, W_K, W_V, W_O;
    Matrix W_up, W_gate, W_down;
    Vector alpha_attn, alpha_ffn;
};

enum class TransformState { none, absorbed, transformed };
enum class OnlineTransform { none, hadamard };

// Fusion diagnostics recorded by apply_transform and surfaced in
// equivalence reports.
struct TransformMeta {
    Index rank = 0;
    uint64_t sign_seed = 0;
    std::vector<double> fusion_residuals;  // per layer
    double outlier_energy_fraction = 0.0;
    Vector sigma;  // calibration singular values behind the projection
};

struct ModelGraph {
    ModelConfig config;
    Matrix embedding;  // vocab x residual_dim
    std::vector<LayerWeights> layers;
    Vector final_norm;
    Matrix lm_head;  // residual_dim x vocab
    Index residual_dim = 0;
    TransformState transform_state = TransformState::none;
    Index outlier_dims = 0;
    OnlineTransform online = OnlineTransform::none;
    // After absorption the norm computes x / sqrt(|x|^2 + norm_bias) with
    // norm_bias = h * rms_eps, which keeps the operation exactly equivariant
    // under right-multiplication by orthonormal-row matrices.
    double norm_bias = 0.0;
    TransformMeta transform_meta;

    void validate_shapes() const;
};

using TokenIds = std::vector<int32_t>;

enum class CaptureTap { layer_inputs, ffn_inputs, pre_Wo, pre_Wdown };

Matrix forward(const ModelGraph& model, std::span<const int32_t> tokens);

// Per-layer activation matrices at the requested tap, without changing the
// forward result. pre_Wdown captures the actual input of W_down, i.e. after
// the online Hadamard when one is active.
std::vector<Matrix> forward_capture(const ModelGraph& model, std::span<const int32_t> tokens,
                                    CaptureTap tap);

// Internal multi-tap capture used by calibration and tuning; one pass.
struct CaptureSet {
    std::vector<Matrix> layer_inputs;    // residual at layer entry
    std::vector<Matrix> ffn_inputs;      // residual at FFN entry
    std::vector<Matrix> attn_norm_out;   // input of W_Q/W_K/W_V
    std::vector<Matrix> ffn_norm_out;    // input of W_up/W_gate
    std::vector<Matrix> pre_wo;          // input of W_O
    std::vector<Matrix> pre_wdown;       // input of W_down (post online op)
    std::vector<Matrix> ffn_act;         // SwiGLU output before any online op
};
CaptureSet forward_capture_all(const ModelGraph& model, std::span<const int32_t> tokens);

// Folds RMSNorm scales (times sqrt(h)) into the adjacent input-side weights
// and the lm_head; norms thereafter compute x / sqrt(|x|^2 + h*eps), which is
// exactly x/|x| for eps = 0. Logits are preserved.
ModelGraph absorb_rmsnorm(ModelGraph model);

// Synthetic model: Gaussian 1/sqrt(fan_in) weights plus an optional rank-k
// outlier injector that plants large components in the embedding so the
// residual stream has dominant singular directions.
struct SynthSpec {
    uint64_t seed = 0;
    Index outlier_rank = 0;
    double outlier_gain = 0.0;
};
ModelGraph synth_model(const ModelConfig& config, const SynthSpec& spec);

double eval_perplexity(const ModelGraph& model, std::span<const int32_t> tokens);

// exp(mean NLL) of next-token prediction given already-computed logits.
double perplexity_from_logits(const Matrix& logits, std::span<const int32_t> tokens);

}  // namespace quad
