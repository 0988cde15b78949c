// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "quad/calib.hpp"
#include "quad/lowrank.hpp"
#include "quad/model.hpp"
#include "quad/quant.hpp"

namespace quad {

struct QuantScheme {
    int u_act_bits = 4;   // inputs of W_Q/W_K/W_V/W_up/W_gate
    int d_act_bits = 8;   // inputs of W_O/W_down
    int weight_bits = 4;  // 16 disables weight quantization
    double act_clip = 0.9;
    std::vector<double> weight_clip_grid = {1.00, 0.95, 0.90, 0.85, 0.80, 0.75, 0.70};
    int kv_bits = 16;  // attention internals stay full precision
    bool use_gptq = true;
    Index lowrank_rank = 0;  // >0: low-rank branches at the online-Hadamard sites

    void validate() const;
    static QuantScheme named(const std::string& name);  // w4a4 | w4a8 | w4a4a8
};

// One quantized linear layer: INT4/8 body with per-output-channel scales,
// optional full-precision outlier slice W_r on the first r input dims
// (U-type only), optional online Hadamard on the input, optional low-rank
// branch replacing the Hadamard path.
struct QuadLinear {
    bool u_type = false;
    Index in_features = 0;  // body input width, excluding outlier dims
    Index out_features = 0;
    QuantizedTensor body;  // out x in codes; empty when weight_bits == 16
    Matrix fp_body;        // in x out, only when weight_bits == 16
    Matrix W_r;            // r x out
    bool online_hadamard = false;
    std::optional<LowRankBranch> branch;

    Index input_width() const { return W_r.rows() + in_features; }
    Matrix body_matrix() const;  // dequantized (or fp) body, in x out
};

// Splits x into the full-precision outlier slice and the quantized body
// input, runs the integer product with exact int32 accumulation, rescales by
// the outer product of scales and adds x_r W_r. Applies the online Hadamard
// first when flagged; dispatches to the low-rank branch when one is present.
Matrix quantized_matmul(const Matrix& x, const QuadLinear& layer, const QuantScheme& scheme);

// Body-only contribution (after online Hadamard/smoothing, before the
// outlier slice and low-rank terms); the tuner differentiates through this.
Matrix quantized_body_part(const Matrix& x, const QuadLinear& layer, const QuantScheme& scheme);

struct QuantLayer {
    QuadLinear W_Q, W_K, W_V, W_O, W_up, W_gate, W_down;
};

struct QuantizedModel {
    ModelConfig config;
    Matrix embedding;
    std::vector<QuantLayer> layers;
    Matrix lm_head;
    Index residual_dim = 0;
    Index outlier_dims = 0;
    double norm_bias = 0.0;
    QuantScheme scheme;
};

// Per-linear-input calibration statistics on the transformed model, used for
// GPTQ Hessians, weight clip search and branch smoothing.
struct SiteStats {
    struct Site {
        GramAccumulator gram;
        Vector channel_max;
    };
    std::vector<Site> attn_in;    // input of W_Q/W_K/W_V (post-norm)
    std::vector<Site> ffn_in;     // input of W_up/W_gate (post-norm)
    std::vector<Site> pre_wo;     // input of W_O
    std::vector<Site> pre_wdown;  // input of W_down (after any online op)
    std::vector<Site> ffn_act;    // SwiGLU output before any online op
};
SiteStats collect_site_stats(const ModelGraph& model, const std::vector<TokenIds>& batches);

QuantizedModel quantize_model(const ModelGraph& model, const QuantScheme& scheme,
                              const SiteStats& stats);

Matrix qforward(const QuantizedModel& model, std::span<const int32_t> tokens);
double eval_perplexity(const QuantizedModel& model, std::span<const int32_t> tokens);

void save_quantized(const QuantizedModel& model, const std::string& path);
QuantizedModel load_quantized(const std::string& path);
void save_site_stats(const SiteStats& stats, const std::string& path);
SiteStats load_site_stats(const std::string& path);

}  // namespace quad
