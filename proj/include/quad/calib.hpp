// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "quad/matrix.hpp"
#include "quad/model.hpp"

namespace quad {

// Running sum of X^T X over calibration batches; mergeable across shards.
struct GramAccumulator {
    Index dim = 0;
    Matrix gram;
    uint64_t token_count = 0;

    static GramAccumulator zero(Index dim);
};

GramAccumulator& accumulate(GramAccumulator& acc, const Matrix& x);
GramAccumulator merge(const GramAccumulator& a, const GramAccumulator& b);

// Activation singular vectors/values estimated from the Gram matrix;
// sigma = sqrt(eigenvalues), descending.
struct SingularEstimate {
    Matrix U;
    Vector sigma;
};
SingularEstimate estimate_singular(const GramAccumulator& acc);

struct CalibSpec {
    enum class Source { synthetic, token_file };
    Source source = Source::synthetic;
    uint64_t seed = 0;
    Index outlier_rank = 0;
    double outlier_gain = 0.0;
    std::string token_path;
    Index n_samples = 32;
    Index seq_len = 256;

    void validate() const;
};

// Direct activation batches with planted outlier directions: Gaussian rows
// plus outlier_rank rank-1 components of the given gain, directions shared
// across batches. Self-contained stand-in for real calibration corpora.
std::vector<Matrix> synthetic_activations(const CalibSpec& spec, Index dim);

// Token sequences for model-driven calibration: seeded uniform ids for the
// synthetic source, token-file contents reshaped to seq_len otherwise.
std::vector<TokenIds> calibration_tokens(const CalibSpec& spec, Index vocab_size);

// Shared residual-stream Gram over all layer-entry activations (default
// interpretation: one accumulator across layers).
GramAccumulator layer_input_gram(const ModelGraph& model, const std::vector<TokenIds>& batches);

// Per-layer variant kept for ablation.
std::vector<GramAccumulator> per_layer_input_grams(const ModelGraph& model,
                                                   const std::vector<TokenIds>& batches);

}  // namespace quad
