// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/calib.hpp"

#include <cmath>
#include <iostream>

#include "quad/eig.hpp"
#include "quad/error.hpp"
#include "quad/serialize.hpp"

namespace quad {

GramAccumulator GramAccumulator::zero(Index dim) {
    if (dim <= 0) throw ValidationError("GramAccumulator: dim must be positive");
    return {dim, Matrix::Zero(dim, dim), 0};
}

GramAccumulator& accumulate(GramAccumulator& acc, const Matrix& x) {
    if (x.cols() != acc.dim) throw ValidationError("accumulate: activation width != gram dim");
    check_finite(x, "accumulate");
    acc.gram.noalias() += x.transpose() * x;
    acc.gram = 0.5 * (acc.gram + acc.gram.transpose()).eval();
    acc.token_count += static_cast<uint64_t>(x.rows());
    return acc;
}

GramAccumulator merge(const GramAccumulator& a, const GramAccumulator& b) {
    if (a.dim != b.dim) throw ValidationError("merge: accumulator dims differ");
    return {a.dim, a.gram + b.gram, a.token_count + b.token_count};
}

SingularEstimate estimate_singular(const GramAccumulator& acc) {
    if (acc.token_count == 0) throw ValidationError("estimate_singular: empty accumulator");
    if (acc.token_count < static_cast<uint64_t>(acc.dim))
        std::cerr << "warning: gram built from " << acc.token_count << " tokens for dim "
                  << acc.dim << "; singular estimate may be rank-deficient\n";
    EigGram eg = eig_gram(acc.gram);
    return {std::move(eg.U), eg.sigma2.cwiseSqrt()};
}

void CalibSpec::validate() const {
    if (n_samples < 1) throw ValidationError("calib: n_samples must be >= 1");
    if (seq_len < 1) throw ValidationError("calib: seq_len must be >= 1");
    if (source == Source::token_file && token_path.empty())
        throw ValidationError("calib: token_file source needs a path");
}

std::vector<Matrix> synthetic_activations(const CalibSpec& spec, Index dim) {
    spec.validate();
    if (spec.source != CalibSpec::Source::synthetic)
        throw ValidationError("synthetic_activations: spec source is not synthetic");
    Rng rng(spec.seed);
    std::vector<Vector> dirs;
    for (Index k = 0; k < spec.outlier_rank; ++k) {
        Vector d = gaussian_vector(dim, rng);
        d.normalize();
        dirs.push_back(std::move(d));
    }
    std::vector<Matrix> batches;
    batches.reserve(spec.n_samples);
    for (Index s = 0; s < spec.n_samples; ++s) {
        Matrix x = gaussian_matrix(spec.seq_len, dim, rng);
        for (const Vector& d : dirs) {
            Vector coeff = gaussian_vector(spec.seq_len, rng);
            x += spec.outlier_gain * coeff * d.transpose();
        }
        batches.push_back(std::move(x));
    }
    return batches;
}

std::vector<TokenIds> calibration_tokens(const CalibSpec& spec, Index vocab_size) {
    spec.validate();
    std::vector<TokenIds> batches;
    if (spec.source == CalibSpec::Source::synthetic) {
        Rng rng(spec.seed);
        std::uniform_int_distribution<int32_t> dist(0, static_cast<int32_t>(vocab_size) - 1);
        for (Index s = 0; s < spec.n_samples; ++s) {
            TokenIds ids(spec.seq_len);
            for (auto& id : ids) id = dist(rng);
            batches.push_back(std::move(ids));
        }
    } else {
        TokenFile tf = read_token_file(spec.token_path);
        const Index len = spec.seq_len;
        for (size_t off = 0; off + len <= tf.ids.size() &&
                             batches.size() < static_cast<size_t>(spec.n_samples);
             off += len) {
            TokenIds ids(tf.ids.begin() + off, tf.ids.begin() + off + len);
            for (int32_t id : ids)
                if (id < 0 || id >= vocab_size)
                    throw ValidationError("calibration_tokens: token id out of range");
            batches.push_back(std::move(ids));
        }
        if (batches.empty()) throw ValidationError("calibration_tokens: token file too short");
    }
    return batches;
}

GramAccumulator layer_input_gram(const ModelGraph& model, const std::vector<TokenIds>& batches) {
    GramAccumulator acc = GramAccumulator::zero(model.residual_dim);
    for (const TokenIds& ids : batches) {
        auto captures = forward_capture(model, ids, CaptureTap::layer_inputs);
        for (const Matrix& x : captures) accumulate(acc, x);
    }
    return acc;
}

std::vector<GramAccumulator> per_layer_input_grams(const ModelGraph& model,
                                                   const std::vector<TokenIds>& batches) {
    std::vector<GramAccumulator> accs(model.layers.size(),
                                      GramAccumulator::zero(model.residual_dim));
    for (const TokenIds& ids : batches) {
        auto captures = forward_capture(model, ids, CaptureTap::layer_inputs);
        for (size_t l = 0; l < captures.size(); ++l) accumulate(accs[l], captures[l]);
    }
    return accs;
}

}  // namespace quad
