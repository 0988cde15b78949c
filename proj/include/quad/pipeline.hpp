// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quad/calib.hpp"
#include "quad/model.hpp"
#include "quad/peft.hpp"
#include "quad/qmodel.hpp"

namespace quad {

// End-to-end run: calibrate -> absorb -> transform -> quantize -> [tune]
// -> eval. Every stage artifact is written to out_dir and reloaded before
// the next stage, so each output is independently loadable.
struct PipelineConfig {
    // synthetic model or container path
    bool synthetic_model = true;
    std::string model_path;
    ModelConfig model_config;
    SynthSpec synth;

    CalibSpec calib;
    Index rank = 8;
    uint64_t rotation_seed = 0;
    OnlineTransform online = OnlineTransform::hadamard;

    bool quantize = true;
    QuantScheme scheme;
    std::optional<TuneConfig> tune;

    uint64_t eval_seed = 1;
    Index eval_tokens = 512;

    std::string out_dir = "quad-out";

    static PipelineConfig from_json(const nlohmann::json& j);
    static PipelineConfig from_file(const std::string& path);
};

struct ReportBundle {
    nlohmann::json report;
    std::string report_path;
    std::string csv_path;
};

ReportBundle run_pipeline(const PipelineConfig& config);

// One row per variant: name, perplexity, mean relative layer error, outlier
// energy fraction. Variant grammar: "fp" or "[rN:]w4a4|w4a8|w4a4a8".
nlohmann::json ablation(const PipelineConfig& base, const std::vector<std::string>& variants);

}  // namespace quad
