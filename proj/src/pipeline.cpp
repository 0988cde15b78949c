// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/pipeline.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "quad/error.hpp"
#include "quad/hadamard.hpp"
#include "quad/serialize.hpp"
#include "quad/transform.hpp"

namespace quad {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

CalibSpec calib_from_json(const json& j) {
    CalibSpec c;
    std::string src = j.value("source", "synthetic");
    if (src == "synthetic") {
        c.source = CalibSpec::Source::synthetic;
    } else if (src == "token_file") {
        c.source = CalibSpec::Source::token_file;
        c.token_path = j.at("token_path").get<std::string>();
    } else {
        throw ValidationError("calib source must be synthetic or token_file");
    }
    c.seed = j.value("seed", uint64_t{0});
    c.outlier_rank = j.value("outlier_rank", Index{0});
    c.outlier_gain = j.value("outlier_gain", 0.0);
    c.n_samples = j.value("n_samples", Index{32});
    c.seq_len = j.value("seq_len", Index{256});
    c.validate();
    return c;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.hidden_size = j.value("hidden_size", Index{128});
    c.n_heads = j.value("n_heads", Index{8});
    c.head_dim = j.value("head_dim", Index{16});
    c.intermediate_size = j.value("intermediate_size", Index{256});
    c.n_layers = j.value("n_layers", Index{2});
    c.vocab_size = j.value("vocab_size", Index{512});
    c.rms_eps = j.value("rms_eps", 0.0);
    c.use_rope = j.value("use_rope", false);
    return c;
}

QuantScheme scheme_from_json_or_name(const json& j) {
    if (j.is_string()) return QuantScheme::named(j.get<std::string>());
    QuantScheme s;
    if (j.contains("name")) s = QuantScheme::named(j.at("name").get<std::string>());
    s.u_act_bits = j.value("u_act_bits", s.u_act_bits);
    s.d_act_bits = j.value("d_act_bits", s.d_act_bits);
    s.weight_bits = j.value("weight_bits", s.weight_bits);
    s.act_clip = j.value("act_clip", s.act_clip);
    if (j.contains("weight_clip_grid"))
        s.weight_clip_grid = j.at("weight_clip_grid").get<std::vector<double>>();
    s.use_gptq = j.value("use_gptq", s.use_gptq);
    s.lowrank_rank = j.value("lowrank_rank", s.lowrank_rank);
    s.validate();
    return s;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path);
    out << text;
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& j) {
    const int version = j.value("schema_version", 1);
    if (version != 1) throw ValidationError("unsupported pipeline schema_version");
    PipelineConfig c;
    const json& m = j.at("model");
    std::string src = m.value("source", "synthetic");
    if (src == "synthetic") {
        c.synthetic_model = true;
        c.model_config = model_config_from_json(m.value("config", json::object()));
        c.synth.seed = m.value("seed", uint64_t{0});
        c.synth.outlier_rank = m.value("outlier_rank", Index{0});
        c.synth.outlier_gain = m.value("outlier_gain", 0.0);
    } else if (src == "file") {
        c.synthetic_model = false;
        c.model_path = m.at("path").get<std::string>();
        if (!fs::exists(c.model_path))
            throw ValidationError("model path not found: " + c.model_path);
    } else {
        throw ValidationError("model source must be synthetic or file");
    }
    c.calib = calib_from_json(j.value("calib", json::object()));
    if (c.calib.source == CalibSpec::Source::token_file && !fs::exists(c.calib.token_path))
        throw ValidationError("calib token path not found: " + c.calib.token_path);
    c.rank = j.value("rank", Index{8});
    c.rotation_seed = j.value("rotation_seed", uint64_t{0});
    c.online = j.value("online_transform", std::string("hadamard")) == "none"
                   ? OnlineTransform::none
                   : OnlineTransform::hadamard;
    c.quantize = j.value("quantize", true);
    if (j.contains("scheme")) c.scheme = scheme_from_json_or_name(j.at("scheme"));
    if (j.contains("tune") && !j.at("tune").is_null()) {
        const json& t = j.at("tune");
        TuneConfig tc;
        tc.steps = t.value("steps", 200);
        tc.lr = t.value("lr", 1e-3);
        tc.seed = t.value("seed", uint64_t{0});
        if (t.contains("targets")) {
            auto targets = t.at("targets").get<std::vector<std::string>>();
            tc.tune_W_r = tc.tune_u_scales = tc.tune_d_scales = false;
            for (const auto& name : targets) {
                if (name == "W_r") tc.tune_W_r = true;
                else if (name == "u_scales") tc.tune_u_scales = true;
                else if (name == "d_scales") tc.tune_d_scales = true;
                else throw ValidationError("unknown tune target: " + name);
            }
        }
        tc.validate();
        c.tune = tc;
    }
    const json& e = j.value("eval", json::object());
    c.eval_seed = e.value("seed", uint64_t{1});
    c.eval_tokens = e.value("n_tokens", Index{512});
    c.out_dir = j.value("out_dir", std::string("quad-out"));
    return c;
}

PipelineConfig PipelineConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open pipeline config: " + path);
    return from_json(json::parse(in));
}

namespace {

TokenIds eval_token_stream(const PipelineConfig& cfg, Index vocab) {
    Rng rng(cfg.eval_seed);
    std::uniform_int_distribution<int32_t> dist(0, static_cast<int32_t>(vocab) - 1);
    TokenIds ids(cfg.eval_tokens);
    for (auto& id : ids) id = dist(rng);
    return ids;
}

// Relative output error of each quantized linear against the fp teacher on
// held-out activations.
std::vector<double> per_layer_errors(const QuantizedModel& qm, const ModelGraph& teacher,
                                     std::span<const int32_t> tokens) {
    CaptureSet cs = forward_capture_all(teacher, tokens);
    std::vector<double> errs;
    for (size_t l = 0; l < qm.layers.size(); ++l) {
        const LayerWeights& tw = teacher.layers[l];
        const QuantLayer& ql = qm.layers[l];
        auto site = [&](const QuadLinear& lin, const Matrix& x, const Matrix& y) {
            Matrix out = quantized_matmul(x, lin, qm.scheme);
            double denom = y.norm();
            errs.push_back(denom == 0.0 ? 0.0 : (out - y).norm() / denom);
        };
        site(ql.W_Q, cs.attn_norm_out[l], cs.attn_norm_out[l] * tw.W_Q);
        site(ql.W_K, cs.attn_norm_out[l], cs.attn_norm_out[l] * tw.W_K);
        site(ql.W_V, cs.attn_norm_out[l], cs.attn_norm_out[l] * tw.W_V);
        site(ql.W_O, cs.pre_wo[l], cs.pre_wo[l] * tw.W_O);
        site(ql.W_up, cs.ffn_norm_out[l], cs.ffn_norm_out[l] * tw.W_up);
        site(ql.W_gate, cs.ffn_norm_out[l], cs.ffn_norm_out[l] * tw.W_gate);
        site(ql.W_down, cs.ffn_act[l], cs.pre_wdown[l] * tw.W_down);
        }
    return errs;
}

struct QuantRun {
    QuantizedModel qm;
    double ppl = 0.0;
    double mean_layer_error = 0.0;
    std::vector<double> layer_errors;
    double outlier_energy = 0.0;
    double equivalence_deviation = 0.0;
};

// Transform + quantize + evaluate one variant; shared by the pipeline and
// the ablation table.
QuantRun run_variant(const ModelGraph& absorbed, const ModelGraph& original,
                     const SingularEstimate& est, Index rank, const PipelineConfig& cfg,
                     const QuantScheme& scheme, const std::vector<TokenIds>& calib_tokens,
                     std::span<const int32_t> eval_ids) {
    ProjectionTransform proj = build_projection(est.U, est.sigma, rank);
    RotationTransform rot = build_rotation(rank, absorbed.config.hidden_size, cfg.rotation_seed);
    TransformOptions opts;
    opts.online = scheme.lowrank_rank > 0 ? OnlineTransform::none : cfg.online;
    ModelGraph transformed = apply_transform(absorbed, proj, rot, opts);

    QuantRun run;
    run.outlier_energy = transformed.transform_meta.outlier_energy_fraction;
    run.equivalence_deviation = rel_max_dev(forward(transformed, eval_ids),
                                            forward(original, eval_ids));
    SiteStats stats = collect_site_stats(transformed, calib_tokens);
    run.qm = quantize_model(transformed, scheme, stats);
    run.ppl = eval_perplexity(run.qm, eval_ids);
    run.layer_errors = per_layer_errors(run.qm, transformed, eval_ids);
    double sum = 0.0;
    for (double e : run.layer_errors) sum += e;
    run.mean_layer_error = run.layer_errors.empty() ? 0.0 : sum / run.layer_errors.size();
    return run;
}

}  // namespace

ReportBundle run_pipeline(const PipelineConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    auto path = [&](const char* name) { return (fs::path(cfg.out_dir) / name).string(); };

    // Stage: model.
    ModelGraph model = cfg.synthetic_model ? synth_model(cfg.model_config, cfg.synth)
                                           : load_model(cfg.model_path);
    save_model(model, path("model_fp.safetensors"));
    model = load_model(path("model_fp.safetensors"));

    std::vector<TokenIds> calib_tokens = calibration_tokens(cfg.calib, cfg.model_config.vocab_size);
    TokenIds eval_ids = eval_token_stream(cfg, model.config.vocab_size);

    // Stage: calibrate.
    GramAccumulator gram = layer_input_gram(model, calib_tokens);
    save_gram(gram, path("gram.safetensors"));
    gram = load_gram(path("gram.safetensors"));
    SingularEstimate est = estimate_singular(gram);

    // Stage: absorb + transform.
    ModelGraph absorbed = absorb_rmsnorm(model);
    ProjectionTransform proj = build_projection(est.U, est.sigma, cfg.rank);
    RotationTransform rot = build_rotation(cfg.rank, model.config.hidden_size, cfg.rotation_seed);
    TransformOptions opts;
    opts.online = cfg.quantize && cfg.scheme.lowrank_rank > 0 ? OnlineTransform::none : cfg.online;
    ModelGraph transformed = apply_transform(absorbed, proj, rot, opts);
    save_model(transformed, path("model_transformed.safetensors"));
    transformed = load_model(path("model_transformed.safetensors"));

    TransformReport trep = equivalence_report(model, transformed, eval_ids);

    json report;
    report["schema_version"] = 1;
    report["rank"] = cfg.rank;
    report["seeds"] = {{"model", cfg.synth.seed},
                       {"calib", cfg.calib.seed},
                       {"rotation", cfg.rotation_seed},
                       {"eval", cfg.eval_seed}};
    report["artifacts"] = {{"model_fp", "model_fp.safetensors"},
                           {"gram", "gram.safetensors"},
                           {"model_transformed", "model_transformed.safetensors"}};
    double max_fusion = 0.0;
    for (double v : trep.per_layer_fusion_residual) max_fusion = std::max(max_fusion, v);
    report["equivalence"] = {{"deviation", trep.equivalence_deviation},
                             {"outlier_energy_fraction", trep.outlier_energy_fraction},
                             {"max_fusion_residual", max_fusion},
                             {"per_layer_fusion_residual", trep.per_layer_fusion_residual}};

    double ppl_fp = eval_perplexity(model, eval_ids);
    double ppl_transformed = eval_perplexity(transformed, eval_ids);
    json ppl = {{"fp", ppl_fp}, {"transformed_fp", ppl_transformed}};

    std::string csv = "variant,ppl,mean_layer_error,outlier_energy\n";
    csv += "fp," + fmt(ppl_fp) + ",0,0\n";
    csv += "transformed_fp," + fmt(ppl_transformed) + ",0," +
           fmt(trep.outlier_energy_fraction) + "\n";

    if (cfg.quantize) {
        // Stage: site stats + quantize.
        SiteStats stats = collect_site_stats(transformed, calib_tokens);
        save_site_stats(stats, path("site_stats.safetensors"));
        stats = load_site_stats(path("site_stats.safetensors"));
        QuantizedModel qm = quantize_model(transformed, cfg.scheme, stats);
        save_quantized(qm, path("model_quantized.safetensors"));
        qm = load_quantized(path("model_quantized.safetensors"));
        report["artifacts"]["model_quantized"] = "model_quantized.safetensors";
        report["artifacts"]["site_stats"] = "site_stats.safetensors";

        double ppl_quad = eval_perplexity(qm, eval_ids);
        auto layer_errs = per_layer_errors(qm, transformed, eval_ids);
        double mean_err = 0.0;
        for (double e : layer_errs) mean_err += e;
        if (!layer_errs.empty()) mean_err /= static_cast<double>(layer_errs.size());
        report["quant"] = {{"per_layer_errors", layer_errs}, {"mean_layer_error", mean_err}};
        ppl["quad"] = ppl_quad;
        csv += "quad," + fmt(ppl_quad) + "," + fmt(mean_err) + "," +
               fmt(trep.outlier_energy_fraction) + "\n";

        // Rotation-only baseline: identical pipeline at rank 0.
        QuantRun rot_only = run_variant(absorbed, model, est, 0, cfg, cfg.scheme, calib_tokens,
                                        eval_ids);
        ppl["rotation_only"] = rot_only.ppl;
        report["rotation_only"] = {{"ppl", rot_only.ppl},
                                   {"mean_layer_error", rot_only.mean_layer_error}};
        csv += "rotation_only," + fmt(rot_only.ppl) + "," + fmt(rot_only.mean_layer_error) +
               ",0\n";

        if (cfg.tune) {
            QuantizedModel tuned = tune_model(qm, transformed, calib_tokens, *cfg.tune);
            save_quantized(tuned, path("model_tuned.safetensors"));
            tuned = load_quantized(path("model_tuned.safetensors"));
            report["artifacts"]["model_tuned"] = "model_tuned.safetensors";
            double ppl_tuned = eval_perplexity(tuned, eval_ids);
            ppl["tuned"] = ppl_tuned;
            auto tuned_errs = per_layer_errors(tuned, transformed, eval_ids);
            double tuned_mean = 0.0;
            for (double e : tuned_errs) tuned_mean += e;
            if (!tuned_errs.empty()) tuned_mean /= static_cast<double>(tuned_errs.size());
            report["tuned"] = {{"mean_layer_error", tuned_mean}};
            csv += "tuned," + fmt(ppl_tuned) + "," + fmt(tuned_mean) + "," +
                   fmt(trep.outlier_energy_fraction) + "\n";
        }
    }
    report["perplexity"] = ppl;

    ReportBundle bundle;
    bundle.report = report;
    bundle.report_path = path("report.json");
    bundle.csv_path = path("report.csv");
    write_text(bundle.report_path, report.dump(2) + "\n");
    write_text(bundle.csv_path, csv);
    return bundle;
}

json ablation(const PipelineConfig& base, const std::vector<std::string>& variants) {
    if (variants.empty()) throw ValidationError("ablation: need at least one variant");
    ModelGraph model = base.synthetic_model ? synth_model(base.model_config, base.synth)
                                            : load_model(base.model_path);
    std::vector<TokenIds> calib_tokens =
        calibration_tokens(base.calib, model.config.vocab_size);
    TokenIds eval_ids = eval_token_stream(base, model.config.vocab_size);
    GramAccumulator gram = layer_input_gram(model, calib_tokens);
    SingularEstimate est = estimate_singular(gram);
    const ModelGraph& original = model;
    ModelGraph absorbed = absorb_rmsnorm(model);

    json rows = json::array();
    for (const std::string& v : variants) {
        std::string name = v;
        Index rank = base.rank;
        if (name.rfind("r", 0) == 0) {
            auto colon = name.find(':');
            if (colon != std::string::npos) {
                rank = static_cast<Index>(std::stoll(name.substr(1, colon - 1)));
                name = name.substr(colon + 1);
            }
        }
        if (name == "fp") {
            rows.push_back({{"variant", v},
                            {"ppl", eval_perplexity(original, eval_ids)},
                            {"mean_layer_error", 0.0},
                            {"outlier_energy", 0.0}});
            continue;
        }
        QuantScheme scheme = QuantScheme::named(name);
        scheme.act_clip = base.scheme.act_clip;
        scheme.weight_clip_grid = base.scheme.weight_clip_grid;
        scheme.use_gptq = base.scheme.use_gptq;
        scheme.lowrank_rank = base.scheme.lowrank_rank;
        QuantRun run = run_variant(absorbed, original, est, rank, base, scheme, calib_tokens,
                                   eval_ids);
        rows.push_back({{"variant", v},
                        {"ppl", run.ppl},
                        {"mean_layer_error", run.mean_layer_error},
                        {"outlier_energy", run.outlier_energy}});
    }
    return rows;
}

}  // namespace quad
