// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "quad/calib.hpp"
#include "quad/error.hpp"
#include "quad/model.hpp"
#include "quad/peft.hpp"
#include "quad/pipeline.hpp"
#include "quad/qmodel.hpp"
#include "quad/serialize.hpp"
#include "quad/transform.hpp"

using json = nlohmann::json;
using namespace quad;

namespace {

// "synthetic:seed=1,n=32,len=256,rank=0,gain=0" or "file:tokens.bin[,n=8,len=64]"
CalibSpec parse_calib_spec(const std::string& text) {
    CalibSpec spec;
    auto colon = text.find(':');
    std::string kind = colon == std::string::npos ? text : text.substr(0, colon);
    std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);
    if (kind == "synthetic") {
        spec.source = CalibSpec::Source::synthetic;
    } else if (kind == "file") {
        spec.source = CalibSpec::Source::token_file;
        auto comma = rest.find(',');
        spec.token_path = rest.substr(0, comma);
        rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
    } else {
        throw ValidationError("calib spec must start with synthetic: or file:");
    }
    std::stringstream ss(rest);
    std::string kv;
    while (std::getline(ss, kv, ',')) {
        if (kv.empty()) continue;
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw ValidationError("bad calib spec field: " + kv);
        std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "seed") spec.seed = std::stoull(val);
        else if (key == "n") spec.n_samples = std::stoll(val);
        else if (key == "len") spec.seq_len = std::stoll(val);
        else if (key == "rank") spec.outlier_rank = std::stoll(val);
        else if (key == "gain") spec.outlier_gain = std::stod(val);
        else throw ValidationError("unknown calib spec key: " + key);
    }
    spec.validate();
    return spec;
}

TokenIds flat_tokens(const std::vector<TokenIds>& batches) {
    TokenIds all;
    for (const auto& b : batches) all.insert(all.end(), b.begin(), b.end());
    return all;
}

int run(int argc, char** argv) {
    CLI::App app{"quad: activation-decomposition 4-bit quantization toolkit"};
    app.require_subcommand(1);

    // synth-model
    auto* synth = app.add_subcommand("synth-model", "generate a seeded synthetic model");
    ModelConfig cfg;
    SynthSpec sspec;
    std::string out_path;
    synth->add_option("--hidden", cfg.hidden_size, "hidden size");
    synth->add_option("--heads", cfg.n_heads, "attention heads");
    synth->add_option("--head-dim", cfg.head_dim, "head dimension");
    synth->add_option("--intermediate", cfg.intermediate_size, "FFN width");
    synth->add_option("--layers", cfg.n_layers, "layer count");
    synth->add_option("--vocab", cfg.vocab_size, "vocabulary size");
    synth->add_option("--eps", cfg.rms_eps, "rms norm epsilon");
    synth->add_flag("--rope", cfg.use_rope, "enable rotary positions");
    synth->add_option("--seed", sspec.seed, "weight seed");
    synth->add_option("--outlier-rank", sspec.outlier_rank, "planted outlier directions");
    synth->add_option("--outlier-gain", sspec.outlier_gain, "outlier magnitude");
    synth->add_option("--out", out_path, "output container")->required();

    // calibrate
    auto* calib = app.add_subcommand("calibrate", "accumulate activation statistics");
    std::string calib_model, calib_spec_text, calib_out;
    bool calib_sites = false, calib_per_layer = false;
    calib->add_option("--model", calib_model, "model container")->required();
    calib->add_option("--calib", calib_spec_text, "calibration spec")->required();
    calib->add_option("--out", calib_out, "output container")->required();
    calib->add_flag("--sites", calib_sites, "collect per-linear site stats (transformed model)");
    calib->add_flag("--per-layer", calib_per_layer, "one gram per layer instead of shared");

    // transform
    auto* trans = app.add_subcommand("transform", "project outliers and rotate");
    std::string t_model, t_gram, t_out, t_online = "hadamard";
    Index t_rank = 8;
    uint64_t t_seed = 0;
    trans->add_option("--model", t_model, "fp model container")->required();
    trans->add_option("--gram", t_gram, "gram container from calibrate")->required();
    trans->add_option("--rank", t_rank, "outlier dimensions r");
    trans->add_option("--seed", t_seed, "rotation sign seed");
    trans->add_option("--online", t_online, "online transform: hadamard|none");
    trans->add_option("--out", t_out, "output container")->required();

    // quantize
    auto* quant = app.add_subcommand("quantize", "quantize a transformed model");
    std::string q_model, q_sites, q_scheme = "w4a4a8", q_out, q_lowrank;
    double q_act_clip = 0.9;
    bool q_no_gptq = false;
    quant->add_option("--model", q_model, "transformed model container")->required();
    quant->add_option("--sites", q_sites, "site stats container")->required();
    quant->add_option("--scheme", q_scheme, "w4a4 | w4a8 | w4a4a8");
    quant->add_option("--act-clip", q_act_clip, "activation clipping ratio");
    quant->add_flag("--no-gptq", q_no_gptq, "use plain RTN for weights");
    quant->add_option("--replace-hadamard", q_lowrank,
                      "lowrank:k  (low-rank branches instead of online Hadamard)");
    quant->add_option("--out", q_out, "output container")->required();

    // tune
    auto* tune = app.add_subcommand("tune", "parameter-efficient tuning of W_r and scales");
    std::string tn_model, tn_teacher, tn_calib, tn_out, tn_targets;
    TuneConfig tn_cfg;
    tune->add_option("--model", tn_model, "quantized model container")->required();
    tune->add_option("--teacher", tn_teacher, "transformed fp model container")->required();
    tune->add_option("--calib", tn_calib, "calibration spec")->required();
    tune->add_option("--steps", tn_cfg.steps, "gradient steps per site");
    tune->add_option("--lr", tn_cfg.lr, "learning rate");
    tune->add_option("--seed", tn_cfg.seed, "tuning seed");
    tune->add_option("--targets", tn_targets, "comma list of W_r,u_scales,d_scales");
    tune->add_option("--out", tn_out, "output container")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "perplexity of a model on a token stream");
    std::string e_model, e_tokens, e_report;
    eval->add_option("--model", e_model, "model or quantized-model container")->required();
    eval->add_option("--tokens", e_tokens, "token spec (synthetic:...|file:...)")->required();
    eval->add_option("--report", e_report, "write a JSON report here");

    // ablate
    auto* abl = app.add_subcommand("ablate", "compare variants side by side");
    std::string a_config, a_variants, a_out;
    abl->add_option("--config", a_config, "pipeline config JSON")->required();
    abl->add_option("--variants", a_variants, "comma list, e.g. fp,r0:w4a4,r8:w4a4")->required();
    abl->add_option("--out", a_out, "output directory")->required();

    // pipeline
    auto* pipe = app.add_subcommand("pipeline", "run the full pipeline from a config file");
    std::string p_config;
    pipe->add_option("--config", p_config, "pipeline config JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (synth->parsed()) {
        ModelGraph m = synth_model(cfg, sspec);
        save_model(m, out_path);
        std::cout << "wrote " << out_path << "\n";
        return 0;
    }
    if (calib->parsed()) {
        ModelGraph m = load_model(calib_model);
        CalibSpec spec = parse_calib_spec(calib_spec_text);
        auto batches = calibration_tokens(spec, m.config.vocab_size);
        if (calib_sites) {
            SiteStats stats = collect_site_stats(m, batches);
            save_site_stats(stats, calib_out);
        } else if (calib_per_layer) {
            auto grams = per_layer_input_grams(m, batches);
            GramAccumulator merged = GramAccumulator::zero(m.residual_dim);
            for (size_t l = 0; l < grams.size(); ++l) {
                save_gram(grams[l], calib_out + ".layer" + std::to_string(l));
                merged = merge(merged, grams[l]);
            }
            save_gram(merged, calib_out);
        } else {
            save_gram(layer_input_gram(m, batches), calib_out);
        }
        std::cout << "wrote " << calib_out << "\n";
        return 0;
    }
    if (trans->parsed()) {
        ModelGraph m = load_model(t_model);
        GramAccumulator gram = load_gram(t_gram);
        SingularEstimate est = estimate_singular(gram);
        ModelGraph absorbed = absorb_rmsnorm(std::move(m));
        ProjectionTransform proj = build_projection(est.U, est.sigma, t_rank);
        RotationTransform rot = build_rotation(t_rank, absorbed.config.hidden_size, t_seed);
        TransformOptions opts;
        if (t_online == "none") opts.online = OnlineTransform::none;
        else if (t_online != "hadamard")
            throw ValidationError("--online must be hadamard or none");
        ModelGraph out = apply_transform(std::move(absorbed), proj, rot, opts);
        save_model(out, t_out);
        std::cout << "wrote " << t_out << " (outlier energy "
                  << out.transform_meta.outlier_energy_fraction << ")\n";
        return 0;
    }
    if (quant->parsed()) {
        ModelGraph m = load_model(q_model);
        SiteStats stats = load_site_stats(q_sites);
        QuantScheme scheme = QuantScheme::named(q_scheme);
        scheme.act_clip = q_act_clip;
        scheme.use_gptq = !q_no_gptq;
        if (!q_lowrank.empty()) {
            if (q_lowrank.rfind("lowrank:", 0) != 0)
                throw ValidationError("--replace-hadamard expects lowrank:k");
            scheme.lowrank_rank = std::stoll(q_lowrank.substr(8));
        }
        QuantizedModel qm = quantize_model(m, scheme, stats);
        save_quantized(qm, q_out);
        std::cout << "wrote " << q_out << "\n";
        return 0;
    }
    if (tune->parsed()) {
        QuantizedModel qm = load_quantized(tn_model);
        ModelGraph teacher = load_model(tn_teacher);
        CalibSpec spec = parse_calib_spec(tn_calib);
        auto batches = calibration_tokens(spec, teacher.config.vocab_size);
        if (!tn_targets.empty()) {
            tn_cfg.tune_W_r = tn_cfg.tune_u_scales = tn_cfg.tune_d_scales = false;
            std::stringstream ss(tn_targets);
            std::string t;
            while (std::getline(ss, t, ',')) {
                if (t == "W_r") tn_cfg.tune_W_r = true;
                else if (t == "u_scales") tn_cfg.tune_u_scales = true;
                else if (t == "d_scales") tn_cfg.tune_d_scales = true;
                else throw ValidationError("unknown tune target: " + t);
            }
        }
        QuantizedModel tuned = tune_model(std::move(qm), teacher, batches, tn_cfg);
        save_quantized(tuned, tn_out);
        std::cout << "wrote " << tn_out << "\n";
        return 0;
    }
    if (eval->parsed()) {
        CalibSpec spec = parse_calib_spec(e_tokens);
        json rep;
        double ppl = 0.0;
        MetadataMap meta;
        read_safetensors(e_model, &meta);
        if (meta.count("kind") && meta["kind"] == "qmodel") {
            QuantizedModel qm = load_quantized(e_model);
            TokenIds ids = flat_tokens(calibration_tokens(spec, qm.config.vocab_size));
            ppl = eval_perplexity(qm, ids);
            rep["model_kind"] = "quantized";
        } else {
            ModelGraph m = load_model(e_model);
            TokenIds ids = flat_tokens(calibration_tokens(spec, m.config.vocab_size));
            ppl = eval_perplexity(m, ids);
            rep["model_kind"] = "fp";
        }
        rep["perplexity"] = ppl;
        std::cout << "perplexity " << ppl << "\n";
        if (!e_report.empty()) {
            std::ofstream f(e_report, std::ios::binary | std::ios::trunc);
            f << rep.dump(2) << "\n";
            if (!f) throw ValidationError("cannot write " + e_report);
        }
        return 0;
    }
    if (abl->parsed()) {
        PipelineConfig base = PipelineConfig::from_file(a_config);
        std::vector<std::string> variants;
        std::stringstream ss(a_variants);
        std::string v;
        while (std::getline(ss, v, ',')) variants.push_back(v);
        json rows = ablation(base, variants);
        std::filesystem::create_directories(a_out);
        std::string jpath = (std::filesystem::path(a_out) / "ablation.json").string();
        std::string cpath = (std::filesystem::path(a_out) / "ablation.csv").string();
        std::ofstream jf(jpath, std::ios::binary | std::ios::trunc);
        jf << rows.dump(2) << "\n";
        std::string csv = "variant,ppl,mean_layer_error,outlier_energy\n";
        char buf[160];
        for (const auto& row : rows) {
            std::snprintf(buf, sizeof buf, "%s,%.12g,%.12g,%.12g\n",
                          row.at("variant").get<std::string>().c_str(),
                          row.at("ppl").get<double>(),
                          row.at("mean_layer_error").get<double>(),
                          row.at("outlier_energy").get<double>());
            csv += buf;
        }
        std::ofstream cf(cpath, std::ios::binary | std::ios::trunc);
        cf << csv;
        std::cout << rows.dump(2) << "\n";
        return 0;
    }
    if (pipe->parsed()) {
        PipelineConfig pcfg = PipelineConfig::from_file(p_config);
        ReportBundle bundle = run_pipeline(pcfg);
        std::cout << "report: " << bundle.report_path << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
