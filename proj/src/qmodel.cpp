// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/qmodel.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "quad/error.hpp"
#include "quad/hadamard.hpp"
#include "quad/serialize.hpp"

namespace quad {

using json = nlohmann::json;
using Int32Matrix = Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void QuantScheme::validate() const {
    auto ok_bits = [](int b) { return b == 4 || b == 8 || b == 16; };
    if (!ok_bits(u_act_bits) || !ok_bits(d_act_bits) || !ok_bits(weight_bits))
        throw ValidationError("scheme: bits must be 4, 8 or 16");
    if (!(act_clip > 0.0 && act_clip <= 1.0))
        throw ValidationError("scheme: act_clip must be in (0, 1]");
    if (weight_clip_grid.empty()) throw ValidationError("scheme: empty weight clip grid");
    for (double g : weight_clip_grid)
        if (!(g > 0.0 && g <= 1.0)) throw ValidationError("scheme: clip grid values in (0, 1]");
    if (kv_bits != 16) throw ValidationError("scheme: KV path is full precision only");
    if (lowrank_rank < 0) throw ValidationError("scheme: negative lowrank rank");
}

QuantScheme QuantScheme::named(const std::string& name) {
    QuantScheme s;
    if (name == "w4a4") {
        s.u_act_bits = 4;
        s.d_act_bits = 4;
    } else if (name == "w4a8") {
        s.u_act_bits = 8;
        s.d_act_bits = 8;
    } else if (name == "w4a4a8") {
        s.u_act_bits = 4;
        s.d_act_bits = 8;
    } else {
        throw ValidationError("unknown scheme name: " + name + " (w4a4|w4a8|w4a4a8)");
    }
    return s;
}

Matrix QuadLinear::body_matrix() const {
    if (fp_body.size() > 0) return fp_body;
    return dequantize(body).transpose();
}

namespace {

// Integer-code product with exact int32 accumulation; safe for widths up to
// ~100k at 8 bits (127*127*w < 2^31).
Matrix body_matmul(const Matrix& xh, const QuadLinear& layer, int act_bits, double act_clip) {
    if (layer.fp_body.size() > 0) {
        Matrix qx = act_bits == 16 ? xh : dequantize(rtn_quantize_rows(xh, act_bits, act_clip));
        return qx * layer.fp_body;
    }
    if (act_bits == 16) return xh * layer.body_matrix();
    QuantizedTensor qa = rtn_quantize_rows(xh, act_bits, act_clip);
    Int32Matrix prod =
        qa.codes.cast<int32_t>() * layer.body.codes.cast<int32_t>().transpose();
    Matrix out = prod.cast<double>();
    for (Index i = 0; i < out.rows(); ++i) out.row(i) *= qa.scales(i);
    for (Index j = 0; j < out.cols(); ++j) out.col(j) *= layer.body.scales(j);
    return out;
}

}  // namespace

Matrix quantized_body_part(const Matrix& x_in, const QuadLinear& layer,
                           const QuantScheme& scheme) {
    const int act_bits = layer.u_type ? scheme.u_act_bits : scheme.d_act_bits;
    if (layer.branch) {
        const LowRankBranch& b = *layer.branch;
        if (x_in.cols() != b.s.size())
            throw ValidationError("quantized_matmul: width mismatch");
        Matrix xs = x_in * b.s.cwiseInverse().asDiagonal();
        return body_matmul(xs, layer, act_bits, scheme.act_clip);
    }
    Matrix x = x_in;
    if (layer.online_hadamard) walsh_hadamard_rows(x);
    const Index r = layer.W_r.rows();
    if (x.cols() != r + layer.in_features)
        throw ValidationError("quantized_matmul: input width != r + body width");
    return body_matmul(x.rightCols(layer.in_features), layer, act_bits, scheme.act_clip);
}

Matrix quantized_matmul(const Matrix& x_in, const QuadLinear& layer, const QuantScheme& scheme) {
    scheme.validate();
    Matrix out = quantized_body_part(x_in, layer, scheme);
    if (layer.branch) {
        const LowRankBranch& b = *layer.branch;
        Matrix xs = x_in * b.s.cwiseInverse().asDiagonal();
        out.noalias() += (xs * b.L) * b.R;
        return out;
    }
    const Index r = layer.W_r.rows();
    if (r > 0) out.noalias() += x_in.leftCols(r) * layer.W_r;
    return out;
}

SiteStats collect_site_stats(const ModelGraph& model, const std::vector<TokenIds>& batches) {
    if (model.transform_state != TransformState::transformed)
        throw ValidationError("collect_site_stats: model must be transformed");
    SiteStats st;
    auto init = [&](std::vector<SiteStats::Site>& v, Index dim) {
        v.assign(model.layers.size(), {GramAccumulator::zero(dim), Vector::Zero(dim)});
    };
    init(st.attn_in, model.residual_dim);
    init(st.ffn_in, model.residual_dim);
    init(st.pre_wo, model.config.hidden_size);
    init(st.pre_wdown, model.config.intermediate_size);
    init(st.ffn_act, model.config.intermediate_size);

    auto feed = [](SiteStats::Site& site, const Matrix& x) {
        accumulate(site.gram, x);
        site.channel_max =
            site.channel_max.cwiseMax(x.cwiseAbs().colwise().maxCoeff().transpose());
    };
    for (const TokenIds& ids : batches) {
        CaptureSet cs = forward_capture_all(model, ids);
        for (size_t l = 0; l < model.layers.size(); ++l) {
            feed(st.attn_in[l], cs.attn_norm_out[l]);
            feed(st.ffn_in[l], cs.ffn_norm_out[l]);
            feed(st.pre_wo[l], cs.pre_wo[l]);
            feed(st.pre_wdown[l], cs.pre_wdown[l]);
            feed(st.ffn_act[l], cs.ffn_act[l]);
        }
    }
    return st;
}

namespace {

QuantizedTensor quantize_body(const Matrix& w, const Matrix& gram, const QuantScheme& scheme) {
    double ratio = clip_search(w, scheme.weight_clip_grid, &gram, scheme.weight_bits);
    if (scheme.use_gptq) return gptq_quantize(w, gram, scheme.weight_bits, ratio);
    return rtn_quantize_rows(w.transpose(), scheme.weight_bits, ratio);
}

// U-type layer: first r input dims stay full precision as W_r.
QuadLinear make_u_linear(const Matrix& w, Index r, const SiteStats::Site& site,
                         const QuantScheme& scheme) {
    QuadLinear l;
    l.u_type = true;
    l.in_features = w.rows() - r;
    l.out_features = w.cols();
    l.W_r = w.topRows(r);
    Matrix body = w.bottomRows(l.in_features);
    if (scheme.weight_bits == 16) {
        l.fp_body = body;
    } else {
        Matrix g = site.gram.gram.bottomRightCorner(l.in_features, l.in_features);
        l.body = quantize_body(body, g, scheme);
    }
    return l;
}

QuadLinear make_d_linear(const Matrix& w, const SiteStats::Site& site, const QuantScheme& scheme,
                         bool online_hadamard) {
    QuadLinear l;
    l.u_type = false;
    l.in_features = w.rows();
    l.out_features = w.cols();
    l.online_hadamard = online_hadamard;
    if (scheme.weight_bits == 16) {
        l.fp_body = w;
    } else {
        l.body = quantize_body(w, site.gram.gram, scheme);
    }
    return l;
}

// D-type site with the online Hadamard replaced by a smoothing + low-rank
// branch; the body holds the quantized residual of the smoothed weight.
QuadLinear make_branch_linear(const Matrix& w, const SiteStats::Site& site,
                              const QuantScheme& scheme) {
    QuadLinear l;
    l.u_type = false;
    l.in_features = w.rows();
    l.out_features = w.cols();
    l.branch = build_lowrank_branch_from_max(w, site.channel_max, scheme.lowrank_rank);
    if (scheme.weight_bits == 16) {
        l.fp_body = l.branch->W_prime;
    } else {
        Vector sinv = l.branch->s.cwiseInverse();
        Matrix g = sinv.asDiagonal() * site.gram.gram * sinv.asDiagonal();
        l.body = quantize_body(l.branch->W_prime, g, scheme);
    }
    return l;
}

}  // namespace

QuantizedModel quantize_model(const ModelGraph& model, const QuantScheme& scheme,
                              const SiteStats& stats) {
    scheme.validate();
    if (model.transform_state != TransformState::transformed)
        throw ValidationError("quantize_model: model must be transformed");
    if (stats.attn_in.size() != model.layers.size())
        throw ValidationError("quantize_model: site stats layer count mismatch");
    const bool branches = scheme.lowrank_rank > 0;
    if (branches && model.online == OnlineTransform::hadamard)
        throw ValidationError(
            "quantize_model: low-rank branches need a model transformed without the online "
            "Hadamard (transform with online=none)");

    QuantizedModel qm;
    qm.config = model.config;
    qm.embedding = model.embedding;
    qm.lm_head = model.lm_head;
    qm.residual_dim = model.residual_dim;
    qm.outlier_dims = model.outlier_dims;
    qm.norm_bias = model.norm_bias;
    qm.scheme = scheme;
    qm.layers.resize(model.layers.size());

    const Index r = model.outlier_dims;
    const bool online_h = model.online == OnlineTransform::hadamard;
    parallel_for(static_cast<Index>(model.layers.size()), [&](Index l) {
        const LayerWeights& lw = model.layers[l];
        QuantLayer& ql = qm.layers[l];
        ql.W_Q = make_u_linear(lw.W_Q, r, stats.attn_in[l], scheme);
        ql.W_K = make_u_linear(lw.W_K, r, stats.attn_in[l], scheme);
        ql.W_V = make_u_linear(lw.W_V, r, stats.attn_in[l], scheme);
        ql.W_up = make_u_linear(lw.W_up, r, stats.ffn_in[l], scheme);
        ql.W_gate = make_u_linear(lw.W_gate, r, stats.ffn_in[l], scheme);
        if (branches) {
            ql.W_O = make_branch_linear(lw.W_O, stats.pre_wo[l], scheme);
            ql.W_down = make_branch_linear(lw.W_down, stats.ffn_act[l], scheme);
        } else {
            ql.W_O = make_d_linear(lw.W_O, stats.pre_wo[l], scheme, false);
            ql.W_down = make_d_linear(lw.W_down, stats.pre_wdown[l], scheme, online_h);
        }
    });
    return qm;
}

namespace {

Matrix qnorm_rows(const QuantizedModel& m, const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i)
        out.row(i) = x.row(i) / std::sqrt(x.row(i).squaredNorm() + m.norm_bias);
    return out;
}

void apply_rope_q(Matrix& qk, Index head_dim) {
    for (Index pos = 0; pos < qk.rows(); ++pos) {
        for (Index b = 0; b < qk.cols(); b += head_dim) {
            for (Index d = 0; d + 1 < head_dim; d += 2) {
                double theta = std::pow(10000.0, -static_cast<double>(d) / head_dim);
                double c = std::cos(pos * theta), s = std::sin(pos * theta);
                double x0 = qk(pos, b + d), x1 = qk(pos, b + d + 1);
                qk(pos, b + d) = x0 * c - x1 * s;
                qk(pos, b + d + 1) = x0 * s + x1 * c;
            }
        }
    }
}

}  // namespace

Matrix qforward(const QuantizedModel& m, std::span<const int32_t> tokens) {
    const Index b = static_cast<Index>(tokens.size());
    for (int32_t t : tokens)
        if (t < 0 || t >= m.config.vocab_size)
            throw ValidationError("qforward: token id out of range");
    Matrix x(b, m.residual_dim);
    for (Index i = 0; i < b; ++i) x.row(i) = m.embedding.row(tokens[i]);

    const Index hd = m.config.head_dim;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    for (const QuantLayer& ql : m.layers) {
        Matrix a = qnorm_rows(m, x);
        Matrix q = quantized_matmul(a, ql.W_Q, m.scheme);
        Matrix k = quantized_matmul(a, ql.W_K, m.scheme);
        Matrix v = quantized_matmul(a, ql.W_V, m.scheme);
        if (m.config.use_rope) {
            apply_rope_q(q, hd);
            apply_rope_q(k, hd);
        }
        // Attention combine and KV path stay full precision.
        Matrix z(b, m.config.hidden_size);
        for (Index h = 0; h < m.config.n_heads; ++h) {
            Matrix scores = q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose() *
                            inv_sqrt_hd;
            for (Index i = 0; i < b; ++i) {
                auto row = scores.row(i).head(i + 1);
                double mx = row.maxCoeff();
                Eigen::RowVectorXd e = (row.array() - mx).exp();
                scores.row(i).head(i + 1) = e / e.sum();
                scores.row(i).tail(b - i - 1).setZero();
            }
            z.middleCols(h * hd, hd) = scores * v.middleCols(h * hd, hd);
        }
        x += quantized_matmul(z, ql.W_O, m.scheme);

        Matrix f = qnorm_rows(m, x);
        Matrix up = quantized_matmul(f, ql.W_up, m.scheme);
        Matrix gate = quantized_matmul(f, ql.W_gate, m.scheme);
        Matrix s =
            gate.unaryExpr([](double v2) { return v2 / (1.0 + std::exp(-v2)); }).cwiseProduct(up);
        x += quantized_matmul(s, ql.W_down, m.scheme);
    }
    Matrix xn = qnorm_rows(m, x);
    return xn * m.lm_head;
}

double eval_perplexity(const QuantizedModel& model, std::span<const int32_t> tokens) {
    return perplexity_from_logits(qforward(model, tokens), tokens);
}

namespace {

void put_linear(TensorMap& t, const std::string& p, const QuadLinear& l) {
    if (l.fp_body.size() > 0) {
        t[p + ".fp_body"] = NamedTensor::from_matrix(l.fp_body);
    } else {
        t[p + ".codes"] = NamedTensor::from_codes(l.body.codes);
        t[p + ".scales"] = NamedTensor::from_vector_f32(l.body.scales);
    }
    if (l.W_r.rows() > 0) t[p + ".W_r"] = NamedTensor::from_matrix_f32(l.W_r);
    if (l.branch) {
        t[p + ".branch.s"] = NamedTensor::from_vector_f32(l.branch->s);
        t[p + ".branch.L"] = NamedTensor::from_matrix_f32(l.branch->L);
        t[p + ".branch.R"] = NamedTensor::from_matrix_f32(l.branch->R);
        t[p + ".branch.W_prime"] = NamedTensor::from_matrix_f32(l.branch->W_prime);
    }
}

json linear_meta(const QuadLinear& l, int bits) {
    return {{"u_type", l.u_type},
            {"in_features", l.in_features},
            {"out_features", l.out_features},
            {"online_hadamard", l.online_hadamard},
            {"bits", bits},
            {"has_branch", l.branch.has_value()},
            {"r", l.W_r.rows()}};
}

QuadLinear get_linear(const TensorMap& t, const std::string& p, const json& meta) {
    QuadLinear l;
    l.u_type = meta.at("u_type").get<bool>();
    l.in_features = meta.at("in_features").get<Index>();
    l.out_features = meta.at("out_features").get<Index>();
    l.online_hadamard = meta.at("online_hadamard").get<bool>();
    if (t.count(p + ".fp_body")) {
        l.fp_body = t.at(p + ".fp_body").to_matrix();
    } else {
        l.body.codes = t.at(p + ".codes").to_codes();
        l.body.scales = t.at(p + ".scales").to_vector();
        l.body.bits = meta.at("bits").get<int>();
    }
    if (meta.at("r").get<Index>() > 0) l.W_r = t.at(p + ".W_r").to_matrix();
    if (meta.at("has_branch").get<bool>()) {
        LowRankBranch b;
        b.s = t.at(p + ".branch.s").to_vector();
        b.L = t.at(p + ".branch.L").to_matrix();
        b.R = t.at(p + ".branch.R").to_matrix();
        b.W_prime = t.at(p + ".branch.W_prime").to_matrix();
        b.rank = b.L.cols();
        l.branch = std::move(b);
    }
    return l;
}

json scheme_to_json(const QuantScheme& s) {
    return {{"u_act_bits", s.u_act_bits},
            {"d_act_bits", s.d_act_bits},
            {"weight_bits", s.weight_bits},
            {"act_clip", s.act_clip},
            {"weight_clip_grid", s.weight_clip_grid},
            {"kv_bits", s.kv_bits},
            {"use_gptq", s.use_gptq},
            {"lowrank_rank", s.lowrank_rank}};
}

QuantScheme scheme_from_json(const json& j) {
    QuantScheme s;
    s.u_act_bits = j.at("u_act_bits").get<int>();
    s.d_act_bits = j.at("d_act_bits").get<int>();
    s.weight_bits = j.at("weight_bits").get<int>();
    s.act_clip = j.at("act_clip").get<double>();
    s.weight_clip_grid = j.at("weight_clip_grid").get<std::vector<double>>();
    s.kv_bits = j.at("kv_bits").get<int>();
    s.use_gptq = j.at("use_gptq").get<bool>();
    s.lowrank_rank = j.at("lowrank_rank").get<Index>();
    return s;
}

const char* kLinearNames[] = {"W_Q", "W_K", "W_V", "W_O", "W_up", "W_gate", "W_down"};

QuadLinear QuantLayer::* linear_field(const std::string& name) {
    if (name == "W_Q") return &QuantLayer::W_Q;
    if (name == "W_K") return &QuantLayer::W_K;
    if (name == "W_V") return &QuantLayer::W_V;
    if (name == "W_O") return &QuantLayer::W_O;
    if (name == "W_up") return &QuantLayer::W_up;
    if (name == "W_gate") return &QuantLayer::W_gate;
    if (name == "W_down") return &QuantLayer::W_down;
    throw ValidationError("unknown linear name: " + name);
}

json config_json(const ModelConfig& c) {
    return {{"hidden_size", c.hidden_size},       {"n_heads", c.n_heads},
            {"head_dim", c.head_dim},             {"intermediate_size", c.intermediate_size},
            {"n_layers", c.n_layers},             {"vocab_size", c.vocab_size},
            {"rms_eps", c.rms_eps},               {"use_rope", c.use_rope}};
}

ModelConfig config_unjson(const json& j) {
    ModelConfig c;
    c.hidden_size = j.at("hidden_size").get<Index>();
    c.n_heads = j.at("n_heads").get<Index>();
    c.head_dim = j.at("head_dim").get<Index>();
    c.intermediate_size = j.at("intermediate_size").get<Index>();
    c.n_layers = j.at("n_layers").get<Index>();
    c.vocab_size = j.at("vocab_size").get<Index>();
    c.rms_eps = j.at("rms_eps").get<double>();
    c.use_rope = j.value("use_rope", false);
    return c;
}

}  // namespace

void save_quantized(const QuantizedModel& m, const std::string& path) {
    TensorMap t;
    t["embedding"] = NamedTensor::from_matrix(m.embedding);
    t["lm_head"] = NamedTensor::from_matrix(m.lm_head);
    json layers_meta = json::array();
    for (size_t l = 0; l < m.layers.size(); ++l) {
        json lm = json::object();
        for (const char* name : kLinearNames) {
            const QuadLinear& ql = m.layers[l].*linear_field(name);
            std::string p = "layers." + std::to_string(l) + "." + name;
            put_linear(t, p, ql);
            lm[name] = linear_meta(ql, m.scheme.weight_bits);
        }
        layers_meta.push_back(lm);
    }
    json side = {{"schema_version", 1},
                 {"kind", "qmodel"},
                 {"config", config_json(m.config)},
                 {"residual_dim", m.residual_dim},
                 {"outlier_dims", m.outlier_dims},
                 {"norm_bias", m.norm_bias},
                 {"scheme", scheme_to_json(m.scheme)},
                 {"layers", layers_meta}};
    write_safetensors(path, t, {{"kind", "qmodel"}});
    std::ofstream out(path + ".json", std::ios::binary | std::ios::trunc);
    out << side.dump(2) << "\n";
    if (!out) throw ValidationError("cannot write sidecar: " + path + ".json");
}

QuantizedModel load_quantized(const std::string& path) {
    MetadataMap meta;
    TensorMap t = read_safetensors(path, &meta);
    if (meta.count("kind") == 0 || meta["kind"] != "qmodel")
        throw ValidationError("container is not a quantized model: " + path);
    std::ifstream in(path + ".json", std::ios::binary);
    if (!in) throw ValidationError("missing sidecar: " + path + ".json");
    json side = json::parse(in);

    QuantizedModel m;
    m.config = config_unjson(side.at("config"));
    m.residual_dim = side.at("residual_dim").get<Index>();
    m.outlier_dims = side.at("outlier_dims").get<Index>();
    m.norm_bias = side.at("norm_bias").get<double>();
    m.scheme = scheme_from_json(side.at("scheme"));
    m.embedding = t.at("embedding").to_matrix();
    m.lm_head = t.at("lm_head").to_matrix();
    const json& layers_meta = side.at("layers");
    m.layers.resize(layers_meta.size());
    for (size_t l = 0; l < m.layers.size(); ++l) {
        for (const char* name : kLinearNames) {
            std::string p = "layers." + std::to_string(l) + "." + name;
            m.layers[l].*linear_field(name) = get_linear(t, p, layers_meta[l].at(name));
        }
    }
    return m;
}

void save_site_stats(const SiteStats& st, const std::string& path) {
    TensorMap t;
    auto put = [&](const char* site, const std::vector<SiteStats::Site>& v) {
        for (size_t l = 0; l < v.size(); ++l) {
            std::string p = "layers." + std::to_string(l) + "." + site;
            t[p + ".gram"] = NamedTensor::from_matrix(v[l].gram.gram);
            t[p + ".channel_max"] = NamedTensor::from_vector(v[l].channel_max);
        }
    };
    put("attn_in", st.attn_in);
    put("ffn_in", st.ffn_in);
    put("pre_wo", st.pre_wo);
    put("pre_wdown", st.pre_wdown);
    put("ffn_act", st.ffn_act);
    write_safetensors(path, t,
                      {{"kind", "site_stats"},
                       {"n_layers", std::to_string(st.attn_in.size())},
                       {"token_count", std::to_string(st.attn_in.empty()
                                                          ? 0
                                                          : st.attn_in[0].gram.token_count)}});
}

SiteStats load_site_stats(const std::string& path) {
    MetadataMap meta;
    TensorMap t = read_safetensors(path, &meta);
    if (meta.count("kind") == 0 || meta["kind"] != "site_stats")
        throw ValidationError("container is not site stats: " + path);
    const size_t n_layers = std::stoul(meta.at("n_layers"));
    const uint64_t tokens = std::stoull(meta.at("token_count"));
    SiteStats st;
    auto get = [&](const char* site, std::vector<SiteStats::Site>& v) {
        v.resize(n_layers);
        for (size_t l = 0; l < n_layers; ++l) {
            std::string p = "layers." + std::to_string(l) + "." + site;
            v[l].gram.gram = t.at(p + ".gram").to_matrix();
            v[l].gram.dim = v[l].gram.gram.rows();
            v[l].gram.token_count = tokens;
            v[l].channel_max = t.at(p + ".channel_max").to_vector();
        }
    };
    get("attn_in", st.attn_in);
    get("ffn_in", st.ffn_in);
    get("pre_wo", st.pre_wo);
    get("pre_wdown", st.pre_wdown);
    get("ffn_act", st.ffn_act);
    return st;
}

}  // namespace quad
