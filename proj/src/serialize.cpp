// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "quad/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "container code assumes a little-endian host");

namespace quad {

using json = nlohmann::json;

namespace {

const char* dtype_name(DType d) {
    switch (d) {
        case DType::F64: return "F64";
        case DType::F32: return "F32";
        case DType::I8: return "I8";
    }
    throw ValidationError("unknown dtype");
}

DType dtype_from_name(const std::string& s) {
    if (s == "F64") return DType::F64;
    if (s == "F32") return DType::F32;
    if (s == "I8") return DType::I8;
    throw ValidationError("unsupported dtype in container: " + s);
}

size_t dtype_size(DType d) { return d == DType::F64 ? 8 : d == DType::F32 ? 4 : 1; }

uint64_t numel(const std::vector<uint64_t>& shape) {
    uint64_t n = 1;
    for (uint64_t s : shape) n *= s;
    return n;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open file: " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

void spew(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write file: " + path);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw ValidationError("short write: " + path);
}

}  // namespace

NamedTensor NamedTensor::from_matrix(const Matrix& m) {
    NamedTensor t;
    t.dtype = DType::F64;
    t.shape = {static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())};
    t.bytes.assign(reinterpret_cast<const char*>(m.data()), m.size() * sizeof(double));
    return t;
}

NamedTensor NamedTensor::from_matrix_f32(const Matrix& m) {
    NamedTensor t;
    t.dtype = DType::F32;
    t.shape = {static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())};
    t.bytes.resize(m.size() * sizeof(float));
    auto* p = reinterpret_cast<float*>(t.bytes.data());
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) *p++ = static_cast<float>(m(i, j));
    return t;
}

NamedTensor NamedTensor::from_vector(const Vector& v) {
    NamedTensor t;
    t.dtype = DType::F64;
    t.shape = {static_cast<uint64_t>(v.size())};
    t.bytes.assign(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    return t;
}

NamedTensor NamedTensor::from_vector_f32(const Vector& v) {
    NamedTensor t;
    t.dtype = DType::F32;
    t.shape = {static_cast<uint64_t>(v.size())};
    t.bytes.resize(v.size() * sizeof(float));
    auto* p = reinterpret_cast<float*>(t.bytes.data());
    for (Index i = 0; i < v.size(); ++i) *p++ = static_cast<float>(v(i));
    return t;
}

NamedTensor NamedTensor::from_codes(const CodeMatrix& c) {
    NamedTensor t;
    t.dtype = DType::I8;
    t.shape = {static_cast<uint64_t>(c.rows()), static_cast<uint64_t>(c.cols())};
    t.bytes.assign(reinterpret_cast<const char*>(c.data()), c.size());
    return t;
}

Matrix NamedTensor::to_matrix() const {
    if (shape.size() != 2) throw ValidationError("tensor is not rank-2");
    Matrix m(static_cast<Index>(shape[0]), static_cast<Index>(shape[1]));
    if (dtype == DType::F64) {
        std::memcpy(m.data(), bytes.data(), bytes.size());
    } else if (dtype == DType::F32) {
        const auto* p = reinterpret_cast<const float*>(bytes.data());
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<double>(*p++);
    } else {
        throw ValidationError("tensor is not floating point");
    }
    return m;
}

Vector NamedTensor::to_vector() const {
    if (shape.size() != 1) throw ValidationError("tensor is not rank-1");
    Vector v(static_cast<Index>(shape[0]));
    if (dtype == DType::F64) {
        std::memcpy(v.data(), bytes.data(), bytes.size());
    } else if (dtype == DType::F32) {
        const auto* p = reinterpret_cast<const float*>(bytes.data());
        for (Index i = 0; i < v.size(); ++i) v(i) = static_cast<double>(*p++);
    } else {
        throw ValidationError("tensor is not floating point");
    }
    return v;
}

CodeMatrix NamedTensor::to_codes() const {
    if (shape.size() != 2 || dtype != DType::I8)
        throw ValidationError("tensor is not a rank-2 int8 code matrix");
    CodeMatrix c(static_cast<Index>(shape[0]), static_cast<Index>(shape[1]));
    std::memcpy(c.data(), bytes.data(), bytes.size());
    return c;
}

void write_safetensors(const std::string& path, const TensorMap& tensors,
                       const MetadataMap& metadata) {
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t n = numel(t.shape) * dtype_size(t.dtype);
        if (n != t.bytes.size())
            throw ValidationError("tensor byte size inconsistent with shape: " + name);
        header[name] = {{"dtype", dtype_name(t.dtype)},
                        {"shape", t.shape},
                        {"data_offsets", {offset, offset + n}}};
        offset += n;
    }
    if (!metadata.empty()) header["__metadata__"] = metadata;

    std::string head = header.dump();
    std::string out;
    uint64_t head_len = head.size();
    out.append(reinterpret_cast<const char*>(&head_len), 8);
    out += head;
    for (const auto& [name, t] : tensors) out += t.bytes;
    spew(path, out);
}

TensorMap read_safetensors(const std::string& path, MetadataMap* metadata) {
    std::string data = slurp(path);
    if (data.size() < 8) throw ValidationError("container truncated: " + path);
    uint64_t head_len = 0;
    std::memcpy(&head_len, data.data(), 8);
    if (8 + head_len > data.size()) throw ValidationError("container header truncated: " + path);
    json header = json::parse(data.substr(8, head_len));

    TensorMap out;
    const char* payload = data.data() + 8 + head_len;
    const size_t payload_size = data.size() - 8 - head_len;
    for (auto& [name, desc] : header.items()) {
        if (name == "__metadata__") {
            if (metadata)
                for (auto& [k, v] : desc.items()) (*metadata)[k] = v.get<std::string>();
            continue;
        }
        NamedTensor t;
        t.dtype = dtype_from_name(desc.at("dtype").get<std::string>());
        t.shape = desc.at("shape").get<std::vector<uint64_t>>();
        auto offsets = desc.at("data_offsets").get<std::vector<uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > payload_size)
            throw ValidationError("bad data offsets for tensor: " + name);
        if (offsets[1] - offsets[0] != numel(t.shape) * dtype_size(t.dtype))
            throw ValidationError("tensor size mismatch: " + name);
        t.bytes.assign(payload + offsets[0], offsets[1] - offsets[0]);
        out.emplace(name, std::move(t));
    }
    return out;
}

namespace {

json config_to_json(const ModelConfig& c) {
    return {{"hidden_size", c.hidden_size},
            {"n_heads", c.n_heads},
            {"head_dim", c.head_dim},
            {"intermediate_size", c.intermediate_size},
            {"n_layers", c.n_layers},
            {"vocab_size", c.vocab_size},
            {"rms_eps", c.rms_eps},
            {"use_rope", c.use_rope}};
}

ModelConfig config_from_json(const json& j) {
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

const char* state_name(TransformState s) {
    switch (s) {
        case TransformState::none: return "none";
        case TransformState::absorbed: return "absorbed";
        case TransformState::transformed: return "transformed";
    }
    throw ValidationError("unknown transform state");
}

TransformState state_from_name(const std::string& s) {
    if (s == "none") return TransformState::none;
    if (s == "absorbed") return TransformState::absorbed;
    if (s == "transformed") return TransformState::transformed;
    throw ValidationError("unknown transform state: " + s);
}

}  // namespace

void save_model(const ModelGraph& model, const std::string& path) {
    model.validate_shapes();
    TensorMap t;
    t["embedding"] = NamedTensor::from_matrix(model.embedding);
    t["lm_head"] = NamedTensor::from_matrix(model.lm_head);
    t["final_norm"] = NamedTensor::from_vector(model.final_norm);
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const LayerWeights& lw = model.layers[l];
        std::string p = "layers." + std::to_string(l) + ".";
        t[p + "W_Q"] = NamedTensor::from_matrix(lw.W_Q);
        t[p + "W_K"] = NamedTensor::from_matrix(lw.W_K);
        t[p + "W_V"] = NamedTensor::from_matrix(lw.W_V);
        t[p + "W_O"] = NamedTensor::from_matrix(lw.W_O);
        t[p + "W_up"] = NamedTensor::from_matrix(lw.W_up);
        t[p + "W_gate"] = NamedTensor::from_matrix(lw.W_gate);
        t[p + "W_down"] = NamedTensor::from_matrix(lw.W_down);
        t[p + "alpha_attn"] = NamedTensor::from_vector(lw.alpha_attn);
        t[p + "alpha_ffn"] = NamedTensor::from_vector(lw.alpha_ffn);
    }
    write_safetensors(path, t, {{"kind", "model"}});

    json side = {{"schema_version", 1},
                 {"kind", "model"},
                 {"config", config_to_json(model.config)},
                 {"residual_dim", model.residual_dim},
                 {"transform_state", state_name(model.transform_state)},
                 {"outlier_dims", model.outlier_dims},
                 {"online", model.online == OnlineTransform::hadamard ? "hadamard" : "none"},
                 {"norm_bias", model.norm_bias}};
    if (model.transform_state == TransformState::transformed) {
        side["transform_meta"] = {
            {"rank", model.transform_meta.rank},
            {"sign_seed", model.transform_meta.sign_seed},
            {"fusion_residuals", model.transform_meta.fusion_residuals},
            {"outlier_energy_fraction", model.transform_meta.outlier_energy_fraction},
            {"sigma", std::vector<double>(model.transform_meta.sigma.begin(),
                                          model.transform_meta.sigma.end())}};
    }
    spew(path + ".json", side.dump(2) + "\n");
}

ModelGraph load_model(const std::string& path) {
    MetadataMap meta;
    TensorMap t = read_safetensors(path, &meta);
    if (auto it = meta.find("kind"); it != meta.end() && it->second != "model")
        throw ValidationError("container is not a model: " + path);
    json side = json::parse(slurp(path + ".json"));

    ModelGraph m;
    m.config = config_from_json(side.at("config"));
    m.residual_dim = side.at("residual_dim").get<Index>();
    m.transform_state = state_from_name(side.at("transform_state").get<std::string>());
    m.outlier_dims = side.at("outlier_dims").get<Index>();
    m.online = side.at("online").get<std::string>() == "hadamard" ? OnlineTransform::hadamard
                                                                  : OnlineTransform::none;
    m.norm_bias = side.at("norm_bias").get<double>();
    if (side.contains("transform_meta")) {
        const json& tm = side["transform_meta"];
        m.transform_meta.rank = tm.at("rank").get<Index>();
        m.transform_meta.sign_seed = tm.at("sign_seed").get<uint64_t>();
        m.transform_meta.fusion_residuals = tm.at("fusion_residuals").get<std::vector<double>>();
        m.transform_meta.outlier_energy_fraction =
            tm.at("outlier_energy_fraction").get<double>();
        auto sig = tm.at("sigma").get<std::vector<double>>();
        m.transform_meta.sigma = Eigen::Map<const Vector>(sig.data(), sig.size());
    }

    m.embedding = t.at("embedding").to_matrix();
    m.lm_head = t.at("lm_head").to_matrix();
    m.final_norm = t.at("final_norm").to_vector();
    m.layers.resize(m.config.n_layers);
    for (Index l = 0; l < m.config.n_layers; ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& lw = m.layers[l];
        lw.W_Q = t.at(p + "W_Q").to_matrix();
        lw.W_K = t.at(p + "W_K").to_matrix();
        lw.W_V = t.at(p + "W_V").to_matrix();
        lw.W_O = t.at(p + "W_O").to_matrix();
        lw.W_up = t.at(p + "W_up").to_matrix();
        lw.W_gate = t.at(p + "W_gate").to_matrix();
        lw.W_down = t.at(p + "W_down").to_matrix();
        lw.alpha_attn = t.at(p + "alpha_attn").to_vector();
        lw.alpha_ffn = t.at(p + "alpha_ffn").to_vector();
    }
    m.validate_shapes();
    return m;
}

void save_gram(const GramAccumulator& acc, const std::string& path) {
    TensorMap t;
    t["gram"] = NamedTensor::from_matrix(acc.gram);
    write_safetensors(path, t,
                      {{"kind", "gram"}, {"token_count", std::to_string(acc.token_count)}});
}

GramAccumulator load_gram(const std::string& path) {
    MetadataMap meta;
    TensorMap t = read_safetensors(path, &meta);
    if (meta.find("kind") == meta.end() || meta["kind"] != "gram")
        throw ValidationError("container is not a gram accumulator: " + path);
    GramAccumulator acc;
    acc.gram = t.at("gram").to_matrix();
    acc.dim = acc.gram.rows();
    acc.token_count = std::stoull(meta.at("token_count"));
    return acc;
}

void write_token_file(const std::string& path, const std::vector<int32_t>& ids,
                      uint32_t seq_len) {
    std::string out;
    uint32_t magic = kTokenMagic;
    uint32_t count = static_cast<uint32_t>(ids.size());
    out.append(reinterpret_cast<const char*>(&magic), 4);
    out.append(reinterpret_cast<const char*>(&count), 4);
    out.append(reinterpret_cast<const char*>(&seq_len), 4);
    out.append(reinterpret_cast<const char*>(ids.data()), ids.size() * 4);
    spew(path, out);
}

TokenFile read_token_file(const std::string& path) {
    std::string data = slurp(path);
    if (data.size() < 12) throw ValidationError("token file truncated: " + path);
    uint32_t magic = 0, count = 0, seq_len = 0;
    std::memcpy(&magic, data.data(), 4);
    std::memcpy(&count, data.data() + 4, 4);
    std::memcpy(&seq_len, data.data() + 8, 4);
    if (magic != kTokenMagic) throw ValidationError("bad token file magic: " + path);
    if (data.size() != 12 + static_cast<size_t>(count) * 4)
        throw ValidationError("token file size mismatch: " + path);
    TokenFile tf;
    tf.seq_len = seq_len;
    tf.ids.resize(count);
    std::memcpy(tf.ids.data(), data.data() + 12, static_cast<size_t>(count) * 4);
    return tf;
}

}  // namespace quad
