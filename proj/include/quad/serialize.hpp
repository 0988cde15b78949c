// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "quad/calib.hpp"
#include "quad/matrix.hpp"
#include "quad/model.hpp"

namespace quad {

// Minimal safetensors container: u64 little-endian header length, JSON
// header mapping tensor names to {dtype, shape, data_offsets}, raw
// little-endian data. Data is laid out in sorted-name order so files are
// byte-deterministic.
enum class DType { F64, F32, I8 };

struct NamedTensor {
    DType dtype = DType::F64;
    std::vector<uint64_t> shape;
    std::string bytes;

    static NamedTensor from_matrix(const Matrix& m);          // F64
    static NamedTensor from_matrix_f32(const Matrix& m);      // F32
    static NamedTensor from_vector(const Vector& v);          // F64
    static NamedTensor from_vector_f32(const Vector& v);      // F32
    static NamedTensor from_codes(const CodeMatrix& c);       // I8

    Matrix to_matrix() const;   // accepts F64 or F32
    Vector to_vector() const;   // rank-1, F64 or F32
    CodeMatrix to_codes() const;
};

using TensorMap = std::map<std::string, NamedTensor>;
using MetadataMap = std::map<std::string, std::string>;

void write_safetensors(const std::string& path, const TensorMap& tensors,
                       const MetadataMap& metadata = {});
TensorMap read_safetensors(const std::string& path, MetadataMap* metadata = nullptr);

// Model container: tensors plus a JSON config sidecar at path + ".json".
void save_model(const ModelGraph& model, const std::string& path);
ModelGraph load_model(const std::string& path);

void save_gram(const GramAccumulator& acc, const std::string& path);
GramAccumulator load_gram(const std::string& path);

// Token stream: little-endian u32 header {magic, count, seq_len} followed by
// count u32 token ids.
struct TokenFile {
    std::vector<int32_t> ids;
    uint32_t seq_len = 0;
};
void write_token_file(const std::string& path, const std::vector<int32_t>& ids,
                      uint32_t seq_len);
TokenFile read_token_file(const std::string& path);

inline constexpr uint32_t kTokenMagic = 0x4B4F5451;  // "QTOK"

}  // namespace quad
