// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <random>

#include <Eigen/Dense>

namespace quad {

// Row-major fp64 everywhere in the transform pipeline; quantized code
// matrices use int8 storage regardless of bit width.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using CodeMatrix = Eigen::Matrix<int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

inline bool is_pow2(Index n) { return n > 0 && (n & (n - 1)) == 0; }

Matrix gaussian_matrix(Index rows, Index cols, Rng& rng, double stddev = 1.0);
Vector gaussian_vector(Index n, Rng& rng, double stddev = 1.0);

// Orthonormal columns via Householder QR of a Gaussian draw.
Matrix random_orthonormal(Index rows, Index cols, Rng& rng);

double max_abs(const Matrix& m);

// max|a - ref| scaled by max|ref|; zero for empty inputs.
double rel_max_dev(const Matrix& a, const Matrix& ref);

void check_finite(const Matrix& m, const char* what);

// Number of worker threads: QUAD_THREADS if set, hardware concurrency
// otherwise, never less than 1.
int max_threads();

// Static index split over max_threads() workers; fn(i) must only touch
// slot i of its output.
void parallel_for(Index n, const std::function<void(Index)>& fn);

}  // namespace quad
