// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#include "quad/matrix.hpp"

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

#include "quad/error.hpp"

namespace quad {

Matrix gaussian_matrix(Index rows, Index cols, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
}

Vector gaussian_vector(Index n, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = dist(rng);
    return v;
}

Matrix random_orthonormal(Index rows, Index cols, Rng& rng) {
    if (cols > rows) throw ValidationError("random_orthonormal: cols > rows");
    Matrix g = gaussian_matrix(rows, rows, rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    return q.leftCols(cols);
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

double rel_max_dev(const Matrix& a, const Matrix& ref) {
    if (a.rows() != ref.rows() || a.cols() != ref.cols())
        throw ValidationError("rel_max_dev: shape mismatch");
    if (a.size() == 0) return 0.0;
    double denom = max_abs(ref);
    if (denom == 0.0) denom = 1.0;
    return (a - ref).cwiseAbs().maxCoeff() / denom;
}

void check_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) throw ValidationError(std::string(what) + ": non-finite entries");
}

int max_threads() {
    if (const char* env = std::getenv("QUAD_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(Index n, const std::function<void(Index)>& fn) {
    int workers = std::min<Index>(max_threads(), n);
    if (workers <= 1) {
        for (Index i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (Index i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace quad
