// Copyright 2026 The quad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace quad {

// Bad input: wrong shape, out-of-range argument, invalid state, malformed
// file. Mapped to CLI exit code 2.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure: Cholesky breakdown, negative eigenvalue beyond
// tolerance, diverging optimization. Mapped to CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace quad
