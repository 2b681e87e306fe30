#pragma once

#include <functional>

#include "pluralfill/tape.hpp"

namespace pluralfill {

/// Builds a scalar on `tape` from the leaf `x`.
using ScalarFn = std::function<Var(Tape& tape, Var x)>;

/// Max over coordinates of |analytic - central| / max(1e-8, |central|),
/// where central = (f(x0 + eps e_i) - f(x0 - eps e_i)) / 2eps.
/// Throws NumericError if `fn` is NaN at any probe point.
float check_gradients(const ScalarFn& fn, const Array& x0, float eps);

/// Central-difference gradient alone.
Array numeric_gradient(const ScalarFn& fn, const Array& x0, float eps);

/// Analytic gradient of `fn` at x0.
Array analytic_gradient(const ScalarFn& fn, const Array& x0);

}  // namespace pluralfill
