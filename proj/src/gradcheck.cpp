#include "pluralfill/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pluralfill/errors.hpp"

namespace pluralfill {
namespace {

double eval_at(const ScalarFn& fn, const Array& x) {
  Tape tape;
  Var out = fn(tape, tape.constant(x));
  const float v = out.value().item();
  if (std::isnan(v)) throw NumericError("gradient check probe evaluated to NaN");
  return v;
}

}  // namespace

Array analytic_gradient(const ScalarFn& fn, const Array& x0) {
  Tape tape;
  Var x = tape.parameter(x0);
  Var out = fn(tape, x);
  auto grads = backward(tape, out);
  return grads.at(x.id);
}

Array numeric_gradient(const ScalarFn& fn, const Array& x0, float eps) {
  if (!(eps > 0.0f)) throw Error("check_gradients needs eps > 0");
  Array g(x0.shape());
  Array probe = x0;
  for (int64_t i = 0; i < x0.size(); ++i) {
    probe[i] = x0[i] + eps;
    const double up = eval_at(fn, probe);
    probe[i] = x0[i] - eps;
    const double down = eval_at(fn, probe);
    probe[i] = x0[i];
    // Divide by the realized step; x0 +/- eps is itself rounded to f32.
    const double step = static_cast<double>(x0[i] + eps) - static_cast<double>(x0[i] - eps);
    g[i] = static_cast<float>((up - down) / step);
  }
  return g;
}

float check_gradients(const ScalarFn& fn, const Array& x0, float eps) {
  const Array numeric = numeric_gradient(fn, x0, eps);
  const Array analytic = analytic_gradient(fn, x0);
  float worst = 0.0f;
  for (int64_t i = 0; i < x0.size(); ++i) {
    const float denom = std::max(1e-8f, std::abs(numeric[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace pluralfill
