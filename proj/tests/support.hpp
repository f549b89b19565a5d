#pragma once

// Shared test utilities: seeded tensor builders and the central
// finite-difference gradient checker used by the unit and acceptance suites.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "calonet/tensor.hpp"

namespace testsupport {

using calonet::Rng;
using calonet::Shape;
using calonet::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct GradCheckResult {
  bool ok = true;
  double worst = 0.0;
  std::string detail;
};

// Checks d loss / d input for every entry of every tensor in `inputs` against
// central finite differences of `loss_fn` (h = 1e-5, 1e-4 relative tolerance
// with denominator max(|a|,|b|,1e-8)). `loss_fn` must be a pure function of
// the current input values.
//
// `atol` additionally accepts entries with |fd - tape| below it. Central
// differences at h = 1e-5 carry ~5e-12 * |loss| of rounding noise, so true
// gradients in the ~[1e-12, 1e-7] band are unresolvable and the relative
// metric saturates on noise; large multi-parameter checks (the end-to-end
// model) set atol = 1e-9 to accept agreement down to measurement precision.
inline GradCheckResult check_gradients(std::vector<Tensor> inputs,
                                       const std::function<Tensor()>& loss_fn, double tol = 1e-4,
                                       double h = 1e-5, double atol = 0.0) {
  GradCheckResult res;
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    calonet::Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = loss_fn().item();
      t.data()[i] = orig - h;
      const double down = loss_fn().item();
      t.data()[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double tape_grad = t.has_grad() ? t.grad()[i] : 0.0;
      if (std::abs(fd - tape_grad) <= atol) continue;
      const double err = rel_err(fd, tape_grad);
      res.worst = std::max(res.worst, err);
      if (err > tol && res.ok) {
        res.ok = false;
        res.detail = "input " + std::to_string(ti) + " entry " + std::to_string(i) + ": fd=" +
                     std::to_string(fd) + " tape=" + std::to_string(tape_grad);
      }
    }
  }
  return res;
}

}  // namespace testsupport
