#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "graphyr/autodiff.hpp"

// Central-difference gradient checks shared by the unit and acceptance tests.
//
// A coordinate is skipped when either perturbed evaluation lands on a different
// branch signature than the base point; the comparison runs over the rest.

namespace graphyr::testing {

struct GradCheck {
  double rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double analytic_norm = 0.0;
};

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-10});
  return std::sqrt(diff) / scale;
}

/// Scalar function of tape inputs.
using InputFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline GradCheck check_inputs(const InputFn& f, std::vector<ad::Tensor> inputs, double h = 1e-4) {
  auto run = [&](std::vector<ad::Tensor>& xs, std::vector<ad::Tensor>* grads, std::uint64_t* sig) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (auto& x : xs) vars.push_back(tape.input(x));
    ad::Var out = f(tape, vars);
    if (sig) *sig = tape.branch_signature();
    if (grads) {
      tape.backward(out);
      for (auto& v : vars) grads->push_back(v.grad());
    }
    return out.value().data[0];
  };
  std::vector<ad::Tensor> grads;
  std::uint64_t base_sig = 0;
  run(inputs, &grads, &base_sig);
  GradCheck res;
  std::vector<double> analytic, numeric;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double x0 = inputs[t].data[i];
      std::uint64_t sp = 0, sm = 0;
      inputs[t].data[i] = x0 + h;
      const double fp = run(inputs, nullptr, &sp);
      inputs[t].data[i] = x0 - h;
      const double fm = run(inputs, nullptr, &sm);
      inputs[t].data[i] = x0;
      if (sp != base_sig || sm != base_sig) {
        ++res.skipped;
        continue;
      }
      analytic.push_back(grads[t].data[i]);
      numeric.push_back((fp - fm) / (2.0 * h));
      ++res.checked;
    }
  }
  res.rel_error = relative_error(analytic, numeric);
  for (double g : analytic) res.analytic_norm += g * g;
  res.analytic_norm = std::sqrt(res.analytic_norm);
  return res;
}

/// Scalar function of parameters; `f` must be deterministic (reseed any rng inside).
using ParamFn = std::function<ad::Var(ad::Tape&)>;

inline GradCheck check_params(const ParamFn& f, const std::vector<ad::Parameter*>& params, double h = 1e-4,
                              std::size_t stride = 1) {
  auto run = [&](bool grads, std::uint64_t* sig) {
    ad::Tape tape;
    ad::Var out = f(tape);
    if (sig) *sig = tape.branch_signature();
    if (grads) {
      for (auto* p : params) p->zero_grad();
      tape.backward(out);
    }
    return out.value().data[0];
  };
  std::uint64_t base_sig = 0;
  run(true, &base_sig);
  std::vector<ad::Tensor> base_grads;
  for (auto* p : params) base_grads.push_back(p->grad);
  GradCheck res;
  std::vector<double> analytic, numeric;
  std::size_t counter = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& val = params[t]->value.data;
    for (std::size_t i = 0; i < val.size(); ++i) {
      if (counter++ % stride != 0) continue;
      const double x0 = val[i];
      std::uint64_t sp = 0, sm = 0;
      val[i] = x0 + h;
      const double fp = run(false, &sp);
      val[i] = x0 - h;
      const double fm = run(false, &sm);
      val[i] = x0;
      if (sp != base_sig || sm != base_sig) {
        ++res.skipped;
        continue;
      }
      analytic.push_back(base_grads[t].data[i]);
      numeric.push_back((fp - fm) / (2.0 * h));
      ++res.checked;
    }
  }
  res.rel_error = relative_error(analytic, numeric);
  for (double g : analytic) res.analytic_norm += g * g;
  res.analytic_norm = std::sqrt(res.analytic_norm);
  return res;
}

} // namespace graphyr::testing
