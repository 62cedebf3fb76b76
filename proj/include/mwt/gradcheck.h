#pragma once

#include <functional>
#include <vector>

#include "mwt/ops.h"
#include "mwt/rng.h"

namespace mwt {

/// Max relative error between tape gradients and central finite differences
/// for an arbitrary f64 computation. `fn` must rebuild the computation from
/// the given inputs on every call (inputs are watched when a tape is passed).
/// The output is scalarized with a fixed random weighting so the whole
/// Jacobian is exercised.
inline double grad_check_fn(
    const std::function<Tensor<double>(Tape<double>*, std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, const std::vector<size_t>& diff_slots, double eps,
    std::uint64_t seed = 0x67726164UL) {
  tcheck(eps >= 1e-7 && eps <= 1e-3, "grad_check: eps must be in [1e-7, 1e-3]");
  tcheck(!diff_slots.empty(), "grad_check: no differentiable inputs");

  for (Tensor<double>& t : inputs) t.requires_grad = false;

  // Fixed weighting of the output.
  Tensor<double> y0 = fn(nullptr, inputs);
  Rng rng(seed);
  Tensor<double> w{y0.shape};
  for (Index i = 0; i < w.numel(); ++i) w.data(i) = rng.uniform(-1.0, 1.0);

  auto weighted = [&](std::vector<Tensor<double>>& in) {
    Tensor<double> y = fn(nullptr, in);
    return (y.data * w.data).sum();
  };

  // Analytic gradients.
  Tape<double> tape;
  std::vector<Tensor<double>> tracked = inputs;
  for (size_t s : diff_slots) {
    tracked[s].requires_grad = true;
    tape.watch(tracked[s]);
  }
  Tensor<double> y = fn(&tape, tracked);
  Tensor<double> loss = sum(&tape, mul(&tape, y, w));
  GradMap<double> grads = tape.backward(loss);

  double max_rel = 0.0;
  for (size_t s : diff_slots) {
    const Tensor<double>& analytic = grads.at(tracked[s]);
    for (Index j = 0; j < inputs[s].numel(); ++j) {
      const double saved = inputs[s].data(j);
      inputs[s].data(j) = saved + eps;
      double up = weighted(inputs);
      inputs[s].data(j) = saved - eps;
      double down = weighted(inputs);
      inputs[s].data(j) = saved;

      double fd = (up - down) / (2.0 * eps);
      double a = analytic.data(j);
      double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

namespace detail {

/// Inputs that are differentiable for a given op kind (a dropout mask is a
/// constant by contract).
inline std::vector<size_t> diff_slots_for(OpKind kind, size_t n_inputs) {
  if (kind == OpKind::DropoutApply) return {0};
  std::vector<size_t> all(n_inputs);
  for (size_t i = 0; i < n_inputs; ++i) all[i] = i;
  return all;
}

}  // namespace detail

/// Finite-difference check of a single closed-set op. Errors on an
/// unsupported kind; returns the max relative error over all elements of all
/// differentiable inputs.
inline double grad_check(OpKind kind, std::vector<Tensor<double>> inputs, const OpAttrs& attrs,
                         double eps, std::uint64_t seed = 0x67726164UL) {
  std::vector<size_t> slots = detail::diff_slots_for(kind, inputs.size());
  auto fn = [kind, attrs](Tape<double>* tape, std::vector<Tensor<double>>& in) {
    std::vector<const Tensor<double>*> ptrs;
    ptrs.reserve(in.size());
    for (const Tensor<double>& t : in) ptrs.push_back(&t);
    return apply(tape, kind, ptrs, attrs);
  };
  return grad_check_fn(fn, std::move(inputs), slots, eps, seed);
}

}  // namespace mwt
