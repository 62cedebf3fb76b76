#pragma once

#include <vector>

#include "mwt/gradcheck.h"
#include "mwt/ops.h"
#include "mwt/rng.h"

namespace mwt::testing {

struct GradCase {
  OpKind kind;
  std::vector<Tensor<double>> inputs;
  OpAttrs attrs;
  double tol = 1e-5;
};

inline Tensor<double> randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t{std::move(shape)};
  for (Index i = 0; i < t.numel(); ++i) t.data(i) = rng.normal() * scale;
  return t;
}

inline const std::vector<OpKind>& checkable_kinds() {
  static const std::vector<OpKind> kinds = {
      OpKind::Matmul,       OpKind::Add,       OpKind::Mul,          OpKind::Scale,
      OpKind::Transpose,    OpKind::Reshape,   OpKind::Concat,       OpKind::Slice,
      OpKind::EmbeddingLookup, OpKind::Softmax, OpKind::LayerNorm,   OpKind::Gelu,
      OpKind::Tanh,         OpKind::DropoutApply, OpKind::CrossEntropy,
      OpKind::L2Normalize,  OpKind::Sum,       OpKind::Mean,
  };
  return kinds;
}

/// Random well-conditioned inputs for one op kind.
inline GradCase make_case(OpKind kind, Rng& rng) {
  GradCase c;
  c.kind = kind;
  switch (kind) {
    case OpKind::Matmul:
      c.inputs = {randn({3, 4}, rng), randn({4, 2}, rng)};
      break;
    case OpKind::Add:
    case OpKind::Mul: {
      c.inputs.push_back(randn({3, 4}, rng));
      switch (rng.below(4)) {
        case 0: c.inputs.push_back(randn({3, 4}, rng)); break;
        case 1: c.inputs.push_back(randn(Shape{}, rng)); break;
        case 2: c.inputs.push_back(randn({4}, rng)); break;
        default: c.inputs.push_back(randn({3, 1}, rng)); break;
      }
      break;
    }
    case OpKind::Scale:
      c.inputs = {randn({3, 4}, rng)};
      c.attrs.factor = rng.uniform(-2.0, 2.0);
      break;
    case OpKind::Transpose:
      c.inputs = {randn({3, 4}, rng)};
      break;
    case OpKind::Reshape:
      c.inputs = {randn({3, 4}, rng)};
      c.attrs.new_shape = {2, 6};
      break;
    case OpKind::Concat:
      c.attrs.slice_axis = static_cast<int>(rng.below(2));
      if (c.attrs.slice_axis == 0)
        c.inputs = {randn({2, 3}, rng), randn({1, 3}, rng), randn({2, 3}, rng)};
      else
        c.inputs = {randn({3, 2}, rng), randn({3, 1}, rng)};
      break;
    case OpKind::Slice: {
      c.inputs = {randn({4, 5}, rng)};
      c.attrs.slice_axis = static_cast<int>(rng.below(2));
      Index extent = c.attrs.slice_axis == 0 ? 4 : 5;
      c.attrs.start = rng.range(0, extent - 1);
      c.attrs.len = rng.range(1, extent - c.attrs.start);
      break;
    }
    case OpKind::EmbeddingLookup: {
      c.inputs = {randn({6, 4}, rng)};
      for (int i = 0; i < 5; ++i) c.attrs.ids.push_back(rng.range(0, 5));
      break;
    }
    case OpKind::Softmax:
      c.inputs = {randn({3, 5}, rng, 2.0)};
      c.attrs.axis = static_cast<int>(rng.below(2));
      break;
    case OpKind::LayerNorm:
      c.inputs = {randn({3, 8}, rng), randn({8}, rng), randn({8}, rng)};
      c.attrs.eps = 1e-5;
      break;
    case OpKind::Gelu:
    case OpKind::Tanh:
      c.inputs = {randn({3, 4}, rng)};
      break;
    case OpKind::DropoutApply: {
      c.inputs = {randn({3, 4}, rng)};
      Tensor<double> mask{Shape{3, 4}};
      const double keep = 0.7;
      for (Index i = 0; i < mask.numel(); ++i)
        mask.data(i) = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
      c.inputs.push_back(std::move(mask));
      break;
    }
    case OpKind::CrossEntropy: {
      c.inputs = {randn({4, 8}, rng, 2.0)};
      for (int i = 0; i < 4; ++i) c.attrs.targets.push_back(rng.range(0, 7));
      c.attrs.label_smoothing = rng.below(2) ? 0.1 : 0.0;
      break;
    }
    case OpKind::L2Normalize: {
      Tensor<double> x = randn({3, 6}, rng);
      for (Index r = 0; r < 3; ++r) {
        double norm = x.mat().row(r).norm();
        if (norm < 0.5) x.at(r, 0) += 1.0;
      }
      c.inputs = {std::move(x)};
      break;
    }
    case OpKind::Sum:
    case OpKind::Mean:
      c.inputs = {randn({3, 4}, rng)};
      break;
    case OpKind::Leaf:
      throw TensorError("make_case: leaf is not an op");
  }
  if (kind == OpKind::LayerNorm) c.tol = 1e-5;
  return c;
}

}  // namespace mwt::testing
