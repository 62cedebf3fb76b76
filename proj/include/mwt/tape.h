#pragma once

#include <atomic>
#include <functional>
#include <unordered_map>
#include <utility>

#include "mwt/tensor.h"

namespace mwt {

/// Closed set of recordable operations. Every kind has an individually
/// grad-checked backward rule (see ops.h / grad_check).
enum class OpKind : std::uint8_t {
  Matmul,
  Add,
  Mul,
  Scale,
  Transpose,
  Reshape,
  Concat,
  Slice,
  EmbeddingLookup,
  Softmax,
  LayerNorm,
  Gelu,
  Tanh,
  DropoutApply,
  CrossEntropy,
  L2Normalize,
  Sum,
  Mean,
  Leaf,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::EmbeddingLookup: return "embedding-lookup";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer-norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Tanh: return "tanh";
    case OpKind::DropoutApply: return "dropout-mask-apply";
    case OpKind::CrossEntropy: return "cross-entropy-from-logits";
    case OpKind::L2Normalize: return "l2-normalize";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Leaf: return "leaf";
  }
  return "?";
}

template <typename S>
class Tape;

/// Gradients of watched leaves, keyed by tape node. Leaves that do not
/// require grad are absent.
template <typename S>
class GradMap {
 public:
  GradMap() = default;
  GradMap(std::uint64_t uid, std::unordered_map<Index, Tensor<S>> grads)
      : uid_(uid), grads_(std::move(grads)) {}

  bool contains(const Tensor<S>& t) const {
    return t.tape_uid == uid_ && grads_.count(t.node) > 0;
  }
  const Tensor<S>& at(const Tensor<S>& t) const {
    tcheck(t.tape_uid == uid_, "gradient map: tensor belongs to a different tape");
    auto it = grads_.find(t.node);
    tcheck(it != grads_.end(), "gradient map: no gradient recorded for this tensor");
    return it->second;
  }
  size_t size() const { return grads_.size(); }

 private:
  std::uint64_t uid_ = 0;
  std::unordered_map<Index, Tensor<S>> grads_;
};

/// Reverse-mode tape. Single-threaded: record and backward on one logical
/// thread; consumed by at most one backward pass.
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const VecX<S>&)>;

  Tape() : uid_(next_uid()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t uid() const { return uid_; }
  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Registers a leaf. Idempotent for a tensor already watched here.
  Index watch(Tensor<S>& t) {
    tcheck(t.requires_grad, "tape: watch requires a requires_grad tensor");
    if (t.tape_uid == uid_ && t.node >= 0) return t.node;
    Node n;
    n.kind = OpKind::Leaf;
    n.shape = t.shape;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    t.tape_uid = uid_;
    t.node = static_cast<Index>(nodes_.size()) - 1;
    return t.node;
  }

  bool tracked(const Tensor<S>& t) const { return t.tape_uid == uid_ && t.node >= 0; }

  Index record(OpKind kind, std::vector<Index> inputs, const Shape& out_shape, BackwardFn back) {
    tcheck(!consumed_, "tape: cannot record on a consumed tape");
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.shape = out_shape;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Index>(nodes_.size()) - 1;
  }

  /// Accumulates a gradient contribution into a node (used by backward rules).
  void accum(Index node, VecX<S> g) {
    VecX<S>& slot = grads_[static_cast<size_t>(node)];
    if (slot.size() == 0) {
      slot = std::move(g);
    } else {
      slot += g;
    }
  }

  /// Runs the chain rule in exact reverse recording order from `loss`.
  /// Every watched requires_grad leaf receives a gradient (zero if unused).
  GradMap<S> backward(const Tensor<S>& loss) {
    tcheck(!consumed_, "backward: tape already consumed");
    tcheck(tracked(loss), "backward: loss is not recorded on this tape");
    tcheck(loss.numel() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape));
    consumed_ = true;

    grads_.assign(nodes_.size(), VecX<S>{});
    grads_[static_cast<size_t>(loss.node)] = VecX<S>::Ones(1);

    for (Index i = loss.node; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.leaf || grads_[static_cast<size_t>(i)].size() == 0) continue;
      n.back(*this, grads_[static_cast<size_t>(i)]);
      n.back = nullptr;  // release saved activations as we go
    }

    std::unordered_map<Index, Tensor<S>> out;
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].leaf) continue;
      VecX<S>& g = grads_[i];
      if (g.size() == 0) g = VecX<S>::Zero(shape_numel(nodes_[i].shape));
      tcheck(g.isFinite().all(), "backward: non-finite gradient at a leaf");
      out.emplace(static_cast<Index>(i), Tensor<S>{nodes_[i].shape, std::move(g)});
    }
    grads_.clear();
    return GradMap<S>(uid_, std::move(out));
  }

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<Index> inputs;
    Shape shape;
    BackwardFn back;
    bool leaf = false;
  };

  static std::uint64_t next_uid() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::uint64_t uid_;
  std::vector<Node> nodes_;
  std::vector<VecX<S>> grads_;
  bool consumed_ = false;
};

}  // namespace mwt
