#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mwt {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename S>
using VecX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<MatX<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const MatX<S>>;

/// Kernel-level failure: shape mismatch, non-finite values, bad arguments.
class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

inline void tcheck(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

template <typename S>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
  return Dtype::F32;
}
template <>
constexpr Dtype dtype_of<double>() {
  return Dtype::F64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major tensor of rank <= 2 in practice (reductions yield rank 0).
/// `node`/`tape_uid` tie a tensor to the tape node that produced (or watches)
/// it; a tensor with no tape link is plain immutable data.
template <typename S>
struct Tensor {
  Shape shape;
  VecX<S> data;
  bool requires_grad = false;
  std::uint64_t tape_uid = 0;
  Index node = -1;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(VecX<S>::Zero(shape_numel(shape))) {
    validate_shape();
  }
  Tensor(Shape s, VecX<S> values) : shape(std::move(s)), data(std::move(values)) {
    validate_shape();
    tcheck(data.size() == shape_numel(shape),
           "tensor: data length " + std::to_string(data.size()) + " does not match shape " +
               shape_str(shape));
  }

  static Tensor scalar(S v) {
    Tensor t{Shape{}};
    t.data(0) = v;
    return t;
  }
  static Tensor from(std::initializer_list<S> values) {
    Tensor t{Shape{static_cast<Index>(values.size())}};
    Index i = 0;
    for (S v : values) t.data(i++) = v;
    return t;
  }
  static Tensor from(Shape s, const std::vector<S>& values) {
    Tensor t{std::move(s)};
    tcheck(static_cast<Index>(values.size()) == t.numel(),
           "tensor: value count does not match shape " + shape_str(t.shape));
    for (Index i = 0; i < t.numel(); ++i) t.data(i) = values[static_cast<size_t>(i)];
    return t;
  }
  static Tensor zeros(Shape s) { return Tensor{std::move(s)}; }
  static Tensor full(Shape s, S v) {
    Tensor t{std::move(s)};
    t.data.setConstant(v);
    return t;
  }

  constexpr Dtype dtype() const { return dtype_of<S>(); }
  Index numel() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }

  /// Row/column counts of the 2-D view: rank-2 as is, rank-1 as a single row,
  /// rank-0 as 1x1.
  Index rows() const { return rank() == 2 ? shape[0] : 1; }
  Index cols() const {
    if (rank() == 2) return shape[1];
    return rank() == 1 ? shape[0] : 1;
  }

  MatMap<S> mat() { return MatMap<S>(data.data(), rows(), cols()); }
  ConstMatMap<S> mat() const { return ConstMatMap<S>(data.data(), rows(), cols()); }

  S& at(Index i) { return data(i); }
  S at(Index i) const { return data(i); }
  S& at(Index r, Index c) { return data(r * cols() + c); }
  S at(Index r, Index c) const { return data(r * cols() + c); }

  bool all_finite() const { return data.isFinite().all(); }

  /// Detached copy of the values (no tape link, no grad flag).
  Tensor detached() const { return Tensor{shape, data}; }

  void bind(std::uint64_t uid, Index node_id) {
    tape_uid = uid;
    node = node_id;
    requires_grad = true;
  }

 private:
  void validate_shape() const {
    for (Index d : shape) tcheck(d >= 1, "tensor: non-positive dim in shape " + shape_str(shape));
  }
};

template <typename S>
void check_finite(const char* op, const Tensor<S>& t) {
  tcheck(t.all_finite(), std::string(op) + ": non-finite values in input of shape " + shape_str(t.shape));
}

template <typename S>
void check_finite_result(const char* op, const Tensor<S>& t) {
  tcheck(t.all_finite(), std::string(op) + ": produced non-finite values");
}

}  // namespace mwt
