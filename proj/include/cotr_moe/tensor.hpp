// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotr_moe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Wide keeps full double precision (used for finite-difference checks).
// Standard rounds every op result to single precision (used for training).
enum class Precision { wide, standard };

Precision current_precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision previous_;
};

// Reduction order for matmul's inner dimension. `canonical` sums the
// products sorted by magnitude, so the result does not depend on the order
// of the reduced axis (bit-exact permutation invariance).
enum class SumOrder { sequential, canonical };

double canonical_sum(std::vector<double>& values);

namespace detail {
struct TensorImpl;
}

class Tape;

// Dense row-major array with optional gradient. Copies share storage; op
// results are never mutated after creation. Only leaves expose mutable data.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  // A leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Leaves only; used by initialisers and optimisers.
  std::span<double> mutable_data();
  void assign(std::span<const double> values);

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class Tape;
};

// Per-input accumulation buffer handed to backward rules; null when the
// input does not need a gradient.
using GradSlot = std::vector<double>*;
using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<GradSlot> grad_in)>;

// Ordered record of differentiable ops. Constructing a Tape makes it the
// active tape for the current thread until destruction; tapes nest.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  // Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
  // loss. Calling twice accumulates twice.
  void backward(const Tensor& loss);

  static Tape* active();

  // Records `out` as produced from `inputs`. No-op when no input needs a
  // gradient on this tape.
  void record(Tensor& out, std::vector<Tensor> inputs, BackwardFn fn);

  bool tracks(const Tensor& t) const;

 private:
  struct Node {
    std::vector<Tensor> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::uint64_t id_;
  Tape* previous_;
};

void backward(const Tensor& loss);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, SumOrder order = SumOrder::sequential);
Tensor transpose(const Tensor& a);

// Elementwise with unit-extent broadcasting; ranks must agree.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& table, std::span<const int> indices);

// Reductions keep the reduced axis with extent 1.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

// x·W (+ b broadcast over rows).
Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b = std::nullopt);

enum class Reduction { mean, sum };
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, Reduction reduction = Reduction::mean);

// Untracked copy: gradients stop here.
Tensor detach(const Tensor& a);
// Forward value of `value`, gradient routed to `surrogate` (same shape).
Tensor straight_through(const Tensor& value, const Tensor& surrogate);

double gelu_tanh(double x);

}  // namespace cotr_moe
