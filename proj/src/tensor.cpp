// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cotr_moe {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<double> grad;
  std::uint64_t tape_id = 0;
  std::size_t node = 0;
};

}  // namespace detail

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local Precision g_precision = Precision::standard;
std::atomic<std::uint64_t> g_next_tape_id{1};

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

void check_shape(const Shape& shape) {
  if (shape.empty()) {
    throw ShapeError("tensor shape must have at least one extent");
  }
  for (auto e : shape) {
    if (e == 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
    }
  }
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op) {
  if (current_precision() == Precision::standard) {
    for (auto& v : data) v = static_cast<double>(static_cast<float>(v));
  }
  for (auto v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
  return Tensor::from(std::move(shape), std::move(data));
}

void record(Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
  if (Tape* tape = Tape::active()) {
    tape->record(out, std::move(inputs), std::move(fn));
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_string(t.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  }
}

// Flat offsets into each operand for every output element of a broadcast op.
struct Broadcast {
  Shape out;
  bool trivial = false;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

std::shared_ptr<Broadcast> plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  auto plan = std::make_shared<Broadcast>();
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
  if (a == b) {
    plan->out = a;
    plan->trivial = true;
    return plan;
  }
  const std::size_t rank = a.size();
  plan->out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (a[d] != b[d] && a[d] != 1 && b[d] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    plan->out[d] = std::max(a[d], b[d]);
  }
  auto strides = [rank](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t d = rank; d-- > 0;) {
      st[d] = s[d] == 1 ? 0 : acc;
      acc *= s[d];
    }
    return st;
  };
  const auto sa = strides(a);
  const auto sb = strides(b);
  const std::size_t n = shape_numel(plan->out);
  plan->ia.resize(n);
  plan->ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < n; ++o) {
    plan->ia[o] = oa;
    plan->ib[o] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < plan->out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

// outer × extent × inner decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  AxisSplit r;
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  r.extent = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

template <typename Forward, typename Derivative>
Tensor unary(const Tensor& a, const char* op, Forward f, Derivative df) {
  require_defined(a, op);
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  Tensor out = make_result(a.shape(), std::move(y), op);
  record(out, {a}, [a, out, df](std::span<const double> g, std::span<GradSlot> gin) {
    const auto x = a.data();
    const auto y = out.data();
    auto& ga = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
  return out;
}

}  // namespace

// ---- shapes & precision ----------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Precision current_precision() { return g_precision; }

PrecisionScope::PrecisionScope(Precision p) : previous_(g_precision) { g_precision = p; }
PrecisionScope::~PrecisionScope() { g_precision = previous_; }

double canonical_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end(), [](double a, double b) {
    const double fa = std::fabs(a), fb = std::fabs(b);
    return fa < fb || (fa == fb && a < b);
  });
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc;
}

double gelu_tanh(double x) {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCubic * x * x * x)));
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  check_shape(shape);
  std::vector<double> data(shape_numel(shape), value);
  return from(std::move(shape), std::move(data));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_string(shape));
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("non-finite tensor entry");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows");
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols");
  return impl_->shape[1];
}

std::span<const double> Tensor::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_rank2(*this, "at");
  if (r >= impl_->shape[0] || c >= impl_->shape[1]) throw std::out_of_range("tensor index out of range");
  return impl_->data[r * impl_->shape[1] + c];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw TapeError("requires_grad can only be set on leaves");
  impl_->requires_grad = on;
}

bool Tensor::is_leaf() const { return impl_ && impl_->leaf; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined(*this, "grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw TapeError("only leaf tensors are mutable");
  return impl_->data;
}

void Tensor::assign(std::span<const double> values) {
  auto dst = mutable_data();
  if (values.size() != dst.size()) throw ShapeError("assign: length mismatch");
  std::copy(values.begin(), values.end(), dst.begin());
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)), previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::tracks(const Tensor& t) const {
  return t.defined() && ((t.impl_->leaf && t.impl_->requires_grad) || t.impl_->tape_id == id_);
}

void Tape::record(Tensor& out, std::vector<Tensor> inputs, BackwardFn fn) {
  const bool any = std::any_of(inputs.begin(), inputs.end(), [this](const Tensor& t) { return tracks(t); });
  if (!any) return;
  out.impl_->leaf = false;
  out.impl_->tape_id = id_;
  out.impl_->node = nodes_.size();
  nodes_.push_back(Node{std::move(inputs), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (nodes_.empty()) throw TapeError("backward on an empty tape");
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw TapeError("backward requires a scalar loss, got " + shape_string(loss.shape()));
  if (loss.impl_->leaf) {
    if (loss.impl_->requires_grad) {
      auto& g = loss.impl_->grad;
      if (g.empty()) g.assign(1, 0.0);
      g[0] += 1.0;
    }
    return;
  }
  if (loss.impl_->tape_id != id_) return;

  std::vector<std::vector<double>> buffers(nodes_.size());
  buffers[loss.impl_->node].assign(1, 1.0);
  std::vector<GradSlot> slots;
  for (std::size_t i = loss.impl_->node + 1; i-- > 0;) {
    if (buffers[i].empty()) continue;
    Node& node = nodes_[i];
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      auto& in = *node.inputs[k].impl_;
      if (in.leaf) {
        if (!in.requires_grad) continue;
        if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
        slots[k] = &in.grad;
      } else if (in.tape_id == id_) {
        auto& buf = buffers[in.node];
        if (buf.empty()) buf.assign(in.data.size(), 0.0);
        slots[k] = &buf;
      }
    }
    node.backward(buffers[i], slots);
    std::vector<double>().swap(buffers[i]);
  }
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw TapeError("backward without an active tape");
  tape->backward(loss);
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, SumOrder order) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
  if (b.rows() != K) {
    throw ShapeError("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> C(M * N, 0.0);
  if (order == SumOrder::sequential) {
    for (std::size_t i = 0; i < M; ++i) {
      double* crow = C.data() + i * N;
      for (std::size_t k = 0; k < K; ++k) {
        const double aik = A[i * K + k];
        const double* brow = B.data() + k * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
      }
    }
  } else {
    std::vector<double> terms(K);
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) {
        for (std::size_t k = 0; k < K; ++k) terms[k] = A[i * K + k] * B[k * N + j];
        C[i * N + j] = canonical_sum(terms);
      }
    }
  }
  Tensor out = make_result({M, N}, std::move(C), "matmul");
  record(out, {a, b}, [a, b, M, K, N](std::span<const double> g, std::span<GradSlot> gin) {
    const auto A = a.data();
    const auto B = b.data();
    if (gin[0]) {
      auto& ga = *gin[0];
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t j = 0; j < N; ++j) acc += g[i * N + j] * B[k * N + j];
          ga[i * K + k] += acc;
        }
      }
    }
    if (gin[1]) {
      auto& gb = *gin[1];
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          const double aik = A[i * K + k];
          for (std::size_t j = 0; j < N; ++j) gb[k * N + j] += aik * g[i * N + j];
        }
      }
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  require_rank2(a, "transpose");
  const std::size_t R = a.rows(), C = a.cols();
  const auto x = a.data();
  std::vector<double> y(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y[c * R + r] = x[r * C + c];
  Tensor out = make_result({C, R}, std::move(y), "transpose");
  record(out, {a}, [R, C](std::span<const double> g, std::span<GradSlot> gin) {
    auto& ga = *gin[0];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += g[c * R + r];
  });
  return out;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  auto plan = plan_broadcast(a.shape(), b.shape(), "add");
  const auto x = a.data();
  const auto y = b.data();
  const std::size_t n = shape_numel(plan->out);
  std::vector<double> z(n);
  if (plan->trivial) {
    for (std::size_t i = 0; i < n; ++i) z[i] = x[i] + y[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) z[i] = x[plan->ia[i]] + y[plan->ib[i]];
  }
  Tensor out = make_result(plan->out, std::move(z), "add");
  record(out, {a, b}, [plan](std::span<const double> g, std::span<GradSlot> gin) {
    for (int side = 0; side < 2; ++side) {
      if (!gin[side]) continue;
      auto& dst = *gin[side];
      if (plan->trivial) {
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      } else {
        const auto& idx = side == 0 ? plan->ia : plan->ib;
        for (std::size_t i = 0; i < g.size(); ++i) dst[idx[i]] += g[i];
      }
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  auto plan = plan_broadcast(a.shape(), b.shape(), "mul");
  const auto x = a.data();
  const auto y = b.data();
  const std::size_t n = shape_numel(plan->out);
  std::vector<double> z(n);
  auto ia = [&](std::size_t i) { return plan->trivial ? i : plan->ia[i]; };
  auto ib = [&](std::size_t i) { return plan->trivial ? i : plan->ib[i]; };
  for (std::size_t i = 0; i < n; ++i) z[i] = x[ia(i)] * y[ib(i)];
  Tensor out = make_result(plan->out, std::move(z), "mul");
  record(out, {a, b}, [a, b, plan](std::span<const double> g, std::span<GradSlot> gin) {
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t pa = plan->trivial ? i : plan->ia[i];
      const std::size_t pb = plan->trivial ? i : plan->ib[i];
      if (gin[0]) (*gin[0])[pa] += g[i] * y[pb];
      if (gin[1]) (*gin[1])[pb] += g[i] * x[pa];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  require_defined(a, "scale");
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * s;
  Tensor out = make_result(a.shape(), std::move(y), "scale");
  record(out, {a}, [s](std::span<const double> g, std::span<GradSlot> gin) {
    auto& ga = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
  return out;
}

// ---- structural -----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError("concat: incompatible shapes " + shape_string(first) + " and " + shape_string(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit o = split_axis(out_shape, axis, "concat");
  std::vector<double> y(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.shape()[axis] * o.inner;
    const auto x = p.data();
    for (std::size_t r = 0; r < o.outer; ++r) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r * block), block,
                  y.begin() + static_cast<std::ptrdiff_t>(r * o.extent * o.inner + offset));
    }
    offset += block;
  }
  Tensor out = make_result(out_shape, std::move(y), "concat");
  std::vector<std::size_t> blocks;
  for (const auto& p : parts) blocks.push_back(p.shape()[axis] * o.inner);
  const std::size_t row = o.extent * o.inner;
  const std::size_t outer = o.outer;
  record(out, parts, [offsets, blocks, row, outer](std::span<const double> g, std::span<GradSlot> gin) {
    for (std::size_t k = 0; k < gin.size(); ++k) {
      if (!gin[k]) continue;
      auto& dst = *gin[k];
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t i = 0; i < blocks[k]; ++i) dst[r * blocks[k] + i] += g[r * row + offsets[k] + i];
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_defined(a, "slice_rows");
  require_rank2(a, "slice_rows");
  if (begin >= end || end > a.rows()) throw ShapeError("slice_rows: invalid range");
  const std::size_t C = a.cols();
  const auto x = a.data();
  std::vector<double> y(x.begin() + static_cast<std::ptrdiff_t>(begin * C),
                        x.begin() + static_cast<std::ptrdiff_t>(end * C));
  Tensor out = make_result({end - begin, C}, std::move(y), "slice_rows");
  record(out, {a}, [begin, C](std::span<const double> g, std::span<GradSlot> gin) {
    auto& ga = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * C + i] += g[i];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_defined(a, "slice_cols");
  require_rank2(a, "slice_cols");
  if (begin >= end || end > a.cols()) throw ShapeError("slice_cols: invalid range");
  const std::size_t R = a.rows(), C = a.cols(), W = end - begin;
  const auto x = a.data();
  std::vector<double> y(R * W);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < W; ++c) y[r * W + c] = x[r * C + begin + c];
  Tensor out = make_result({R, W}, std::move(y), "slice_cols");
  record(out, {a}, [R, C, W, begin](std::span<const double> g, std::span<GradSlot> gin) {
    auto& ga = *gin[0];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < W; ++c) ga[r * C + begin + c] += g[r * W + c];
  });
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  require_defined(table, "gather_rows");
  require_rank2(table, "gather_rows");
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  const std::size_t V = table.rows(), D = table.cols();
  std::vector<int> idx(indices.begin(), indices.end());
  for (int i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= V) throw std::out_of_range("gather_rows: index out of range");
  }
  const auto x = table.data();
  std::vector<double> y(idx.size() * D);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[r]) * D), D,
                y.begin() + static_cast<std::ptrdiff_t>(r * D));
  Tensor out = make_result({idx.size(), D}, std::move(y), "gather_rows");
  record(out, {table}, [idx, D](std::span<const double> g, std::span<GradSlot> gin) {
    auto& gt = *gin[0];
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < D; ++c) gt[static_cast<std::size_t>(idx[r]) * D + c] += g[r * D + c];
  });
  return out;
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a, std::size_t axis) {
  require_defined(a, "sum");
  const AxisSplit s = split_axis(a.shape(), axis, "sum");
  const auto x = a.data();
  std::vector<double> y(s.outer * s.inner);
  std::vector<double> terms(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      for (std::size_t e = 0; e < s.extent; ++e) terms[e] = x[(o * s.extent + e) * s.inner + in];
      y[o * s.inner + in] = canonical_sum(terms);
    }
  }
  Shape shape = a.shape();
  shape[axis] = 1;
  Tensor out = make_result(shape, std::move(y), "sum");
  record(out, {a}, [s](std::span<const double> g, std::span<GradSlot> gin) {
    auto& ga = *gin[0];
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t in = 0; in < s.inner; ++in) ga[(o * s.extent + e) * s.inner + in] += g[o * s.inner + in];
  });
  return out;
}

Tensor mean(const Tensor& a, std::size_t axis) {
  require_defined(a, "mean");
  const std::size_t n = split_axis(a.shape(), axis, "mean").extent;
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& a) {
  require_defined(a, "sum_all");
  std::vector<double> terms(a.data().begin(), a.data().end());
  Tensor out = make_result({1}, {canonical_sum(terms)}, "sum_all");
  record(out, {a}, [](std::span<const double> g, std::span<GradSlot> gin) {
    for (auto& v : *gin[0]) v += g[0];
  });
  return out;
}

// ---- nonlinearities -------------------------------------------------------

Tensor softmax(const Tensor& a, std::size_t axis) {
  require_defined(a, "softmax");
  const AxisSplit s = split_axis(a.shape(), axis, "softmax");
  const auto x = a.data();
  std::vector<double> y(x.size());
  std::vector<double> terms(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = x[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, x[base + e * s.inner]);
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(x[base + e * s.inner] - mx);
        y[base + e * s.inner] = v;
        terms[e] = v;
      }
      const double z = canonical_sum(terms);
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] /= z;
    }
  }
  Tensor out = make_result(a.shape(), std::move(y), "softmax");
  record(out, {a}, [out, s](std::span<const double> g, std::span<GradSlot> gin) {
    const auto y = out.data();
    auto& ga = *gin[0];
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * y[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t p = base + e * s.inner;
          ga[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
  return out;
}

Tensor gelu(const Tensor& a) {
  return unary(a, "gelu", gelu_tanh, [](double x, double) {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    const double t = std::tanh(u);
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
  });
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require_defined(x, "rms_norm");
  require_defined(gain, "rms_norm");
  require_rank2(x, "rms_norm");
  const std::size_t R = x.rows(), D = x.cols();
  if (gain.shape() != Shape{1, D}) throw ShapeError("rms_norm: gain must be 1x" + std::to_string(D));
  const auto xv = x.data();
  const auto gv = gain.data();
  std::vector<double> inv(R);
  std::vector<double> y(R * D);
  for (std::size_t r = 0; r < R; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < D; ++c) ss += xv[r * D + c] * xv[r * D + c];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(D) + eps);
    for (std::size_t c = 0; c < D; ++c) y[r * D + c] = xv[r * D + c] * inv[r] * gv[c];
  }
  Tensor out = make_result({R, D}, std::move(y), "rms_norm");
  record(out, {x, gain}, [x, gain, inv, R, D](std::span<const double> g, std::span<GradSlot> gin) {
    const auto xv = x.data();
    const auto gv = gain.data();
    for (std::size_t r = 0; r < R; ++r) {
      const double* xr = xv.data() + r * D;
      const double* gr = g.data() + r * D;
      if (gin[1]) {
        auto& gg = *gin[1];
        for (std::size_t c = 0; c < D; ++c) gg[c] += gr[c] * xr[c] * inv[r];
      }
      if (gin[0]) {
        auto& gx = *gin[0];
        double dot = 0.0;
        for (std::size_t c = 0; c < D; ++c) dot += gr[c] * gv[c] * xr[c] * inv[r];
        dot /= static_cast<double>(D);
        for (std::size_t c = 0; c < D; ++c) {
          const double xhat = xr[c] * inv[r];
          gx[r * D + c] += (gr[c] * gv[c] - xhat * dot) * inv[r];
        }
      }
    }
  });
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b) {
  Tensor y = matmul(x, w);
  return b ? add(y, *b) : y;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, Reduction reduction) {
  require_defined(logits, "cross_entropy");
  require_rank2(logits, "cross_entropy");
  const std::size_t R = logits.rows(), V = logits.cols();
  if (targets.size() != R) throw ShapeError("cross_entropy: target count does not match logit rows");
  std::vector<int> tgt(targets.begin(), targets.end());
  for (int t : tgt) {
    if (t < 0 || static_cast<std::size_t>(t) >= V) throw std::out_of_range("cross_entropy: target out of range");
  }
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<double>>(R * V);
  double total = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const double* row = z.data() + r * V;
    const double mx = *std::max_element(row, row + V);
    double s = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      (*probs)[r * V + c] = std::exp(row[c] - mx);
      s += (*probs)[r * V + c];
    }
    for (std::size_t c = 0; c < V; ++c) (*probs)[r * V + c] /= s;
    total += (std::log(s) + mx) - row[static_cast<std::size_t>(tgt[r])];
  }
  const double norm = reduction == Reduction::mean ? 1.0 / static_cast<double>(R) : 1.0;
  Tensor out = make_result({1}, {total * norm}, "cross_entropy");
  record(out, {logits}, [probs, tgt, V, norm](std::span<const double> g, std::span<GradSlot> gin) {
    auto& gl = *gin[0];
    for (std::size_t r = 0; r < tgt.size(); ++r) {
      for (std::size_t c = 0; c < V; ++c) {
        const double onehot = static_cast<std::size_t>(tgt[r]) == c ? 1.0 : 0.0;
        gl[r * V + c] += g[0] * norm * ((*probs)[r * V + c] - onehot);
      }
    }
  });
  return out;
}

Tensor detach(const Tensor& a) {
  require_defined(a, "detach");
  return Tensor::from(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
}

Tensor straight_through(const Tensor& value, const Tensor& surrogate) {
  require_defined(value, "straight_through");
  require_defined(surrogate, "straight_through");
  if (value.shape() != surrogate.shape()) throw ShapeError("straight_through: shape mismatch");
  Tensor out = Tensor::from(value.shape(), std::vector<double>(value.data().begin(), value.data().end()));
  record(out, {surrogate}, [](std::span<const double> g, std::span<GradSlot> gin) {
    auto& gs = *gin[0];
    for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
  return out;
}

}  // namespace cotr_moe
