#include "canon/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace canon {

namespace {

thread_local std::vector<Tape*> g_tape_stack;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Shape shape, std::vector<double> values, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

bool any_grad(std::span<const Tensor> inputs) {
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

// Record an op result; the output requires grad only when some input does
// and a tape is active to hold the backward rule.
Tensor make_op(Shape out_shape, std::vector<double> out_values, std::vector<Tensor> inputs,
               std::function<void(Node&, std::span<const NodePtr>)> pull) {
  Tape* tape = Tape::active();
  const bool track = tape != nullptr && any_grad(inputs);
  auto node = make_node(std::move(out_shape), std::move(out_values), track);
  if (track) {
    node->tape = tape;
    Tape::Step step;
    step.inputs.reserve(inputs.size());
    for (auto& t : inputs) step.inputs.push_back(t.handle());
    step.output = node;
    auto ins = step.inputs;
    step.pull = [pull = std::move(pull), ins = std::move(ins)](Node& out) { pull(out, ins); };
    tape->record(std::move(step));
  }
  return Tensor::wrap(std::move(node));
}

struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> a_stride;  // per out axis; 0 where broadcast
  std::vector<std::size_t> b_stride;
};

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  BroadcastPlan plan;
  plan.out_shape.assign(rank, 1);
  auto a_full = Shape(rank, 1);
  auto b_full = Shape(rank, 1);
  std::copy(a.begin(), a.end(), a_full.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), b_full.begin() + (rank - b.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (a_full[i] == b_full[i] || a_full[i] == 1 || b_full[i] == 1) {
      plan.out_shape[i] = std::max(a_full[i], b_full[i]);
    } else {
      throw Error(Errc::ShapeMismatch, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  auto as = row_major_strides(a_full);
  auto bs = row_major_strides(b_full);
  plan.a_stride.assign(rank, 0);
  plan.b_stride.assign(rank, 0);
  for (std::size_t i = 0; i < rank; ++i) {
    plan.a_stride[i] = (a_full[i] == 1 && plan.out_shape[i] > 1) ? 0 : as[i];
    plan.b_stride[i] = (b_full[i] == 1 && plan.out_shape[i] > 1) ? 0 : bs[i];
  }
  return plan;
}

// Visit every output index of a broadcast loop, producing the flat offsets
// into both operands. Odometer walk, no allocation per element.
template <class Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
  const std::size_t rank = plan.out_shape.size();
  const std::size_t total = numel(plan.out_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    fn(flat, ai, bi);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ai += plan.a_stride[d];
      bi += plan.b_stride[d];
      if (idx[d] < plan.out_shape[d]) break;
      ai -= plan.a_stride[d] * plan.out_shape[d];
      bi -= plan.b_stride[d] * plan.out_shape[d];
      idx[d] = 0;
    }
  }
}

void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw Error(Errc::InvalidArgument, std::string(who) + ": undefined tensor");
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_node(Shape{}, std::vector<double>{value}, requires_grad));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size())
    throw Error(Errc::ShapeMismatch,
                "from_vector: " + shape_str(shape) + " needs " + std::to_string(numel(shape)) +
                    " values, got " + std::to_string(values.size()));
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

double Tensor::at(std::size_t flat) const {
  if (flat >= node_->values.size())
    throw Error(Errc::IndexOutOfRange, "at: flat index past end", flat);
  return node_->values[flat];
}

double Tensor::item() const {
  if (node_->values.size() != 1)
    throw Error(Errc::ShapeMismatch, "item: tensor has " + std::to_string(size()) + " elements");
  return node_->values[0];
}

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

std::span<double> Tensor::raw_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  // Stack discipline: tapes are scoped objects, innermost active.
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(Step step) { steps_.push_back(std::move(step)); }

void Tape::reset() {
  steps_.clear();
  used_ = false;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw Error(Errc::NonScalarLoss, "backward needs a scalar loss");
  if (used_) throw Error(Errc::BackwardTwice, "backward already ran on this tape; reset() first");
  used_ = true;
  Node* loss_node = loss.node();
  loss_node->ensure_grad();
  loss_node->grad[0] = 1.0;
  // Tape order is topological by construction, so one reverse sweep suffices.
  // Ops whose output grad was never touched do not feed the loss; skip them.
  for (std::size_t i = steps_.size(); i-- > 0;) {
    Step& step = steps_[i];
    if (step.output->grad.empty()) continue;
    step.pull(*step.output);
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error(Errc::InvalidArgument, "backward: undefined tensor");
  Tape* tape = loss.node()->tape;
  if (tape == nullptr) {
    // A constant loss has no recorded ops; nothing depends on it.
    if (loss.size() != 1) throw Error(Errc::NonScalarLoss, "backward needs a scalar loss");
    return;
  }
  tape->backward(loss);
}

// ---- elementwise -----------------------------------------------------------

namespace {

Tensor binary_op(EwOp op, const Tensor& a, const Tensor& b) {
  check_defined(a, "elementwise");
  check_defined(b, "elementwise");
  auto plan = broadcast_plan(a.shape(), b.shape());
  std::vector<double> out(numel(plan.out_shape));
  const auto av = a.data();
  const auto bv = b.data();
  switch (op) {
    case EwOp::Add:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
      break;
    case EwOp::Sub:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
      break;
    case EwOp::Mul:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
      break;
    case EwOp::Div: {
      std::size_t bad = std::numeric_limits<std::size_t>::max();
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        if (bv[j] == 0.0 && bad == std::numeric_limits<std::size_t>::max()) bad = j;
        out[o] = av[i] / bv[j];
      });
      if (bad != std::numeric_limits<std::size_t>::max())
        throw Error(Errc::DomainError, "div: zero divisor", bad);
      break;
    }
    default:
      throw Error(Errc::InvalidArgument, "elementwise: unary kind given two operands");
  }
  auto plan_copy = plan;
  return make_op(plan.out_shape, std::move(out), {a, b},
                 [op, plan = std::move(plan_copy)](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   Node& bn = *ins[1];
                   const auto& g = out_node.grad;
                   if (an.requires_grad) an.ensure_grad();
                   if (bn.requires_grad) bn.ensure_grad();
                   const bool ga = an.requires_grad, gb = bn.requires_grad;
                   switch (op) {
                     case EwOp::Add:
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) an.grad[i] += g[o];
                         if (gb) bn.grad[j] += g[o];
                       });
                       break;
                     case EwOp::Sub:
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) an.grad[i] += g[o];
                         if (gb) bn.grad[j] -= g[o];
                       });
                       break;
                     case EwOp::Mul:
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) an.grad[i] += g[o] * bn.values[j];
                         if (gb) bn.grad[j] += g[o] * an.values[i];
                       });
                       break;
                     case EwOp::Div:
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                         const double inv = 1.0 / bn.values[j];
                         if (ga) an.grad[i] += g[o] * inv;
                         if (gb) bn.grad[j] -= g[o] * an.values[i] * inv * inv;
                       });
                       break;
                     default:
                       break;
                   }
                 });
}

Tensor unary_op(EwOp op, const Tensor& a) {
  check_defined(a, "elementwise");
  const auto av = a.data();
  std::vector<double> out(av.size());
  switch (op) {
    case EwOp::Neg:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
      break;
    case EwOp::Exp:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
      break;
    case EwOp::Log:
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(av[i] > 0.0)) throw Error(Errc::DomainError, "log of non-positive value", i);
        out[i] = std::log(av[i]);
      }
      break;
    case EwOp::Relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
      break;
    case EwOp::Sqrt:
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (av[i] < 0.0) throw Error(Errc::DomainError, "sqrt of negative value", i);
        out[i] = std::sqrt(av[i]);
      }
      break;
    default:
      throw Error(Errc::InvalidArgument, "elementwise: binary kind given one operand");
  }
  return make_op(a.shape(), std::move(out), {a},
                 [op](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   const auto& g = out_node.grad;
                   switch (op) {
                     case EwOp::Neg:
                       for (std::size_t i = 0; i < g.size(); ++i) an.grad[i] -= g[i];
                       break;
                     case EwOp::Exp:
                       for (std::size_t i = 0; i < g.size(); ++i) an.grad[i] += g[i] * out_node.values[i];
                       break;
                     case EwOp::Log:
                       for (std::size_t i = 0; i < g.size(); ++i) an.grad[i] += g[i] / an.values[i];
                       break;
                     case EwOp::Relu:
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (an.values[i] > 0.0) an.grad[i] += g[i];
                       break;
                     case EwOp::Sqrt:
                       for (std::size_t i = 0; i < g.size(); ++i)
                         an.grad[i] += g[i] * 0.5 / out_node.values[i];
                       break;
                     default:
                       break;
                   }
                 });
}

}  // namespace

Tensor elementwise(EwOp op, const Tensor& a) { return unary_op(op, a); }
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) { return binary_op(op, a, b); }

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(EwOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(EwOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(EwOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(EwOp::Div, a, b); }
Tensor neg(const Tensor& a) { return unary_op(EwOp::Neg, a); }
Tensor exp(const Tensor& a) { return unary_op(EwOp::Exp, a); }
Tensor log(const Tensor& a) { return unary_op(EwOp::Log, a); }
Tensor relu(const Tensor& a) { return unary_op(EwOp::Relu, a); }
Tensor sqrt(const Tensor& a) { return unary_op(EwOp::Sqrt, a); }

// ---- matmul / transpose ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2)
    throw Error(Errc::ShapeMismatch, "matmul expects rank-2 operands, got " + shape_str(a.shape()) +
                                         " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw Error(Errc::ShapeMismatch,
                "matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* crow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  return make_op({m, n}, std::move(out), {a, b},
                 [m, k, n](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   Node& bn = *ins[1];
                   const auto& g = out_node.grad;
                   if (an.requires_grad) {
                     an.ensure_grad();
                     // dA = dC * B^T
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bn.values[p * n + j];
                         an.grad[i * k + p] += acc;
                       }
                   }
                   if (bn.requires_grad) {
                     bn.ensure_grad();
                     // dB = A^T * dC
                     for (std::size_t p = 0; p < k; ++p)
                       for (std::size_t i = 0; i < m; ++i) {
                         const double aip = an.values[i * k + p];
                         if (aip == 0.0) continue;
                         for (std::size_t j = 0; j < n; ++j) bn.grad[p * n + j] += aip * g[i * n + j];
                       }
                   }
                 });
}

Tensor transpose2d(const Tensor& a) {
  check_defined(a, "transpose2d");
  if (a.rank() != 2) throw Error(Errc::ShapeMismatch, "transpose2d expects rank 2");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op({n, m}, std::move(out), {a}, [m, n](Node& out_node, std::span<const NodePtr> ins) {
    Node& an = *ins[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) an.grad[i * n + j] += out_node.grad[j * m + i];
  });
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, int padding) {
  check_defined(input, "conv2d");
  check_defined(weight, "conv2d");
  if (input.rank() != 3 || weight.rank() != 4)
    throw Error(Errc::ShapeMismatch, "conv2d expects input [C,H,W] and weight [Co,Ci,k,k]");
  const std::size_t ci = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const std::size_t co = weight.shape()[0], wci = weight.shape()[1];
  const std::size_t kh = weight.shape()[2], kw = weight.shape()[3];
  if (wci != ci)
    throw Error(Errc::ShapeMismatch, "conv2d channel mismatch: input " + shape_str(input.shape()) +
                                         " weight " + shape_str(weight.shape()));
  if (kh != kw || kh % 2 == 0) throw Error(Errc::NonOddKernel, "conv2d kernel must be odd and square");
  if (padding < 0) throw Error(Errc::InvalidArgument, "conv2d padding must be >= 0");
  const long k = static_cast<long>(kh);
  const long pad = padding;
  const long ho = static_cast<long>(h) + 2 * pad - k + 1;
  const long wo = static_cast<long>(w) + 2 * pad - k + 1;
  if (ho < 1 || wo < 1) throw Error(Errc::OutputTooSmall, "conv2d output would be empty");

  std::vector<double> out(co * ho * wo, 0.0);
  const auto x = input.data();
  const auto ww = weight.data();
  for (std::size_t oc = 0; oc < co; ++oc) {
    for (std::size_t icn = 0; icn < ci; ++icn) {
      const double* wslice = &ww[(oc * ci + icn) * kh * kw];
      const double* xslice = &x[icn * h * w];
      for (long u = 0; u < k; ++u) {
        for (long v = 0; v < k; ++v) {
          const double coef = wslice[u * k + v];
          if (coef == 0.0) continue;
          // output (i,j) reads input (i+u-pad, j+v-pad)
          const long i_lo = std::max(0L, pad - u);
          const long i_hi = std::min(ho, static_cast<long>(h) + pad - u);
          const long j_lo = std::max(0L, pad - v);
          const long j_hi = std::min(wo, static_cast<long>(w) + pad - v);
          for (long i = i_lo; i < i_hi; ++i) {
            const double* xrow = &xslice[(i + u - pad) * static_cast<long>(w) + (j_lo + v - pad)];
            double* orow = &out[(oc * ho + i) * wo + j_lo];
            for (long j = 0; j < j_hi - j_lo; ++j) orow[j] += coef * xrow[j];
          }
        }
      }
    }
  }
  return make_op({co, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)}, std::move(out),
                 {input, weight},
                 [ci, h, w, co, kh, pad, ho, wo](Node& out_node, std::span<const NodePtr> ins) {
                   Node& xn = *ins[0];
                   Node& wn = *ins[1];
                   const long k = static_cast<long>(kh);
                   const auto& g = out_node.grad;
                   if (xn.requires_grad) {
                     xn.ensure_grad();
                     for (std::size_t oc = 0; oc < co; ++oc)
                       for (std::size_t icn = 0; icn < ci; ++icn) {
                         const double* wslice = &wn.values[(oc * ci + icn) * kh * kh];
                         double* gx = &xn.grad[icn * h * w];
                         for (long u = 0; u < k; ++u)
                           for (long v = 0; v < k; ++v) {
                             const double coef = wslice[u * k + v];
                             if (coef == 0.0) continue;
                             const long i_lo = std::max(0L, pad - u);
                             const long i_hi = std::min(ho, static_cast<long>(h) + pad - u);
                             const long j_lo = std::max(0L, pad - v);
                             const long j_hi = std::min(wo, static_cast<long>(w) + pad - v);
                             for (long i = i_lo; i < i_hi; ++i) {
                               double* xrow = &gx[(i + u - pad) * static_cast<long>(w) + (j_lo + v - pad)];
                               const double* grow = &g[(oc * ho + i) * wo + j_lo];
                               for (long j = 0; j < j_hi - j_lo; ++j) xrow[j] += coef * grow[j];
                             }
                           }
                       }
                   }
                   if (wn.requires_grad) {
                     wn.ensure_grad();
                     for (std::size_t oc = 0; oc < co; ++oc)
                       for (std::size_t icn = 0; icn < ci; ++icn) {
                         double* gw = &wn.grad[(oc * ci + icn) * kh * kh];
                         const double* xslice = &xn.values[icn * h * w];
                         for (long u = 0; u < k; ++u)
                           for (long v = 0; v < k; ++v) {
                             const long i_lo = std::max(0L, pad - u);
                             const long i_hi = std::min(ho, static_cast<long>(h) + pad - u);
                             const long j_lo = std::max(0L, pad - v);
                             const long j_hi = std::min(wo, static_cast<long>(w) + pad - v);
                             double acc = 0.0;
                             for (long i = i_lo; i < i_hi; ++i) {
                               const double* xrow =
                                   &xslice[(i + u - pad) * static_cast<long>(w) + (j_lo + v - pad)];
                               const double* grow = &g[(oc * ho + i) * wo + j_lo];
                               for (long j = 0; j < j_hi - j_lo; ++j) acc += xrow[j] * grow[j];
                             }
                             gw[u * k + v] += acc;
                           }
                       }
                   }
                 });
}

// ---- reductions ------------------------------------------------------------

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index_of_in;  // flat input -> flat output
  std::size_t group_size = 1;                // elements folded per output
};

ReducePlan reduce_plan(const Shape& in, const std::vector<std::size_t>& axes_in) {
  std::vector<std::size_t> axes = axes_in;
  if (axes.empty()) {
    axes.resize(in.size());
    std::iota(axes.begin(), axes.end(), 0);
  }
  std::sort(axes.begin(), axes.end());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size()) throw Error(Errc::IndexOutOfRange, "reduce axis out of range", axes[i]);
    if (i > 0 && axes[i] == axes[i - 1])
      throw Error(Errc::InvalidArgument, "reduce: duplicate axis");
    if (in[axes[i]] == 0) throw Error(Errc::EmptyReduction, "reduce over zero-length axis");
  }
  std::vector<bool> reduced(in.size(), false);
  for (auto a : axes) reduced[a] = true;

  ReducePlan plan;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (reduced[d])
      plan.group_size *= in[d];
    else
      plan.out_shape.push_back(in[d]);
  }
  const std::size_t total = numel(in);
  if (total == 0) throw Error(Errc::EmptyReduction, "reduce over empty tensor");
  auto in_strides = row_major_strides(in);
  // out strides aligned to kept axes
  std::vector<std::size_t> out_stride_per_in_axis(in.size(), 0);
  {
    std::size_t acc = 1;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (!reduced[d]) {
        out_stride_per_in_axis[d] = acc;
        acc *= in[d];
      }
    }
  }
  plan.out_index_of_in.resize(total);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t out_flat = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    plan.out_index_of_in[flat] = out_flat;
    for (std::size_t d = in.size(); d-- > 0;) {
      ++idx[d];
      out_flat += out_stride_per_in_axis[d];
      if (idx[d] < in[d]) break;
      out_flat -= out_stride_per_in_axis[d] * in[d];
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, const std::vector<std::size_t>& axes) {
  check_defined(a, "reduce_sum");
  auto plan = reduce_plan(a.shape(), axes);
  std::vector<double> out(numel(plan.out_shape), 0.0);
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out[plan.out_index_of_in[i]] += av[i];
  auto map = plan.out_index_of_in;
  return make_op(plan.out_shape, std::move(out), {a},
                 [map = std::move(map)](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   for (std::size_t i = 0; i < an.grad.size(); ++i) an.grad[i] += out_node.grad[map[i]];
                 });
}

Tensor reduce_mean(const Tensor& a, const std::vector<std::size_t>& axes) {
  check_defined(a, "reduce_mean");
  auto plan = reduce_plan(a.shape(), axes);
  const double inv = 1.0 / static_cast<double>(plan.group_size);
  std::vector<double> out(numel(plan.out_shape), 0.0);
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out[plan.out_index_of_in[i]] += av[i];
  for (auto& v : out) v *= inv;
  auto map = plan.out_index_of_in;
  return make_op(plan.out_shape, std::move(out), {a},
                 [map = std::move(map), inv](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   for (std::size_t i = 0; i < an.grad.size(); ++i)
                     an.grad[i] += out_node.grad[map[i]] * inv;
                 });
}

MaxReduce reduce_max(const Tensor& a, const std::vector<std::size_t>& axes) {
  check_defined(a, "reduce_max");
  auto plan = reduce_plan(a.shape(), axes);
  const std::size_t out_n = numel(plan.out_shape);
  std::vector<double> out(out_n, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> arg(out_n, 0);
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const std::size_t o = plan.out_index_of_in[i];
    if (av[i] > out[o]) {
      out[o] = av[i];
      arg[o] = i;  // first max wins on ties: scan order is ascending flat index
    }
  }
  auto arg_copy = arg;
  Tensor values = make_op(plan.out_shape, std::move(out), {a},
                          [arg = std::move(arg_copy)](Node& out_node, std::span<const NodePtr> ins) {
                            Node& an = *ins[0];
                            if (!an.requires_grad) return;
                            an.ensure_grad();
                            for (std::size_t o = 0; o < arg.size(); ++o)
                              an.grad[arg[o]] += out_node.grad[o];
                          });
  return MaxReduce{std::move(values), std::move(arg)};
}

// ---- softmax / cross entropy -----------------------------------------------

Tensor softmax(const Tensor& logits) {
  check_defined(logits, "softmax");
  if (logits.rank() != 1 || logits.size() == 0)
    throw Error(Errc::ShapeMismatch, "softmax expects a non-empty 1-D tensor");
  const auto z = logits.data();
  const double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - zmax);
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return make_op(logits.shape(), std::move(p), {logits},
                 [](Node& out_node, std::span<const NodePtr> ins) {
                   Node& zn = *ins[0];
                   if (!zn.requires_grad) return;
                   zn.ensure_grad();
                   const auto& p = out_node.values;
                   const auto& g = out_node.grad;
                   double dot = 0.0;
                   for (std::size_t i = 0; i < p.size(); ++i) dot += g[i] * p[i];
                   for (std::size_t i = 0; i < p.size(); ++i) zn.grad[i] += p[i] * (g[i] - dot);
                 });
}

Tensor cross_entropy(const Tensor& probs, std::size_t target) {
  check_defined(probs, "cross_entropy");
  if (probs.rank() != 1) throw Error(Errc::ShapeMismatch, "cross_entropy expects a 1-D tensor");
  if (target >= probs.size())
    throw Error(Errc::IndexOutOfRange, "cross_entropy target out of range", target);
  return neg(log(gather(probs, target)));
}

// ---- structural ops ----------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  if (numel(shape) != a.size())
    throw Error(Errc::ShapeMismatch,
                "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op(std::move(shape), std::move(out), {a},
                 [](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   for (std::size_t i = 0; i < an.grad.size(); ++i) an.grad[i] += out_node.grad[i];
                 });
}

Tensor gather(const Tensor& a, std::size_t flat_index) {
  check_defined(a, "gather");
  if (flat_index >= a.size()) throw Error(Errc::IndexOutOfRange, "gather index", flat_index);
  return make_op(Shape{}, {a.at(flat_index)}, {a},
                 [flat_index](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   an.grad[flat_index] += out_node.grad[0];
                 });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error(Errc::InvalidArgument, "stack of zero tensors");
  const Shape& base = parts[0].shape();
  for (const auto& p : parts)
    if (p.shape() != base) throw Error(Errc::ShapeMismatch, "stack: shapes differ");
  const std::size_t piece = parts[0].size();
  Shape out_shape;
  out_shape.push_back(parts.size());
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  std::vector<double> out(parts.size() * piece);
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i].data().begin(), parts[i].data().end(), out.begin() + i * piece);
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op(std::move(out_shape), std::move(out), std::move(inputs),
                 [piece](Node& out_node, std::span<const NodePtr> ins) {
                   for (std::size_t i = 0; i < ins.size(); ++i) {
                     Node& part = *ins[i];
                     if (!part.requires_grad) continue;
                     part.ensure_grad();
                     for (std::size_t j = 0; j < piece; ++j)
                       part.grad[j] += out_node.grad[i * piece + j];
                   }
                 });
}

Tensor stack_fibers(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error(Errc::InvalidArgument, "stack_fibers of zero tensors");
  const Shape& base = parts[0].shape();
  if (base.size() != 3) throw Error(Errc::ShapeMismatch, "stack_fibers expects [C,H,W] slices");
  for (const auto& p : parts)
    if (p.shape() != base) throw Error(Errc::ShapeMismatch, "stack_fibers: shapes differ");
  const std::size_t c = base[0], hw = base[1] * base[2], n = parts.size();
  std::vector<double> out(c * n * hw);
  for (std::size_t g = 0; g < n; ++g) {
    const auto pv = parts[g].data();
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy(pv.begin() + ch * hw, pv.begin() + (ch + 1) * hw, out.begin() + (ch * n + g) * hw);
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op({c, n, base[1], base[2]}, std::move(out), std::move(inputs),
                 [c, hw, n](Node& out_node, std::span<const NodePtr> ins) {
                   for (std::size_t g = 0; g < n; ++g) {
                     Node& part = *ins[g];
                     if (!part.requires_grad) continue;
                     part.ensure_grad();
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       const double* src = &out_node.grad[(ch * n + g) * hw];
                       double* dst = &part.grad[ch * hw];
                       for (std::size_t j = 0; j < hw; ++j) dst[j] += src[j];
                     }
                   }
                 });
}

Tensor select_axis(const Tensor& a, std::size_t axis, std::size_t index) {
  check_defined(a, "select_axis");
  const Shape& s = a.shape();
  if (axis >= s.size()) throw Error(Errc::IndexOutOfRange, "select_axis axis", axis);
  if (index >= s[axis]) throw Error(Errc::IndexOutOfRange, "select_axis index", index);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape;
  for (std::size_t d = 0; d < s.size(); ++d)
    if (d != axis) out_shape.push_back(s[d]);
  const std::size_t extent = s[axis];
  std::vector<double> out(outer * inner);
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(av.begin() + (o * extent + index) * inner, av.begin() + (o * extent + index + 1) * inner,
              out.begin() + o * inner);
  return make_op(std::move(out_shape), std::move(out), {a},
                 [outer, inner, extent, index](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   for (std::size_t o = 0; o < outer; ++o) {
                     const double* src = &out_node.grad[o * inner];
                     double* dst = &an.grad[(o * extent + index) * inner];
                     for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
                   }
                 });
}

Tensor roll_axis(const Tensor& a, std::size_t axis, std::size_t shift) {
  check_defined(a, "roll_axis");
  const Shape& s = a.shape();
  if (axis >= s.size()) throw Error(Errc::IndexOutOfRange, "roll_axis axis", axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[axis];
  const std::size_t sh = n == 0 ? 0 : shift % n;
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = (i + n - sh) % n;
      std::copy(av.begin() + (o * n + src) * inner, av.begin() + (o * n + src + 1) * inner,
                out.begin() + (o * n + i) * inner);
    }
  return make_op(a.shape(), std::move(out), {a},
                 [outer, inner, n, sh](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   for (std::size_t o = 0; o < outer; ++o)
                     for (std::size_t i = 0; i < n; ++i) {
                       const std::size_t src = (i + n - sh) % n;
                       const double* gsrc = &out_node.grad[(o * n + i) * inner];
                       double* gdst = &an.grad[(o * n + src) * inner];
                       for (std::size_t j = 0; j < inner; ++j) gdst[j] += gsrc[j];
                     }
                 });
}

Tensor detach(const Tensor& a) {
  check_defined(a, "detach");
  return Tensor::from_vector(a.shape(), std::vector<double>(a.data().begin(), a.data().end()), false);
}

// ---- spatial rotation --------------------------------------------------------

namespace {

// Bilinear inverse-map resampling table for rotation by `radians`
// (counterclockwise with x right / y up) about center (S-1)/2.
struct BilinearTap {
  std::size_t src;
  double weight;
};

struct RotationMap {
  // For each destination pixel, up to 4 weighted source taps.
  std::vector<std::array<BilinearTap, 4>> taps;
  std::vector<std::uint8_t> tap_count;
};

RotationMap build_bilinear_map(std::size_t size, double radians) {
  RotationMap map;
  const long s = static_cast<long>(size);
  map.taps.resize(size * size);
  map.tap_count.assign(size * size, 0);
  const double m = (static_cast<double>(size) - 1.0) / 2.0;
  const double c = std::cos(radians), sn = std::sin(radians);
  for (long r = 0; r < s; ++r) {
    for (long col = 0; col < s; ++col) {
      const double xo = static_cast<double>(col) - m;
      const double yo = m - static_cast<double>(r);
      // inverse rotation of destination coordinates
      const double xs = c * xo + sn * yo;
      const double ys = -sn * xo + c * yo;
      const double col_s = xs + m;
      const double row_s = m - ys;
      const double fr = std::floor(row_s), fc = std::floor(col_s);
      const double dr = row_s - fr, dc = col_s - fc;
      const double w00 = (1 - dr) * (1 - dc), w01 = (1 - dr) * dc, w10 = dr * (1 - dc), w11 = dr * dc;
      const long r0 = static_cast<long>(fr), c0 = static_cast<long>(fc);
      auto& slot = map.taps[r * s + col];
      auto& count = map.tap_count[r * s + col];
      auto push = [&](long rr, long cc, double wgt) {
        if (wgt == 0.0 || rr < 0 || rr >= s || cc < 0 || cc >= s) return;
        slot[count++] = BilinearTap{static_cast<std::size_t>(rr * s + cc), wgt};
      };
      push(r0, c0, w00);
      push(r0, c0 + 1, w01);
      push(r0 + 1, c0, w10);
      push(r0 + 1, c0 + 1, w11);
    }
  }
  return map;
}

// Exact quarter-turn permutation: source flat index per destination pixel.
std::vector<std::size_t> build_quarter_map(std::size_t size, int quarter_turns) {
  const long s = static_cast<long>(size);
  std::vector<std::size_t> src(size * size);
  for (long r = 0; r < s; ++r)
    for (long c = 0; c < s; ++c) {
      long rs = r, cs = c;
      switch (quarter_turns & 3) {
        case 0: break;
        case 1: rs = c, cs = s - 1 - r; break;
        case 2: rs = s - 1 - r, cs = s - 1 - c; break;
        case 3: rs = s - 1 - c, cs = r; break;
      }
      src[r * s + c] = static_cast<std::size_t>(rs * s + cs);
    }
  return src;
}

Tensor rotate_hw_impl(const Tensor& a, double radians, int exact_quarters) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw Error(Errc::ShapeMismatch, "rotate_hw expects rank >= 2");
  const std::size_t hw_h = s[s.size() - 2], hw_w = s[s.size() - 1];
  if (hw_h != hw_w) throw Error(Errc::NonSquareImage, "rotate_hw needs square trailing axes");
  const std::size_t size = hw_h;
  const std::size_t plane = size * size;
  std::size_t planes = 1;
  for (std::size_t d = 0; d + 2 < s.size(); ++d) planes *= s[d];

  const auto av = a.data();
  std::vector<double> out(a.size(), 0.0);

  if (exact_quarters >= 0) {
    auto src = build_quarter_map(size, exact_quarters);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* in_plane = &av[p * plane];
      double* out_plane = &out[p * plane];
      for (std::size_t i = 0; i < plane; ++i) out_plane[i] = in_plane[src[i]];
    }
    auto src_copy = src;
    return make_op(a.shape(), std::move(out), {a},
                   [planes, plane, src = std::move(src_copy)](Node& out_node,
                                                              std::span<const NodePtr> ins) {
                     Node& an = *ins[0];
                     if (!an.requires_grad) return;
                     an.ensure_grad();
                     for (std::size_t p = 0; p < planes; ++p)
                       for (std::size_t i = 0; i < plane; ++i)
                         an.grad[p * plane + src[i]] += out_node.grad[p * plane + i];
                   });
  }

  auto map = build_bilinear_map(size, radians);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in_plane = &av[p * plane];
    double* out_plane = &out[p * plane];
    for (std::size_t i = 0; i < plane; ++i) {
      double acc = 0.0;
      for (std::uint8_t t = 0; t < map.tap_count[i]; ++t)
        acc += map.taps[i][t].weight * in_plane[map.taps[i][t].src];
      out_plane[i] = acc;
    }
  }
  return make_op(a.shape(), std::move(out), {a},
                 [planes, plane, map = std::move(map)](Node& out_node, std::span<const NodePtr> ins) {
                   Node& an = *ins[0];
                   if (!an.requires_grad) return;
                   an.ensure_grad();
                   for (std::size_t p = 0; p < planes; ++p)
                     for (std::size_t i = 0; i < plane; ++i) {
                       const double g = out_node.grad[p * plane + i];
                       if (g == 0.0) continue;
                       for (std::uint8_t t = 0; t < map.tap_count[i]; ++t)
                         an.grad[p * plane + map.taps[i][t].src] += map.taps[i][t].weight * g;
                     }
                 });
}

}  // namespace

Tensor rotate_hw(const Tensor& a, long k, long n) {
  check_defined(a, "rotate_hw");
  if (n <= 0) throw Error(Errc::InvalidArgument, "rotate_hw group order must be positive");
  long kk = k % n;
  if (kk < 0) kk += n;
  // multiples of 90 degrees: 2*pi*k/n = q*pi/2  <=>  4*k == q*n
  if ((4 * kk) % n == 0) {
    const int q = static_cast<int>((4 * kk) / n) & 3;
    return rotate_hw_impl(a, 0.0, q);
  }
  return rotate_hw_impl(a, 2.0 * kPi * static_cast<double>(kk) / static_cast<double>(n), -1);
}

Tensor rotate_hw_angle(const Tensor& a, double radians) {
  check_defined(a, "rotate_hw_angle");
  const double quarters = radians / (kPi / 2.0);
  const double nearest = std::round(quarters);
  if (std::abs(quarters - nearest) < 1e-12) {
    int q = static_cast<int>(std::fmod(nearest, 4.0));
    if (q < 0) q += 4;
    return rotate_hw_impl(a, 0.0, q);
  }
  return rotate_hw_impl(a, radians, -1);
}

// ---- optimizers --------------------------------------------------------------

void apply_sgd(std::span<double> param, std::span<const double> grad, double lr) {
  if (param.size() != grad.size())
    throw Error(Errc::ShapeMismatch, "sgd: parameter/gradient size mismatch");
  if (!(lr > 0.0)) throw Error(Errc::InvalidArgument, "sgd: learning rate must be positive");
  for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
}

void sgd_step(std::span<Param> params, double lr) {
  if (!(lr > 0.0)) throw Error(Errc::InvalidArgument, "sgd: learning rate must be positive");
  for (auto& p : params) {
    if (!p.value.requires_grad()) continue;
    auto g = p.value.grad();
    auto w = p.value.raw_data();
    apply_sgd(w, g, lr);
  }
}

void adam_step(std::span<Param> params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (!(lr > 0.0)) throw Error(Errc::InvalidArgument, "adam: learning rate must be positive");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].value.size(), 0.0);
      state.v[i].assign(params[i].value.size(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw Error(Errc::ShapeMismatch, "adam: state/parameter count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.value.requires_grad()) continue;
    auto g = p.value.grad();
    auto w = p.value.raw_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.size()) throw Error(Errc::ShapeMismatch, "adam: state size mismatch");
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void zero_all_grads(std::span<Param> params) {
  for (auto& p : params) p.value.zero_grad();
}

}  // namespace canon
