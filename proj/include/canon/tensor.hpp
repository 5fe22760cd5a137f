#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "canon/error.hpp"

namespace canon {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first touched; empty means zero
  bool requires_grad = false;
  Tape* tape = nullptr;  // tape that recorded the creating op, null for leaves

  std::size_t size() const { return values.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

// Dense 64-bit float tensor participating in a reverse-mode gradient tape.
// Value-semantics handle to a shared node; copies alias the same buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->values.size(); }
  std::size_t rank() const { return node_->shape.size(); }

  std::span<const double> data() const { return node_->values; }
  // Mutable access to a leaf's storage (optimizer updates). Mutating an
  // in-graph intermediate invalidates recorded backward rules.
  std::span<double> raw_data() { return node_->values; }

  double at(std::size_t flat) const;
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  // Freeze/unfreeze a leaf (parameter). Affects future op recording only.
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  // Gradient view; allocates zeros on first access for requires_grad tensors.
  std::span<const double> grad() const;
  std::span<double> raw_grad();
  void zero_grad();

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> handle() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of operations for one forward pass. Constructing a Tape
// makes it the active tape for the current thread (stack discipline); ops
// record themselves while any of their inputs requires gradients. A tape is
// rebuilt per forward pass; backward() may run once per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Reverse sweep from a scalar loss. Populates grads of every
  // requires_grad tensor that the loss depends on.
  void backward(const Tensor& loss);
  void reset();
  std::size_t op_count() const { return steps_.size(); }
  bool consumed() const { return used_; }

  static Tape* active();

  struct Step {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void(detail::Node&)> pull;  // accumulate output grad into inputs
  };

  void record(Step step);

 private:
  std::vector<Step> steps_;
  bool used_ = false;
};

// ---- operations ------------------------------------------------------------

enum class EwOp { Add, Sub, Mul, Div, Neg, Exp, Log, Relu, Sqrt };

Tensor elementwise(EwOp op, const Tensor& a);                   // unary kinds
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);  // binary kinds

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// Cross-correlation (no kernel flip), zero padding, stride 1.
// input [C_in,H,W], weight [C_out,C_in,k,k] with k odd.
Tensor conv2d(const Tensor& input, const Tensor& weight, int padding);

// Reductions drop the reduced axes; an empty axis list reduces everything
// to a scalar. Reducing over a zero-length axis is an error.
Tensor reduce_sum(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reduce_mean(const Tensor& a, const std::vector<std::size_t>& axes);

struct MaxReduce {
  Tensor values;
  std::vector<std::size_t> argmax;  // flat input index per output element
};
MaxReduce reduce_max(const Tensor& a, const std::vector<std::size_t>& axes);

// Numerically stable softmax over a 1-D tensor; output sums to 1 within 1e-12.
Tensor softmax(const Tensor& logits);
// -log(probs[target]); composes with softmax for the usual training loss.
Tensor cross_entropy(const Tensor& probs, std::size_t target);

Tensor reshape(const Tensor& a, Shape shape);
Tensor gather(const Tensor& a, std::size_t flat_index);  // scalar result
// Stack equal-shape tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
// Stack [C,H,W] fiber slices into [C,n,H,W] (new axis 1).
Tensor stack_fibers(std::span<const Tensor> parts);
Tensor select_axis(const Tensor& a, std::size_t axis, std::size_t index);
// Cyclic shift along an axis: out[..., i, ...] = in[..., (i - shift) mod n, ...].
Tensor roll_axis(const Tensor& a, std::size_t axis, std::size_t shift);
Tensor detach(const Tensor& a);

// Rotate the trailing two axes (square, size S) by angle 2*pi*k/n about the
// pixel center (S-1)/2. Quarter-turn multiples are exact index permutations;
// everything else is bilinear resampling with zero fill outside the grid.
Tensor rotate_hw(const Tensor& a, long k, long n);
// Same, by a free angle in radians (always bilinear unless angle is a
// quarter-turn multiple within 1e-12).
Tensor rotate_hw_angle(const Tensor& a, double radians);

void backward(const Tensor& loss);  // dispatch to the tape that produced it

// ---- optimizers ------------------------------------------------------------

struct Param {
  std::string name;
  Tensor value;
};

void sgd_step(std::span<Param> params, double lr);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long t = 0;
};

void adam_step(std::span<Param> params, AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// Single-buffer update primitives; size mismatch is an error.
void apply_sgd(std::span<double> param, std::span<const double> grad, double lr);

void zero_all_grads(std::span<Param> params);

}  // namespace canon
