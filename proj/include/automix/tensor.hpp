#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace automix {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty until the first gradient contribution arrives.
  std::vector<double> grad;
  bool requires_grad = false;
  // Set for op outputs recorded on a tape; parameters are leaves.
  Tape* tape = nullptr;
  std::size_t node = 0;

  bool is_leaf() const { return tape == nullptr; }
  std::span<double> ensure_grad();
};

}  // namespace detail

// Dense row-major array of doubles. Copies are cheap handles sharing the same
// storage; use clone() for a deep copy. Values are treated as immutable once
// created, the only sanctioned in-place writers being optimizers and EMA on
// leaf parameters (mutable_data()).
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  // Leaf tensor that accumulates gradients when used on a tape.
  static Tensor parameter(Shape shape, std::vector<double> values);

  const Shape& shape() const;
  std::size_t rank() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const;

  bool requires_grad() const;
  // Only valid on leaves.
  void set_requires_grad(bool flag);
  bool on_tape() const;
  bool has_grad() const;
  // Zero-filled view when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad();

  Tensor clone() const;
  // Same values, no gradient, no tape linkage.
  Tensor detach() const;

  bool valid() const { return impl_ != nullptr; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(std::span<const double>)>);
  std::shared_ptr<detail::TensorImpl> impl_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

// Ordered record of executed operations. Constructing a Tape makes it the
// active recording context for the current thread until it is destroyed.
// Ops record only while a tape is active and at least one input requires a
// gradient; without an active tape everything runs forward-only.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double>)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  std::size_t size() const { return entries_.size(); }

  std::size_t record(std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
                     std::shared_ptr<detail::TensorImpl> output,
                     BackwardFn fn);

  // Reverse sweep from `loss`. Leaf gradients accumulate across calls;
  // intermediate gradients are consumed, so repeated calls do not
  // double-count shared subgraphs.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

// Runs the reverse sweep on the tape `loss` was recorded on.
void backward(const Tensor& loss);

// Builds an op output. When recording applies, `fn` receives the output
// gradient and must push contributions into inputs via grad_sink().
Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(std::span<const double>)> fn);

// Gradient buffer an op may accumulate into; empty when `t` needs no grad.
std::span<double> grad_sink(const Tensor& t);

// Keeps large tensor buffers on the heap instead of fresh mmap pages; call
// once at program start.
void tune_allocator();

namespace debug {

enum class Fault { none, sigmoid_backward_sign };

// Mutation hook for self-verification tests.
void set_fault(Fault fault);
Fault fault();

}  // namespace debug

}  // namespace automix
