#include "automix/tensor.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <cstring>
#include <sstream>

#include "automix/errors.hpp"

namespace automix {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::span<double> TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local Tape* g_active_tape = nullptr;
debug::Fault g_fault = debug::Fault::none;

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape,
                                             std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return impl;
}

}  // namespace

Tensor::Tensor() : impl_(new_impl({}, {0.0})) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(new_impl(std::move(shape), std::move(values))) {}

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl)
    : impl_(std::move(impl)) {}

Tensor Tensor::zeros(Shape shape) {
  auto n = automix::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = automix::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t(std::move(shape), std::move(values));
  t.impl_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::rank() const { return impl_->shape.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() needs a single-element tensor, got shape " +
                        shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::operator[](std::size_t i) const { return impl_->data.at(i); }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_->is_leaf()) {
    throw ContractError("requires_grad can only be toggled on leaf tensors");
  }
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

bool Tensor::on_tape() const { return impl_->tape != nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data);
  if (impl_->is_leaf()) t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::memcmp(da.data(), db.data(), da.size() * sizeof(double)) == 0;
}

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  // Outputs that outlive the tape become plain constants.
  for (auto& e : entries_) {
    e.output->tape = nullptr;
    e.output->requires_grad = false;
    e.output->grad.clear();
  }
  g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

std::size_t Tape::record(
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs,
    std::shared_ptr<detail::TensorImpl> output, BackwardFn fn) {
  for (const auto& in : inputs) {
    if (in->tape != nullptr && in->tape != this) {
      throw ContractError("op input belongs to a different tape");
    }
  }
  std::size_t node = entries_.size();
  output->tape = this;
  output->node = node;
  output->requires_grad = true;
  entries_.push_back({std::move(inputs), std::move(output), std::move(fn)});
  return node;
}

void Tape::backward(const Tensor& loss) {
  const auto& impl = loss.impl();
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (impl->tape != this) {
    throw ContractError("backward() loss is not recorded on this tape");
  }
  impl->ensure_grad()[0] += 1.0;
  for (std::size_t i = impl->node + 1; i-- > 0;) {
    auto& e = entries_[i];
    if (e.output->grad.empty()) continue;
    e.fn(e.output->grad);
    // Consumed; storage released so repeated sweeps start clean.
    std::vector<double>().swap(e.output->grad);
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  Tape* tape = loss.impl()->tape;
  if (tape == nullptr) {
    throw ContractError("backward() loss is not on an active tape");
  }
  tape->backward(loss);
}

Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs,
               std::function<void(std::span<const double>)> fn) {
  auto impl = new_impl(std::move(shape), std::move(values));
  Tape* tape = Tape::active();
  if (tape != nullptr) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      std::vector<std::shared_ptr<detail::TensorImpl>> ins;
      ins.reserve(inputs.size());
      for (auto& t : inputs) ins.push_back(t.impl());
      tape->record(std::move(ins), impl, std::move(fn));
    }
  }
  return Tensor(std::move(impl));
}

std::span<double> grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return {};
  return t.impl()->ensure_grad();
}

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace debug {

void set_fault(Fault fault) { g_fault = fault; }
Fault fault() { return g_fault; }

}  // namespace debug

}  // namespace automix
