#include "ctxreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ctxreg {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return full({}, value, requires_grad); }

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<Real> Tensor::grad() {
  impl_->grad_buffer();
  return impl_->grad;
}

std::span<const Real> Tensor::grad() const {
  impl_->grad_buffer();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), Real(0));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(), [](Real v) { return std::isfinite(v); });
}

ComputationRecord& ComputationRecord::current() {
  thread_local ComputationRecord record;
  return record;
}

void ComputationRecord::push(std::string_view op, std::function<void()> backward_fn) {
  entries_.push_back(Entry{op, std::move(backward_fn)});
}

void ComputationRecord::clear() {
  entries_.clear();
  ++generation_;
}

void ComputationRecord::run_backward() {
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  clear();
}

Tensor make_output(Shape shape, std::initializer_list<const Tensor*> inputs) {
  auto& record = ComputationRecord::current();
  bool track = false;
  if (record.enabled()) {
    for (const Tensor* t : inputs) track = track || t->requires_grad();
  }
  Tensor out = Tensor::zeros(std::move(shape), track);
  if (track) out.impl_->record_generation = record.generation();
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw TensorError("backward: loss must be a scalar, got shape " +
                      (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto& record = ComputationRecord::current();
  auto* impl = loss.impl();
  if (!impl->requires_grad || impl->record_generation != record.generation() || record.size() == 0) {
    throw TensorError("backward: loss is not part of the live computation record (already consumed?)");
  }
  impl->grad_buffer()[0] += Real(1);
  record.run_backward();
}

}  // namespace ctxreg
