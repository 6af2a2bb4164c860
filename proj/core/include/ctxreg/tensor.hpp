#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctxreg {

// The element type is fixed per build profile: the 64-bit profile is used
// for gradient verification, the 32-bit profile for training.
#if defined(CTXREG_REAL_DOUBLE)
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::uint64_t record_generation = 0;  // 0 for leaves

  Real* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
    return grad.data();
  }
};
}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  Real* ptr() { return impl_->data.data(); }
  const Real* ptr() const { return impl_->data.data(); }

  Real item() const;
  Real at(std::size_t flat_index) const { return impl_->data.at(flat_index); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zero-filled on first access.
  std::span<Real> grad();
  std::span<const Real> grad() const;
  void zero_grad();

  /// Deep copy without any link to the computation record.
  Tensor clone() const;
  /// Same values, no gradient tracking (storage copied).
  Tensor detach() const { return clone(); }

  /// True when every element is finite.
  bool all_finite() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& shared_impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend class ComputationRecord;
  friend Tensor make_output(Shape shape, std::initializer_list<const Tensor*> inputs);

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered log of executed primitives, one per thread. Operations are
/// appended as they run, so inputs always precede their consumers.
class ComputationRecord {
 public:
  static ComputationRecord& current();

  bool enabled() const { return enabled_ && disable_depth_ == 0; }
  std::size_t size() const { return entries_.size(); }
  std::uint64_t generation() const { return generation_; }

  void push(std::string_view op, std::function<void()> backward_fn);
  void clear();

  /// Runs every recorded backward function in reverse order, then clears.
  void run_backward();

 private:
  friend class NoGradGuard;
  struct Entry {
    std::string_view op;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  std::uint64_t generation_ = 1;
  bool enabled_ = true;
  int disable_depth_ = 0;
};

/// Disables recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++ComputationRecord::current().disable_depth_; }
  ~NoGradGuard() { --ComputationRecord::current().disable_depth_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// tensor that requires them; the record is cleared afterward.
void backward(const Tensor& loss);

/// Allocates an output tensor that tracks gradients when recording is on and
/// any input requires them.
Tensor make_output(Shape shape, std::initializer_list<const Tensor*> inputs);

}  // namespace ctxreg
