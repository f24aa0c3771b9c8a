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
#include <variant>
#include <vector>

namespace qavit {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class NumericFault : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class RangeError : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl;

// One recorded operation. The backward closure reads the output gradient
// and accumulates into the gradients of `inputs`.
struct Node {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    Buffer data;
    std::optional<Buffer> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    DType dtype() const { return data.index() == 0 ? DType::f32 : DType::f64; }
    bool needs_grad() const { return requires_grad || node != nullptr; }
};

Buffer make_buffer(DType dtype, std::size_t n);

template <class T>
std::vector<T>& buffer_as(Buffer& b) {
    return std::get<std::vector<T>>(b);
}

template <class T>
const std::vector<T>& buffer_as(const Buffer& b) {
    return std::get<std::vector<T>>(b);
}

// Gradient buffer of `impl`, allocated as zeros on first use.
template <class T>
std::span<T> grad_span(TensorImpl& impl) {
    if (!impl.grad) {
        impl.grad = make_buffer(impl.dtype(), shape_numel(impl.shape));
    }
    return std::span<T>(buffer_as<T>(*impl.grad));
}

}  // namespace detail

/// Calls `fn` with a value-initialized `float` or `double` tag.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
    if (dtype == DType::f32) {
        return fn(float{});
    }
    return fn(double{});
}

/// Dense row-major tensor handle with optional gradient tracking.
///
/// Copies share storage. Operations in ops.hpp return fresh tensors and,
/// when any input needs a gradient, record a node for reverse-mode
/// differentiation.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dtype = DType::f32, bool requires_grad = false);
    static Tensor full(Shape shape, double value, DType dtype = DType::f32);
    static Tensor from_values(Shape shape, std::span<const double> values, DType dtype = DType::f32);
    static Tensor from_values(Shape shape, std::initializer_list<double> values,
                              DType dtype = DType::f32);
    static Tensor scalar(double value, DType dtype = DType::f32, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t rows() const;
    std::size_t cols() const;
    DType dtype() const;

    template <class T>
    std::span<T> values() {
        return std::span<T>(detail::buffer_as<T>(impl_->data));
    }
    template <class T>
    std::span<const T> values() const {
        return std::span<const T>(detail::buffer_as<T>(impl_->data));
    }

    double at(std::size_t flat_index) const;
    double item() const;
    void set(std::size_t flat_index, double value);
    std::vector<double> to_vector() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool is_leaf() const { return impl_->node == nullptr; }

    bool has_grad() const;
    double grad_at(std::size_t flat_index) const;
    /// Copy of the accumulated gradient as doubles (zeros if none was produced).
    std::vector<double> grad_vector() const;
    void zero_grad();

    /// Same values in a new untracked leaf.
    Tensor detach() const;
    /// Deep copy of the values (no gradient, no graph).
    Tensor clone() const;
    Tensor to(DType dtype) const;
    /// Reinterpret as a new shape with identical element count. Tracked.
    Tensor reshape(Shape shape) const;

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Reverse-mode sweep from a scalar loss. Gradients are accumulated (+=)
/// into every leaf that requires them; call zero_grad to reset.
void backward(const Tensor& loss);

/// Topologically ordered view of the graph that ends at `root`; inputs
/// always precede their consumers. Exposed for tests.
std::vector<const detail::TensorImpl*> topological_order(const Tensor& root);

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_mode_enabled();

/// Non-finite checks at op boundaries. On by default in debug builds only.
class NumericChecks {
  public:
    explicit NumericChecks(bool enabled);
    ~NumericChecks();
    NumericChecks(const NumericChecks&) = delete;
    NumericChecks& operator=(const NumericChecks&) = delete;

  private:
    bool previous_;
};

bool numeric_checks_enabled();

}  // namespace qavit
