// SPDX-License-Identifier: Apache-2.0

#include "qavit/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace qavit {

namespace {

thread_local bool g_grad_mode = true;
#ifdef NDEBUG
thread_local bool g_numeric_checks = false;
#else
thread_local bool g_numeric_checks = true;
#endif

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, DType dtype) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data = detail::make_buffer(dtype, shape_numel(shape));
    impl->shape = std::move(shape);
    return impl;
}

void require_defined(const std::shared_ptr<detail::TensorImpl>& impl) {
    if (!impl) {
        throw std::logic_error("operation on an undefined tensor");
    }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "float32" : "float64"; }

namespace detail {

Buffer make_buffer(DType dtype, std::size_t n) {
    if (dtype == DType::f32) {
        return Buffer(std::in_place_index<0>, n, 0.0F);
    }
    return Buffer(std::in_place_index<1>, n, 0.0);
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
    auto impl = new_impl(std::move(shape), dtype);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.values<T>();
        std::fill(v.begin(), v.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("from_values: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
    }
    Tensor t = zeros(std::move(shape), dtype);
    dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto v = t.values<T>();
        std::transform(values.begin(), values.end(), v.begin(),
                       [](double x) { return static_cast<T>(x); });
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
    return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                       dtype);
}

Tensor Tensor::scalar(double value, DType dtype, bool requires_grad) {
    Tensor t = full({}, value, dtype);
    t.set_requires_grad(requires_grad);
    return t;
}

const Shape& Tensor::shape() const {
    require_defined(impl_);
    return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape().size()) {
        throw RangeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
    }
    return shape()[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
    if (rank() != 2) {
        throw ShapeError("rows(): expected a matrix, got " + shape_str(shape()));
    }
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) {
        throw ShapeError("cols(): expected a matrix, got " + shape_str(shape()));
    }
    return shape()[1];
}

DType Tensor::dtype() const {
    require_defined(impl_);
    return impl_->dtype();
}

double Tensor::at(std::size_t i) const {
    if (i >= numel()) {
        throw RangeError("index " + std::to_string(i) + " out of range");
    }
    return dispatch(dtype(), [&](auto tag) -> double {
        using T = decltype(tag);
        return static_cast<double>(values<T>()[i]);
    });
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return at(0);
}

void Tensor::set(std::size_t i, double value) {
    if (i >= numel()) {
        throw RangeError("index " + std::to_string(i) + " out of range");
    }
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        values<T>()[i] = static_cast<T>(value);
    });
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(numel());
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto v = values<T>();
        std::copy(v.begin(), v.end(), out.begin());
    });
    return out;
}

bool Tensor::requires_grad() const {
    require_defined(impl_);
    return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool value) {
    require_defined(impl_);
    impl_->requires_grad = value;
}

bool Tensor::has_grad() const {
    require_defined(impl_);
    return impl_->grad.has_value();
}

double Tensor::grad_at(std::size_t i) const {
    if (!has_grad()) {
        return 0.0;
    }
    return std::visit([&](const auto& g) { return static_cast<double>(g.at(i)); }, *impl_->grad);
}

std::vector<double> Tensor::grad_vector() const {
    std::vector<double> out(numel(), 0.0);
    if (has_grad()) {
        std::visit([&](const auto& g) { std::copy(g.begin(), g.end(), out.begin()); },
                   *impl_->grad);
    }
    return out;
}

void Tensor::zero_grad() {
    require_defined(impl_);
    impl_->grad.reset();
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = shape();
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
    if (target == dtype()) {
        return clone();
    }
    auto v = to_vector();
    return from_values(shape(), v, target);
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

bool numeric_checks_enabled() { return g_numeric_checks; }

NumericChecks::NumericChecks(bool enabled) : previous_(g_numeric_checks) {
    g_numeric_checks = enabled;
}
NumericChecks::~NumericChecks() { g_numeric_checks = previous_; }

std::vector<const detail::TensorImpl*> topological_order(const Tensor& root) {
    std::vector<const detail::TensorImpl*> order;
    if (!root.defined()) {
        return order;
    }
    std::unordered_set<const detail::TensorImpl*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<const detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.impl().get(), 0);
    visited.insert(root.impl().get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const auto* node = impl->node.get();
        if (node != nullptr && next < node->inputs.size()) {
            const auto* child = node->inputs[next++].get();
            if (visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }
    return order;
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    auto order = topological_order(loss);
    // Intermediate gradients are per-sweep; only leaves accumulate across calls.
    for (const auto* impl : order) {
        if (impl->node) {
            const_cast<detail::TensorImpl*>(impl)->grad.reset();
        }
    }
    auto& root = *loss.impl();
    if (!root.needs_grad()) {
        return;
    }
    dispatch(root.dtype(), [&](auto tag) {
        using T = decltype(tag);
        detail::grad_span<T>(root)[0] += T(1);
    });
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* impl = const_cast<detail::TensorImpl*>(*it);
        if (impl->node && impl->grad) {
            impl->node->backward(*impl);
        }
    }
}

}  // namespace qavit
