#include "cdd/tensor.hpp"

#include <sstream>

#include "cdd/errors.hpp"

namespace cdd {

std::size_t numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

static void check_shape(const std::vector<int>& shape) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(shape));
    }
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    check_shape(shape);
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->data.assign(numel(shape), 0.0);
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& x : t.data()) x = value;
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    check_shape(shape);
    if (numel(shape) != values.size()) {
        throw ShapeError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }

int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }

int Tensor::dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }

std::size_t Tensor::size() const { return impl_->data.size(); }

std::span<double> Tensor::data() { return impl_->data; }

std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::value() const {
    if (size() != 1) throw ShapeError("value() requires a scalar, got " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool rg) { impl_->requires_grad = rg; }

std::span<double> Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw ShapeError("gradient accessed before allocation on tensor " + shape_str(shape()));
    }
    return impl_->grad;
}

bool Tensor::grad_allocated() const { return impl_ && !impl_->grad.empty(); }

void Tensor::zero_grad() {
    if (impl_ && !impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

void Tensor::copy_data_from(const Tensor& other) {
    if (other.shape() != shape()) {
        throw ShapeError("copy_data_from shape mismatch: " + shape_str(shape()) + " vs " +
                         shape_str(other.shape()));
    }
    impl_->data = other.impl_->data;
}

void Tape::push(Tensor output, std::function<void()> backward_fn) {
    nodes_.push_back({std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss, double seed) {
    if (loss.size() != 1) {
        throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }
    for (Node& n : nodes_) n.output.zero_grad();
    Tensor l = loss;
    l.grad()[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
}

}  // namespace cdd
