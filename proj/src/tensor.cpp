#include "acvtt/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "acvtt/errors.hpp"

namespace acvtt {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto extent : shape) n *= extent;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto extent : shape) {
        if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_to_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    data_ = std::make_shared<Storage>();
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    if (!data_) throw ContractError("use of undefined tensor");
    return data_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return values().size(); }

std::span<const double> Tensor::values() const {
    if (!data_) throw ContractError("use of undefined tensor");
    return data_->values;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw DimensionError("index rank does not match tensor rank");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) throw BoundsError("tensor index out of range");
        flat = flat * s[axis] + i;
        ++axis;
    }
    return data_->values[flat];
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a one-element tensor, got " + shape_to_string(shape()));
    return data_->values[0];
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!data_) throw ContractError("use of undefined tensor");
    return data_->grad;
}

void Tensor::zero_grad() {
    if (data_) data_->grad.clear();
}

std::span<double> Tensor::mutable_values() {
    if (!data_) throw ContractError("use of undefined tensor");
    return data_->values;
}

std::span<double> Tensor::grad_buffer() const {
    if (!data_) throw ContractError("use of undefined tensor");
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
}

Tensor Tensor::detach(bool requires_grad) const { return Tensor(shape(), data_->values, requires_grad); }

std::vector<std::string_view> Graph::op_names() const {
    std::vector<std::string_view> names;
    names.reserve(entries_.size());
    for (const auto& e : entries_) names.push_back(e.op);
    return names;
}

void Graph::record(std::string_view op, std::function<void()> backward) {
    if (!recording_) return;
    entries_.push_back({op, std::move(backward)});
}

void Graph::backward(const Tensor& output) {
    if (!recording_) throw ContractError("backward() on a graph that does not record");
    if (output.numel() != 1) {
        throw ContractError("backward() requires a scalar output, got " + shape_to_string(output.shape()));
    }
    if (!output.requires_grad()) throw ContractError("backward() output does not depend on any differentiable input");
    Tensor seed = output;
    seed.grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

}  // namespace acvtt
