#include "avstyle/tensor.hpp"

#include <cmath>

namespace avstyle {

namespace {

size_t checked_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= static_cast<size_t>(d);
    }
    return n;
}

} // namespace

void check_finite(std::span<const float> values, const char* what) {
    for (float v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
    }
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(checked_numel(shape), 0.0f);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    if (!std::isfinite(value)) throw NumericError("non-finite fill value");
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(checked_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    if (checked_numel(shape) != data.size())
        throw DimensionError("tensor data length does not match shape");
    check_finite(data, "tensor creation");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& v : t.data_mut()) v = rng.gaussf(stddev);
    return t;
}

float Tensor::item() const {
    if (numel() != 1) throw UsageError("item() requires a scalar tensor");
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>(*impl_);
    return Tensor(std::move(impl));
}

void Tape::run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    check_grads_finite();
}

void Tape::check_grads_finite() const {
    for (const auto& node : nodes_) {
        for (const auto& impl : node.tracked) {
            for (float g : impl->grad) {
                if (!std::isfinite(g))
                    throw NumericError(std::string("non-finite gradient after backward through ") + node.op);
            }
        }
    }
}

void backward(Tape& tape, Tensor loss) {
    if (loss.numel() != 1) throw UsageError("backward requires a scalar loss");
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0f;
    tape.run_backward();
}

} // namespace avstyle
