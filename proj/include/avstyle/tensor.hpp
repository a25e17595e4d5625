#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "avstyle/errors.hpp"
#include "avstyle/rng.hpp"

namespace avstyle {

struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad; // empty until a backward pass (or zero_grad) touches it
    bool requires_grad = false;

    int numel() const { return static_cast<int>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

/// Dense float32 tensor with an attached gradient slot. Value-semantic handle
/// over shared storage: copies alias, clone() deep-copies.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int numel() const { return impl_->numel(); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }

    std::span<const float> data() const { return impl_->data; }
    std::span<float> data_mut() { return impl_->data; }
    float item() const;
    float at(int flat) const { return impl_->data[static_cast<size_t>(flat)]; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::span<const float> grad() const { return impl_->grad; }
    std::span<float> grad_mut() { return impl_->grad; }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0f); }
    void clear_grad() { impl_->grad.clear(); }

    Tensor clone() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of executed differentiable operations. Rebuilt per forward
/// pass; execution order is the topological order, so reverse iteration is a
/// valid backward schedule that visits every node exactly once.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(const char* op, std::vector<std::shared_ptr<TensorImpl>> tracked, BackwardFn fn) {
        nodes_.push_back(Node{op, std::move(tracked), std::move(fn)});
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Runs every node's backward exactly once, newest first, then verifies all
    // touched gradients are finite.
    void run_backward();
    void check_grads_finite() const;

private:
    struct Node {
        const char* op;
        std::vector<std::shared_ptr<TensorImpl>> tracked;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
};

/// Seeds d(loss)/d(loss) = 1 and runs the tape backward. Gradients accumulate
/// additively into every requires_grad tensor reachable from the loss.
void backward(Tape& tape, Tensor loss);

void check_finite(std::span<const float> values, const char* what);

} // namespace avstyle
