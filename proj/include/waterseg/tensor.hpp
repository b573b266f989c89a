#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace waterseg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until a gradient reaches this node
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

// Shared handle to a dense row-major array. Copies alias the same storage,
// use clone() for a deep copy.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;
    explicit BasicTensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t dim(int64_t axis) const;
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    BasicTensor clone() const;
    BasicTensor detach() const;

    TensorNode<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<TensorNode<T>>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Ordered record of differentiable operations executed on this thread.
// backward() replays the entries in reverse execution order.
template <typename T>
class Tape {
public:
    using NodePtr = std::shared_ptr<TensorNode<T>>;

    struct Entry {
        std::vector<NodePtr> inputs;
        NodePtr output;
        std::function<void()> backward;
    };

    static Tape& current();

    void record(std::vector<NodePtr> inputs, NodePtr output, std::function<void()> backward);
    void backward(const BasicTensor<T>& loss);
    void reset();

    std::size_t size() const noexcept { return entries_.size(); }
    bool consumed() const noexcept { return consumed_; }

private:
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

bool grad_enabled();

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
void backward(const BasicTensor<T>& loss) {
    Tape<T>::current().backward(loss);
}

template <typename T>
void reset_tape() {
    Tape<T>::current().reset();
}

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

} // namespace waterseg
