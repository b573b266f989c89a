#include "waterseg/tensor.hpp"

#include <sstream>

#include "waterseg/errors.hpp"

namespace waterseg {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    auto node = std::make_shared<TensorNode<T>>();
    const int64_t n = shape_numel(shape);
    node->shape = std::move(shape);
    node->data.assign(static_cast<std::size_t>(n), value);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

template <typename T>
int64_t BasicTensor<T>::dim(int64_t axis) const {
    const int64_t n = ndim();
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool value) {
    node_->requires_grad = value;
    if (!value) node_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
    auto node = std::make_shared<TensorNode<T>>(*node_);
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from_data(shape(), node_->data, false);
}

template <typename T>
Tape<T>& Tape<T>::current() {
    thread_local Tape<T> tape;
    return tape;
}

template <typename T>
void Tape<T>::record(std::vector<NodePtr> inputs, NodePtr output, std::function<void()> backward) {
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
    if (consumed_) throw StateError("backward called twice without resetting the tape");
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) throw StateError("loss is not connected to the tape");

    TensorNode<T>* root = loss.node();
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        for (const auto& in : it->inputs) {
            if (in->requires_grad) in->ensure_grad();
        }
        it->backward();
    }
    consumed_ = true;
}

template <typename T>
void Tape<T>::reset() {
    entries_.clear();
    consumed_ = false;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;

} // namespace waterseg
