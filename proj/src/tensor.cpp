#include "langalign/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace langalign {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            out << 'x';
        }
        out << shape[i];
    }
    out << ']';
    return out.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("tensor shape " + shape_to_string(shape) + " does not match " +
                                    std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return filled(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape shape, T value, bool requires_grad) {
    std::vector<T> data(shape_numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
TensorNode<T>& Tensor<T>::node() const {
    if (!node_) {
        throw std::logic_error("use of undefined tensor");
    }
    return *node_;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    const auto& s = node().shape;
    if (axis >= s.size()) {
        throw std::out_of_range("tensor axis out of range");
    }
    return s[axis];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw std::invalid_argument("item() on tensor with shape " + shape_to_string(shape()));
    }
    return node().data[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
    node().ensure_grad();
    return node().grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    auto& g = node().grad;
    std::fill(g.begin(), g.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
    return Tensor(node().shape, node().data, requires_grad);
}

template <typename T>
void Tensor<T>::copy_from(const Tensor& other) {
    if (other.shape() != shape()) {
        throw std::invalid_argument("copy_from shape mismatch: " + shape_to_string(other.shape()) +
                                    " vs " + shape_to_string(shape()));
    }
    node().data = other.node().data;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      std::vector<Tensor<T>> parents, BackwardFn<T> backward) {
    Tensor<T> out(std::move(shape), std::move(data), false);
    auto& node = out.node();
    node.op = std::move(op);
    if (!g_grad_enabled) {
        return out;
    }
    bool any = false;
    for (const auto& p : parents) {
        any = any || p.requires_grad();
    }
    if (!any) {
        return out;
    }
    node.requires_grad = true;
    node.differentiable = static_cast<bool>(backward);
    node.backward = std::move(backward);
    node.parents.reserve(parents.size());
    for (const auto& p : parents) {
        node.parents.push_back(p.node_ptr());
    }
    return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw GraphError("backward requires a scalar loss, got shape " +
                         shape_to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw GraphError("backward on a tensor that does not require grad");
    }

    // Iterative post-order DFS; reversed order is a valid topological order.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
    stack.emplace_back(&loss.node(), 0);
    visited.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (auto* node : order) {
        if (!node->is_leaf()) {
            if (!node->differentiable) {
                throw GraphError("graph contains non-differentiable op '" + node->op + "'");
            }
            node->grad.assign(node->data.size(), T(0));
        }
    }
    loss.node().ensure_grad();
    if (loss.node().is_leaf()) {
        loss.node().grad[0] += T(1);
    } else {
        loss.node().grad[0] = T(1);
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* node = *it;
        if (node->is_leaf()) {
            continue;
        }
        for (auto& parent : node->parents) {
            if (parent->requires_grad) {
                parent->ensure_grad();
            }
        }
        node->backward(*node);
    }
}

template <typename T>
void zero_grads(std::span<Tensor<T>> params) {
    for (auto& p : params) {
        p.zero_grad();
    }
}

template <typename T>
bool all_finite(std::span<const T> values) {
    for (T v : values) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, std::string,
                                   std::vector<Tensor<float>>, BackwardFn<float>);
template Tensor<double> make_result(Shape, std::vector<double>, std::string,
                                    std::vector<Tensor<double>>, BackwardFn<double>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template void zero_grads(std::span<Tensor<float>>);
template void zero_grads(std::span<Tensor<double>>);
template bool all_finite(std::span<const float>);
template bool all_finite(std::span<const double>);

}  // namespace langalign
