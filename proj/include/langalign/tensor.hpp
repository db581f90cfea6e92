#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace langalign {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

template <typename T>
struct TensorNode;

template <typename T>
using BackwardFn = std::function<void(TensorNode<T>&)>;

// Graph node. Leaves (parameters, inputs) have no parents and no backward fn.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool differentiable = true;
    std::string op = "leaf";
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    BackwardFn<T> backward;

    bool is_leaf() const { return parents.empty(); }
    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
    }
};

// Shared handle to a graph node. Copies alias the same storage; use clone()
// for an independent leaf.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return node().shape.size(); }
    std::size_t numel() const { return node().data.size(); }

    std::span<const T> data() const { return node().data; }
    std::span<T> mutable_data() { return node().data; }
    T item() const;

    // Empty span when no gradient has been accumulated yet.
    std::span<const T> grad() const { return node().grad; }
    std::span<T> mutable_grad();
    bool has_grad() const { return !node().grad.empty(); }
    void zero_grad();

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool value) { node().requires_grad = value; }
    const std::string& op_name() const { return node().op; }

    Tensor clone(bool requires_grad) const;
    void copy_from(const Tensor& other);

    TensorNode<T>& node() const;
    const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Scoped switch that stops ops from recording backward closures on this thread.
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

// Builds an op result. The backward closure and parents are only kept when
// grad mode is on and at least one parent requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      std::vector<Tensor<T>> parents, BackwardFn<T> backward);

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Intermediate gradients are reset at the start of each call.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
void zero_grads(std::span<Tensor<T>> params);

class GraphError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
bool all_finite(std::span<const T> values);

}  // namespace langalign
