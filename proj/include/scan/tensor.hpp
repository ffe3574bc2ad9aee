#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "scan/errors.hpp"

namespace scan {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// One entry of the gradient tape. Interior nodes carry a backward closure that
/// reads `grad` and accumulates into the parents; leaves only accumulate.
template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::span<T> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        return Tensor(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        if (numel_of(shape) != values.size()) {
            throw ShapeError("tensor shape " + scan::to_string(shape) + " holds " +
                             std::to_string(numel_of(shape)) + " elements, got " +
                             std::to_string(values.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    /// Direct write access for parameter updates and data loading. Must not be
    /// used on tensors that participate in a live tape.
    std::span<T> mutable_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + scan::to_string(shape()));
        return node_->data[0];
    }

    T operator[](std::size_t i) const { return node_->data[i]; }

    /// Same values, no tape history.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

    /// Reverse-mode sweep from this scalar. Each interior node is visited once,
    /// in reverse topological order; the tape is released afterwards.
    void backward() const;

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    /// Builds a result node. History is recorded only when grad mode is on and
    /// at least one parent requires a gradient.
    static Tensor make_result(Shape shape, std::vector<T> values,
                              std::initializer_list<const Tensor*> parents,
                              std::function<void(Node<T>&)> backward_fn) {
        Tensor out(std::move(shape), std::move(values), false);
        if (!grad_enabled()) return out;
        bool any = false;
        for (const Tensor* p : parents) {
            if (p && p->defined() && p->node_->requires_grad) any = true;
        }
        if (!any) return out;
        out.node_->requires_grad = true;
        for (const Tensor* p : parents) {
            if (p && p->defined()) out.node_->parents.push_back(p->node_);
        }
        out.node_->backward_fn = std::move(backward_fn);
        return out;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
void Tensor<T>::backward() const {
    if (!defined() || numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (defined() ? scan::to_string(shape()) : std::string("<undefined>")));
    }
    if (node_->consumed) throw TapeConsumedError("tape already consumed; run the forward pass again");
    if (!node_->requires_grad) throw ContractError("loss does not depend on any tensor requiring grad");

    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->consumed) throw TapeConsumedError("graph contains a node whose tape was already consumed");
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            n->consumed = true;
        }
    }
    node_->consumed = true;
}

/// Named view over a trainable tensor (weights) or a non-trainable buffer
/// (batchnorm running statistics).
template <class T>
struct NamedTensor {
    std::string name;
    Tensor<T>* tensor;
};

}  // namespace scan
