#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "c2fdft/tensor.hpp"

namespace c2fdft {

// Reverse-mode autodiff on dense tensors. Ops build a DAG of shared nodes;
// backward() topologically sorts from the loss and accumulates gradients.
// With grad mode off (or no input requiring grad) ops record nothing, so
// inference chains keep no history.

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape());
        return grad;
    }
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_mode_enabled() { return detail::grad_mode_flag(); }

template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> v, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(v);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    int64_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
    void zero_grad() {
        if (node_ && !node_->grad.empty()) node_->grad.fill(T(0));
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

    // Runs reverse accumulation from this (scalar) node.
    void backward() const {
        require(defined() && numel() == 1, "backward() requires a defined scalar");
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->grad_buffer().fill(T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        }
    }

    // Factory used by every op: wires parents/backward only when the tape is
    // live and some input needs gradients.
    static Var make(Tensor<T> value, std::vector<Var> inputs,
                    std::function<void(Node<T>&)> backward_fn) {
        Var out(std::move(value), false);
        bool need = false;
        if (grad_mode_enabled()) {
            for (const auto& v : inputs)
                if (v.requires_grad()) { need = true; break; }
        }
        if (need) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(inputs.size());
            for (auto& v : inputs) out.node_->parents.push_back(v.node());
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

private:
    std::shared_ptr<Node<T>> node_;
};

using VarF = Var<float>;
using VarD = Var<double>;

// Accumulate src into dst.grad (allocating on demand).
template <typename T>
inline void accumulate_grad(Node<T>& dst, const Tensor<T>& src) {
    if (!dst.requires_grad) return;
    dst.grad_buffer() += src;
}

}  // namespace c2fdft
