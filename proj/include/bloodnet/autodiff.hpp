#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "bloodnet/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a node in a dynamically built graph. Operations create
// new nodes that remember their parents and a closure that pushes the node's
// gradient back to them. Nodes whose parents do not require gradients are
// created detached, so frozen sub-graphs cost nothing in backward().
namespace bloodnet::ad {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
};

template <typename T>
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    static Var leaf(Tensor<T> value, bool requires_grad) {
        auto node = std::make_shared<Node<T>>();
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        return Var(std::move(node));
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    void clear_grad() { node_->grad = Tensor<T>(); }

    Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

  private:
    std::shared_ptr<Node<T>> node_;
};

enum class Padding { same, valid };

// While a guard is alive on this thread, new op results are created detached
// even when their inputs require gradients.
class NoGradGuard {
  public:
    NoGradGuard() noexcept;
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled() noexcept;

// Runs reverse-mode accumulation from a scalar root. Every node reachable from
// the root that requires gradients ends up with a grad of its own shape;
// previously stored grads on those nodes are discarded first.
template <typename T>
void backward(const Var<T>& root);

// Elementwise.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> affine(const Var<T>& x, T scale, T shift);  // scale * x + shift
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
// log(max(x, floor)); the gradient is zero wherever the floor is active.
template <typename T> Var<T> log_clamped(const Var<T>& x, T floor);

// Adds bias[c] to every element of channel c, where channel is axis 1 of x.
template <typename T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias);

// Cross-correlation. x is [N,C,H,W] or [C,H,W]; kernel is [O,C,kH,kW].
// Same padding needs odd kernel extents.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, Padding padding);

// Non-overlapping window max over [N,C,H,W]; H and W must be divisible by `window`.
template <typename T> Var<T> max_pool2d(const Var<T>& x, std::size_t window);
template <typename T> Var<T> nearest_upsample2d(const Var<T>& x, std::size_t factor);
template <typename T> Var<T> global_avg_pool(const Var<T>& x);  // [N,C,H,W] -> [N,C]

// x [N,F], weight [O,F], bias [O] -> [N,O].
template <typename T> Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T> Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

template <typename T> Var<T> reduce_sum(const Var<T>& x);   // -> scalar
template <typename T> Var<T> reduce_mean(const Var<T>& x);  // -> scalar
// Sums every axis except the leading one: [N,...] -> [N,1].
template <typename T> Var<T> sum_per_sample(const Var<T>& x);

}  // namespace bloodnet::ad
