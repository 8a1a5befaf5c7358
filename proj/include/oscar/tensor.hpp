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

#include "oscar/error.hpp"
#include "oscar/rng.hpp"

namespace oscar {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

template <class Real>
struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward;

    std::vector<Real>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), Real(0));
        return grad;
    }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for the guard's lifetime (inference, frozen sub-graphs).
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

/// Dense row-major tensor with shared ownership of its tape node. Copies alias
/// the same storage, like a framework tensor handle.
template <class Real>
class BasicTensor {
   public:
    using value_type = Real;
    using NodeT = detail::Node<Real>;

    BasicTensor() = default;

    static BasicTensor zeros(Shape shape) {
        auto n = numel_of(shape);
        return from_vector(std::move(shape), std::vector<Real>(n, Real(0)));
    }

    static BasicTensor full(Shape shape, Real v) {
        auto n = numel_of(shape);
        return from_vector(std::move(shape), std::vector<Real>(n, v));
    }

    static BasicTensor scalar(Real v) { return from_vector({}, {v}); }

    static BasicTensor from_vector(Shape shape, std::vector<Real> values) {
        if (numel_of(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<NodeT>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        return BasicTensor(std::move(node));
    }

    static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        std::vector<Real> v(numel_of(shape));
        for (auto& x : v) x = static_cast<Real>(rng.normal() * stddev);
        return from_vector(std::move(shape), std::move(v));
    }

    static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        std::vector<Real> v(numel_of(shape));
        for (auto& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
        return from_vector(std::move(shape), std::move(v));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    /// 0 for an undefined tensor, so emptiness checks need no defined() guard.
    std::size_t numel() const { return node_ ? node_->value.size() : 0; }

    std::span<const Real> data() const& { return node_->value; }
    std::span<const Real> data() const&& = delete;  // would dangle
    /// Mutable access; only for initialization and in-place optimizer updates.
    std::span<Real> mutable_data() & { return node_->value; }
    std::span<Real> mutable_data() && = delete;
    std::vector<Real> to_vector() const { return node_->value; }

    Real item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }
    Real operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    BasicTensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    /// Accumulated gradient; all zeros when nothing has flowed here yet.
    BasicTensor grad() const {
        if (node_->grad.empty()) return zeros(shape());
        return from_vector(shape(), node_->grad);
    }
    std::span<const Real> grad_data() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    /// Fresh leaf sharing no storage or history.
    BasicTensor clone() const { return from_vector(shape(), node_->value); }
    /// Leaf view of the same values with the history cut (stop-gradient).
    BasicTensor detach() const { return clone(); }

    const char* op() const { return node_->op; }
    NodeT* node() const { return node_.get(); }
    const std::shared_ptr<NodeT>& node_ptr() const { return node_; }
    bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

    explicit BasicTensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<NodeT> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

/// Creates an op result. History is recorded only when grad mode is on and at
/// least one input requires a gradient.
template <class Real>
BasicTensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                              std::vector<BasicTensor<Real>> inputs,
                              std::function<void(Node<Real>&)> backward) {
    auto out = BasicTensor<Real>::from_vector(std::move(shape), std::move(value));
    if (!grad_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const auto& t) { return t.requires_grad(); });
    if (!any) return out;
    auto* node = out.node();
    node->op = op;
    node->leaf = false;
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
    return out;
}

/// Gradient buffer of input i, or nullptr when that input is not differentiated.
template <class Real>
Real* input_grad(Node<Real>& node, std::size_t i) {
    auto& in = *node.inputs[i];
    if (!in.requires_grad) return nullptr;
    return in.grad_buffer().data();
}

}  // namespace detail

/// The recorded operations reachable from a loss, topologically ordered so
/// that every input precedes its consumer.
template <class Real>
class Graph {
   public:
    using NodeT = detail::Node<Real>;

    static Graph trace(const BasicTensor<Real>& root) {
        Graph g;
        g.root_ = root.node_ptr();
        std::unordered_set<NodeT*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<NodeT*, std::size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                NodeT* child = node->inputs[next++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                g.order_.push_back(node);
                stack.pop_back();
            }
        }
        return g;
    }

    const std::vector<NodeT*>& nodes() const { return order_; }

    bool topologically_ordered() const {
        std::unordered_set<const NodeT*> placed;
        for (const NodeT* n : order_) {
            for (const auto& in : n->inputs)
                if (in->requires_grad && !placed.count(in.get())) return false;
            placed.insert(n);
        }
        return true;
    }

    /// Runs the backward sweep and frees the tape of intermediate nodes.
    void backward() {
        if (root_->value.size() != 1) {
            throw ShapeError("gradients: loss must be a scalar, got shape " + shape_str(root_->shape));
        }
        if (!root_->requires_grad) return;
        root_->grad_buffer()[0] += Real(1);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            NodeT* n = *it;
            if (n->backward && !n->grad.empty()) n->backward(*n);
        }
        for (NodeT* n : order_) {
            if (n->leaf) continue;
            n->inputs.clear();
            n->backward = nullptr;
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }

   private:
    std::shared_ptr<NodeT> root_;
    std::vector<NodeT*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
template <class Real>
void backward(const BasicTensor<Real>& loss) {
    Graph<Real>::trace(loss).backward();
}

/// Gradients of a scalar loss with respect to the given parameters. Existing
/// accumulated gradients of those parameters are cleared first.
template <class Real>
std::vector<BasicTensor<Real>> gradients(const BasicTensor<Real>& loss,
                                         std::vector<BasicTensor<Real>> params) {
    for (auto& p : params) p.zero_grad();
    backward(loss);
    std::vector<BasicTensor<Real>> out;
    out.reserve(params.size());
    for (auto& p : params) out.push_back(p.grad());
    return out;
}

/// A trainable tensor with a stable name (checkpoint key, error messages).
template <class Real>
struct NamedParam {
    std::string name;
    BasicTensor<Real> tensor;
};

template <class Real>
using ParamList = std::vector<NamedParam<Real>>;

template <class Real>
std::vector<BasicTensor<Real>> tensors_of(const ParamList<Real>& params) {
    std::vector<BasicTensor<Real>> out;
    out.reserve(params.size());
    for (auto& p : params) out.push_back(p.tensor);
    return out;
}

template <class Real>
void zero_grads(ParamList<Real>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace oscar
