#pragma once

#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace saat::ad {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// One vertex of the define-by-run graph. Non-leaf nodes own their parents,
/// never their children, so the graph cannot form a reference cycle.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<NodePtr<T>> parents;
    /// Reads `self.grad` and accumulates into the parents' gradients.
    std::function<void(Node&)> backward;
    const char* op = "leaf";
    bool requires_grad = false;

    Tensor<T>& grad_slot() {
        if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
        return grad;
    }
};

namespace detail {

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct FaultState {
    std::mutex mu;
    std::string op;
    bool env_read = false;
};

inline FaultState& fault_state() {
    static FaultState s;
    return s;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};

namespace testing {

/// Test hook: the named op's backward rule receives a negated upstream
/// gradient. Also settable through the SAAT_FAULT_OP environment variable.
inline void set_fault_op(std::string op) {
    auto& s = detail::fault_state();
    std::lock_guard lock(s.mu);
    s.op = std::move(op);
    s.env_read = true;
}

inline std::string fault_op() {
    auto& s = detail::fault_state();
    std::lock_guard lock(s.mu);
    if (!s.env_read) {
        if (const char* e = std::getenv("SAAT_FAULT_OP")) s.op = e;
        s.env_read = true;
    }
    return s.op;
}

}  // namespace testing

/// Handle to a graph node. Copies share the node.
template <typename T>
class Var {
   public:
    Var() = default;
    explicit Var(NodePtr<T> n) : node_(std::move(n)) {}

    /// Leaf holding `value`; parameters pass requires_grad = true.
    static Var leaf(Tensor<T> value, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad_slot() { return node_->grad_slot(); }
    void zero_grad() { node_->grad = Tensor<T>(); }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    std::size_t rank() const { return node_->value.rank(); }
    std::size_t numel() const { return node_->value.numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }
    const NodePtr<T>& node() const { return node_; }

   private:
    NodePtr<T> node_;
};

/// Creates the output node of an op. Parents and the backward rule are kept
/// only when recording is enabled and some input needs a gradient.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    if (grad_enabled()) {
        bool any = false;
        for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (auto& in : inputs) n->parents.push_back(in.node());
            n->backward = std::move(backward);
        }
    }
    return Var<T>(std::move(n));
}

/// Gradient slot of parent `i`, or nullptr when that parent needs none.
template <typename T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = self.parents.at(i);
    if (!p || !p->requires_grad) return nullptr;
    return &p->grad_slot();
}

template <typename T>
const Tensor<T>& parent_value(const Node<T>& self, std::size_t i) {
    return self.parents.at(i)->value;
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate, so
/// callers zero them between steps.
template <typename T>
void backward(const Var<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractViolation("backward() requires a scalar loss, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    const std::string fault = testing::fault_op();
    loss.node()->grad_slot().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->backward || n->grad.empty()) continue;
        if (!fault.empty() && fault == n->op) {
            for (auto& g : n->grad.data()) g = -g;
        }
        n->backward(*n);
        // Intermediate gradients are not needed once propagated.
        n->grad = Tensor<T>();
    }
}

/// Ordered, uniquely named collection of learnable leaves.
template <typename T>
class ParamStore {
   public:
    struct Entry {
        std::string name;
        Var<T> var;
    };

    Var<T> add(const std::string& name, Tensor<T> init) {
        if (index_.contains(name)) throw InvalidConfig("duplicate parameter name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.push_back({name, Var<T>::leaf(std::move(init), true)});
        return entries_.back().var;
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    bool contains(const std::string& name) const { return index_.contains(name); }

    Var<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw InvalidConfig("unknown parameter '" + name + "'");
        return entries_[it->second].var;
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.var.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.var.zero_grad();
    }

   private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace saat::ad
