#include "mudaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "mudaf/errors.hpp"

namespace mudaf {

namespace detail {

struct Node {
    std::string op = "leaf";
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool released = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardRule backward;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t extent : shape) {
        require(extent > 0, ErrorKind::dimension, "tensor extents must be positive, got " + shape_string(shape));
    }
    require(!shape.empty(), ErrorKind::dimension, "tensor shape must have at least one axis");
    require(shape_numel(shape) == data.size(), ErrorKind::dimension,
            "shape " + shape_string(shape) + " does not match " + std::to_string(data.size()) + " values");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t extent : shape) n *= extent;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    require(defined(), ErrorKind::usage, "use of an undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
    const Shape& s = shape();
    return s.size() >= 2 ? shape_numel(Shape(s.begin(), s.end() - 1)) : 1;
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<const double> Tensor::data() const {
    require(defined(), ErrorKind::usage, "use of an undefined tensor");
    return node_->value;
}

std::span<double> Tensor::mutable_data() {
    require(defined() && node_->leaf, ErrorKind::usage, "only leaf tensors may be mutated");
    return node_->value;
}

double Tensor::item() const {
    require(numel() == 1, ErrorKind::usage, "item() on a tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

bool Tensor::is_leaf() const { return defined() && node_->leaf; }

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    require(defined(), ErrorKind::usage, "use of an undefined tensor");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    require(defined(), ErrorKind::usage, "use of an undefined tensor");
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (defined() && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
    return std::all_of(data().begin(), data().end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::detach() const { return from_data(shape(), node_->value, false); }

std::vector<double> Tensor::to_vector() const { return {data().begin(), data().end()}; }

std::string_view Tensor::op_name() const { return node_ ? std::string_view(node_->op) : std::string_view("undefined"); }

void Tensor::backward(bool retain_graph) const {
    require(defined(), ErrorKind::usage, "backward on an undefined tensor");
    require(node_->value.size() == 1, ErrorKind::usage,
            "backward requires a scalar root, got shape " + shape_string(node_->shape));
    require(node_->requires_grad, ErrorKind::usage, "backward root is not on the tape");

    // Iterative post-order DFS yields a topological order (parents first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (detail::Node* node : order) {
        require(!node->released, ErrorKind::usage,
                "backward through a released tape (op '" + node->op + "'); pass retain_graph to reuse it");
        if (!node->leaf || node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    }
    node_->grad[0] += 1.0;

    std::vector<std::span<double>> in_grads;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->leaf || !node->backward) continue;
        in_grads.clear();
        for (const auto& parent : node->parents) {
            in_grads.emplace_back(parent->requires_grad ? std::span<double>(parent->grad) : std::span<double>());
        }
        node->backward(node->grad, in_grads);
    }

    if (!retain_graph) {
        for (detail::Node* node : order) {
            if (node->leaf) continue;
            node->parents.clear();
            node->backward = nullptr;
            node->released = true;
        }
    }
}

Tensor record_op(std::string_view name, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 BackwardRule backward) {
    auto node = make_leaf(std::move(shape), std::move(value), false);
    node->op = std::string(name);
    node->leaf = false;
    if (g_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (const Tensor& t : inputs) node->parents.push_back(t.node_);
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

bool grad_mode_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace mudaf
