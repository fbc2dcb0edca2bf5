#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mudaf {

// Extents of a tensor. Rank 0 is not used: scalars have shape {1}.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

// Reference-counted handle to a node of the dynamic gradient tape.
//
// Values are 64-bit floats held contiguously in row-major order. A tensor is
// immutable once created, apart from its gradient buffer and the explicit
// mutable accessor used by optimizers on leaf parameters.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    // Row count of a rank-2 tensor; 1 for rank-1.
    std::size_t rows() const;
    // Extent of the last axis.
    std::size_t cols() const;

    std::span<const double> data() const;
    // Leaf-only write access for parameter updates.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t i) const { return data()[i]; }
    double at(std::size_t row, std::size_t col) const { return data()[row * cols() + col]; }

    bool requires_grad() const;
    bool is_leaf() const;
    bool has_grad() const;
    // Empty until a backward pass reaches this tensor.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // Validity check for the "all values finite" invariant.
    bool all_finite() const;

    // Reverse-mode pass from a scalar root. Leaf gradients accumulate across
    // calls; intermediate gradients are recomputed on each call. The tape is
    // released afterwards unless retain_graph is set.
    void backward(bool retain_graph = false) const;

    // Copy of the values with no tape history.
    Tensor detach() const;
    std::vector<double> to_vector() const;
    std::string_view op_name() const;

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;

    friend Tensor record_op(std::string_view, Shape, std::vector<double>, const std::vector<Tensor>&,
                            std::function<void(std::span<const double>, std::span<const std::span<double>>)>);
};

// Local backward rule of a primitive: receives d(root)/d(output) and the
// gradient buffers of its inputs (an empty span for inputs that do not
// require gradients) and accumulates into them.
using BackwardRule = std::function<void(std::span<const double> out_grad, std::span<const std::span<double>> in_grads)>;

// Creates the output of a primitive and, when any input requires gradients
// and grad mode is on, records it on the tape. Every op in ops.hpp is built on
// this; tests use it to register deliberately broken primitives.
Tensor record_op(std::string_view name, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 BackwardRule backward);

bool grad_mode_enabled() noexcept;

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

}  // namespace mudaf
