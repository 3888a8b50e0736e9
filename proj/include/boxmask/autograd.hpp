#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "boxmask/tensor.hpp"

namespace boxmask {

/// A learnable array with its accumulated gradient and optimizer state.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor velocity;

    Parameter(std::string n, Tensor v);
    void zero_grad();
};

/// A value recorded on a Graph. Gradients are allocated on first use.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(const Tensor&)> backward;

    /// Gradient buffer, zero-initialized on first access.
    Tensor& grad_buffer();
    bool has_grad() const { return !grad.empty() || value.empty(); }
};

using Var = Node*;

/// Reverse-mode tape. Nodes live as long as the graph; backward visits
/// them in reverse creation order, which is a valid topological order.
class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var constant(Tensor value);
    Var parameter(Parameter& p);

    /// Records an op output. `backward` receives d(loss)/d(output) and must
    /// accumulate into the inputs' grad buffers; it is dropped when no input
    /// requires a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs,
               std::function<void(const Tensor&)> backward);
    Var record(Tensor value, const std::vector<Var>& inputs,
               std::function<void(const Tensor&)> backward);

    /// Seeds d(loss)/d(loss) = 1 and accumulates into Parameter::grad.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

private:
    bool grad_enabled_;
    std::vector<std::unique_ptr<Node>> nodes_;
};

} // namespace boxmask
