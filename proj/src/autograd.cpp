#include "boxmask/autograd.hpp"

#include <algorithm>

namespace boxmask {

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)), grad(value.shape()), velocity(value.shape()) {}

void Parameter::zero_grad() { grad.fill(0.0); }

Tensor& Node::grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) {
        grad = Tensor(value.shape());
    }
    return grad;
}

Var Graph::constant(Tensor value) {
    auto node = std::make_unique<Node>();
    node->value = std::move(value);
    nodes_.push_back(std::move(node));
    return nodes_.back().get();
}

Var Graph::parameter(Parameter& p) {
    auto node = std::make_unique<Node>();
    node->value = p.value;
    node->requires_grad = grad_enabled_;
    node->param = &p;
    nodes_.push_back(std::move(node));
    return nodes_.back().get();
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs,
                  std::function<void(const Tensor&)> backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs,
                  std::function<void(const Tensor&)> backward) {
    auto node = std::make_unique<Node>();
    node->value = std::move(value);
    node->requires_grad =
        grad_enabled_ && std::any_of(inputs.begin(), inputs.end(), [](Var v) { return v->requires_grad; });
    if (node->requires_grad) {
        node->backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return nodes_.back().get();
}

void Graph::backward(Var loss) {
    if (!loss->requires_grad) {
        return;
    }
    loss->grad_buffer().fill(1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& node = **it;
        if (!node.requires_grad || node.grad.empty()) {
            continue;
        }
        if (node.param != nullptr) {
            node.param->grad += node.grad;
        } else if (node.backward) {
            node.backward(node.grad);
        }
    }
}

} // namespace boxmask
