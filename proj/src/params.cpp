#include "boxmask/params.hpp"

#include <cmath>

#include "boxmask/error.hpp"
#include "boxmask/rng.hpp"

namespace boxmask {

Parameter& ParameterStore::add(std::string name, Tensor value) {
    if (find(name) != nullptr) {
        throw InvalidArgument("duplicate parameter name " + name);
    }
    items_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value)));
    return *items_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
    for (auto& p : items_) {
        if (p->name == name) {
            return p.get();
        }
    }
    return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
    for (const auto& p : items_) {
        if (p->name == name) {
            return p.get();
        }
    }
    return nullptr;
}

Parameter& ParameterStore::at(const std::string& name) {
    Parameter* p = find(name);
    if (p == nullptr) {
        throw InvalidArgument("unknown parameter " + name);
    }
    return *p;
}

std::vector<Parameter*> ParameterStore::all() {
    std::vector<Parameter*> out;
    for (auto& p : items_) {
        out.push_back(p.get());
    }
    return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
    std::vector<const Parameter*> out;
    for (const auto& p : items_) {
        out.push_back(p.get());
    }
    return out;
}

std::size_t ParameterStore::numel() const { return numel(""); }

std::size_t ParameterStore::numel(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& p : items_) {
        if (p->name.compare(0, prefix.size(), prefix) == 0) {
            n += p->value.size();
        }
    }
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : items_) {
        p->zero_grad();
    }
}

Tensor uniform_init(std::vector<int> shape, int fan_in, std::uint64_t seed, const std::string& name) {
    Tensor t(std::move(shape));
    Rng rng(seed, name);
    const double a = std::sqrt(6.0 / std::max(fan_in, 1));
    for (double& v : t.values()) {
        v = rng.uniform(-a, a);
    }
    return t;
}

} // namespace boxmask
