#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "boxmask/autograd.hpp"

namespace boxmask {

/// Owns named parameters with stable addresses, in registration order.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor value);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Parameter& at(const std::string& name);

    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::size_t numel() const;
    /// Element count of parameters whose name starts with `prefix`.
    std::size_t numel(const std::string& prefix) const;
    void zero_grad();

private:
    std::vector<std::unique_ptr<Parameter>> items_;
};

/// U(-a, a) with a = sqrt(6 / fan_in), drawn from a stream derived from
/// (seed, name) so each tensor's initial value is independent of which
/// other parameters exist.
Tensor uniform_init(std::vector<int> shape, int fan_in, std::uint64_t seed, const std::string& name);

} // namespace boxmask
